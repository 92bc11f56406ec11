#include "charflow/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "charflow/errors.hpp"

namespace charflow {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  for (;;) {
    const std::size_t at = s.find(sep, start);
    parts.push_back(trim(s.substr(start, at == std::string_view::npos ? std::string_view::npos : at - start)));
    if (at == std::string_view::npos) break;
    start = at + 1;
  }
  return parts;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double to_double(std::string_view text) {
  double v = 0.0;
  const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (text.empty() || ec != std::errc() || end != text.data() + text.size())
    throw ParseError("expected a number, got '" + std::string(text) + "'");
  return v;
}

std::uint64_t to_u64(std::string_view text) {
  std::uint64_t v = 0;
  const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (text.empty() || ec != std::errc() || end != text.data() + text.size())
    throw ParseError("expected a non-negative integer, got '" + std::string(text) + "'");
  return v;
}

bool to_bool(std::string_view text) {
  if (text == "true") return true;
  if (text == "false") return false;
  throw ParseError("expected true or false, got '" + std::string(text) + "'");
}

Vec to_vec(std::string_view text) {
  Vec out;
  if (text.empty()) return out;
  for (std::string_view part : split(text, ',')) out.push_back(to_double(part));
  return out;
}

std::vector<std::size_t> to_sizes(std::string_view text) {
  std::vector<std::size_t> out;
  if (text.empty()) return out;
  for (std::string_view part : split(text, ',')) out.push_back(to_u64(part));
  return out;
}

std::vector<Vec> to_rows(std::string_view text) {
  std::vector<Vec> rows;
  if (text.empty()) return rows;
  for (std::string_view row : split(text, ';')) rows.push_back(to_vec(row));
  return rows;
}

std::string vec_str(const Vec& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt(v[i]);
  return s;
}

std::string sizes_str(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::string rows_str(const std::vector<Vec>& rows) {
  std::string s;
  for (std::size_t i = 0; i < rows.size(); ++i) s += (i ? "; " : "") + vec_str(rows[i]);
  return s;
}

struct ConfigField {
  std::string section;
  std::string key;
  std::function<void(RunConfig&, std::string_view)> read;
  std::function<std::string(const RunConfig&)> write;
};

#define CF_FIELD(SEC, KEY, MEMBER, PARSE, PRINT)                                                  \
  ConfigField {                                                                                          \
    #SEC, #KEY, [](RunConfig& c, std::string_view v) { c.MEMBER = PARSE(v); },                   \
        [](const RunConfig& c) { return PRINT(c.MEMBER); }                                        \
  }

std::string str_of(std::string_view v) { return std::string(v); }
std::string u64_str(std::uint64_t v) { return std::to_string(v); }
std::string bool_str(bool v) { return v ? "true" : "false"; }
template <class E>
std::string name_of(E e) {
  return std::string(to_string(e));
}
std::string features_str(const TimeFeatures& f) { return f.str(); }

const std::vector<ConfigField>& fields() {
  static const std::vector<ConfigField> table = {
      CF_FIELD(run, seed, run.seed, to_u64, u64_str),
      CF_FIELD(run, out, run.out, str_of, str_of),
      CF_FIELD(target, kind, target.kind, parse_target_kind, name_of),
      CF_FIELD(target, atoms, target.atoms, to_rows, rows_str),
      CF_FIELD(target, weights, target.weights, to_vec, vec_str),
      CF_FIELD(target, sigma, target.sigma, to_double, fmt),
      CF_FIELD(target, frame, target.frame, to_rows, rows_str),
      CF_FIELD(target, ambient_dim, target.ambient_dim, to_u64, u64_str),
      CF_FIELD(target, swiss_noise, target.swiss_noise, to_double, fmt),
      CF_FIELD(target, n_data, target.n_data, to_u64, u64_str),
      CF_FIELD(target, n_holdout, target.n_holdout, to_u64, u64_str),
      CF_FIELD(schedule, kind, schedule.kind, parse_schedule_kind, name_of),
      CF_FIELD(schedule, stop_time, schedule.stop_time, to_double, fmt),
      CF_FIELD(velocity, loss, velocity.loss, parse_loss_kind, name_of),
      CF_FIELD(velocity, hidden, velocity.hidden, to_sizes, sizes_str),
      CF_FIELD(velocity, activation, velocity.activation, parse_activation, name_of),
      CF_FIELD(velocity, time_features, velocity.time_features, TimeFeatures::parse, features_str),
      CF_FIELD(velocity, iterations, velocity.iterations, to_u64, u64_str),
      CF_FIELD(velocity, batch_size, velocity.batch_size, to_u64, u64_str),
      CF_FIELD(velocity, lr, velocity.lr, to_double, fmt),
      CF_FIELD(velocity, clip_grad_norm, velocity.clip_grad_norm, to_double, fmt),
      CF_FIELD(trajectories, sampler, trajectories.sampler, parse_sampler_kind, name_of),
      CF_FIELD(trajectories, steps, trajectories.steps, to_u64, u64_str),
      CF_FIELD(trajectories, particles, trajectories.particles, to_u64, u64_str),
      CF_FIELD(cg, mode, cg.mode, parse_cg_mode, name_of),
      CF_FIELD(cg, parameterization, cg.parameterization, parse_parameterization, name_of),
      CF_FIELD(cg, lambda_local, cg.lambda_local, to_double, fmt),
      CF_FIELD(cg, lambda_semigroup, cg.lambda_semigroup, to_double, fmt),
      CF_FIELD(cg, ema_rate, cg.ema_rate, to_double, fmt),
      CF_FIELD(cg, iterations, cg.iterations, to_u64, u64_str),
      CF_FIELD(cg, batch_size, cg.batch_size, to_u64, u64_str),
      CF_FIELD(cg, pairs_per_particle, cg.pairs_per_particle, to_u64, u64_str),
      CF_FIELD(cg, full_pairs, cg.full_pairs, to_bool, bool_str),
      CF_FIELD(cg, teacher_steps, cg.teacher_steps, to_u64, u64_str),
      CF_FIELD(cg, hidden, cg.hidden, to_sizes, sizes_str),
      CF_FIELD(cg, activation, cg.activation, parse_activation, name_of),
      CF_FIELD(cg, time_features, cg.time_features, TimeFeatures::parse, features_str),
      CF_FIELD(cg, lr, cg.lr, to_double, fmt),
      CF_FIELD(cg, clip_grad_norm, cg.clip_grad_norm, to_double, fmt),
      CF_FIELD(sample, particles, sample.particles, to_u64, u64_str),
      CF_FIELD(sample, pieces, sample.pieces, to_sizes, sizes_str),
      CF_FIELD(sample, euler_steps, sample.euler_steps, to_u64, u64_str),
      CF_FIELD(sample, count_nfe, sample.count_nfe, to_bool, bool_str),
      CF_FIELD(eval, exact, eval.exact, to_bool, bool_str),
      CF_FIELD(eval, projections, eval.projections, to_u64, u64_str),
  };
  return table;
}

#undef CF_FIELD

PointSet rows_to_points(const std::vector<Vec>& rows, const char* what) {
  PointSet points;
  for (const Vec& r : rows) {
    if (!points.empty() && r.size() != points.dim())
      throw ParseError(std::string("target.") + what + ": rows differ in length");
    points.push_back(r);
  }
  return points;
}

void validate_config(const RunConfig& c) {
  const auto fail = [](const std::string& key, const std::string& why) {
    throw ParseError("config key '" + key + "': " + why);
  };
  try {
    validate(c.target_spec());
  } catch (const ParseError&) {
    throw;
  } catch (const std::exception& e) {
    fail("target", e.what());
  }
  if (c.target.n_data == 0) fail("target.n_data", "must be positive");
  if (!(c.schedule.stop_time > 0.5 && c.schedule.stop_time < 1.0)) fail("schedule.stop_time", "must lie in (0.5, 1)");
  if (c.trajectories.steps == 0) fail("trajectories.steps", "must be positive");
  if (c.trajectories.particles == 0) fail("trajectories.particles", "must be positive");
  if (c.sample.pieces.empty()) fail("sample.pieces", "needs at least one entry");
  for (std::size_t p : c.sample.pieces)
    if (p == 0) fail("sample.pieces", "entries must be positive");
  if (c.sample.euler_steps == 0) fail("sample.euler_steps", "must be positive");
  if (c.eval.projections == 0) fail("eval.projections", "must be positive");
  if (c.cg.lambda_local < 0.0) fail("cg.lambda_local", "must be >= 0");
  if (c.cg.lambda_semigroup < 0.0) fail("cg.lambda_semigroup", "must be >= 0");
  try {
    c.velocity_config().validate();
  } catch (const std::exception& e) {
    fail("velocity", e.what());
  }
  try {
    c.cg_config().validate();
  } catch (const std::exception& e) {
    fail("cg", e.what());
  }
}

}  // namespace

TargetSpec RunConfig::target_spec() const {
  switch (target.kind) {
    case TargetKind::SwissRoll:
      return make_swiss_roll(target.swiss_noise);
    case TargetKind::AtomicMixture:
    case TargetKind::EmbeddedMixture: {
      if (target.atoms.empty()) throw ParseError("config key 'target.atoms': required for mixture targets");
      PointSet atoms = rows_to_points(target.atoms, "atoms");
      Vec weights = target.weights;
      if (weights.empty()) weights.assign(atoms.size(), 1.0 / static_cast<double>(atoms.size()));
      TargetSpec spec = make_mixture(std::move(atoms), std::move(weights), target.sigma);
      if (target.kind == TargetKind::AtomicMixture) return spec;
      const std::size_t k = spec.atoms.dim();
      Frame frame;
      if (target.frame.empty()) {
        if (target.ambient_dim < k) throw ParseError("config key 'target.ambient_dim': smaller than the atom dimension");
        frame = Frame::axes(target.ambient_dim, k);
      } else {
        const PointSet rows = rows_to_points(target.frame, "frame");
        if (rows.dim() != k) throw ParseError("config key 'target.frame': needs one column per atom coordinate");
        frame = Frame(rows.size(), k, Vec(rows.data().begin(), rows.data().end()));
      }
      return embed_target(spec, frame);
    }
  }
  throw ParseError("config key 'target.kind': unknown kind");
}

TrainConfig RunConfig::velocity_config() const {
  TrainConfig t;
  t.schedule = schedule.kind;
  t.stop_time = schedule.stop_time;
  t.batch_size = velocity.batch_size;
  t.iterations = velocity.iterations;
  t.lr = velocity.lr;
  t.hidden_dims = velocity.hidden;
  t.activation = velocity.activation;
  t.time_features = velocity.time_features;
  t.seed = derive_seed(run.seed, 20);
  t.loss = velocity.loss;
  t.clip_grad_norm = velocity.clip_grad_norm;
  return t;
}

CgTrainConfig RunConfig::cg_config() const {
  CgTrainConfig t;
  t.mode = cg.mode;
  t.schedule = schedule.kind;
  t.parameterization = cg.parameterization;
  t.lambda_local = cg.lambda_local;
  t.lambda_semigroup = cg.lambda_semigroup;
  t.ema_rate = cg.ema_rate;
  t.iterations = cg.iterations;
  t.batch_size = cg.batch_size;
  t.pairs_per_particle = cg.pairs_per_particle;
  t.full_pairs = cg.full_pairs;
  t.teacher_steps = cg.teacher_steps;
  t.stop_time = schedule.stop_time;
  t.hidden_dims = cg.hidden;
  t.activation = cg.activation;
  t.time_features = cg.time_features;
  t.lr = cg.lr;
  t.clip_grad_norm = cg.clip_grad_norm;
  t.seed = derive_seed(run.seed, 30);
  return t;
}

RunConfig parse_config(std::string_view text) {
  std::map<std::string, const ConfigField*> known;
  std::set<std::string> sections;
  for (const ConfigField& f : fields()) {
    known[f.section + "." + f.key] = &f;
    sections.insert(f.section);
  }

  RunConfig config;
  std::set<std::string> seen;
  std::string section;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  std::string raw;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string_view line = trim(raw);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    const std::string where = "line " + std::to_string(line_no) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw ParseError(where + "unterminated section header");
      section = std::string(trim(line.substr(1, line.size() - 2)));
      if (!sections.count(section)) throw ParseError(where + "unknown section '" + section + "'");
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string_view::npos) throw ParseError(where + "expected key = value");
    if (section.empty()) throw ParseError(where + "key outside of a section");
    const std::string key = section + "." + std::string(trim(line.substr(0, eq)));
    const auto it = known.find(key);
    if (it == known.end()) throw ParseError(where + "unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ParseError(where + "duplicate key '" + key + "'");
    try {
      it->second->read(config, trim(line.substr(eq + 1)));
    } catch (const std::exception& e) {
      throw ParseError(where + "config key '" + key + "': " + e.what());
    }
  }
  if (!seen.count("schedule.stop_time"))
    config.schedule.stop_time =
        config.target.kind == TargetKind::SwissRoll ? 0.99 : default_stop_time(config.schedule.kind);
  validate_config(config);
  return config;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open config '" + path + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_config(buffer.str());
}

std::string serialize(const RunConfig& config) {
  std::string out;
  std::string section;
  for (const ConfigField& f : fields()) {
    if (f.section != section) {
      out += (section.empty() ? "[" : "\n[") + f.section + "]\n";
      section = f.section;
    }
    out += f.key + " = " + f.write(config) + "\n";
  }
  return out;
}

}  // namespace charflow
