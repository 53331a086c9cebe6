#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "gift/cli.hpp"
#include "gift/format.hpp"

namespace gift::cli {

namespace {

using nlohmann::json;

// Reads the keys of one JSON object, remembering which were consumed so leftovers can be
// reported as unknown.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(path_.empty() ? "/" : path_, "expected an object");
  }

  bool has(const char* key) const { return j_.contains(key); }

  template <typename T>
  T get(const char* key, T fallback) {
    seen_.insert(key);
    if (!j_.contains(key)) return fallback;
    return convert<T>(j_.at(key), field(key));
  }

  template <typename T>
  T required(const char* key) {
    seen_.insert(key);
    if (!j_.contains(key)) fail(field(key), "missing required field");
    return convert<T>(j_.at(key), field(key));
  }

  // Nested object; an absent key reads as an empty object.
  Fields section(const char* key) {
    seen_.insert(key);
    static const json empty = json::object();
    return Fields(j_.contains(key) ? j_.at(key) : empty, field(key));
  }

  const json* raw(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void done() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) fail(path_ + "/" + k, "unknown field");
  }

  std::string field(const char* key) const { return path_ + "/" + key; }

  [[noreturn]] static void fail(const std::string& where, const std::string& what) {
    throw ValidationError("config field " + where + ": " + what);
  }

 private:
  template <typename T>
  static T convert(const json& v, const std::string& where) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) fail(where, "expected true or false");
      return v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::uint64_t>) {
      if (!v.is_number_unsigned()) fail(where, "expected a non-negative integer");
      return v.get<std::uint64_t>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) fail(where, "expected an integer");
      return v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) fail(where, "expected a number");
      return v.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) fail(where, "expected a string");
      return v.get<std::string>();
    } else if constexpr (std::is_same_v<T, std::vector<int>>) {
      if (!v.is_array()) fail(where, "expected an array of integers");
      std::vector<int> out;
      for (const auto& e : v) out.push_back(convert<int>(e, where));
      return out;
    } else {
      static_assert(std::is_same_v<T, std::vector<double>>);
      if (!v.is_array()) fail(where, "expected an array of numbers");
      std::vector<double> out;
      for (const auto& e : v) out.push_back(convert<double>(e, where));
      return out;
    }
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

// Runs a parser for an enum-like string field and rewraps its error with the field path.
template <typename F>
auto parse_enum(Fields& f, const char* key, std::string fallback, F parse) {
  const std::string s = f.get<std::string>(key, std::move(fallback));
  try {
    return parse(s);
  } catch (const ValidationError& e) {
    Fields::fail(f.field(key), e.what());
  }
}

LayerSet parse_layer_set(std::string_view s) {
  if (s == "conditioning") return LayerSet::conditioning;
  if (s == "all") return LayerSet::all;
  throw ValidationError("unknown layer set '" + std::string(s) + "' (expected conditioning or all)");
}
std::string_view layer_set_name(LayerSet l) { return l == LayerSet::all ? "all" : "conditioning"; }

TokenInit::Kind parse_token_init(std::string_view s) {
  if (s == "copy_of") return TokenInit::Kind::copy_of;
  if (s == "random") return TokenInit::Kind::random;
  throw ValidationError("unknown token_init '" + std::string(s) + "' (expected copy_of or random)");
}
std::string_view token_init_name(TokenInit::Kind k) { return k == TokenInit::Kind::random ? "random" : "copy_of"; }

AnalysisMode parse_analysis_mode(std::string_view s) {
  if (s == "model") return AnalysisMode::model;
  if (s == "quadratic_probe") return AnalysisMode::quadratic_probe;
  throw ValidationError("unknown analysis mode '" + std::string(s) + "' (expected model or quadratic_probe)");
}
std::string_view analysis_mode_name(AnalysisMode m) { return m == AnalysisMode::model ? "model" : "quadratic_probe"; }

// Wraps a library validate() so its message names the config section.
template <typename F>
void check_section(const char* section, F validate) {
  try {
    validate();
  } catch (const ValidationError& e) {
    Fields::fail(std::string("/") + section, e.what());
  }
}

Concept parse_concept(const json& j, const std::string& path) {
  Fields f(j, path);
  Concept c;
  c.id = f.required<int>("id");
  c.name = f.get<std::string>("name", "concept" + std::to_string(c.id));
  for (const char* key : {"family", "role"})
    if (!f.has(key)) Fields::fail(f.field(key), "missing required field");
  c.family = parse_enum(f, "family", "", [](std::string_view s) { return parse_family(s); });
  c.role = parse_enum(f, "role", "", [](std::string_view s) { return parse_role(s); });
  c.transform.rotation = f.get<double>("rotation", 0.0);
  c.transform.scale = f.get<double>("scale", 1.0);
  const std::vector<double> offset = f.get<std::vector<double>>("offset", {0.0, 0.0});
  if (offset.size() != 2) Fields::fail(f.field("offset"), "expected 2 numbers");
  c.transform.offset = {offset[0], offset[1]};
  f.done();
  try {
    validate_concept(c);
  } catch (const ValidationError& e) {
    Fields::fail(path, e.what());
  }
  return c;
}

std::string line_column(std::string_view text, std::size_t byte) {
  byte = std::min(byte, text.size());
  const auto line = 1 + std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(byte), '\n');
  const auto last_nl = text.rfind('\n', byte == 0 ? 0 : byte - 1);
  const auto column = last_nl == std::string_view::npos || byte == 0 ? byte : byte - last_nl - 1;
  return std::to_string(line) + ":" + std::to_string(column);
}

}  // namespace

Schedule ExperimentConfig::make_schedule() const {
  return build_schedule(schedule.steps, schedule.beta_start, schedule.beta_end);
}

int ExperimentConfig::table_rows() const {
  int rows = 0;
  for (const auto& c : concepts) rows = std::max(rows, c.id + 1);
  return rows;
}

ExperimentConfig parse_config(std::string_view text, std::optional<std::uint64_t> seed_override,
                              std::string_view source_name) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    const std::size_t byte = e.byte == 0 ? 0 : e.byte - 1;
    std::string what = e.what();
    if (const auto p = what.find(": "); p != std::string::npos) what = what.substr(p + 2);
    throw ValidationError(std::string(source_name) + ":" + line_column(text, byte) + ": syntax error: " + what);
  }

  Fields top(root, "");
  const int version = top.required<int>("schema_version");
  if (version != kConfigSchemaVersion)
    Fields::fail("/schema_version", "unsupported version " + std::to_string(version) + " (expected " +
                                        std::to_string(kConfigSchemaVersion) + ")");

  ExperimentConfig c;
  c.seed = top.get<std::uint64_t>("seed", 0);
  if (seed_override) c.seed = *seed_override;

  {
    Fields f = top.section("schedule");
    c.schedule.steps = f.get<int>("steps", c.schedule.steps);
    c.schedule.beta_start = f.get<double>("beta_start", c.schedule.beta_start);
    c.schedule.beta_end = f.get<double>("beta_end", c.schedule.beta_end);
    f.done();
    check_section("schedule", [&] { c.make_schedule(); });
  }
  {
    Fields f = top.section("data");
    if (const json* list = f.raw("concepts")) {
      if (!list->is_array()) Fields::fail("/data/concepts", "expected an array of concepts");
      for (std::size_t i = 0; i < list->size(); ++i)
        c.concepts.push_back(parse_concept(list->at(i), "/data/concepts/" + std::to_string(i)));
    }
    Fields counts = f.section("counts");
    c.counts.defense = counts.get<int>("defense", c.counts.defense);
    c.counts.attack = counts.get<int>("attack", c.counts.attack);
    c.counts.safe = counts.get<int>("safe", c.counts.safe);
    counts.done();
    f.done();
    if (c.counts.defense < 0 || c.counts.attack < 0 || c.counts.safe < 0)
      Fields::fail("/data/counts", "counts must be non-negative");
    std::set<int> ids;
    for (const auto& k : c.concepts)
      if (!ids.insert(k.id).second) Fields::fail("/data/concepts", "duplicate concept id " + std::to_string(k.id));
  }
  {
    Fields f = top.section("model");
    c.arch.width = f.get<int>("width", c.arch.width);
    c.arch.trunk_blocks = f.get<int>("trunk_blocks", c.arch.trunk_blocks);
    c.arch.cond_blocks = f.get<int>("cond_blocks", c.arch.cond_blocks);
    c.arch.embed_dim = f.get<int>("embed_dim", c.arch.embed_dim);
    c.arch.attn_dim = f.get<int>("attn_dim", c.arch.attn_dim);
    c.arch.time_dim = f.get<int>("time_dim", c.arch.time_dim);
    f.done();
    check_section("model", [&] { validate_arch(c.arch); });
  }
  {
    Fields f = top.section("pretrain");
    auto& p = c.pretrain;
    p.steps = f.get<int>("steps", p.steps);
    p.lr = f.get<double>("lr", p.lr);
    p.batch_size = f.get<int>("batch_size", p.batch_size);
    p.include_malicious = f.get<bool>("include_malicious", p.include_malicious);
    p.excluded_concepts = f.get<std::vector<int>>("excluded_concepts", p.excluded_concepts);
    p.seed = c.seed;
    f.done();
    check_section("pretrain", [&] { validate(p); });
  }
  {
    Fields f = top.section("immunize");
    auto& g = c.immunize;
    g.alpha_inner = f.get<double>("alpha_inner", g.alpha_inner);
    g.alpha_outer = f.get<double>("alpha_outer", g.alpha_outer);
    g.beta = f.get<double>("beta", g.beta);
    g.inner_steps = f.get<int>("inner_steps", g.inner_steps);
    g.outer_steps = f.get<int>("outer_steps", g.outer_steps);
    g.total_iterations = f.get<int>("total_iterations", g.total_iterations);
    g.batch_size = f.get<int>("batch_size", g.batch_size);
    g.checkpoint_every = f.get<int>("checkpoint_every", g.checkpoint_every);
    g.excluded_safe_concepts = f.get<std::vector<int>>("excluded_safe_concepts", g.excluded_safe_concepts);
    c.naive = f.get<bool>("naive", false);
    Fields n = f.section("noise");
    g.noise.layers = parse_enum(n, "layers", "conditioning", parse_layer_set);
    g.noise.per_channel = n.get<bool>("per_channel", g.noise.per_channel);
    g.noise.mean_over_layers = n.get<bool>("mean_over_layers", g.noise.mean_over_layers);
    n.done();
    g.seed = c.seed;
    f.done();
    check_section("immunize", [&] { validate(g); });
  }
  {
    Fields f = top.section("attack");
    auto& a = c.attack;
    a.method = parse_enum(f, "method", "full_finetune", [](std::string_view s) { return parse_attack_method(s); });
    a.steps = f.get<int>("steps", a.steps);
    a.lr = f.get<double>("lr", a.lr);
    a.rank = f.get<int>("rank", a.rank);
    a.adapter_scale = f.get<double>("adapter_scale", a.adapter_scale);
    a.fresh_token = f.get<bool>("fresh_token", a.fresh_token);
    a.token_init = parse_enum(f, "token_init", "copy_of", parse_token_init);
    a.target_concept = f.get<int>("target_concept", a.target_concept);
    a.batch_size = f.get<int>("batch_size", a.batch_size);
    a.trace_every = f.get<int>("trace_every", a.trace_every);
    c.attack_trace_metrics = f.get<bool>("trace_metrics", false);
    a.seed = c.seed;
    f.done();
    check_section("attack", [&] { validate(a); });
  }
  {
    Fields f = top.section("eval");
    auto& e = c.eval;
    e.samples = f.get<int>("samples", e.samples);
    e.heldout = f.get<int>("heldout", e.heldout);
    e.heldout_seed_offset = f.get<std::uint64_t>("heldout_seed_offset", e.heldout_seed_offset);
    e.mi_bins = f.get<int>("mi_bins", e.mi_bins);
    e.mi_layer = f.get<int>("mi_layer", e.mi_layer);
    e.mi_t = f.get<int>("mi_t", e.mi_t);
    Fields p = f.section("probe");
    e.probe.train_per_concept = p.get<int>("train_per_concept", e.probe.train_per_concept);
    e.probe.test_per_concept = p.get<int>("test_per_concept", e.probe.test_per_concept);
    e.probe.hidden = p.get<int>("hidden", e.probe.hidden);
    e.probe.steps = p.get<int>("steps", e.probe.steps);
    e.probe.lr = p.get<double>("lr", e.probe.lr);
    e.probe.accuracy_floor = p.get<double>("accuracy_floor", e.probe.accuracy_floor);
    p.done();
    f.done();
    if (e.samples < 2 || e.heldout < 2) Fields::fail("/eval", "samples and heldout must be >= 2");
    if (e.mi_bins < 2) Fields::fail("/eval/mi_bins", "must be >= 2");
    if (e.mi_t < 0 || e.mi_t >= c.schedule.steps) Fields::fail("/eval/mi_t", "outside the schedule");
    if (e.mi_layer < 0 || e.mi_layer >= c.arch.cond_blocks) Fields::fail("/eval/mi_layer", "no such conditioning block");
  }
  {
    Fields f = top.section("analysis");
    auto& a = c.analysis;
    a.mode = parse_enum(f, "mode", "model", parse_analysis_mode);
    a.h = f.get<double>("h", a.h);
    a.tol = f.get<double>("tol", a.tol);
    a.batch_size = f.get<int>("batch_size", a.batch_size);
    a.beta = f.get<double>("beta", a.beta);
    a.max_coords = f.get<int>("max_coords", a.max_coords);
    a.alpha_i = f.get<double>("alpha_i", a.alpha_i);
    a.alpha_p_grid = f.get<std::vector<double>>("alpha_p_grid", a.alpha_p_grid);
    a.taylor.mode = parse_enum(f, "taylor_mode", "full_theta", [](std::string_view s) { return parse_taylor_mode(s); });
    a.taylor.scheme = parse_enum(f, "fd_scheme", "central", [](std::string_view s) { return parse_fd_scheme(s); });
    a.taylor.fd_scale = f.get<double>("fd_scale", a.taylor.fd_scale);
    a.quadratic_size = f.get<int>("quadratic_size", a.quadratic_size);
    a.quadratic_psi = f.get<int>("quadratic_psi", a.quadratic_psi);
    const std::string corrupt = f.get<std::string>("corrupt_gradient", "");
    if (!corrupt.empty()) {
      try {
        a.corrupt_gradient = parse_loss_kind(corrupt);
      } catch (const ValidationError& e) {
        Fields::fail("/analysis/corrupt_gradient", e.what());
      }
    }
    f.done();
    if (!(a.h > 0.0)) Fields::fail("/analysis/h", "must be positive");
    if (!(a.tol >= 0.0)) Fields::fail("/analysis/tol", "must be >= 0");
    if (a.batch_size < 1 || a.max_coords < 1) Fields::fail("/analysis", "batch_size and max_coords must be positive");
    if (a.quadratic_psi < 1 || a.quadratic_psi >= a.quadratic_size)
      Fields::fail("/analysis/quadratic_psi", "must lie in [1, quadratic_size)");
  }
  top.done();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path, std::optional<std::uint64_t> seed_override) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), seed_override, path.string());
}

nlohmann::json to_json(const ExperimentConfig& c) {
  json concepts = json::array();
  for (const auto& k : c.concepts) {
    concepts.push_back({{"id", k.id},
                        {"name", k.name},
                        {"family", to_string(k.family)},
                        {"role", to_string(k.role)},
                        {"rotation", k.transform.rotation},
                        {"scale", k.transform.scale},
                        {"offset", {k.transform.offset.x(), k.transform.offset.y()}}});
  }
  const auto& g = c.immunize;
  const auto& a = c.attack;
  const auto& e = c.eval;
  const auto& an = c.analysis;
  return {
      {"schema_version", kConfigSchemaVersion},
      {"seed", c.seed},
      {"schedule", {{"steps", c.schedule.steps}, {"beta_start", c.schedule.beta_start}, {"beta_end", c.schedule.beta_end}}},
      {"data",
       {{"concepts", concepts},
        {"counts", {{"defense", c.counts.defense}, {"attack", c.counts.attack}, {"safe", c.counts.safe}}}}},
      {"model", arch_to_json(c.arch)},
      {"pretrain",
       {{"steps", c.pretrain.steps},
        {"lr", c.pretrain.lr},
        {"batch_size", c.pretrain.batch_size},
        {"include_malicious", c.pretrain.include_malicious},
        {"excluded_concepts", c.pretrain.excluded_concepts}}},
      {"immunize",
       {{"alpha_inner", g.alpha_inner},
        {"alpha_outer", g.alpha_outer},
        {"beta", g.beta},
        {"inner_steps", g.inner_steps},
        {"outer_steps", g.outer_steps},
        {"total_iterations", g.total_iterations},
        {"batch_size", g.batch_size},
        {"checkpoint_every", g.checkpoint_every},
        {"excluded_safe_concepts", g.excluded_safe_concepts},
        {"naive", c.naive},
        {"noise",
         {{"layers", layer_set_name(g.noise.layers)},
          {"per_channel", g.noise.per_channel},
          {"mean_over_layers", g.noise.mean_over_layers}}}}},
      {"attack",
       {{"method", to_string(a.method)},
        {"steps", a.steps},
        {"lr", a.lr},
        {"rank", a.rank},
        {"adapter_scale", a.adapter_scale},
        {"fresh_token", a.fresh_token},
        {"token_init", token_init_name(a.token_init)},
        {"target_concept", a.target_concept},
        {"batch_size", a.batch_size},
        {"trace_every", a.trace_every},
        {"trace_metrics", c.attack_trace_metrics}}},
      {"eval",
       {{"samples", e.samples},
        {"heldout", e.heldout},
        {"heldout_seed_offset", e.heldout_seed_offset},
        {"mi_bins", e.mi_bins},
        {"mi_layer", e.mi_layer},
        {"mi_t", e.mi_t},
        {"probe",
         {{"train_per_concept", e.probe.train_per_concept},
          {"test_per_concept", e.probe.test_per_concept},
          {"hidden", e.probe.hidden},
          {"steps", e.probe.steps},
          {"lr", e.probe.lr},
          {"accuracy_floor", e.probe.accuracy_floor}}}}},
      {"analysis",
       {{"mode", analysis_mode_name(an.mode)},
        {"h", an.h},
        {"tol", an.tol},
        {"batch_size", an.batch_size},
        {"beta", an.beta},
        {"max_coords", an.max_coords},
        {"alpha_i", an.alpha_i},
        {"alpha_p_grid", an.alpha_p_grid},
        {"taylor_mode", to_string(an.taylor.mode)},
        {"fd_scheme", to_string(an.taylor.scheme)},
        {"fd_scale", an.taylor.fd_scale},
        {"quadratic_size", an.quadratic_size},
        {"quadratic_psi", an.quadratic_psi},
        {"corrupt_gradient", an.corrupt_gradient ? std::string(to_string(*an.corrupt_gradient)) : std::string()}}},
  };
}

std::string config_hash(const ExperimentConfig& config) { return fnv1a_hex(to_json(config).dump()); }

}  // namespace gift::cli
