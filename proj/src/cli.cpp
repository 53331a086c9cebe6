#include "gift/cli.hpp"

#include <chrono>
#include <fstream>
#include <iostream>
#include <map>

#include <Eigen/Core>

#include "gift/checkpoint.hpp"
#include "gift/format.hpp"
#include "gift/sampler.hpp"

namespace gift::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
  ExperimentConfig config;
  std::string hash;
  RunManifest manifest;
  fs::path out;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  void input(const std::string& role, const std::string& label, const fs::path& path) {
    manifest.inputs.push_back({role, label, path.string(), file_digest(path)});
  }
  fs::path output(const std::string& role, const std::string& relative) {
    pending.emplace_back(role, relative);
    return out / relative;
  }
  RunManifest finish() {
    for (const auto& [role, rel] : pending) {
      const fs::path p = out / rel;
      if (!fs::exists(p)) throw IoError("expected output missing: " + p.string());
      manifest.outputs.push_back({role, rel, p.string(), file_digest(p)});
    }
    manifest.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::ofstream f(out / "manifest.json");
    f << to_json(manifest).dump(2) << '\n';
    if (!f) throw IoError("cannot write manifest in " + out.string());
    return manifest;
  }

  std::vector<std::pair<std::string, std::string>> pending;
};

Run begin(std::string_view command, const CommandOptions& o) {
  if (o.threads < 1) throw ValidationError("--threads must be >= 1");
  Run r;
  if (o.inline_config) {
    r.config = parse_config(o.inline_config->dump(), o.seed, "manifest config");
  } else {
    if (!o.config) throw ValidationError("--config is required");
    r.config = load_config(*o.config, o.seed);
  }
  // Eigen only parallelizes large products and results do not depend on the count.
  Eigen::setNbThreads(o.threads);
  r.hash = config_hash(r.config);
  r.out = o.out_dir;
  std::error_code ec;
  fs::create_directories(r.out, ec);
  if (ec) throw IoError("cannot create output directory " + r.out.string() + ": " + ec.message());
  r.manifest.command = std::string(command);
  r.manifest.config_hash = r.hash;
  r.manifest.config = to_json(r.config);
  r.manifest.threads = o.threads;
  if (o.config && !o.inline_config) r.input("config", "config", *o.config);
  std::ofstream snap(r.out / "config.json");
  snap << r.manifest.config.dump(2) << '\n';
  if (!snap) throw IoError("cannot write config snapshot in " + r.out.string());
  r.output("config_snapshot", "config.json");
  return r;
}

ConceptDataset need_dataset(Run& r, const CommandOptions& o) {
  if (!o.dataset) throw ValidationError("--dataset is required");
  r.input("dataset", "dataset", *o.dataset);
  return load_dataset(*o.dataset);
}

std::pair<std::string, fs::path> split_label(const std::string& arg) {
  const auto eq = arg.find('=');
  if (eq == std::string::npos) return {fs::path(arg).stem().string(), fs::path(arg)};
  if (eq == 0 || eq + 1 == arg.size()) throw ValidationError("bad --checkpoint '" + arg + "' (expected label=path)");
  return {arg.substr(0, eq), fs::path(arg.substr(eq + 1))};
}

struct LoadedCheckpoint {
  std::string label;
  fs::path path;
  Params params;
  CheckpointInfo info;
};

LoadedCheckpoint need_checkpoint(Run& r, const CommandOptions& o) {
  if (o.checkpoints.empty()) throw ValidationError("--checkpoint is required");
  if (o.checkpoints.size() > 1) throw ValidationError("this command takes exactly one --checkpoint");
  auto [label, path] = split_label(o.checkpoints.front());
  LoadedCheckpoint c{label, path, {}, {}};
  c.params = load_checkpoint(path, &c.info);
  r.input("checkpoint", label, path);
  return c;
}

int table_rows_for(const ConceptDataset& d) {
  int rows = 0;
  for (const auto& c : d.concepts()) rows = std::max(rows, c.id + 1);
  return rows;
}

void check_table(const Params& p, const ConceptDataset& d) {
  if (p.table_rows() < table_rows_for(d))
    throw ValidationError("checkpoint has " + std::to_string(p.table_rows()) + " concept rows; dataset needs " +
                          std::to_string(table_rows_for(d)));
}

std::string iteration_name(int it) {
  std::string s = std::to_string(it);
  return "checkpoints/iter_" + std::string(s.size() < 6 ? 6 - s.size() : 0, '0') + s + ".ckpt";
}

ConceptDataset heldout_dataset(const ConceptDataset& d, const EvalSettings& e) {
  const auto& cs = d.concepts();
  return make_concept_set(std::span<const Concept>(cs.data(), cs.size()), {e.heldout, e.heldout, e.heldout},
                          d.seed() + e.heldout_seed_offset);
}

Split eval_split(const Concept& c) { return c.role == Role::malicious ? Split::D_A : Split::D_S; }

Predictor remapped(const Params& params, int token) {
  return [&params, token](const Eigen::Matrix2Xd& xt, std::span<const int> ids, std::span<const int> t) {
    const std::vector<int> mapped(ids.size(), token);
    return Eigen::Matrix2Xd(forward(params, xt, mapped, t));
  };
}

void write_lines(const fs::path& path, const std::string& header, const std::vector<std::string>& rows) {
  std::ofstream f(path);
  f << header << '\n';
  for (const auto& r : rows) f << r << '\n';
  if (!f) throw IoError("cannot write " + path.string());
}

}  // namespace

nlohmann::json to_json(const RunManifest& m) {
  auto list = [](const std::vector<Artifact>& v) {
    json a = json::array();
    for (const auto& x : v) a.push_back({{"role", x.role}, {"label", x.label}, {"path", x.path}, {"digest", x.digest}});
    return a;
  };
  return {{"schema_version", m.schema_version}, {"command", m.command},          {"config_hash", m.config_hash},
          {"config", m.config},                 {"inputs", list(m.inputs)},      {"outputs", list(m.outputs)},
          {"wall_time", m.wall_time},           {"threads", m.threads}};
}

RunManifest manifest_from_json(const nlohmann::json& j) {
  try {
    RunManifest m;
    m.schema_version = j.at("schema_version").get<int>();
    if (m.schema_version != kManifestSchemaVersion)
      throw IoError("unsupported manifest schema version " + std::to_string(m.schema_version));
    m.command = j.at("command").get<std::string>();
    m.config_hash = j.at("config_hash").get<std::string>();
    m.config = j.at("config");
    auto list = [](const json& a) {
      std::vector<Artifact> v;
      for (const auto& x : a)
        v.push_back({x.at("role").get<std::string>(), x.at("label").get<std::string>(), x.at("path").get<std::string>(),
                     x.at("digest").get<std::string>()});
      return v;
    };
    m.inputs = list(j.at("inputs"));
    m.outputs = list(j.at("outputs"));
    m.wall_time = j.at("wall_time").get<double>();
    m.threads = j.value("threads", 1);
    return m;
  } catch (const json::exception& e) {
    throw IoError(std::string("manifest: malformed: ") + e.what());
  }
}

RunManifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read manifest " + path.string());
  try {
    return manifest_from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw IoError("manifest " + path.string() + ": " + e.what());
  }
}

RunManifest cmd_make_data(const CommandOptions& o) {
  Run r = begin("make-data", o);
  if (r.config.concepts.empty()) throw ValidationError("config field /data/concepts: missing required field");
  const auto& cs = r.config.concepts;
  const ConceptDataset d = make_concept_set(std::span<const Concept>(cs.data(), cs.size()), r.config.counts, r.config.seed);
  save_dataset(d, r.output("dataset", "dataset.json"));
  return r.finish();
}

RunManifest cmd_pretrain(const CommandOptions& o) {
  Run r = begin("pretrain", o);
  const ConceptDataset d = need_dataset(r, o);
  Params init;
  if (o.checkpoints.empty()) {
    init = init_denoiser(r.config.arch, table_rows_for(d), r.config.seed);
  } else {
    init = need_checkpoint(r, o).params;
    check_table(init, d);
  }
  std::vector<double> losses;
  const Params trained = pretrain(init, d, r.config.make_schedule(), r.config.pretrain, &losses);
  save_checkpoint(trained, r.output("checkpoint", "pretrained.ckpt"), {r.hash, {}});
  std::vector<std::string> rows;
  for (std::size_t i = 0; i < losses.size(); ++i) rows.push_back(std::to_string(i) + "," + format_double(losses[i]));
  write_lines(r.output("metrics", "pretrain_loss.csv"), "step,loss", rows);
  return r.finish();
}

RunManifest cmd_immunize(const CommandOptions& o) {
  Run r = begin("immunize", o);
  const ConceptDataset d = need_dataset(r, o);
  const LoadedCheckpoint in = need_checkpoint(r, o);
  check_table(in.params, d);
  const Schedule s = r.config.make_schedule();
  const CheckpointInfo info{r.hash, in.info.tokens};
  auto persist = [&](const ImmunizationRun& run) {
    write_history_csv(run, r.output("metrics", "history.csv"));
    if (!run.checkpoints.empty()) fs::create_directories(r.out / "checkpoints");
    for (const auto& [it, p] : run.checkpoints) save_checkpoint(p, r.output("checkpoint", iteration_name(it)), info);
  };
  try {
    auto [theta_i, run] = r.config.naive ? immunize_naive(in.params, d, s, r.config.immunize)
                                         : immunize(in.params, d, s, r.config.immunize);
    persist(run);
    save_checkpoint(theta_i, r.output("checkpoint", "immunized.ckpt"), info);
  } catch (const ImmunizationAborted& e) {
    // Keep what was produced before the failure.
    persist(e.partial);
    save_checkpoint(e.last_good, r.out / "last_good.ckpt", info);
    throw;
  }
  return r.finish();
}

RunManifest cmd_attack(const CommandOptions& o) {
  Run r = begin("attack", o);
  const ConceptDataset d = need_dataset(r, o);
  const LoadedCheckpoint in = need_checkpoint(r, o);
  check_table(in.params, d);
  const Schedule s = r.config.make_schedule();
  const AttackConfig& a = r.config.attack;
  if (!d.has_concept(a.target_concept))
    throw ValidationError("attack target concept " + std::to_string(a.target_concept) + " not in dataset");

  MetricHook hook;
  std::optional<ProbeClassifier> probe;
  ConceptDataset held = heldout_dataset(d, r.config.eval);
  if (r.config.attack_trace_metrics) {
    try {
      probe = train_probe(d, derive_seed(r.config.seed, {0xe0}), r.config.eval.probe);
    } catch (const ValidationError&) {
      probe.reset();
    }
    const Concept& target = d.concept_by_id(a.target_concept);
    const Eigen::Matrix2Xd target_points = stack_points(split_view(held, eval_split(target), target.id));
    hook = [&, target_points](const Params& model, int token, int step) {
      HookMetrics m;
      const Eigen::Matrix2Xd gen = p_sample_loop(model, token, r.config.eval.samples, s,
                                                 derive_seed(r.config.seed, {0xe4, static_cast<std::uint64_t>(step)}));
      if (probe) m.probe_acc = probe_accuracy(*probe, gen, a.target_concept);
      m.mmd = mmd_biased(gen, target_points, median_bandwidth(gen, target_points));
      double total = 0.0;
      int n = 0;
      for (int id : held.concept_ids(Role::safe)) {
        total += heldout_denoise_loss(model, held, Split::D_S, id, s, derive_seed(r.config.seed, {0xe5}));
        ++n;
      }
      if (n > 0) m.safe_loss = total / n;
      return m;
    };
  }

  CheckpointInfo info{r.hash, in.info.tokens};
  AttackTrace trace;
  switch (a.method) {
    case AttackMethod::full_finetune: {
      const AttackResult res = attack_full(in.params, d, s, a, hook);
      info.tokens[a.target_concept] = res.token;
      save_checkpoint(res.params, r.output("checkpoint", "attacked.ckpt"), info);
      trace = res.trace;
      break;
    }
    case AttackMethod::lowrank_adapter: {
      const LowRankResult res = attack_lowrank(in.params, d, s, a, hook);
      info.tokens[a.target_concept] = res.token;
      std::ofstream f(r.output("adapter", "adapter.json"));
      f << adapter_to_json(res.adapter).dump() << '\n';
      if (!f) throw IoError("cannot write adapter");
      save_checkpoint(res.merged(), r.output("checkpoint", "attacked.ckpt"), info);
      trace = res.trace;
      break;
    }
    case AttackMethod::benign_pi: {
      const AttackResult res = finetune_benign(in.params, d, s, a, hook);
      info.tokens[a.target_concept] = res.token;
      save_checkpoint(res.params, r.output("checkpoint", "attacked.ckpt"), info);
      trace = res.trace;
      break;
    }
  }
  write_trace_csv(trace, r.output("metrics", "trace.csv"));
  return r.finish();
}

RunManifest cmd_eval(const CommandOptions& o) {
  Run r = begin("eval", o);
  const ConceptDataset d = need_dataset(r, o);
  if (o.checkpoints.empty()) throw ValidationError("eval needs at least one --checkpoint");
  const Schedule s = r.config.make_schedule();
  const EvalSettings& e = r.config.eval;
  const ConceptDataset held = heldout_dataset(d, e);

  MetricsReport report;
  std::optional<ProbeClassifier> probe;
  try {
    probe = train_probe(d, derive_seed(r.config.seed, {0xe0}), e.probe);
    report.probe_status = "ok (held-out accuracy " + format_double(probe->heldout_accuracy) + ")";
  } catch (const ValidationError& err) {
    report.probe_status = std::string("absent: ") + err.what();
  }

  for (const auto& arg : o.checkpoints) {
    auto [label, path] = split_label(arg);
    CheckpointInfo info;
    const Params p = load_checkpoint(path, &info);
    check_table(p, d);
    r.input("checkpoint", label, path);
    report.provenance.push_back({label, path.string(), file_digest(path), info.provenance});
    for (const auto& c : d.concepts()) {
      const auto id = static_cast<std::uint64_t>(c.id);
      const auto mapped = info.tokens.find(c.id);
      const int token = mapped == info.tokens.end() ? c.id : mapped->second;
      if (token < 0 || token >= p.table_rows())
        throw ValidationError(label + ": token " + std::to_string(token) + " for concept " + std::to_string(c.id) +
                              " is not in the checkpoint");
      const Split split = eval_split(c);
      const Eigen::Matrix2Xd held_points = stack_points(split_view(held, split, c.id));
      const Eigen::Matrix2Xd gen = p_sample_loop(p, token, e.samples, s, derive_seed(r.config.seed, {0xe2, id}));

      MetricsRow row;
      row.state = label;
      row.concept_id = c.id;
      row.concept_name = c.name;
      row.role = std::string(to_string(c.role));
      row.heldout_denoise_loss =
          heldout_denoise_loss(remapped(p, token), held, split, c.id, s, derive_seed(r.config.seed, {0xe1, id}));
      if (probe) row.probe_accuracy = probe_accuracy(*probe, gen, c.id);
      row.bandwidth = median_bandwidth(gen, held_points);
      row.mmd = mmd_biased(gen, held_points, row.bandwidth);
      if (held_points.cols() >= 10 * e.mi_bins)
        row.mi_proxy = mi_proxy(p, held_points, token, s, e.mi_bins, e.mi_layer, e.mi_t);
      report.rows.push_back(std::move(row));
    }
  }
  emit_report(report, r.out);
  r.output("report", "report.json");
  r.output("metrics", "metrics.csv");
  return r.finish();
}

RunManifest cmd_analyze(const CommandOptions& o) {
  Run r = begin("analyze", o);
  const AnalysisSettings& a = r.config.analysis;
  const auto fmt = [](double v) { return format_double(v); };
  json summary = {{"mode", a.mode == AnalysisMode::model ? "model" : "quadratic_probe"}};

  BilevelProblem problem;
  Eigen::VectorXd theta;
  std::vector<std::string> failed;
  if (a.mode == AnalysisMode::quadratic_probe) {
    problem = quadratic_problem(a.quadratic_size, a.quadratic_psi, r.config.seed);
    Rng rng(derive_seed(r.config.seed, {0xa0}));
    theta = standard_normal(a.quadratic_size, 1, rng);
  } else {
    const ConceptDataset d = need_dataset(r, o);
    Params params;
    if (o.checkpoints.empty()) {
      params = init_denoiser(r.config.arch, table_rows_for(d), r.config.seed);
    } else {
      params = need_checkpoint(r, o).params;
      check_table(params, d);
    }
    const Schedule s = r.config.make_schedule();
    Rng rng(derive_seed(r.config.seed, {0xa1}));
    const Batch safe = sample_batch(split_view(d, Split::D_S), a.batch_size, rng);
    const Batch malicious = sample_batch(split_view(d, Split::D_M), a.batch_size, rng);

    std::vector<Eigen::Index> coords;
    if (params.size() > a.max_coords) {
      Rng pick(derive_seed(r.config.seed, {0xa2}));
      for (int i = 0; i < a.max_coords; ++i) coords.push_back(uniform_int(pick, 0, static_cast<int>(params.size())));
    }
    std::vector<std::string> rows;
    json checks = json::array();
    for (LossKind kind : kAllLosses) {
      const Batch& batch = kind == LossKind::prior ? safe : malicious;
      const Draws draws = draw_randomness(params, batch, kind, s, rng, r.config.immunize.noise);
      Objective obj = loss_objective(kind, params, batch, s, draws, a.beta, r.config.immunize.noise);
      if (a.corrupt_gradient == kind) {
        auto g = obj.gradient;
        obj.gradient = [g](const Eigen::VectorXd& x) {
          Eigen::VectorXd v = g(x);
          v *= 1.01;
          v.array() += 1e-3;
          return v;
        };
      }
      const GradCheckReport rep = grad_check(obj, params.theta, a.h, a.tol, coords, std::string(to_string(kind)));
      if (!rep.passed) failed.push_back(rep.name);
      rows.push_back(rep.name + "," + fmt(rep.max_rel_error) + "," + std::to_string(rep.worst_index) + "," +
                     std::to_string(rep.checked) + "," + fmt(rep.h) + "," + fmt(rep.tol) + "," +
                     (rep.passed ? "pass" : "fail"));
      checks.push_back({{"loss", rep.name}, {"max_rel_error", rep.max_rel_error}, {"passed", rep.passed}});
    }
    write_lines(r.output("metrics", "gradcheck.csv"), "loss,max_rel_error,worst_index,checked,h,tol,status", rows);
    summary["grad_checks"] = checks;
    problem = model_bilevel(params, safe, malicious, s, a.beta, rng, r.config.immunize.noise);
    theta = params.theta;
  }

  const TaylorProbe probe = taylor_scaling(problem, theta, a.alpha_p_grid, a.alpha_i, a.taylor);
  write_taylor_csv(probe, r.output("metrics", "taylor.csv"));
  summary["taylor_status"] = std::string(to_string(probe.status));
  summary["fitted_slope"] = probe.fitted_slope ? json(*probe.fitted_slope) : json(nullptr);
  summary["alpha_i"] = probe.alpha_i;
  summary["failed_gradient_checks"] = failed;
  std::ofstream f(r.output("report", "analysis.json"));
  f << summary.dump(2) << '\n';
  if (!f) throw IoError("cannot write analysis.json");
  f.close();

  if (!failed.empty()) {
    std::string names;
    for (const auto& n : failed) names += (names.empty() ? "" : ", ") + n;
    throw GradientCheckFailed("gradient check failed for loss: " + names);
  }
  return r.finish();
}

RunManifest run_command(std::string_view command, const CommandOptions& options) {
  if (command == "make-data") return cmd_make_data(options);
  if (command == "pretrain") return cmd_pretrain(options);
  if (command == "immunize") return cmd_immunize(options);
  if (command == "attack") return cmd_attack(options);
  if (command == "eval") return cmd_eval(options);
  if (command == "analyze") return cmd_analyze(options);
  throw ValidationError("unknown command '" + std::string(command) + "'");
}

ReplayResult cmd_replay(const fs::path& manifest_path, const fs::path& out_dir) {
  const RunManifest m = read_manifest(manifest_path);
  CommandOptions o;
  o.inline_config = m.config;
  o.out_dir = out_dir;
  o.threads = m.threads;
  for (const auto& in : m.inputs) {
    if (!fs::exists(in.path)) throw IoError("replay: input " + in.path + " no longer exists");
    if (file_digest(in.path) != in.digest) throw IoError("replay: input " + in.path + " changed since the run");
    if (in.role == "dataset") o.dataset = in.path;
    if (in.role == "checkpoint") o.checkpoints.push_back(in.label + "=" + in.path);
  }
  ReplayResult res;
  res.rerun = run_command(m.command, o);
  if (res.rerun.config_hash != m.config_hash) throw ValidationError("replay: config hash changed");
  std::map<std::string, std::string> fresh;
  for (const auto& out : res.rerun.outputs) fresh[out.label] = out.digest;
  for (const auto& out : m.outputs) {
    const auto it = fresh.find(out.label);
    if (it == fresh.end() || it->second != out.digest) res.mismatched.push_back(out.label);
  }
  return res;
}

int exit_code_for_current_exception() {
  try {
    throw;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kValidation;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kValidation;
  }
}

}  // namespace gift::cli
