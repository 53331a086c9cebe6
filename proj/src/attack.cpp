#include "gift/attack.hpp"

#include <array>
#include <fstream>

#include "gift/format.hpp"

namespace gift {

namespace {
constexpr std::array<std::pair<std::string_view, AttackMethod>, 3> kMethodNames{{
    {"full_finetune", AttackMethod::full_finetune},
    {"lowrank_adapter", AttackMethod::lowrank_adapter},
    {"benign_pi", AttackMethod::benign_pi},
}};
}  // namespace

std::string_view to_string(AttackMethod method) {
  for (const auto& [n, m] : kMethodNames)
    if (m == method) return n;
  return "?";
}

AttackMethod parse_attack_method(std::string_view s) {
  for (const auto& [n, m] : kMethodNames)
    if (n == s) return m;
  throw ValidationError("unknown attack method '" + std::string(s) + "'");
}

void validate(const AttackConfig& c) {
  if (c.steps < 0) throw ValidationError("attack: steps must be >= 0");
  if (!(c.lr > 0.0)) throw ValidationError("attack: lr must be positive");
  if (c.batch_size < 1) throw ValidationError("attack: batch_size must be positive");
  if (c.trace_every < 1) throw ValidationError("attack: trace_every must be positive");
  if (c.method == AttackMethod::lowrank_adapter && c.rank < 1) throw ValidationError("attack: rank must be >= 1");
  if (c.method == AttackMethod::lowrank_adapter && !(c.adapter_scale > 0.0))
    throw ValidationError("attack: adapter_scale must be positive");
}

void write_trace_csv(const AttackTrace& trace, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "step,denoise_loss_DA,probe_acc,mmd,safe_loss\n";
  for (const auto& r : trace.rows) {
    out << r.step << ',' << format_double(r.denoise_loss) << ',' << format_optional(r.metrics.probe_acc, "NA") << ','
        << format_optional(r.metrics.mmd, "NA") << ',' << format_optional(r.metrics.safe_loss, "NA") << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

namespace {

struct Setup {
  Params params;
  int token = 0;
  std::vector<Sample> pool;  // relabeled to `token`
};

Setup prepare(const Params& params, const ConceptDataset& dataset, const AttackConfig& config, Split split) {
  validate(config);
  if (!dataset.has_concept(config.target_concept))
    throw ValidationError("attack: unknown target concept " + std::to_string(config.target_concept));
  Setup s;
  s.pool = split_view(dataset, split, config.target_concept);
  if (s.pool.empty())
    throw ValidationError("attack: no " + std::string(to_string(split)) + " samples for concept " +
                          std::to_string(config.target_concept));
  if (config.target_concept >= params.table_rows())
    throw ValidationError("attack: model has no token for concept " + std::to_string(config.target_concept));
  s.token = config.target_concept;
  s.params = params;
  if (config.fresh_token) {
    TokenInit init;
    init.kind = config.token_init;
    init.source = config.target_concept;
    init.seed = derive_seed(config.seed, {0x70});
    std::tie(s.params, s.token) = add_concept_token(params, init);
  }
  for (auto& sample : s.pool) sample.concept_id = s.token;
  return s;
}

// Runs `steps` updates; `model()` yields the current generating model for snapshots.
template <typename ModelFn, typename StepFn>
AttackTrace run(const AttackConfig& config, const Setup& s, const Schedule& schedule, const MetricHook& hook,
                ModelFn&& model, StepFn&& step) {
  AttackTrace trace;
  const Batch eval_batch = make_batch(s.pool);
  const std::uint64_t eval_seed = derive_seed(config.seed, {0xda});
  auto snapshot = [&](int k) {
    const Params m = model();
    TraceRow row;
    row.step = k;
    row.denoise_loss = monte_carlo_denoise_loss(model_predictor(m), eval_batch, schedule, eval_seed);
    if (hook) row.metrics = hook(m, s.token, k);
    trace.rows.push_back(row);
  };
  Rng rng(config.seed);
  snapshot(0);
  for (int k = 1; k <= config.steps; ++k) {
    const Batch b = sample_batch(s.pool, config.batch_size, rng);
    step(b, rng);
    if (k % config.trace_every == 0 || k == config.steps) snapshot(k);
  }
  return trace;
}

Eigen::VectorXd denoise_gradient(const Params& p, const Batch& b, const Schedule& schedule, Rng& rng) {
  const Draws d = draw_randomness(p, b, LossKind::prior, schedule, rng);
  Evaluation ev = evaluate_loss(p, LossKind::prior, b, d, schedule, 0.0, {}, true);
  if (!ev.grad.allFinite()) throw NumericalError("attack: non-finite gradient");
  return std::move(ev.grad);
}

AttackResult finetune_all(const Params& params, const ConceptDataset& dataset, const Schedule& schedule,
                          const AttackConfig& config, const MetricHook& hook, Split split) {
  Setup s = prepare(params, dataset, config, split);
  Params p = s.params;
  AttackTrace trace = run(
      config, s, schedule, hook, [&] { return p; },
      [&](const Batch& b, Rng& rng) { p.theta -= config.lr * denoise_gradient(p, b, schedule, rng); });
  return {std::move(p), s.token, std::move(trace)};
}

}  // namespace

AttackResult attack_full(const Params& params, const ConceptDataset& dataset, const Schedule& schedule,
                         const AttackConfig& config, const MetricHook& hook) {
  if (config.method != AttackMethod::full_finetune) throw ValidationError("attack_full: method must be full_finetune");
  return finetune_all(params, dataset, schedule, config, hook, Split::D_A);
}

AttackResult finetune_benign(const Params& params, const ConceptDataset& dataset, const Schedule& schedule,
                             const AttackConfig& config, const MetricHook& hook) {
  if (config.method != AttackMethod::benign_pi) throw ValidationError("finetune_benign: method must be benign_pi");
  if (dataset.has_concept(config.target_concept) &&
      dataset.concept_by_id(config.target_concept).role == Role::malicious)
    throw ValidationError("finetune_benign: target concept " + std::to_string(config.target_concept) +
                          " is malicious");
  return finetune_all(params, dataset, schedule, config, hook, Split::D_S);
}

Eigen::Index Adapter::parameter_count() const {
  Eigen::Index n = 0;
  for (const auto& f : factors) n += f.A.size() + f.B.size();
  return n;
}

Adapter init_adapter(const Params& base, int rank, double scale, std::uint64_t seed) {
  if (rank < 1) throw ValidationError("adapter: rank must be >= 1");
  Adapter a;
  a.scale = scale;
  a.rank = rank;
  Rng rng(seed);
  for (const auto& c : base.layout.cond) {
    for (const DenseSlot& slot : {c.query, c.key, c.value, c.out}) {
      if (rank > std::min(slot.rows, slot.cols))
        throw ValidationError("adapter: rank " + std::to_string(rank) + " exceeds matrix dimensions " +
                              std::to_string(slot.rows) + "x" + std::to_string(slot.cols));
      AdapterFactor f;
      f.slot = slot;
      f.A = Eigen::MatrixXd::Zero(slot.rows, rank);
      f.B = standard_normal(rank, slot.cols, rng) / std::sqrt(static_cast<double>(slot.cols));
      a.factors.push_back(std::move(f));
    }
  }
  return a;
}

Params apply_adapter(const Params& base, const Adapter& adapter) {
  Params out = base;
  for (const auto& f : adapter.factors) {
    if (f.slot.weight + f.slot.rows * f.slot.cols > out.theta.size())
      throw ValidationError("adapter: slot outside the base parameter vector");
    weight_of(out.theta, f.slot) += adapter.scale * (f.A * f.B);
  }
  return out;
}

std::vector<std::pair<Eigen::MatrixXd, Eigen::MatrixXd>> adapter_gradients(const Adapter& adapter,
                                                                         const Eigen::VectorXd& merged_grad) {
  std::vector<std::pair<Eigen::MatrixXd, Eigen::MatrixXd>> out;
  for (const auto& f : adapter.factors) {
    const Eigen::MatrixXd gw = weight_of(merged_grad, f.slot);
    out.emplace_back(adapter.scale * gw * f.B.transpose(), adapter.scale * f.A.transpose() * gw);
  }
  return out;
}

namespace {
nlohmann::json matrix_to_json(const Eigen::MatrixXd& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::vector<double>(m.data(), m.data() + m.size())}};
}

Eigen::MatrixXd matrix_from_json(const nlohmann::json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (static_cast<Eigen::Index>(data.size()) != rows * cols) throw ValidationError("adapter: matrix size mismatch");
  return Eigen::Map<const Eigen::MatrixXd>(data.data(), rows, cols);
}
}  // namespace

nlohmann::json adapter_to_json(const Adapter& adapter) {
  nlohmann::json factors = nlohmann::json::array();
  for (const auto& f : adapter.factors) {
    factors.push_back({{"weight", f.slot.weight},
                       {"bias", f.slot.bias},
                       {"rows", f.slot.rows},
                       {"cols", f.slot.cols},
                       {"A", matrix_to_json(f.A)},
                       {"B", matrix_to_json(f.B)}});
  }
  return {{"schema_version", 1},
          {"kind", "gift.adapter"},
          {"scale", adapter.scale},
          {"rank", adapter.rank},
          {"factors", factors}};
}

Adapter adapter_from_json(const nlohmann::json& j) {
  if (j.value("kind", "") != "gift.adapter") throw ValidationError("adapter: not an adapter file");
  if (j.value("schema_version", 0) != 1) throw ValidationError("adapter: unsupported schema version");
  Adapter a;
  a.scale = j.at("scale").get<double>();
  a.rank = j.at("rank").get<int>();
  for (const auto& fj : j.at("factors")) {
    AdapterFactor f;
    f.slot = {fj.at("weight").get<Eigen::Index>(), fj.at("bias").get<Eigen::Index>(), fj.at("rows").get<Eigen::Index>(),
              fj.at("cols").get<Eigen::Index>()};
    f.A = matrix_from_json(fj.at("A"));
    f.B = matrix_from_json(fj.at("B"));
    if (f.A.rows() != f.slot.rows || f.B.cols() != f.slot.cols || f.A.cols() != f.B.rows())
      throw ValidationError("adapter: factor shapes do not match slot");
    a.factors.push_back(std::move(f));
  }
  return a;
}

LowRankResult attack_lowrank(const Params& params, const ConceptDataset& dataset, const Schedule& schedule,
                             const AttackConfig& config, const MetricHook& hook) {
  if (config.method != AttackMethod::lowrank_adapter)
    throw ValidationError("attack_lowrank: method must be lowrank_adapter");
  Setup s = prepare(params, dataset, config, Split::D_A);
  LowRankResult r;
  r.base = s.params;
  r.token = s.token;
  r.adapter = init_adapter(r.base, config.rank, config.adapter_scale, derive_seed(config.seed, {0xada}));
  r.trace = run(
      config, s, schedule, hook, [&] { return apply_adapter(r.base, r.adapter); },
      [&](const Batch& b, Rng& rng) {
        const Params merged = apply_adapter(r.base, r.adapter);
        const auto grads = adapter_gradients(r.adapter, denoise_gradient(merged, b, schedule, rng));
        for (std::size_t i = 0; i < grads.size(); ++i) {
          r.adapter.factors[i].A -= config.lr * grads[i].first;
          r.adapter.factors[i].B -= config.lr * grads[i].second;
        }
      });
  return r;
}

}  // namespace gift
