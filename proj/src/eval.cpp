#include "gift/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <Eigen/Eigenvalues>

#include "gift/format.hpp"
#include "gift/train.hpp"

namespace gift {

const char* const kMetricDisclaimer =
    "Metric substitution: prompt alignment (CLIP) -> probe_accuracy; perceptual/feature similarity "
    "(LPIPS, DINO) -> mmd against fresh samples of the concept; NSFW rate (NudeNet) -> probe_accuracy "
    "against the designated malicious concept. These are toy-scale stand-ins, not the original metrics.";

// ---- probe ----

namespace {

struct ProbeShapes {
  Eigen::Index hidden, classes;
  Eigen::Index size() const { return hidden * 2 + hidden + hidden * hidden + hidden + classes * hidden + classes; }
};

void unpack(const Eigen::VectorXd& v, const ProbeShapes& s, ProbeClassifier& p) {
  Eigen::Index o = 0;
  auto take = [&](Eigen::Index r, Eigen::Index c) {
    Eigen::MatrixXd m = Eigen::Map<const Eigen::MatrixXd>(v.data() + o, r, c);
    o += r * c;
    return m;
  };
  p.W1 = take(s.hidden, 2);
  p.b1 = take(s.hidden, 1);
  p.W2 = take(s.hidden, s.hidden);
  p.b2 = take(s.hidden, 1);
  p.W3 = take(s.classes, s.hidden);
  p.b3 = take(s.classes, 1);
}

Eigen::VectorXd pack(const ProbeClassifier& p) {
  Eigen::VectorXd v(p.W1.size() + p.b1.size() + p.W2.size() + p.b2.size() + p.W3.size() + p.b3.size());
  Eigen::Index o = 0;
  for (const Eigen::MatrixXd& m : {p.W1, Eigen::MatrixXd(p.b1), p.W2, Eigen::MatrixXd(p.b2), p.W3,
                                   Eigen::MatrixXd(p.b3)}) {
    v.segment(o, m.size()) = Eigen::Map<const Eigen::VectorXd>(m.data(), m.size());
    o += m.size();
  }
  return v;
}

// Background points closer than this many RMS radii to a concept sample are dropped.
constexpr double kBackgroundClearance = 1.0;

double rms_radius(const Eigen::Matrix2Xd& x) {
  const Eigen::Vector2d mean = x.rowwise().mean();
  return std::sqrt((x.colwise() - mean).colwise().squaredNorm().mean());
}

}  // namespace

Eigen::MatrixXd ProbeClassifier::logits(const Eigen::Matrix2Xd& x) const {
  const Eigen::MatrixXd u = (x.colwise() - center).array().colwise() / spread.array();
  const Eigen::MatrixXd h1 = ((W1 * u).colwise() + b1).array().tanh();
  const Eigen::MatrixXd h2 = ((W2 * h1).colwise() + b2).array().tanh();
  return (W3 * h2).colwise() + b3;
}

std::vector<int> ProbeClassifier::predict(const Eigen::Matrix2Xd& x) const {
  const Eigen::MatrixXd l = logits(x);
  std::vector<int> out(static_cast<std::size_t>(x.cols()));
  for (Eigen::Index j = 0; j < l.cols(); ++j) {
    Eigen::Index k;
    l.col(j).maxCoeff(&k);
    out[static_cast<std::size_t>(j)] =
        k < static_cast<Eigen::Index>(classes.size()) ? classes[static_cast<std::size_t>(k)] : kBackground;
  }
  return out;
}

ProbeClassifier train_probe(std::span<const Concept> concepts, std::uint64_t seed, const ProbeOptions& opt) {
  if (concepts.size() < 2) throw ValidationError("probe: needs at least 2 concepts");
  if (opt.train_per_concept < 1 || opt.test_per_concept < 1 || opt.hidden < 1 || opt.steps < 0)
    throw ValidationError("probe: invalid options");
  const auto k = static_cast<Eigen::Index>(concepts.size());
  const Eigen::Index n = opt.train_per_concept;

  ProbeClassifier p;
  p.seed = seed;
  std::vector<Eigen::Matrix2Xd> train;
  double min_radius = std::numeric_limits<double>::infinity();
  for (const auto& c : concepts) {
    p.classes.push_back(c.id);
    train.push_back(draw_concept(c, opt.train_per_concept, derive_seed(seed, {0x9b, static_cast<std::uint64_t>(c.id), 0})));
    min_radius = std::min(min_radius, rms_radius(train.back()));
  }

  // Background: uniform points in an enlarged bounding box, away from every concept sample.
  Eigen::Matrix2Xd all(2, k * n);
  for (Eigen::Index i = 0; i < k; ++i) all.middleCols(i * n, n) = train[static_cast<std::size_t>(i)];
  const Eigen::Vector2d lo = all.rowwise().minCoeff(), hi = all.rowwise().maxCoeff();
  const Eigen::Vector2d margin = 0.5 * (hi - lo);
  const double reject = kBackgroundClearance * min_radius;
  const Eigen::Index n_bg = 2 * n;
  std::vector<Eigen::Vector2d> bg;
  Rng bg_rng(derive_seed(seed, {0x9b, 0xb9}));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (Eigen::Index attempt = 0; attempt < 100 * n_bg && static_cast<Eigen::Index>(bg.size()) < n_bg; ++attempt) {
    Eigen::Vector2d q;
    for (int d = 0; d < 2; ++d) q[d] = lo[d] - margin[d] + unit(bg_rng) * (hi[d] - lo[d] + 2 * margin[d]);
    if ((all.colwise() - q).colwise().squaredNorm().minCoeff() > reject * reject) bg.push_back(q);
  }

  const auto total = k * n + static_cast<Eigen::Index>(bg.size());
  Eigen::Matrix2Xd x(2, total);
  std::vector<Eigen::Index> label(static_cast<std::size_t>(total));
  x.leftCols(k * n) = all;
  for (Eigen::Index i = 0; i < k * n; ++i) label[static_cast<std::size_t>(i)] = i / n;
  for (std::size_t i = 0; i < bg.size(); ++i) {
    x.col(k * n + static_cast<Eigen::Index>(i)) = bg[i];
    label[static_cast<std::size_t>(k * n) + i] = k;
  }
  p.center = x.rowwise().mean();
  p.spread = ((x.colwise() - p.center).array().square().rowwise().mean().sqrt()).max(1e-12);
  const Eigen::MatrixXd u = (x.colwise() - p.center).array().colwise() / p.spread.array();

  const ProbeShapes shapes{opt.hidden, k + 1};
  Rng init_rng(derive_seed(seed, {0x9b, 0x1}));
  p.W1 = standard_normal(opt.hidden, 2, init_rng) / std::sqrt(2.0);
  p.b1 = Eigen::VectorXd::Zero(opt.hidden);
  p.W2 = standard_normal(opt.hidden, opt.hidden, init_rng) / std::sqrt(static_cast<double>(opt.hidden));
  p.b2 = Eigen::VectorXd::Zero(opt.hidden);
  p.W3 = standard_normal(k + 1, opt.hidden, init_rng) / std::sqrt(static_cast<double>(opt.hidden));
  p.b3 = Eigen::VectorXd::Zero(k + 1);

  Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(k + 1, total);
  for (Eigen::Index j = 0; j < total; ++j) onehot(label[static_cast<std::size_t>(j)], j) = 1.0;

  Eigen::VectorXd theta = pack(p);
  AdamState adam;
  adam.lr = opt.lr;
  const double inv_n = 1.0 / static_cast<double>(total);
  for (int step = 0; step < opt.steps; ++step) {
    unpack(theta, shapes, p);
    const Eigen::MatrixXd h1 = ((p.W1 * u).colwise() + p.b1).array().tanh();
    const Eigen::MatrixXd h2 = ((p.W2 * h1).colwise() + p.b2).array().tanh();
    Eigen::MatrixXd l = (p.W3 * h2).colwise() + p.b3;
    const Eigen::RowVectorXd mx = l.colwise().maxCoeff();
    l.rowwise() -= mx;
    Eigen::MatrixXd prob = l.array().exp();
    prob.array().rowwise() /= prob.colwise().sum().array();
    const Eigen::MatrixXd dl = (prob - onehot) * inv_n;
    const Eigen::MatrixXd dW3 = dl * h2.transpose();
    const Eigen::VectorXd db3 = dl.rowwise().sum();
    const Eigen::MatrixXd dh2 = ((p.W3.transpose() * dl).array() * (1.0 - h2.array().square())).matrix();
    const Eigen::MatrixXd dW2 = dh2 * h1.transpose();
    const Eigen::VectorXd db2 = dh2.rowwise().sum();
    const Eigen::MatrixXd dh1 = ((p.W2.transpose() * dh2).array() * (1.0 - h1.array().square())).matrix();
    const Eigen::MatrixXd dW1 = dh1 * u.transpose();
    const Eigen::VectorXd db1 = dh1.rowwise().sum();
    ProbeClassifier g;
    g.W1 = dW1;
    g.b1 = db1;
    g.W2 = dW2;
    g.b2 = db2;
    g.W3 = dW3;
    g.b3 = db3;
    adam.apply(theta, pack(g));
  }
  unpack(theta, shapes, p);
  if (!theta.allFinite()) throw NumericalError("probe: training diverged");

  Eigen::Index correct = 0, seen = 0;
  for (const auto& c : concepts) {
    const Eigen::Matrix2Xd test =
        draw_concept(c, opt.test_per_concept, derive_seed(seed, {0x9b, static_cast<std::uint64_t>(c.id), 1}));
    for (int y : p.predict(test)) correct += (y == c.id);
    seen += test.cols();
  }
  p.heldout_accuracy = static_cast<double>(correct) / static_cast<double>(seen);
  if (p.heldout_accuracy < opt.accuracy_floor)
    throw ValidationError("probe: held-out accuracy " + format_double(p.heldout_accuracy) + " below floor " +
                          format_double(opt.accuracy_floor) + "; concepts are not separable");
  return p;
}

ProbeClassifier train_probe(const ConceptDataset& dataset, std::uint64_t seed, const ProbeOptions& options) {
  return train_probe(dataset.concepts(), seed, options);
}

double probe_accuracy(const ProbeClassifier& probe, const Eigen::Matrix2Xd& samples, int target) {
  if (samples.cols() == 0) throw ValidationError("probe_accuracy: no samples");
  const auto pred = probe.predict(samples);
  const auto hits = std::count(pred.begin(), pred.end(), target);
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

// ---- MMD ----

namespace {

Eigen::MatrixXd gaussian_gram(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double bandwidth) {
  const Eigen::VectorXd na = a.colwise().squaredNorm().transpose();
  const Eigen::RowVectorXd nb = b.colwise().squaredNorm();
  Eigen::MatrixXd d2 = -2.0 * a.transpose() * b;
  d2.colwise() += na;
  d2.rowwise() += nb;
  return (-d2.array().max(0.0) / (2.0 * bandwidth * bandwidth)).exp();
}

void check_mmd_inputs(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double bandwidth, Eigen::Index min_n) {
  if (!(bandwidth > 0.0)) throw ValidationError("mmd: bandwidth must be positive");
  if (a.cols() < min_n || b.cols() < min_n)
    throw ValidationError("mmd: each sample set needs at least " + std::to_string(min_n) + " points");
  if (a.rows() != b.rows()) throw ValidationError("mmd: dimension mismatch");
}

}  // namespace

double mmd_unbiased(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double bandwidth) {
  check_mmd_inputs(a, b, bandwidth, 2);
  const double m = static_cast<double>(a.cols()), n = static_cast<double>(b.cols());
  const Eigen::MatrixXd kaa = gaussian_gram(a, a, bandwidth);
  const Eigen::MatrixXd kbb = gaussian_gram(b, b, bandwidth);
  const Eigen::MatrixXd kab = gaussian_gram(a, b, bandwidth);
  const double saa = (kaa.sum() - kaa.trace()) / (m * (m - 1.0));
  const double sbb = (kbb.sum() - kbb.trace()) / (n * (n - 1.0));
  return saa + sbb - 2.0 * kab.mean();
}

double mmd_biased(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double bandwidth) {
  check_mmd_inputs(a, b, bandwidth, 1);
  return gaussian_gram(a, a, bandwidth).mean() + gaussian_gram(b, b, bandwidth).mean() -
         2.0 * gaussian_gram(a, b, bandwidth).mean();
}

double median_bandwidth(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.rows() != b.rows()) throw ValidationError("median_bandwidth: dimension mismatch");
  Eigen::MatrixXd pooled(a.rows(), a.cols() + b.cols());
  pooled << a, b;
  const Eigen::Index stride = std::max<Eigen::Index>(1, (pooled.cols() + 999) / 1000);
  std::vector<double> d;
  for (Eigen::Index i = 0; i < pooled.cols(); i += stride)
    for (Eigen::Index j = i + stride; j < pooled.cols(); j += stride) d.push_back((pooled.col(i) - pooled.col(j)).norm());
  if (d.empty()) throw ValidationError("median_bandwidth: needs at least 2 points");
  auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
  std::nth_element(d.begin(), mid, d.end());
  if (!(*mid > 0.0)) throw ValidationError("median_bandwidth: degenerate (median distance is 0)");
  return *mid;
}

// ---- held-out loss ----

double heldout_denoise_loss(const Predictor& predictor, const ConceptDataset& dataset, Split split, int concept_id,
                            const Schedule& schedule, std::uint64_t seed) {
  const auto samples = split_view(dataset, split, concept_id);
  if (samples.empty())
    throw ValidationError("heldout_denoise_loss: no " + std::string(to_string(split)) + " samples for concept " +
                          std::to_string(concept_id));
  return monte_carlo_denoise_loss(predictor, make_batch(samples), schedule, seed);
}

double heldout_denoise_loss(const Params& params, const ConceptDataset& dataset, Split split, int concept_id,
                            const Schedule& schedule, std::uint64_t seed) {
  return heldout_denoise_loss(model_predictor(params), dataset, split, concept_id, schedule, seed);
}

// ---- MI ----

namespace {
std::vector<int> bin_indices(const Eigen::VectorXd& v, int bins) {
  const double lo = v.minCoeff(), hi = v.maxCoeff();
  std::vector<int> idx(static_cast<std::size_t>(v.size()), 0);
  if (!(hi > lo)) return idx;
  for (Eigen::Index i = 0; i < v.size(); ++i)
    idx[static_cast<std::size_t>(i)] = std::min(bins - 1, static_cast<int>((v[i] - lo) / (hi - lo) * bins));
  return idx;
}
}  // namespace

double histogram_mi(const Eigen::VectorXd& a, const Eigen::VectorXd& b, int bins) {
  if (bins < 2) throw ValidationError("mi: bins must be >= 2");
  if (a.size() != b.size() || a.size() == 0) throw ValidationError("mi: inputs must be nonempty and equal length");
  if (!a.allFinite() || !b.allFinite()) throw NumericalError("mi: non-finite input");
  const auto ia = bin_indices(a, bins), ib = bin_indices(b, bins);
  Eigen::MatrixXd joint = Eigen::MatrixXd::Zero(bins, bins);
  for (std::size_t i = 0; i < ia.size(); ++i) joint(ia[i], ib[i]) += 1.0;
  joint /= static_cast<double>(a.size());
  const Eigen::VectorXd pa = joint.rowwise().sum();
  const Eigen::RowVectorXd pb = joint.colwise().sum();
  double mi = 0.0;
  for (int i = 0; i < bins; ++i)
    for (int j = 0; j < bins; ++j)
      if (joint(i, j) > 0.0) mi += joint(i, j) * std::log(joint(i, j) / (pa[i] * pb[j]));
  return std::max(mi, 0.0);
}

Eigen::VectorXd principal_projection(const Eigen::MatrixXd& m) {
  if (m.cols() == 0) throw ValidationError("principal_projection: no samples");
  const Eigen::MatrixXd c = m.colwise() - m.rowwise().mean();
  const Eigen::MatrixXd cov = c * c.transpose() / static_cast<double>(m.cols());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  Eigen::VectorXd axis = es.eigenvectors().col(m.rows() - 1);
  Eigen::Index k;
  axis.cwiseAbs().maxCoeff(&k);
  if (axis[k] < 0) axis = -axis;
  return c.transpose() * axis;
}

double mi_proxy(const Representation& representation, const Eigen::Matrix2Xd& x, int bins) {
  if (bins < 2) throw ValidationError("mi_proxy: bins must be >= 2");
  if (x.cols() < 10 * static_cast<Eigen::Index>(bins))
    throw ValidationError("mi_proxy: insufficient samples (" + std::to_string(x.cols()) + " < 10 * bins)");
  const Eigen::MatrixXd z = representation(x);
  if (z.cols() != x.cols()) throw ValidationError("mi_proxy: representation changed the sample count");
  return histogram_mi(principal_projection(x), principal_projection(z), bins);
}

double mi_proxy(const Params& params, const Eigen::Matrix2Xd& x, int concept_id, const Schedule& schedule, int bins,
                int layer, int t) {
  schedule.check_timestep(t);
  if (layer < 0 || layer >= params.arch.cond_blocks) throw ValidationError("mi_proxy: layer out of range");
  return mi_proxy(
      [&](const Eigen::Matrix2Xd& pts) {
        const std::vector<int> ids(static_cast<std::size_t>(pts.cols()), concept_id);
        const std::vector<int> ts(static_cast<std::size_t>(pts.cols()), t);
        ActivationTrace<double> trace;
        forward(params, pts, ids, ts, &trace);
        return Eigen::MatrixXd(trace.layers[static_cast<std::size_t>(layer)].z);
      },
      x, bins);
}

// ---- report ----

namespace {
constexpr int kReportSchemaVersion = 1;
const char* const kCsvHeader =
    "state,concept_id,concept_name,role,heldout_denoise_loss,probe_accuracy,mmd,bandwidth,mi_proxy";

nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }
std::optional<double> optional_from(const nlohmann::json& j) {
  return j.is_null() ? std::nullopt : std::optional<double>(j.get<double>());
}
}  // namespace

void emit_report(const MetricsReport& report, const std::filesystem::path& dir) {
  if (report.rows.empty()) throw ValidationError("emit_report: no records");
  if (report.provenance.empty()) throw ValidationError("emit_report: provenance missing");
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : report.rows) {
    const bool finite = std::isfinite(r.heldout_denoise_loss) && std::isfinite(r.mmd) && std::isfinite(r.bandwidth) &&
                        (!r.probe_accuracy || std::isfinite(*r.probe_accuracy)) &&
                        (!r.mi_proxy || std::isfinite(*r.mi_proxy));
    if (!finite) throw NumericalError("emit_report: non-finite metric for " + r.state + "/" + r.concept_name);
    rows.push_back({{"state", r.state},
                    {"concept_id", r.concept_id},
                    {"concept_name", r.concept_name},
                    {"role", r.role},
                    {"heldout_denoise_loss", r.heldout_denoise_loss},
                    {"probe_accuracy", optional_json(r.probe_accuracy)},
                    {"mmd", r.mmd},
                    {"bandwidth", r.bandwidth},
                    {"mi_proxy", optional_json(r.mi_proxy)}});
  }
  nlohmann::json prov = nlohmann::json::array();
  for (const auto& p : report.provenance)
    prov.push_back({{"state", p.state},
                    {"checkpoint", p.checkpoint},
                    {"checkpoint_digest", p.checkpoint_digest},
                    {"config_hash", p.config_hash}});
  const nlohmann::json j{{"schema_version", kReportSchemaVersion},
                         {"kind", "gift.metrics"},
                         {"disclaimer", kMetricDisclaimer},
                         {"probe_status", report.probe_status},
                         {"provenance", prov},
                         {"rows", rows}};
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "report.json", std::ios::binary);
    if (!out) throw IoError("cannot write " + (dir / "report.json").string());
    out << j.dump(2) << '\n';
    if (!out) throw IoError("write failed: " + (dir / "report.json").string());
  }
  std::ofstream csv(dir / "metrics.csv", std::ios::binary);
  if (!csv) throw IoError("cannot write " + (dir / "metrics.csv").string());
  csv << kCsvHeader << '\n';
  for (const auto& r : report.rows) {
    csv << r.state << ',' << r.concept_id << ',' << r.concept_name << ',' << r.role << ','
        << format_double(r.heldout_denoise_loss) << ',' << format_optional(r.probe_accuracy, "NA") << ','
        << format_double(r.mmd) << ',' << format_double(r.bandwidth) << ',' << format_optional(r.mi_proxy, "NA")
        << '\n';
  }
  if (!csv) throw IoError("write failed: " + (dir / "metrics.csv").string());
}

MetricsReport parse_report(const std::filesystem::path& report_json) {
  std::ifstream in(report_json, std::ios::binary);
  if (!in) throw IoError("cannot read " + report_json.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("report: " + std::string(e.what()));
  }
  if (j.value("kind", "") != "gift.metrics") throw ValidationError("report: not a metrics report");
  if (j.value("schema_version", 0) != kReportSchemaVersion) throw ValidationError("report: unsupported schema version");
  MetricsReport r;
  r.probe_status = j.at("probe_status").get<std::string>();
  for (const auto& p : j.at("provenance"))
    r.provenance.push_back({p.at("state").get<std::string>(), p.at("checkpoint").get<std::string>(),
                            p.at("checkpoint_digest").get<std::string>(), p.at("config_hash").get<std::string>()});
  for (const auto& row : j.at("rows")) {
    MetricsRow m;
    m.state = row.at("state").get<std::string>();
    m.concept_id = row.at("concept_id").get<int>();
    m.concept_name = row.at("concept_name").get<std::string>();
    m.role = row.at("role").get<std::string>();
    m.heldout_denoise_loss = row.at("heldout_denoise_loss").get<double>();
    m.probe_accuracy = optional_from(row.at("probe_accuracy"));
    m.mmd = row.at("mmd").get<double>();
    m.bandwidth = row.at("bandwidth").get<double>();
    m.mi_proxy = optional_from(row.at("mi_proxy"));
    r.rows.push_back(std::move(m));
  }
  return r;
}

}  // namespace gift
