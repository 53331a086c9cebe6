#include "gift/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

#include "gift/errors.hpp"

namespace gift {

namespace {

constexpr std::uint64_t kSampleStream = 0x5a3d;

template <typename E, std::size_t N>
E parse_enum(std::string_view s, const std::array<std::pair<std::string_view, E>, N>& table,
             std::string_view what) {
  for (const auto& [name, value] : table)
    if (name == s) return value;
  throw ValidationError("unknown " + std::string(what) + " '" + std::string(s) + "'");
}

constexpr std::array<std::pair<std::string_view, Family>, 5> kFamilies{{
    {"gaussian-blobs", Family::gaussian_blobs},
    {"ring", Family::ring},
    {"two-moons", Family::two_moons},
    {"spiral", Family::spiral},
    {"grid", Family::grid},
}};
constexpr std::array<std::pair<std::string_view, Role>, 2> kRoles{{
    {"malicious", Role::malicious},
    {"safe", Role::safe},
}};
constexpr std::array<std::pair<std::string_view, Split>, 3> kSplits{{
    {"D_M", Split::D_M},
    {"D_A", Split::D_A},
    {"D_S", Split::D_S},
}};

}  // namespace

void validate_concept(const Concept& c) {
  if (!(c.transform.scale > 0.0) || !std::isfinite(c.transform.scale))
    throw ValidationError("concept " + std::to_string(c.id) + ": scale must be positive");
  if (!(c.transform.rotation >= 0.0 && c.transform.rotation < 2.0 * std::numbers::pi))
    throw ValidationError("concept " + std::to_string(c.id) + ": rotation must lie in [0, 2pi)");
  if (!c.transform.offset.allFinite())
    throw ValidationError("concept " + std::to_string(c.id) + ": offset must be finite");
}

std::string_view to_string(Family f) {
  for (const auto& [name, value] : kFamilies)
    if (value == f) return name;
  return "?";
}
std::string_view to_string(Role r) { return r == Role::malicious ? "malicious" : "safe"; }
std::string_view to_string(Split s) {
  for (const auto& [name, value] : kSplits)
    if (value == s) return name;
  return "?";
}
Family parse_family(std::string_view s) { return parse_enum(s, kFamilies, "family"); }
Role parse_role(std::string_view s) { return parse_enum(s, kRoles, "role"); }
Split parse_split(std::string_view s) { return parse_enum(s, kSplits, "split"); }

SplitCounts SplitCounts::from_malicious_total(int total, int safe) {
  if (total <= 0 || total % 2 != 0) throw ValidationError("malicious total must be a positive even count");
  return SplitCounts{total / 2, total / 2, safe};
}

Eigen::Vector2d sample_family(Family family, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  constexpr double pi = std::numbers::pi;
  switch (family) {
    case Family::gaussian_blobs: {
      const double a = normal(rng);
      const double b = normal(rng);
      return {a, b};
    }
    case Family::ring: {
      const double angle = 2.0 * pi * unit(rng);
      const double r = 1.0 + 0.1 * normal(rng);
      return {r * std::cos(angle), r * std::sin(angle)};
    }
    case Family::two_moons: {
      const bool upper = unit(rng) < 0.5;
      const double angle = pi * unit(rng);
      const double nx = 0.1 * normal(rng);
      const double ny = 0.1 * normal(rng);
      // Centered so both moons average to the origin.
      Eigen::Vector2d p = upper ? Eigen::Vector2d(std::cos(angle), std::sin(angle))
                                : Eigen::Vector2d(1.0 - std::cos(angle), 0.5 - std::sin(angle));
      return p - Eigen::Vector2d(0.5, 0.25) + Eigen::Vector2d(nx, ny);
    }
    case Family::spiral: {
      const double s = unit(rng);
      const double angle = 3.0 * pi * s;
      const double nx = 0.05 * normal(rng);
      const double ny = 0.05 * normal(rng);
      return {s * std::cos(angle) + nx, s * std::sin(angle) + ny};
    }
    case Family::grid: {
      const int i = uniform_int(rng, -1, 2);
      const int j = uniform_int(rng, -1, 2);
      const double nx = 0.1 * normal(rng);
      const double ny = 0.1 * normal(rng);
      return {i + nx, j + ny};
    }
  }
  return Eigen::Vector2d::Zero();
}

Eigen::Vector2d apply_transform(const Transform& tf, const Eigen::Vector2d& base) {
  const double c = std::cos(tf.rotation);
  const double s = std::sin(tf.rotation);
  Eigen::Matrix2d rot;
  rot << c, -s, s, c;
  return rot * (tf.scale * base) + tf.offset;
}

Eigen::Matrix2Xd draw_concept(const Concept& c, int n, std::uint64_t seed) {
  if (n < 0) throw ValidationError("draw_concept: negative count");
  Rng rng(seed);
  Eigen::Matrix2Xd out(2, n);
  for (int i = 0; i < n; ++i) out.col(i) = apply_transform(c.transform, sample_family(c.family, rng));
  return out;
}

ConceptDataset::ConceptDataset(std::vector<Concept> concepts, std::vector<Sample> samples, SplitCounts counts,
                               std::uint64_t seed)
    : concepts_(std::move(concepts)), samples_(std::move(samples)), counts_(counts), seed_(seed) {}

const Concept& ConceptDataset::concept_by_id(int id) const {
  for (const auto& c : concepts_)
    if (c.id == id) return c;
  throw ValidationError("unknown concept id " + std::to_string(id));
}

bool ConceptDataset::has_concept(int id) const {
  return std::any_of(concepts_.begin(), concepts_.end(), [id](const Concept& c) { return c.id == id; });
}

std::vector<int> ConceptDataset::concept_ids(std::optional<Role> role) const {
  std::vector<int> ids;
  for (const auto& c : concepts_)
    if (!role || c.role == *role) ids.push_back(c.id);
  return ids;
}

int ConceptDataset::max_concept_id() const {
  int m = -1;
  for (const auto& c : concepts_) m = std::max(m, c.id);
  return m;
}

ConceptDataset make_concept_set(std::span<const Concept> spec, SplitCounts counts, std::uint64_t seed) {
  if (spec.empty()) throw ValidationError("concept spec is empty");
  if (counts.defense <= 0 || counts.attack <= 0 || counts.safe <= 0)
    throw ValidationError("split counts must be positive");
  std::set<int> ids;
  bool any_malicious = false, any_safe = false;
  for (const auto& c : spec) {
    if (c.id < 0) throw ValidationError("concept ids must be non-negative");
    if (!ids.insert(c.id).second) throw ValidationError("duplicate concept id " + std::to_string(c.id));
    validate_concept(c);
    any_malicious |= c.role == Role::malicious;
    any_safe |= c.role == Role::safe;
  }
  if (!any_malicious || !any_safe)
    throw ValidationError("concept spec needs at least one malicious and one safe concept");

  std::vector<Sample> samples;
  for (const auto& c : spec) {
    std::vector<std::pair<Split, int>> plan;
    if (c.role == Role::malicious)
      plan = {{Split::D_M, counts.defense}, {Split::D_A, counts.attack}};
    else
      plan = {{Split::D_S, counts.safe}};

    std::set<std::pair<double, double>> defense_points;
    for (const auto& [split, n] : plan) {
      for (int i = 0; i < n; ++i) {
        for (std::uint64_t attempt = 0;; ++attempt) {
          Rng rng(derive_seed(seed, {kSampleStream, static_cast<std::uint64_t>(split),
                                     static_cast<std::uint64_t>(c.id), static_cast<std::uint64_t>(i), attempt}));
          const Eigen::Vector2d x = apply_transform(c.transform, sample_family(c.family, rng));
          const std::pair<double, double> key{x.x(), x.y()};
          // D_M and D_A must not share a point.
          if (split == Split::D_M) defense_points.insert(key);
          if (split == Split::D_A && defense_points.count(key)) continue;
          samples.push_back(Sample{x, c.id, split});
          break;
        }
      }
    }
  }
  return ConceptDataset({spec.begin(), spec.end()}, std::move(samples), counts, seed);
}

std::vector<Sample> split_view(const ConceptDataset& dataset, Split split, std::optional<int> concept_id) {
  if (concept_id && !dataset.has_concept(*concept_id))
    throw ValidationError("unknown concept id " + std::to_string(*concept_id));
  std::vector<Sample> out;
  for (const auto& s : dataset.samples())
    if (s.split == split && (!concept_id || s.concept_id == *concept_id)) out.push_back(s);
  return out;
}

std::vector<Sample> split_view_excluding(const ConceptDataset& dataset, Split split,
                                         std::span<const int> excluded) {
  std::vector<Sample> out;
  for (const auto& s : dataset.samples())
    if (s.split == split && std::find(excluded.begin(), excluded.end(), s.concept_id) == excluded.end())
      out.push_back(s);
  return out;
}

std::vector<Sample> concept_view(const ConceptDataset& dataset, int concept_id) {
  if (!dataset.has_concept(concept_id)) throw ValidationError("unknown concept id " + std::to_string(concept_id));
  std::vector<Sample> out;
  for (const auto& s : dataset.samples())
    if (s.concept_id == concept_id) out.push_back(s);
  return out;
}

Eigen::Matrix2Xd stack_points(std::span<const Sample> samples) {
  Eigen::Matrix2Xd m(2, static_cast<Eigen::Index>(samples.size()));
  for (std::size_t i = 0; i < samples.size(); ++i) m.col(static_cast<Eigen::Index>(i)) = samples[i].x;
  return m;
}

nlohmann::json concept_to_json(const Concept& c) {
  return {{"id", c.id},
          {"name", c.name},
          {"family", to_string(c.family)},
          {"role", to_string(c.role)},
          {"rotation", c.transform.rotation},
          {"scale", c.transform.scale},
          {"offset", {c.transform.offset.x(), c.transform.offset.y()}}};
}

Concept concept_from_json(const nlohmann::json& j) {
  Concept c;
  c.id = j.at("id").get<int>();
  c.name = j.value("name", "concept" + std::to_string(c.id));
  c.family = parse_family(j.at("family").get<std::string>());
  c.role = parse_role(j.at("role").get<std::string>());
  c.transform.rotation = j.value("rotation", 0.0);
  c.transform.scale = j.value("scale", 1.0);
  if (j.contains("offset")) {
    const auto& o = j.at("offset");
    if (!o.is_array() || o.size() != 2) throw ValidationError("concept offset must be a 2-vector");
    c.transform.offset = {o[0].get<double>(), o[1].get<double>()};
  }
  validate_concept(c);
  return c;
}

nlohmann::json to_json(const ConceptDataset& dataset) {
  nlohmann::json concepts = nlohmann::json::array();
  for (const auto& c : dataset.concepts()) concepts.push_back(concept_to_json(c));
  nlohmann::json samples = nlohmann::json::array();
  for (const auto& s : dataset.samples()) samples.push_back({s.x.x(), s.x.y(), s.concept_id, to_string(s.split)});
  return {{"schema_version", kDatasetSchemaVersion},
          {"kind", "gift.dataset"},
          {"seed", dataset.seed()},
          {"counts", {{"D_M", dataset.counts().defense}, {"D_A", dataset.counts().attack}, {"D_S", dataset.counts().safe}}},
          {"concepts", concepts},
          {"samples", samples}};
}

ConceptDataset dataset_from_json(const nlohmann::json& j) {
  try {
    if (j.at("schema_version").get<int>() != kDatasetSchemaVersion || j.at("kind").get<std::string>() != "gift.dataset")
      throw IoError("dataset: unsupported schema version or kind");
    std::vector<Concept> concepts;
    for (const auto& c : j.at("concepts")) concepts.push_back(concept_from_json(c));
    std::vector<Sample> samples;
    for (const auto& s : j.at("samples")) {
      Sample smp{{s.at(0).get<double>(), s.at(1).get<double>()}, s.at(2).get<int>(), parse_split(s.at(3).get<std::string>())};
      if (!smp.x.allFinite()) throw ValidationError("dataset: non-finite sample");
      samples.push_back(smp);
    }
    const auto& cj = j.at("counts");
    SplitCounts counts{cj.at("D_M").get<int>(), cj.at("D_A").get<int>(), cj.at("D_S").get<int>()};
    return ConceptDataset(std::move(concepts), std::move(samples), counts, j.at("seed").get<std::uint64_t>());
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("dataset: malformed file: ") + e.what());
  }
}

void save_dataset(const ConceptDataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << to_json(dataset).dump(1) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

ConceptDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("dataset " + path.string() + ": " + e.what());
  }
  return dataset_from_json(j);
}

}  // namespace gift
