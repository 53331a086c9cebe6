#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "gift/rng.hpp"

namespace gift {

enum class Family { gaussian_blobs, ring, two_moons, spiral, grid };
enum class Role { malicious, safe };
enum class Split { D_M, D_A, D_S };

std::string_view to_string(Family f);
std::string_view to_string(Role r);
std::string_view to_string(Split s);
Family parse_family(std::string_view s);
Role parse_role(std::string_view s);
Split parse_split(std::string_view s);

struct Transform {
  double rotation = 0.0;  // radians, [0, 2pi)
  double scale = 1.0;
  Eigen::Vector2d offset = Eigen::Vector2d::Zero();
};

struct Concept {
  int id = 0;
  std::string name;
  Family family = Family::gaussian_blobs;
  Transform transform;
  Role role = Role::safe;
};

struct Sample {
  Eigen::Vector2d x;
  int concept_id = 0;
  Split split = Split::D_S;
};

// Malicious concepts get `defense` samples in D_M and `attack` in D_A;
// every safe concept gets `safe` samples in D_S.
struct SplitCounts {
  int defense = 20;
  int attack = 20;
  int safe = 500;

  // An even split of `total` malicious samples into D_M / D_A.
  static SplitCounts from_malicious_total(int total, int safe);
};

// Untransformed draw from a family's base distribution.
Eigen::Vector2d sample_family(Family family, Rng& rng);

Eigen::Vector2d apply_transform(const Transform& tf, const Eigen::Vector2d& base);

// n fresh points from a concept's generator, independent of any dataset.
Eigen::Matrix2Xd draw_concept(const Concept& c, int n, std::uint64_t seed);

// Throws ValidationError for a non-finite or degenerate transform.
void validate_concept(const Concept& c);

class ConceptDataset {
 public:
  ConceptDataset(std::vector<Concept> concepts, std::vector<Sample> samples, SplitCounts counts,
                 std::uint64_t seed);

  const std::vector<Concept>& concepts() const { return concepts_; }
  const std::vector<Sample>& samples() const { return samples_; }
  const SplitCounts& counts() const { return counts_; }
  std::uint64_t seed() const { return seed_; }

  const Concept& concept_by_id(int id) const;
  bool has_concept(int id) const;
  std::vector<int> concept_ids(std::optional<Role> role = std::nullopt) const;
  int max_concept_id() const;

 private:
  std::vector<Concept> concepts_;
  std::vector<Sample> samples_;
  SplitCounts counts_;
  std::uint64_t seed_;
};

ConceptDataset make_concept_set(std::span<const Concept> spec, SplitCounts counts, std::uint64_t seed);

// Samples of `split`, optionally restricted to one concept, in dataset order.
std::vector<Sample> split_view(const ConceptDataset& dataset, Split split,
                               std::optional<int> concept_id = std::nullopt);

// Samples of every concept in `split` except those listed.
std::vector<Sample> split_view_excluding(const ConceptDataset& dataset, Split split,
                                         std::span<const int> excluded);

// All samples of one concept across every split.
std::vector<Sample> concept_view(const ConceptDataset& dataset, int concept_id);

Eigen::Matrix2Xd stack_points(std::span<const Sample> samples);

inline constexpr int kDatasetSchemaVersion = 1;

nlohmann::json to_json(const ConceptDataset& dataset);
ConceptDataset dataset_from_json(const nlohmann::json& j);
nlohmann::json concept_to_json(const Concept& c);
Concept concept_from_json(const nlohmann::json& j);

void save_dataset(const ConceptDataset& dataset, const std::filesystem::path& path);
ConceptDataset load_dataset(const std::filesystem::path& path);

}  // namespace gift
