#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "doprompt/datagen.hpp"
#include "doprompt/model.hpp"

namespace doprompt {

/// Row-major feature vectors of one domain, with optional class labels.
struct FeatureSet {
  std::size_t dim = 0;
  std::vector<double> values;
  std::vector<int> labels;

  std::size_t size() const { return dim == 0 ? 0 : values.size() / dim; }
  std::span<const double> row(std::size_t i) const { return {values.data() + i * dim, dim}; }
  void push_back(std::span<const double> v, int label);
  /// Rows whose label equals `label`.
  FeatureSet subset(int label) const;
};

/// 1 - x.y / (|x| |y|). Throws ContractError for a zero vector.
double cosine_distance(std::span<const double> x, std::span<const double> y);
std::vector<double> centroid(const FeatureSet& features);
/// Mean cosine distance of the rows to their centroid.
double in_domain_distance(const FeatureSet& features);

/// cosine(cent_i, cent_j) / (0.5 * (in_i + in_j)). Throws ContractError when
/// either set has fewer than two rows or spread below 1e-9.
double normalized_distance(const FeatureSet& a, const FeatureSet& b);

struct ClassDistance {
  double value = 0.0;  // NaN when no class was usable
  std::size_t classes_used = 0;
  std::vector<std::string> warnings;
};

/// Mean of normalized_distance over the classes present in both sets.
/// Classes missing from either side, or degenerate within it, are skipped.
ClassDistance class_distance(const FeatureSet& a, const FeatureSet& b);

struct DistanceReport {
  std::size_t num_domains = 0;
  std::vector<double> in_dist;        // [K]
  std::vector<double> domain_dist;    // [K x K]
  std::vector<double> class_dist;     // [K x K]
  double cross_in_ratio = 0.0;        // mean off-diagonal domain_dist
  double cross_in_class_ratio = 0.0;  // mean off-diagonal class_dist
  std::vector<std::string> warnings;

  double dist(std::size_t i, std::size_t j) const { return domain_dist[i * num_domains + j]; }
  double cls(std::size_t i, std::size_t j) const { return class_dist[i * num_domains + j]; }
};

DistanceReport domain_distance(std::span<const FeatureSet> domains);

/// Flattened pixels of each dataset domain.
std::vector<FeatureSet> raw_pixel_features(const SyntheticDataset& data);
/// Prompt-free class-token features (the adapter's input) of each dataset domain.
std::vector<FeatureSet> model_features(const DoPromptModel& model, const SyntheticDataset& data);

struct AdapterWeightStats {
  std::size_t num_sources = 0;
  std::vector<int> evaluated;       // dataset domain ids, one row each
  std::vector<std::size_t> counts;  // samples per row
  std::vector<double> percentage;   // [rows x K], argmax share in percent
  std::vector<double> average;      // [rows x K], mean weight
  std::vector<std::string> warnings;

  double pct(std::size_t row, std::size_t k) const { return percentage[row * num_sources + k]; }
  double avg(std::size_t row, std::size_t k) const { return average[row * num_sources + k]; }
};

/// Reduces adapter weights [N x L x K] to one row: weights are averaged over
/// the L positions, then argmax (first on ties) and mean are taken per sample.
void accumulate_weight_row(std::span<const Real> weights, std::size_t n, std::size_t l,
                           std::size_t k, std::vector<double>& percentage,
                           std::vector<double>& average);

/// Rows for each of `domains` (dataset domain ids); empty domains are skipped
/// with a warning.
AdapterWeightStats adapter_weight_stats(const DoPromptModel& model, const SyntheticDataset& data,
                                        std::span<const int> domains);
/// Same, with explicit image indices per row; `row_ids` labels the rows.
AdapterWeightStats adapter_weight_stats(const DoPromptModel& model, const SyntheticDataset& data,
                                        std::span<const std::vector<std::size_t>> rows,
                                        std::span<const int> row_ids);

struct PromptAccuracyTable {
  std::vector<std::string> columns;  // "adapted", then "prompt_<k>"
  std::vector<double> accuracy;      // percent, per column
  std::vector<std::vector<Real>> logits;  // per column, [N x C] row-major
  std::vector<int> labels;
  std::size_t num_classes = 0;
};

/// Accuracy of the adapted prompt and of every single source-domain prompt on
/// the given images.
PromptAccuracyTable per_prompt_accuracy_table(const DoPromptModel& model,
                                              const SyntheticDataset& data,
                                              std::span<const std::size_t> indices);

}  // namespace doprompt
