#include "doprompt/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "doprompt/errors.hpp"
#include "doprompt/pipeline.hpp"

namespace doprompt {

namespace {

constexpr double kMinSpread = 1e-9;
constexpr std::size_t kChunk = 64;

void check_set(const FeatureSet& s, const char* what) {
  if (s.dim == 0 || s.values.size() % s.dim != 0) {
    throw ShapeError(std::string(what) + ": feature values do not fill whole rows");
  }
  if (!s.labels.empty() && s.labels.size() != s.size()) {
    throw ShapeError(std::string(what) + ": label count differs from row count");
  }
}

double spread_checked(const FeatureSet& s) {
  if (s.size() < 2) throw ContractError("degenerate domain: fewer than 2 feature vectors");
  const double spread = in_domain_distance(s);
  if (!(spread >= kMinSpread)) {
    throw ContractError("degenerate domain: in-domain spread below 1e-9");
  }
  return spread;
}

double off_diagonal_mean(const std::vector<double>& m, std::size_t k) {
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      if (i == j || std::isnan(m[i * k + j])) continue;
      total += m[i * k + j];
      ++n;
    }
  }
  return n == 0 ? std::numeric_limits<double>::quiet_NaN() : total / static_cast<double>(n);
}

FeatureSet features_from_tensor(const Tensor& t, std::span<const int> labels) {
  FeatureSet out;
  out.dim = t.numel() / t.dim(0);
  auto v = t.values();
  out.values.assign(v.begin(), v.end());
  out.labels.assign(labels.begin(), labels.end());
  return out;
}

}  // namespace

void FeatureSet::push_back(std::span<const double> v, int label) {
  if (dim == 0) dim = v.size();
  if (v.size() != dim) throw ShapeError("FeatureSet::push_back: row width mismatch");
  values.insert(values.end(), v.begin(), v.end());
  labels.push_back(label);
}

FeatureSet FeatureSet::subset(int label) const {
  FeatureSet out;
  out.dim = dim;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == label) out.push_back(row(i), label);
  }
  return out;
}

double cosine_distance(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ShapeError("cosine_distance: length mismatch");
  double dot = 0.0, xx = 0.0, yy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    dot += x[i] * y[i];
    xx += x[i] * x[i];
    yy += y[i] * y[i];
  }
  if (xx == 0.0 || yy == 0.0) throw ContractError("cosine_distance: zero vector");
  return 1.0 - dot / (std::sqrt(xx) * std::sqrt(yy));
}

std::vector<double> centroid(const FeatureSet& features) {
  const std::size_t n = features.size();
  if (n == 0) throw ContractError("centroid of an empty feature set");
  std::vector<double> c(features.dim, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = features.row(i);
    for (std::size_t j = 0; j < c.size(); ++j) c[j] += r[j];
  }
  for (double& x : c) x /= static_cast<double>(n);
  return c;
}

double in_domain_distance(const FeatureSet& features) {
  const auto c = centroid(features);
  double total = 0.0;
  for (std::size_t i = 0; i < features.size(); ++i) total += cosine_distance(features.row(i), c);
  return total / static_cast<double>(features.size());
}

double normalized_distance(const FeatureSet& a, const FeatureSet& b) {
  check_set(a, "normalized_distance");
  check_set(b, "normalized_distance");
  if (a.dim != b.dim) throw ShapeError("normalized_distance: feature widths differ");
  const double spread = 0.5 * (spread_checked(a) + spread_checked(b));
  return cosine_distance(centroid(a), centroid(b)) / spread;
}

ClassDistance class_distance(const FeatureSet& a, const FeatureSet& b) {
  check_set(a, "class_distance");
  check_set(b, "class_distance");
  if (a.labels.empty() || b.labels.empty()) throw ContractError("class_distance: unlabeled features");
  std::vector<int> classes(a.labels.begin(), a.labels.end());
  classes.insert(classes.end(), b.labels.begin(), b.labels.end());
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());

  ClassDistance out;
  double total = 0.0;
  for (int c : classes) {
    const FeatureSet sa = a.subset(c);
    const FeatureSet sb = b.subset(c);
    if (sa.size() == 0 || sb.size() == 0) {
      out.warnings.push_back("class " + std::to_string(c) + " missing from one domain; skipped");
      continue;
    }
    try {
      total += normalized_distance(sa, sb);
      ++out.classes_used;
    } catch (const ContractError& e) {
      out.warnings.push_back("class " + std::to_string(c) + " skipped: " + e.what());
    }
  }
  out.value = out.classes_used == 0 ? std::numeric_limits<double>::quiet_NaN()
                                    : total / static_cast<double>(out.classes_used);
  return out;
}

DistanceReport domain_distance(std::span<const FeatureSet> domains) {
  const std::size_t k = domains.size();
  if (k == 0) throw ContractError("domain_distance: no domains");
  DistanceReport report;
  report.num_domains = k;
  report.in_dist.resize(k);
  report.domain_dist.assign(k * k, 0.0);
  report.class_dist.assign(k * k, 0.0);
  std::vector<std::vector<double>> cents(k);
  for (std::size_t i = 0; i < k; ++i) {
    check_set(domains[i], "domain_distance");
    if (domains[i].dim != domains[0].dim) throw ShapeError("domain_distance: feature widths differ");
    try {
      report.in_dist[i] = spread_checked(domains[i]);
    } catch (const ContractError& e) {
      throw ContractError("domain " + std::to_string(i) + ": " + e.what());
    }
    cents[i] = centroid(domains[i]);
  }
  const bool labeled = std::all_of(domains.begin(), domains.end(),
                                   [](const FeatureSet& s) { return !s.labels.empty(); });
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = i + 1; j < k; ++j) {
      const double d = cosine_distance(cents[i], cents[j]) /
                       (0.5 * (report.in_dist[i] + report.in_dist[j]));
      report.domain_dist[i * k + j] = report.domain_dist[j * k + i] = d;
      if (!labeled) continue;
      ClassDistance cd = class_distance(domains[i], domains[j]);
      report.class_dist[i * k + j] = report.class_dist[j * k + i] = cd.value;
      for (auto& w : cd.warnings) {
        report.warnings.push_back("domains " + std::to_string(i) + "/" + std::to_string(j) + ": " + w);
      }
    }
  }
  report.cross_in_ratio = off_diagonal_mean(report.domain_dist, k);
  report.cross_in_class_ratio = labeled ? off_diagonal_mean(report.class_dist, k)
                                        : std::numeric_limits<double>::quiet_NaN();
  if (!labeled) report.warnings.push_back("features carry no labels; class distances not computed");
  return report;
}

std::vector<FeatureSet> raw_pixel_features(const SyntheticDataset& data) {
  std::vector<FeatureSet> out(data.num_domains);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto img = data.image(i);
    std::vector<double> row(img.begin(), img.end());
    out[static_cast<std::size_t>(data.domains[i])].push_back(row, data.labels[i]);
  }
  return out;
}

std::vector<FeatureSet> model_features(const DoPromptModel& model, const SyntheticDataset& data) {
  NoGradGuard no_grad;
  std::vector<FeatureSet> out(data.num_domains);
  for (std::size_t d = 0; d < data.num_domains; ++d) {
    const auto idx = data.indices_of_domain(static_cast<int>(d));
    for (std::size_t start = 0; start < idx.size(); start += kChunk) {
      const std::span<const std::size_t> chunk(idx.data() + start, std::min(kChunk, idx.size() - start));
      const Tensor f = vit_forward(model.config, model.vit, data.images(chunk), Tensor()).cls_feature;
      const auto labels = data.labels_of(chunk);
      const FeatureSet part = features_from_tensor(f, labels);
      out[d].dim = part.dim;
      out[d].values.insert(out[d].values.end(), part.values.begin(), part.values.end());
      out[d].labels.insert(out[d].labels.end(), part.labels.begin(), part.labels.end());
    }
  }
  return out;
}

void accumulate_weight_row(std::span<const Real> weights, std::size_t n, std::size_t l,
                           std::size_t k, std::vector<double>& percentage,
                           std::vector<double>& average) {
  if (weights.size() != n * l * k) throw ShapeError("accumulate_weight_row: size mismatch");
  percentage.assign(k, 0.0);
  average.assign(k, 0.0);
  if (n == 0) return;
  std::vector<double> mean(k);
  for (std::size_t b = 0; b < n; ++b) {
    std::fill(mean.begin(), mean.end(), 0.0);
    for (std::size_t j = 0; j < l; ++j) {
      for (std::size_t d = 0; d < k; ++d) mean[d] += weights[(b * l + j) * k + d];
    }
    for (double& m : mean) m /= static_cast<double>(l);
    const auto arg = static_cast<std::size_t>(std::max_element(mean.begin(), mean.end()) - mean.begin());
    percentage[arg] += 1.0;
    for (std::size_t d = 0; d < k; ++d) average[d] += mean[d];
  }
  for (std::size_t d = 0; d < k; ++d) {
    percentage[d] *= 100.0 / static_cast<double>(n);
    average[d] /= static_cast<double>(n);
  }
}

AdapterWeightStats adapter_weight_stats(const DoPromptModel& model, const SyntheticDataset& data,
                                        std::span<const int> domains) {
  std::vector<std::vector<std::size_t>> rows;
  for (int d : domains) rows.push_back(data.indices_of_domain(d));
  return adapter_weight_stats(model, data, rows, domains);
}

AdapterWeightStats adapter_weight_stats(const DoPromptModel& model, const SyntheticDataset& data,
                                        std::span<const std::vector<std::size_t>> rows,
                                        std::span<const int> row_ids) {
  if (rows.size() != row_ids.size()) throw ContractError("adapter_weight_stats: one id per row required");
  AdapterWeightStats stats;
  const std::size_t k = model.num_domains();
  const std::size_t l = model.prompt_length();
  stats.num_sources = k;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& idx = rows[r];
    if (idx.empty()) {
      stats.warnings.push_back("domain " + std::to_string(row_ids[r]) + " has no images; skipped");
      continue;
    }
    std::vector<Real> weights;
    weights.reserve(idx.size() * l * k);
    for (std::size_t start = 0; start < idx.size(); start += kChunk) {
      const std::span<const std::size_t> chunk(idx.data() + start, std::min(kChunk, idx.size() - start));
      const Tensor w = infer(model, data.images(chunk)).weights;
      auto v = w.values();
      weights.insert(weights.end(), v.begin(), v.end());
    }
    std::vector<double> pct, avg;
    accumulate_weight_row(weights, idx.size(), l, k, pct, avg);
    stats.evaluated.push_back(row_ids[r]);
    stats.counts.push_back(idx.size());
    stats.percentage.insert(stats.percentage.end(), pct.begin(), pct.end());
    stats.average.insert(stats.average.end(), avg.begin(), avg.end());
  }
  return stats;
}

PromptAccuracyTable per_prompt_accuracy_table(const DoPromptModel& model,
                                              const SyntheticDataset& data,
                                              std::span<const std::size_t> indices) {
  if (indices.empty()) throw ContractError("per_prompt_accuracy_table: no images");
  const std::size_t k = model.num_domains();
  PromptAccuracyTable table;
  table.num_classes = model.config.num_classes;
  table.labels = data.labels_of(indices);
  table.columns.push_back("adapted");
  for (std::size_t d = 0; d < k; ++d) table.columns.push_back("prompt_" + std::to_string(d));
  table.logits.resize(k + 1);
  for (std::size_t start = 0; start < indices.size(); start += kChunk) {
    const auto chunk = indices.subspan(start, std::min(kChunk, indices.size() - start));
    const Tensor images = data.images(chunk);
    auto append = [&](std::size_t col, const Tensor& logits) {
      auto v = logits.values();
      table.logits[col].insert(table.logits[col].end(), v.begin(), v.end());
    };
    append(0, infer(model, images).logits);
    for (std::size_t d = 0; d < k; ++d) append(d + 1, infer_with_domain_prompt(model, images, d));
  }
  for (const auto& logits : table.logits) {
    const Tensor t({indices.size(), table.num_classes}, logits);
    table.accuracy.push_back(accuracy_percent(t, table.labels));
  }
  return table;
}

}  // namespace doprompt
