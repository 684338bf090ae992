#include "udc/metric_loss.hpp"

#include <cmath>

#include "udc/error.hpp"

namespace udc {

namespace {

template <typename T>
void check_batch(const BasicFeatureBatch<T>& batch) {
  if (batch.features.rank() != 2 || batch.features.dim(1) != batch.dim) {
    throw ShapeError("feature batch width does not match its dim");
  }
  if (batch.labels.size() != batch.size()) throw ShapeError("feature batch labels length != batch size");
}

// Symmetric matrix of pairwise distances for the whole batch.
template <typename T>
std::vector<double> distance_matrix(const BasicFeatureBatch<T>& batch) {
  const std::size_t n = batch.size();
  std::vector<double> dist(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double d = pairwise_distance<T>(batch.features.row(i), batch.features.row(j), batch.dim);
      dist[i * n + j] = d;
      dist[j * n + i] = d;
    }
  }
  return dist;
}

}  // namespace

void MetricConfig::validate() const {
  if (!std::isfinite(margin) || margin < 0.0) throw InvalidArgument("margin must be finite and >= 0");
  if (!std::isfinite(lambda_weight) || lambda_weight < 0.0) throw InvalidArgument("lambda must be finite and >= 0");
}

ClassPartition ClassPartition::from_labels(std::span<const int> labels) {
  ClassPartition p;
  for (std::size_t i = 0; i < labels.size(); ++i) p.subsets[labels[i]].push_back(i);
  return p;
}

const std::vector<std::size_t>& ClassPartition::members(int k) const {
  auto it = subsets.find(k);
  if (it == subsets.end()) throw InvalidArgument("class " + std::to_string(k) + " not present in partition");
  return it->second;
}

template <typename T>
double pairwise_distance(std::span<const T> a, std::span<const T> b, std::size_t dim) {
  if (dim == 0 || a.size() != dim || b.size() != dim) {
    throw ShapeError("pairwise_distance: vector lengths " + std::to_string(a.size()) + "/" + std::to_string(b.size()) +
                     " do not match dim " + std::to_string(dim));
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < dim; ++i) {
    const double diff = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    sum += diff * diff;
  }
  return sum / static_cast<double>(dim);
}

template <typename T>
double intra_loss(const BasicFeatureBatch<T>& batch, const ClassPartition& partition, int k) {
  check_batch(batch);
  const auto& s = partition.members(k);
  const std::size_t n = s.size();
  if (n < 2) return 0.0;
  double sum = 0.0;
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a + 1; b < n; ++b) {
      sum += pairwise_distance<T>(batch.features.row(s[a]), batch.features.row(s[b]), batch.dim);
    }
  }
  return 2.0 / static_cast<double>(n * n - n) * sum;
}

template <typename T>
double inter_loss(const BasicFeatureBatch<T>& batch, const ClassPartition& partition, int p, int q,
                  double margin) {
  check_batch(batch);
  if (p == q) throw InvalidArgument("inter_loss needs two distinct classes");
  const auto& sp = partition.members(p);
  const auto& sq = partition.members(q);
  double sum = 0.0;
  for (std::size_t i : sp) {
    for (std::size_t j : sq) {
      sum += std::max(0.0, margin - pairwise_distance<T>(batch.features.row(i), batch.features.row(j), batch.dim));
    }
  }
  return sum / static_cast<double>(sp.size() * sq.size());
}

template <typename T>
MetricLossResult<T> metric_loss(const BasicFeatureBatch<T>& batch, const ClassPartition& partition,
                                const MetricConfig& config) {
  check_batch(batch);
  config.validate();
  const std::size_t n = batch.size();
  const std::size_t d = batch.dim;
  const auto dist = distance_matrix(batch);
  // coef[i*n+j]: weight w on D(r_i, r_j) in the loss; gradient wrt r_i is
  // sum_j coef * (2/d) (r_i - r_j).
  std::vector<double> coef(n * n, 0.0);
  MetricLossResult<T> out;

  for (const auto& [k, members] : partition.subsets) {
    const std::size_t m = members.size();
    if (m < 2) continue;
    const double a = 2.0 / static_cast<double>(m * m - m);
    double sum = 0.0;
    for (std::size_t x = 0; x < m; ++x) {
      for (std::size_t y = x + 1; y < m; ++y) {
        const std::size_t i = members[x], j = members[y];
        sum += dist[i * n + j];
        coef[i * n + j] += a;
        coef[j * n + i] += a;
      }
    }
    out.intra_total += a * sum;
  }

  out.inter_skipped = partition.num_classes_present() < 2;
  for (const auto& [k, sk] : partition.subsets) {
    for (const auto& [other, so] : partition.subsets) {
      if (other == k) continue;
      const double w = 1.0 / static_cast<double>(sk.size() * so.size());
      double sum = 0.0;
      for (std::size_t i : sk) {
        for (std::size_t j : so) {
          const double gap = config.margin - dist[i * n + j];
          if (gap > 0.0) {
            sum += gap;
            coef[i * n + j] -= config.lambda_weight * w;
            coef[j * n + i] -= config.lambda_weight * w;
          }
        }
      }
      out.inter_total += w * sum;
    }
  }
  out.loss = out.intra_total + config.lambda_weight * out.inter_total;

  out.dfeatures = BasicTensor<T>({n, d});
  const double scale = 2.0 / static_cast<double>(d);
  std::vector<double> g(d);
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(g.begin(), g.end(), 0.0);
    auto ri = batch.features.row(i);
    for (std::size_t j = 0; j < n; ++j) {
      const double c = coef[i * n + j];
      if (c == 0.0) continue;
      auto rj = batch.features.row(j);
      for (std::size_t e = 0; e < d; ++e) g[e] += c * (static_cast<double>(ri[e]) - static_cast<double>(rj[e]));
    }
    auto dst = out.dfeatures.row(i);
    for (std::size_t e = 0; e < d; ++e) dst[e] = static_cast<T>(scale * g[e]);
  }
  return out;
}

template <typename T>
DistanceStatistics distance_statistics(const BasicFeatureBatch<T>& batch, const ClassPartition& partition) {
  check_batch(batch);
  const std::size_t n = batch.size();
  double intra = 0.0, inter = 0.0;
  DistanceStatistics st;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double d = pairwise_distance<T>(batch.features.row(i), batch.features.row(j), batch.dim);
      if (batch.labels[i] == batch.labels[j]) {
        intra += d;
        ++st.intra_pairs;
      } else {
        inter += d;
        ++st.inter_pairs;
      }
    }
  }
  if (st.intra_pairs > 0) st.mean_intra = intra / static_cast<double>(st.intra_pairs);
  if (partition.num_classes_present() >= 2 && st.inter_pairs > 0) st.mean_inter = inter / static_cast<double>(st.inter_pairs);
  if (st.mean_intra && st.mean_inter && *st.mean_inter > 0.0) st.ratio = *st.mean_intra / *st.mean_inter;
  return st;
}

#define UDC_INSTANTIATE_METRIC(T)                                                                             \
  template double pairwise_distance<T>(std::span<const T>, std::span<const T>, std::size_t);                   \
  template double intra_loss<T>(const BasicFeatureBatch<T>&, const ClassPartition&, int);                      \
  template double inter_loss<T>(const BasicFeatureBatch<T>&, const ClassPartition&, int, int, double);         \
  template MetricLossResult<T> metric_loss<T>(const BasicFeatureBatch<T>&, const ClassPartition&,              \
                                              const MetricConfig&);                                           \
  template DistanceStatistics distance_statistics<T>(const BasicFeatureBatch<T>&, const ClassPartition&);

UDC_INSTANTIATE_METRIC(float)
UDC_INSTANTIATE_METRIC(double)

#undef UDC_INSTANTIATE_METRIC

}  // namespace udc
