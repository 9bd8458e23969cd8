#pragma once

// Density estimation and analysis over root latent codes: Gaussian mixtures
// fitted by EM (full, diagonal, tied and spherical covariances), ancestral
// sampling, component grid search, PCA, clustering and interpolation.
//
// Latent matrices hold one sample per row.

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <istream>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "aetree/errors.hpp"
#include "aetree/geometry.hpp"
#include "aetree/text_io.hpp"

namespace aetree {

using LatentMatrix = Eigen::MatrixXd;
using LatentVector = Eigen::VectorXd;

enum class CovarianceType : std::uint8_t { kFull, kDiag, kTied, kSpherical };

inline const char* covariance_name(CovarianceType t) {
  switch (t) {
    case CovarianceType::kFull: return "full";
    case CovarianceType::kDiag: return "diag";
    case CovarianceType::kTied: return "tied";
    case CovarianceType::kSpherical: return "spherical";
  }
  return "?";
}

inline CovarianceType parse_covariance(std::string_view s) {
  if (s == "full") return CovarianceType::kFull;
  if (s == "diag") return CovarianceType::kDiag;
  if (s == "tied") return CovarianceType::kTied;
  if (s == "spherical") return CovarianceType::kSpherical;
  throw InvalidArgument("unknown covariance type '" + std::string(s) + "'");
}

/// Covariance storage by type:
///   full       covariances[k]  D x D, k < K
///   tied       covariances[0]  D x D
///   diag       variances       K x D
///   spherical  variances       K x 1
struct GmmModel {
  CovarianceType type = CovarianceType::kFull;
  LatentVector weights;
  LatentMatrix means;
  std::vector<LatentMatrix> covariances;
  LatentMatrix variances;

  int components() const { return static_cast<int>(weights.size()); }
  int dim() const { return static_cast<int>(means.cols()); }

  /// Dense covariance of component k.
  LatentMatrix covariance(int k) const {
    const int d = dim();
    switch (type) {
      case CovarianceType::kFull: return covariances[static_cast<std::size_t>(k)];
      case CovarianceType::kTied: return covariances[0];
      case CovarianceType::kDiag: return variances.row(k).transpose().asDiagonal();
      case CovarianceType::kSpherical: return LatentMatrix::Identity(d, d) * variances(k, 0);
    }
    return {};
  }
};

struct GmmFitOptions {
  double covariance_floor = 1e-6;
  double tolerance = 1e-6;
  int max_iterations = 500;
  int kmeans_iterations = 100;
};

/// Diagnostics of one fit. `log_likelihood` holds the mean per-sample value
/// after every E step; `reinitialized` lists components restarted once.
struct GmmFitInfo {
  std::vector<double> log_likelihood;
  int iterations = 0;
  bool converged = false;
  std::vector<int> reinitialized;
};

namespace detail {

inline void check_latents(const LatentMatrix& x) {
  if (x.rows() == 0 || x.cols() == 0) throw InvalidArgument("latent matrix is empty");
  if (!x.allFinite()) throw InvalidArgument("latent matrix has non-finite entries");
}

/// Row-wise log-sum-exp.
inline LatentVector logsumexp_rows(const LatentMatrix& a) {
  LatentVector out(a.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const double m = a.row(i).maxCoeff();
    out[i] = std::isfinite(m) ? m + std::log((a.row(i).array() - m).exp().sum()) : m;
  }
  return out;
}

/// k-means++ seeding followed by Lloyd iterations. Returns hard labels.
inline std::vector<int> kmeans(const LatentMatrix& x, int k, std::mt19937_64& rng, int iterations) {
  const Eigen::Index n = x.rows();
  LatentMatrix centers(k, x.cols());
  std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
  centers.row(0) = x.row(pick(rng));
  LatentVector d2 = (x.rowwise() - centers.row(0)).rowwise().squaredNorm();
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int c = 1; c < k; ++c) {
    const double total = d2.sum();
    Eigen::Index chosen = 0;
    if (total > 0) {
      double target = u(rng) * total;
      for (chosen = 0; chosen < n - 1; ++chosen) {
        target -= d2[chosen];
        if (target < 0) break;
      }
    } else {
      chosen = pick(rng);
    }
    centers.row(c) = x.row(chosen);
    d2 = d2.cwiseMin((x.rowwise() - centers.row(c)).rowwise().squaredNorm());
  }
  std::vector<int> labels(static_cast<std::size_t>(n), -1);
  for (int it = 0; it < iterations; ++it) {
    bool changed = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::Index best = 0;
      (centers.rowwise() - x.row(i)).rowwise().squaredNorm().minCoeff(&best);
      if (labels[static_cast<std::size_t>(i)] != static_cast<int>(best)) {
        labels[static_cast<std::size_t>(i)] = static_cast<int>(best);
        changed = true;
      }
    }
    if (!changed) break;
    LatentMatrix sums = LatentMatrix::Zero(k, x.cols());
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(labels[static_cast<std::size_t>(i)]) += x.row(i);
      ++counts[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])];
    }
    for (int c = 0; c < k; ++c)
      if (counts[static_cast<std::size_t>(c)] > 0) centers.row(c) = sums.row(c) / counts[static_cast<std::size_t>(c)];
  }
  return labels;
}

inline LatentMatrix lower_cholesky(const LatentMatrix& cov) {
  Eigen::LLT<LatentMatrix> llt(cov);
  if (llt.info() != Eigen::Success) throw InvalidArgument("covariance is not positive definite");
  return llt.matrixL();
}

}  // namespace detail

/// N x K matrix of log N(x_i | mu_k, Sigma_k).
inline LatentMatrix component_log_density(const GmmModel& m, const LatentMatrix& x) {
  if (x.cols() != m.dim()) throw InvalidArgument("latent dimension does not match the mixture");
  const int k_count = m.components();
  const double d = static_cast<double>(m.dim());
  const double log2pi = std::log(2.0 * std::numbers::pi);
  LatentMatrix out(x.rows(), k_count);
  std::optional<LatentMatrix> tied_l;
  if (m.type == CovarianceType::kTied) tied_l = detail::lower_cholesky(m.covariances[0]);
  for (int k = 0; k < k_count; ++k) {
    const LatentMatrix centered = x.rowwise() - m.means.row(k);
    LatentVector maha;
    double logdet = 0.0;
    switch (m.type) {
      case CovarianceType::kFull:
      case CovarianceType::kTied: {
        const LatentMatrix l =
            m.type == CovarianceType::kTied ? *tied_l : detail::lower_cholesky(m.covariances[static_cast<std::size_t>(k)]);
        const LatentMatrix y = l.triangularView<Eigen::Lower>().solve(centered.transpose());
        maha = y.colwise().squaredNorm().transpose();
        logdet = 2.0 * l.diagonal().array().log().sum();
        break;
      }
      case CovarianceType::kDiag: {
        const Eigen::RowVectorXd var = m.variances.row(k);
        maha = (centered.array().square().rowwise() / var.array()).rowwise().sum();
        logdet = var.array().log().sum();
        break;
      }
      case CovarianceType::kSpherical: {
        const double var = m.variances(k, 0);
        maha = centered.rowwise().squaredNorm() / var;
        logdet = d * std::log(var);
        break;
      }
    }
    out.col(k) = -0.5 * (maha.array() + d * log2pi + logdet);
  }
  return out;
}

/// Posterior component probabilities; every row sums to 1.
inline LatentMatrix gmm_responsibilities(const GmmModel& m, const LatentMatrix& x,
                                         LatentVector* per_sample_ll = nullptr) {
  LatentMatrix lr = component_log_density(m, x);
  lr.rowwise() += m.weights.array().log().matrix().transpose();
  const LatentVector norm = detail::logsumexp_rows(lr);
  if (per_sample_ll) *per_sample_ll = norm;
  return (lr.colwise() - norm).array().exp();
}

/// Mean per-sample log-likelihood.
inline double gmm_log_likelihood(const GmmModel& m, const LatentMatrix& x) {
  LatentVector ll;
  gmm_responsibilities(m, x, &ll);
  return ll.mean();
}

namespace detail {

inline void m_step(GmmModel& m, const LatentMatrix& x, const LatentMatrix& resp, const LatentVector& nk,
                   double floor) {
  const Eigen::Index n = x.rows(), d = x.cols();
  const int k_count = static_cast<int>(nk.size());
  m.weights = nk / nk.sum();
  m.means = (resp.transpose() * x).array().colwise() / nk.array();
  switch (m.type) {
    case CovarianceType::kFull: {
      m.covariances.assign(static_cast<std::size_t>(k_count), LatentMatrix());
      for (int k = 0; k < k_count; ++k) {
        const LatentMatrix c = x.rowwise() - m.means.row(k);
        LatentMatrix cov = (c.array().colwise() * resp.col(k).array()).matrix().transpose() * c / nk[k];
        cov = 0.5 * (cov + cov.transpose());
        cov.diagonal().array() += floor;
        m.covariances[static_cast<std::size_t>(k)] = std::move(cov);
      }
      break;
    }
    case CovarianceType::kTied: {
      LatentMatrix cov = LatentMatrix::Zero(d, d);
      for (int k = 0; k < k_count; ++k) {
        const LatentMatrix c = x.rowwise() - m.means.row(k);
        cov += (c.array().colwise() * resp.col(k).array()).matrix().transpose() * c;
      }
      cov /= static_cast<double>(n);
      cov = 0.5 * (cov + cov.transpose());
      cov.diagonal().array() += floor;
      m.covariances.assign(1, std::move(cov));
      break;
    }
    case CovarianceType::kDiag:
    case CovarianceType::kSpherical: {
      LatentMatrix var(k_count, d);
      for (int k = 0; k < k_count; ++k) {
        const LatentMatrix c = x.rowwise() - m.means.row(k);
        var.row(k) = (c.array().square().colwise() * resp.col(k).array()).colwise().sum() / nk[k];
      }
      if (m.type == CovarianceType::kDiag) {
        m.variances = var.array() + floor;
      } else {
        m.variances = (var.rowwise().mean().array() + floor).matrix();
      }
      break;
    }
  }
}

}  // namespace detail

/// EM from a k-means++/Lloyd start. Stops when the mean log-likelihood
/// improves by less than `tolerance` or after `max_iterations` E steps. A
/// component whose mass vanishes is restarted once at the worst-explained
/// sample; a second collapse throws ComponentCollapseError.
inline GmmModel gmm_fit(const LatentMatrix& x, int k, CovarianceType type, std::uint64_t seed,
                        const GmmFitOptions& opt = {}, GmmFitInfo* info = nullptr) {
  detail::check_latents(x);
  if (k < 1 || x.rows() <= k) throw InvalidArgument("gmm_fit requires N > K >= 1");
  if (!(opt.covariance_floor > 0) || opt.max_iterations < 1) throw InvalidArgument("invalid GMM fit options");
  const Eigen::Index n = x.rows();
  std::mt19937_64 rng(seed);
  const auto labels = detail::kmeans(x, k, rng, opt.kmeans_iterations);

  LatentMatrix resp = LatentMatrix::Zero(n, k);
  for (Eigen::Index i = 0; i < n; ++i) resp(i, labels[static_cast<std::size_t>(i)]) = 1.0;
  GmmModel m;
  m.type = type;
  GmmFitInfo local;
  GmmFitInfo& fi = info ? *info : local;
  fi = {};
  std::vector<int> restarts(static_cast<std::size_t>(k), 0);
  constexpr double kCollapsed = 1e-10;

  auto repair = [&](LatentVector& nk, const LatentVector* ll) {
    for (int c = 0; c < k; ++c) {
      if (nk[c] >= kCollapsed) continue;
      if (restarts[static_cast<std::size_t>(c)]++ > 0)
        throw ComponentCollapseError("mixture component " + std::to_string(c) + " collapsed twice");
      fi.reinitialized.push_back(c);
      Eigen::Index worst = 0;
      if (ll) {
        ll->minCoeff(&worst);
      } else {
        std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
        worst = pick(rng);
      }
      resp.row(worst).setZero();
      resp(worst, c) = 1.0;
      nk = resp.colwise().sum().transpose();
    }
  };

  LatentVector nk = resp.colwise().sum().transpose();
  repair(nk, nullptr);
  detail::m_step(m, x, resp, nk, opt.covariance_floor);
  for (int it = 0; it < opt.max_iterations; ++it) {
    LatentVector ll;
    resp = gmm_responsibilities(m, x, &ll);
    const double mean_ll = ll.mean();
    if (!std::isfinite(mean_ll)) throw ComponentCollapseError("log-likelihood became non-finite");
    fi.log_likelihood.push_back(mean_ll);
    fi.iterations = it + 1;
    if (it > 0 && std::abs(mean_ll - fi.log_likelihood[fi.log_likelihood.size() - 2]) < opt.tolerance) {
      fi.converged = true;
      break;
    }
    nk = resp.colwise().sum().transpose();
    repair(nk, &ll);
    detail::m_step(m, x, resp, nk, opt.covariance_floor);
  }
  return m;
}

/// Ancestral sampling: a component by weight, then its Gaussian. When
/// `components` is given it receives the component index of every row.
inline LatentMatrix gmm_sample(const GmmModel& m, int n, std::uint64_t seed, std::vector<int>* components = nullptr) {
  if (n < 0) throw InvalidArgument("sample count must be non-negative");
  const int k_count = m.components();
  const Eigen::Index d = m.dim();
  std::vector<LatentMatrix> chol;
  for (int k = 0; k < k_count; ++k) {
    if (m.type == CovarianceType::kTied && k > 0) break;
    if (m.type == CovarianceType::kFull || m.type == CovarianceType::kTied)
      chol.push_back(detail::lower_cholesky(m.covariance(k)));
  }
  std::vector<double> cumulative(static_cast<std::size_t>(k_count));
  double acc = 0.0;
  for (int k = 0; k < k_count; ++k) cumulative[static_cast<std::size_t>(k)] = acc += m.weights[k];
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> z(0.0, 1.0);
  LatentMatrix out(n, d);
  LatentVector e(d);
  if (components) components->assign(static_cast<std::size_t>(n), 0);
  for (int i = 0; i < n; ++i) {
    const double r = u(rng) * acc;
    const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), r);
    const int k = std::min(static_cast<int>(it - cumulative.begin()), k_count - 1);
    if (components) (*components)[static_cast<std::size_t>(i)] = k;
    for (Eigen::Index j = 0; j < d; ++j) e[j] = z(rng);
    LatentVector s;
    switch (m.type) {
      case CovarianceType::kFull: s = chol[static_cast<std::size_t>(k)] * e; break;
      case CovarianceType::kTied: s = chol[0] * e; break;
      case CovarianceType::kDiag: s = m.variances.row(k).transpose().array().sqrt() * e.array(); break;
      case CovarianceType::kSpherical: s = std::sqrt(m.variances(k, 0)) * e; break;
    }
    out.row(i) = m.means.row(k) + s.transpose();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Grid search

struct GridCell {
  int components = 0;
  CovarianceType type = CovarianceType::kFull;
  double jsd = 0.0;
};

struct GridSearchResult {
  std::vector<GridCell> table;
  std::size_t best = 0;
  GmmModel best_model;
};

/// Fits every (K, type) cell in grid order and scores it with `eval`; the
/// first cell with the lowest score wins.
inline GridSearchResult gmm_grid_search(const LatentMatrix& x, std::span<const int> components,
                                        std::span<const CovarianceType> types, std::uint64_t seed,
                                        const std::function<double(const GmmModel&)>& eval,
                                        const GmmFitOptions& opt = {}) {
  if (components.empty() || types.empty()) throw InvalidArgument("grid search needs non-empty grids");
  GridSearchResult r;
  double best = std::numeric_limits<double>::infinity();
  for (int k : components)
    for (CovarianceType t : types) {
      GmmModel m = gmm_fit(x, k, t, seed, opt);
      const double score = eval(m);
      r.table.push_back({k, t, score});
      if (score < best || r.table.size() == 1) {
        best = score;
        r.best = r.table.size() - 1;
        r.best_model = std::move(m);
      }
    }
  return r;
}

inline void write_grid_csv(std::ostream& out, const GridSearchResult& r) {
  out << "K,cov_type,jsd\n";
  for (const auto& c : r.table) out << c.components << ',' << covariance_name(c.type) << ',' << text::fmt(c.jsd) << '\n';
}

// ---------------------------------------------------------------------------
// PCA

struct PcaModel {
  LatentVector mean;
  /// d x D, orthonormal rows in descending variance order.
  LatentMatrix components;
  LatentVector explained_variance;
  double total_variance = 0.0;

  LatentVector explained_variance_ratio() const {
    return total_variance > 0 ? LatentVector(explained_variance / total_variance)
                              : LatentVector(LatentVector::Zero(explained_variance.size()));
  }
};

/// Centered PCA from the eigendecomposition of the sample covariance (divisor
/// N-1). Each component's largest-magnitude entry is made positive.
inline PcaModel pca_fit(const LatentMatrix& x, int d) {
  detail::check_latents(x);
  if (x.rows() < 2) throw InvalidArgument("pca_fit needs at least 2 samples");
  if (d < 1 || d > std::min<Eigen::Index>(x.rows(), x.cols())) throw InvalidArgument("pca dimension out of range");
  PcaModel p;
  p.mean = x.colwise().mean().transpose();
  const LatentMatrix c = x.rowwise() - p.mean.transpose();
  LatentMatrix cov = c.transpose() * c / static_cast<double>(x.rows() - 1);
  cov = 0.5 * (cov + cov.transpose());
  Eigen::SelfAdjointEigenSolver<LatentMatrix> es(cov);
  if (es.info() != Eigen::Success) throw InvalidArgument("pca eigendecomposition failed");
  const Eigen::Index dim = x.cols();
  p.components.resize(d, dim);
  p.explained_variance.resize(d);
  for (int k = 0; k < d; ++k) {
    const Eigen::Index src = dim - 1 - k;
    LatentVector v = es.eigenvectors().col(src);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v[arg] < 0) v = -v;
    p.components.row(k) = v.transpose();
    p.explained_variance[k] = std::max(0.0, es.eigenvalues()[src]);
  }
  p.total_variance = es.eigenvalues().cwiseMax(0.0).sum();
  return p;
}

inline LatentMatrix pca_project(const PcaModel& p, const LatentMatrix& x) {
  if (x.cols() != p.mean.size()) throw InvalidArgument("pca_project: dimension mismatch");
  return (x.rowwise() - p.mean.transpose()) * p.components.transpose();
}

inline LatentMatrix pca_reconstruct(const PcaModel& p, const LatentMatrix& y) {
  if (y.cols() != p.components.rows()) throw InvalidArgument("pca_reconstruct: dimension mismatch");
  return (y * p.components).rowwise() + p.mean.transpose();
}

// ---------------------------------------------------------------------------
// Clustering

inline constexpr int kLayoutFeatureCount = 7;
inline constexpr std::array<const char*, kLayoutFeatureCount> kLayoutFeatureNames{
    "area", "perimeter", "lw_ratio", "rotation", "std_area", "std_perimeter", "std_rotation"};

/// Means of footprint area, perimeter, length/width ratio and rotation, then
/// the population standard deviations of area, perimeter and rotation.
/// Boxes with zero width are left out of the ratio.
inline std::array<double, kLayoutFeatureCount> layout_features(std::span<const Cuboid> set) {
  if (set.empty()) throw InvalidArgument("layout_features: empty layout");
  const double n = static_cast<double>(set.size());
  double area = 0, perim = 0, rot = 0, ratio = 0, ratio_n = 0;
  for (const auto& c : set) {
    area += c.l * c.w;
    perim += 2 * (c.l + c.w);
    rot += c.a;
    if (c.w > 0) {
      ratio += c.l / c.w;
      ratio_n += 1;
    }
  }
  area /= n;
  perim /= n;
  rot /= n;
  double va = 0, vp = 0, vr = 0;
  for (const auto& c : set) {
    va += (c.l * c.w - area) * (c.l * c.w - area);
    vp += (2 * (c.l + c.w) - perim) * (2 * (c.l + c.w) - perim);
    vr += (c.a - rot) * (c.a - rot);
  }
  return {area, perim, ratio_n > 0 ? ratio / ratio_n : 0.0, rot, std::sqrt(va / n), std::sqrt(vp / n),
          std::sqrt(vr / n)};
}

struct ClusterResult {
  PcaModel pca;
  GmmModel gmm;
  std::vector<int> labels;
  std::vector<int> counts;
  /// K x 7 cluster means of the per-layout features.
  LatentMatrix raw_table;
  /// raw_table with every column min-max scaled to [0, 1] over the non-empty
  /// clusters; a constant column maps to 0.
  LatentMatrix table;
};

/// PCA to d dimensions, a full-covariance mixture with K components, hard
/// labels by maximum responsibility, and the per-cluster feature table.
/// `layouts[i]` is the layout whose code is row i.
inline ClusterResult cluster_latents(const LatentMatrix& x, std::span<const std::vector<Cuboid>> layouts, int d, int k,
                                     std::uint64_t seed, const GmmFitOptions& opt = {}) {
  if (static_cast<Eigen::Index>(layouts.size()) != x.rows())
    throw InvalidArgument("cluster_latents: one layout per latent row is required");
  ClusterResult r;
  r.pca = pca_fit(x, d);
  const LatentMatrix y = pca_project(r.pca, x);
  r.gmm = gmm_fit(y, k, CovarianceType::kFull, seed, opt);
  const LatentMatrix resp = gmm_responsibilities(r.gmm, y);
  r.labels.resize(static_cast<std::size_t>(x.rows()));
  r.counts.assign(static_cast<std::size_t>(k), 0);
  r.raw_table = LatentMatrix::Zero(k, kLayoutFeatureCount);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    Eigen::Index best = 0;
    resp.row(i).maxCoeff(&best);
    r.labels[static_cast<std::size_t>(i)] = static_cast<int>(best);
    ++r.counts[static_cast<std::size_t>(best)];
    const auto f = layout_features(layouts[static_cast<std::size_t>(i)]);
    for (int j = 0; j < kLayoutFeatureCount; ++j) r.raw_table(best, j) += f[static_cast<std::size_t>(j)];
  }
  for (int c = 0; c < k; ++c)
    if (r.counts[static_cast<std::size_t>(c)] > 0) r.raw_table.row(c) /= r.counts[static_cast<std::size_t>(c)];
  r.table = LatentMatrix::Zero(k, kLayoutFeatureCount);
  for (int j = 0; j < kLayoutFeatureCount; ++j) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (int c = 0; c < k; ++c)
      if (r.counts[static_cast<std::size_t>(c)] > 0) {
        lo = std::min(lo, r.raw_table(c, j));
        hi = std::max(hi, r.raw_table(c, j));
      }
    if (!(hi > lo)) continue;
    for (int c = 0; c < k; ++c)
      if (r.counts[static_cast<std::size_t>(c)] > 0) r.table(c, j) = (r.raw_table(c, j) - lo) / (hi - lo);
  }
  return r;
}

struct CompositionReport {
  std::vector<double> global;  // fraction of layouts per cluster
  std::vector<std::string> regions;
  /// regions x K, (regional fraction - global fraction) in percentage points.
  LatentMatrix deviation_pp;
};

/// Per-region cluster composition relative to the global baseline. Regions
/// are listed in first-appearance order.
inline CompositionReport composition_deviation(std::span<const int> labels, int k,
                                               std::span<const std::string> region_of) {
  if (labels.size() != region_of.size()) throw InvalidArgument("one region per label is required");
  if (labels.empty() || k < 1) throw InvalidArgument("composition needs labels and K >= 1");
  CompositionReport r;
  r.global.assign(static_cast<std::size_t>(k), 0.0);
  std::map<std::string, std::size_t> index;
  for (const auto& reg : region_of)
    if (index.emplace(reg, r.regions.size()).second) r.regions.push_back(reg);
  LatentMatrix counts = LatentMatrix::Zero(static_cast<Eigen::Index>(r.regions.size()), k);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= k) throw InvalidArgument("label out of range");
    r.global[static_cast<std::size_t>(labels[i])] += 1.0;
    counts(static_cast<Eigen::Index>(index[region_of[i]]), labels[i]) += 1.0;
  }
  for (double& g : r.global) g /= static_cast<double>(labels.size());
  r.deviation_pp.resize(counts.rows(), k);
  for (Eigen::Index reg = 0; reg < counts.rows(); ++reg) {
    const double total = counts.row(reg).sum();
    for (int c = 0; c < k; ++c) r.deviation_pp(reg, c) = 100.0 * (counts(reg, c) / total - r.global[static_cast<std::size_t>(c)]);
  }
  return r;
}

/// Evenly spaced convex combinations from s to t, both endpoints included.
inline std::vector<LatentVector> interpolate(const LatentVector& s, const LatentVector& t, int steps) {
  if (s.size() != t.size()) throw InvalidArgument("interpolate: dimension mismatch");
  if (steps < 2) throw InvalidArgument("interpolate: steps must be at least 2");
  std::vector<LatentVector> out;
  out.reserve(static_cast<std::size_t>(steps));
  for (int k = 0; k < steps; ++k) {
    const double a = static_cast<double>(k) / (steps - 1);
    out.push_back((1.0 - a) * s + a * t);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Files
//
//   aetree-gmm 1
//   type <full|diag|tied|spherical>
//   shape <K> <D>
//   weights <K values>
//   mean <k> <D values>                    (K lines)
//   cov <k> / var <k> followed by rows     (per storage layout)
//   root <k> <6 values>                    (optional, K lines: region box per component)

inline constexpr const char* kGmmMagic = "aetree-gmm";
inline constexpr const char* kPcaMagic = "aetree-pca";

namespace detail {

inline void write_row(std::ostream& out, const auto& row) {
  for (Eigen::Index j = 0; j < row.size(); ++j) out << (j ? " " : "") << text::fmt(row[j]);
  out << '\n';
}

inline LatentVector read_values(text::LineReader& r, std::string& storage, Eigen::Index count, std::size_t skip,
                                const char* what) {
  const auto f = r.fields(storage, what);
  if (static_cast<Eigen::Index>(f.size()) != count + static_cast<Eigen::Index>(skip))
    throw SchemaError(std::string("wrong number of values in ") + what, r.line());
  LatentVector v(count);
  for (Eigen::Index j = 0; j < count; ++j) v[j] = text::parse_double(f[skip + static_cast<std::size_t>(j)], r.line());
  return v;
}

}  // namespace detail

using RootBox = std::array<double, 6>;

/// `roots` is empty or holds one region box per component.
inline void write_gmm(std::ostream& out, const GmmModel& m, std::span<const RootBox> roots = {}) {
  const int k = m.components();
  const int d = m.dim();
  if (!roots.empty() && static_cast<int>(roots.size()) != k)
    throw InvalidArgument("write_gmm: need one root box per component");
  out << kGmmMagic << " 1\n";
  out << "type " << covariance_name(m.type) << '\n';
  out << "shape " << k << ' ' << d << '\n';
  out << "weights ";
  detail::write_row(out, m.weights);
  for (int c = 0; c < k; ++c) {
    out << "mean " << c << ' ';
    detail::write_row(out, m.means.row(c));
  }
  switch (m.type) {
    case CovarianceType::kFull:
    case CovarianceType::kTied: {
      const int blocks = m.type == CovarianceType::kFull ? k : 1;
      for (int c = 0; c < blocks; ++c) {
        out << "cov " << c << '\n';
        for (int i = 0; i < d; ++i) detail::write_row(out, m.covariances[static_cast<std::size_t>(c)].row(i));
      }
      break;
    }
    case CovarianceType::kDiag:
    case CovarianceType::kSpherical:
      for (int c = 0; c < k; ++c) {
        out << "var " << c << ' ';
        detail::write_row(out, m.variances.row(c));
      }
      break;
  }
  for (std::size_t c = 0; c < roots.size(); ++c) {
    out << "root " << c;
    for (double v : roots[c]) out << ' ' << text::fmt(v);
    out << '\n';
  }
  out << "end\n";
}

struct GmmFile {
  GmmModel model;
  std::vector<RootBox> roots;  // empty, or one per component
};

inline GmmFile read_gmm(std::istream& in) {
  text::LineReader r(in);
  std::string line;
  auto f = r.fields(line, "gmm header");
  if (f.size() != 2 || f[0] != kGmmMagic || f[1] != "1") throw SchemaError("expected 'aetree-gmm 1'", r.line());
  GmmFile g;
  f = r.fields(line, "type line");
  if (f.size() != 2 || f[0] != "type") throw SchemaError("expected 'type <name>'", r.line());
  try {
    g.model.type = parse_covariance(f[1]);
  } catch (const InvalidArgument& e) {
    throw SchemaError(e.what(), r.line());
  }
  f = r.fields(line, "shape line");
  if (f.size() != 3 || f[0] != "shape") throw SchemaError("expected 'shape <K> <D>'", r.line());
  const auto k = text::parse_int(f[1], r.line());
  const auto d = text::parse_int(f[2], r.line());
  if (k < 1 || d < 1) throw SchemaError("shape must be positive", r.line());
  auto expect_tag = [&](const char* tag, long long idx) {
    const auto t = r.fields(line, tag);
    const bool inline_values = std::string_view(tag) == "var" || std::string_view(tag) == "mean";
    if (t.size() < 2 || t[0] != tag || text::parse_int(t[1], r.line()) != idx)
      throw SchemaError(std::string("expected '") + tag + " " + std::to_string(idx) + "'", r.line());
    if (!inline_values && t.size() != 2) throw SchemaError("unexpected values after block tag", r.line());
    return t;
  };
  g.model.weights = detail::read_values(r, line, k, 1, "weights");
  g.model.means.resize(k, d);
  for (long long c = 0; c < k; ++c) {
    const auto t = expect_tag("mean", c);
    if (static_cast<long long>(t.size()) != d + 2) throw SchemaError("wrong number of values in mean", r.line());
    for (long long j = 0; j < d; ++j) g.model.means(c, j) = text::parse_double(t[static_cast<std::size_t>(j + 2)], r.line());
  }
  switch (g.model.type) {
    case CovarianceType::kFull:
    case CovarianceType::kTied: {
      const long long blocks = g.model.type == CovarianceType::kFull ? k : 1;
      for (long long c = 0; c < blocks; ++c) {
        expect_tag("cov", c);
        LatentMatrix cov(d, d);
        for (long long i = 0; i < d; ++i) cov.row(i) = detail::read_values(r, line, d, 0, "covariance row").transpose();
        g.model.covariances.push_back(std::move(cov));
      }
      break;
    }
    case CovarianceType::kDiag:
    case CovarianceType::kSpherical: {
      const long long cols = g.model.type == CovarianceType::kDiag ? d : 1;
      g.model.variances.resize(k, cols);
      for (long long c = 0; c < k; ++c) {
        const auto t = expect_tag("var", c);
        if (static_cast<long long>(t.size()) != cols + 2) throw SchemaError("wrong number of variances", r.line());
        for (long long j = 0; j < cols; ++j)
          g.model.variances(c, j) = text::parse_double(t[static_cast<std::size_t>(j + 2)], r.line());
      }
      break;
    }
  }
  f = r.fields(line, "'root' or 'end'");
  while (!f.empty() && f[0] == "root") {
    if (f.size() != 8) throw SchemaError("root needs a component index and 6 values", r.line());
    if (text::parse_int(f[1], r.line()) != static_cast<long long>(g.roots.size()))
      throw SchemaError("root lines must be numbered 0..K-1 in order", r.line());
    RootBox root{};
    for (std::size_t j = 0; j < 6; ++j) root[j] = text::parse_double(f[j + 2], r.line());
    g.roots.push_back(root);
    f = r.fields(line, "'root' or 'end'");
  }
  if (!g.roots.empty() && static_cast<long long>(g.roots.size()) != k)
    throw SchemaError("expected one root line per component", r.line());
  if (f.size() != 1 || f[0] != "end") throw SchemaError("expected 'end'", r.line());
  if (std::abs(g.model.weights.sum() - 1.0) > 1e-9 || (g.model.weights.array() < 0).any())
    throw SchemaError("mixture weights must form a simplex");
  return g;
}

inline void write_pca(std::ostream& out, const PcaModel& p) {
  out << kPcaMagic << " 1\n";
  out << "shape " << p.components.rows() << ' ' << p.components.cols() << '\n';
  out << "total " << text::fmt(p.total_variance) << '\n';
  out << "mean ";
  detail::write_row(out, p.mean);
  out << "variance ";
  detail::write_row(out, p.explained_variance);
  for (Eigen::Index k = 0; k < p.components.rows(); ++k) detail::write_row(out, p.components.row(k));
  out << "end\n";
}

inline PcaModel read_pca(std::istream& in) {
  text::LineReader r(in);
  std::string line;
  auto f = r.fields(line, "pca header");
  if (f.size() != 2 || f[0] != kPcaMagic || f[1] != "1") throw SchemaError("expected 'aetree-pca 1'", r.line());
  f = r.fields(line, "shape line");
  if (f.size() != 3 || f[0] != "shape") throw SchemaError("expected 'shape <d> <D>'", r.line());
  const auto d = text::parse_int(f[1], r.line());
  const auto dim = text::parse_int(f[2], r.line());
  if (d < 1 || dim < d) throw SchemaError("invalid pca shape", r.line());
  PcaModel p;
  f = r.fields(line, "total line");
  if (f.size() != 2 || f[0] != "total") throw SchemaError("expected 'total <value>'", r.line());
  p.total_variance = text::parse_double(f[1], r.line());
  p.mean = detail::read_values(r, line, dim, 1, "mean");
  p.explained_variance = detail::read_values(r, line, d, 1, "variance");
  p.components.resize(d, dim);
  for (long long k = 0; k < d; ++k) p.components.row(k) = detail::read_values(r, line, dim, 0, "component").transpose();
  f = r.fields(line, "'end'");
  if (f.size() != 1 || f[0] != "end") throw SchemaError("expected 'end'", r.line());
  return p;
}

}  // namespace aetree
