#pragma once

#include <cmath>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "brimpr/rng.hpp"
#include "brimpr/tensor.hpp"

namespace brimpr {

/// Per-layer Gaussian moments of pooled features.
struct LayerGaussianStats {
    Tensor mean;  // d-vector
    Tensor std;   // d-vector, entries >= 0
};

/// Precomputed source-side moments: one entry per encoder layer for each
/// modality plus one per joint-module layer. Computed once, then immutable.
struct SourceStatsBank {
    std::vector<LayerGaussianStats> a;
    std::vector<LayerGaussianStats> v;
    std::vector<LayerGaussianStats> joint;
};

struct CovEstimate {
    Tensor full;  // d x d symmetric
    Tensor diag;  // d-vector, the diagonal of full
};

/// Column mean and Bessel-corrected standard deviation of a B x d batch.
/// Welford updates keep a batch of identical rows at exactly zero std.
inline LayerGaussianStats batch_stats(const Tensor& features) {
    if (!features.is_matrix())
        throw std::invalid_argument("batch_stats: expected B x d matrix, got " +
                                    features.shape_str());
    int b = features.rows(), d = features.cols();
    if (b < 2) throw std::invalid_argument("batch_stats: need B >= 2, got B=" + std::to_string(b));
    Tensor mean = Tensor::zeros({d});
    Tensor m2 = Tensor::zeros({d});
    for (int i = 0; i < b; ++i)
        for (int j = 0; j < d; ++j) {
            auto jj = static_cast<std::size_t>(j);
            double x = features.at(i, j);
            double delta = x - mean.values[jj];
            mean.values[jj] += delta / (i + 1);
            m2.values[jj] += delta * (x - mean.values[jj]);
        }
    Tensor sd = std::move(m2);
    for (double& v : sd.values) v = std::sqrt(std::max(v, 0.0) / (b - 1));
    return {std::move(mean), std::move(sd)};
}

/// Layer-averaged sum of Euclidean distances between target and source
/// mean/std vectors: (1/N) sum_i (||mu_t - mu_s|| + ||sigma_t - sigma_s||).
inline double disc(const std::vector<LayerGaussianStats>& source,
                   const std::vector<LayerGaussianStats>& target) {
    if (source.size() != target.size())
        throw std::invalid_argument("disc: layer count mismatch, " +
                                    std::to_string(source.size()) + " vs " +
                                    std::to_string(target.size()));
    if (source.empty()) throw std::invalid_argument("disc: no layers");
    double total = 0.0;
    for (std::size_t i = 0; i < source.size(); ++i) {
        const auto& s = source[i];
        const auto& t = target[i];
        if (s.mean.shape != t.mean.shape || s.std.shape != t.std.shape)
            throw std::invalid_argument("disc: stat dim mismatch at layer " + std::to_string(i));
        double dm = 0.0, ds = 0.0;
        for (std::size_t j = 0; j < s.mean.numel(); ++j) {
            double a = t.mean.values[j] - s.mean.values[j];
            double b = t.std.values[j] - s.std.values[j];
            dm += a * a;
            ds += b * b;
        }
        total += std::sqrt(dm) + std::sqrt(ds);
    }
    return total / static_cast<double>(source.size());
}

/// Unbiased sample covariance of an n x d sample matrix.
inline CovEstimate sample_covariance(const Tensor& x) {
    if (!x.is_matrix())
        throw std::invalid_argument("sample_covariance: expected n x d matrix, got " +
                                    x.shape_str());
    int n = x.rows(), d = x.cols();
    if (n < 2)
        throw std::invalid_argument("sample_covariance: need n >= 2, got n=" + std::to_string(n));
    std::vector<double> mean(static_cast<std::size_t>(d), 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) mean[static_cast<std::size_t>(j)] += x.at(i, j);
    for (double& v : mean) v /= n;
    Tensor full = Tensor::zeros({d, d});
    for (int k = 0; k < n; ++k)
        for (int i = 0; i < d; ++i) {
            double di = x.at(k, i) - mean[static_cast<std::size_t>(i)];
            for (int j = 0; j < d; ++j)
                full.at(i, j) += di * (x.at(k, j) - mean[static_cast<std::size_t>(j)]);
        }
    for (double& v : full.values) v /= (n - 1);
    Tensor diag = Tensor::zeros({d});
    for (int i = 0; i < d; ++i) diag.values[static_cast<std::size_t>(i)] = full.at(i, i);
    return {std::move(full), std::move(diag)};
}

inline void require_symmetric(const Tensor& sigma, const char* who) {
    if (!sigma.is_matrix() || sigma.rows() != sigma.cols())
        throw std::invalid_argument(std::string(who) + ": Sigma must be square, got " +
                                    sigma.shape_str());
    for (int i = 0; i < sigma.rows(); ++i)
        for (int j = 0; j < i; ++j)
            if (std::abs(sigma.at(i, j) - sigma.at(j, i)) > 1e-12)
                throw std::invalid_argument(std::string(who) + ": Sigma not symmetric at (" +
                                            std::to_string(i) + "," + std::to_string(j) + ")");
}

/// Exact expected mean-squared errors of the sample covariance under Gaussian
/// sampling:
///   E||Sigma_hat - Sigma||_F^2 = (||Sigma||_F^2 + tr(Sigma)^2) / (n - 1)
///   E||sigma2_hat - sigma2||_2^2 = 2 sum_i Sigma_ii^2 / (n - 1)
inline std::pair<double, double> theorem1_closed_form(const Tensor& sigma, int n) {
    require_symmetric(sigma, "theorem1_closed_form");
    if (n < 2) throw std::invalid_argument("theorem1_closed_form: need n >= 2");
    int d = sigma.rows();
    double frob2 = 0.0, trace = 0.0, diag2 = 0.0;
    for (int i = 0; i < d; ++i) {
        trace += sigma.at(i, i);
        diag2 += sigma.at(i, i) * sigma.at(i, i);
        for (int j = 0; j < d; ++j) frob2 += sigma.at(i, j) * sigma.at(i, j);
    }
    double frob_mse = (frob2 + trace * trace) / (n - 1);
    double diag_mse = 2.0 * diag2 / (n - 1);
    return {frob_mse, diag_mse};
}

/// Lower-triangular Cholesky factor of a PSD matrix. Pivots below -1e-10 are
/// rejected; tiny negative pivots are clamped to zero.
inline std::optional<Tensor> cholesky_psd(const Tensor& sigma, double tol = 1e-10) {
    require_symmetric(sigma, "cholesky_psd");
    int d = sigma.rows();
    Tensor l = Tensor::zeros({d, d});
    for (int i = 0; i < d; ++i) {
        for (int j = 0; j <= i; ++j) {
            double s = sigma.at(i, j);
            for (int k = 0; k < j; ++k) s -= l.at(i, k) * l.at(j, k);
            if (i == j) {
                if (s < -tol) return std::nullopt;
                l.at(i, i) = std::sqrt(std::max(s, 0.0));
            } else {
                l.at(i, j) = (l.at(j, j) > 0.0) ? s / l.at(j, j) : 0.0;
            }
        }
    }
    return l;
}

/// Monte-Carlo estimate of the Theorem-1 mean-squared errors: draws `trials`
/// independent n-sample Gaussian datasets with covariance Sigma and averages
/// ||Sigma_hat - Sigma||_F^2 and ||diag_hat - diag||_2^2.
inline std::pair<double, double> theorem1_monte_carlo(const Tensor& sigma, int n, int trials,
                                                      Rng& rng) {
    if (trials < 1000)
        throw std::invalid_argument("theorem1_monte_carlo: need trials >= 1000, got " +
                                    std::to_string(trials));
    if (n < 2) throw std::invalid_argument("theorem1_monte_carlo: need n >= 2");
    auto chol = cholesky_psd(sigma);
    if (!chol)
        throw std::invalid_argument("theorem1_monte_carlo: Sigma is not positive semi-definite");
    const Tensor& l = *chol;
    int d = sigma.rows();
    double frob_acc = 0.0, diag_acc = 0.0;
    std::vector<double> z(static_cast<std::size_t>(d));
    Tensor samples = Tensor::zeros({n, d});
    for (int t = 0; t < trials; ++t) {
        for (int k = 0; k < n; ++k) {
            for (int i = 0; i < d; ++i) z[static_cast<std::size_t>(i)] = rng.normal();
            for (int i = 0; i < d; ++i) {
                double s = 0.0;
                for (int j = 0; j <= i; ++j) s += l.at(i, j) * z[static_cast<std::size_t>(j)];
                samples.at(k, i) = s;
            }
        }
        CovEstimate est = sample_covariance(samples);
        double frob = 0.0, diag2 = 0.0;
        for (int i = 0; i < d; ++i) {
            double dd = est.diag.values[static_cast<std::size_t>(i)] - sigma.at(i, i);
            diag2 += dd * dd;
            for (int j = 0; j < d; ++j) {
                double e = est.full.at(i, j) - sigma.at(i, j);
                frob += e * e;
            }
        }
        frob_acc += frob;
        diag_acc += diag2;
    }
    return {frob_acc / trials, diag_acc / trials};
}

/// Entrywise Monte-Carlo moments of the sample covariance estimator:
/// empirical mean and variance of each Sigma_hat_ij over `trials` resamples.
struct CovEntryStats {
    Tensor mean;      // d x d
    Tensor variance;  // d x d
};

inline CovEntryStats mc_covariance_entry_stats(const Tensor& sigma, int n, int trials, Rng& rng) {
    if (trials < 1000)
        throw std::invalid_argument("mc_covariance_entry_stats: need trials >= 1000");
    auto chol = cholesky_psd(sigma);
    if (!chol)
        throw std::invalid_argument("mc_covariance_entry_stats: Sigma is not PSD");
    const Tensor& l = *chol;
    int d = sigma.rows();
    Tensor sum = Tensor::zeros({d, d});
    Tensor sumsq = Tensor::zeros({d, d});
    std::vector<double> z(static_cast<std::size_t>(d));
    Tensor samples = Tensor::zeros({n, d});
    for (int t = 0; t < trials; ++t) {
        for (int k = 0; k < n; ++k) {
            for (int i = 0; i < d; ++i) z[static_cast<std::size_t>(i)] = rng.normal();
            for (int i = 0; i < d; ++i) {
                double s = 0.0;
                for (int j = 0; j <= i; ++j) s += l.at(i, j) * z[static_cast<std::size_t>(j)];
                samples.at(k, i) = s;
            }
        }
        CovEstimate est = sample_covariance(samples);
        for (std::size_t i = 0; i < est.full.numel(); ++i) {
            sum.values[i] += est.full.values[i];
            sumsq.values[i] += est.full.values[i] * est.full.values[i];
        }
    }
    Tensor mean = Tensor::zeros({d, d});
    Tensor var = Tensor::zeros({d, d});
    for (std::size_t i = 0; i < mean.numel(); ++i) {
        mean.values[i] = sum.values[i] / trials;
        var.values[i] = sumsq.values[i] / trials - mean.values[i] * mean.values[i];
    }
    return {std::move(mean), std::move(var)};
}

}  // namespace brimpr
