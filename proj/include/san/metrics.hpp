#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "san/data.hpp"
#include "san/losses.hpp"

namespace san {

/// Gaussian fit of a feature set.
struct FeatureStats {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
    std::size_t count = 0;

    Eigen::Index dim() const { return mean.size(); }
};

/// Sample mean and unbiased covariance of the rows of `features` (n × d).
inline FeatureStats fit_stats(const Eigen::MatrixXd& features) {
    if (features.rows() < 2) throw DataError("fit_stats needs at least 2 samples, got " + std::to_string(features.rows()));
    FeatureStats s;
    s.count = static_cast<std::size_t>(features.rows());
    s.mean = features.colwise().mean().transpose();
    const Eigen::MatrixXd centered = features.rowwise() - s.mean.transpose();
    s.cov = (centered.transpose() * centered) / static_cast<double>(features.rows() - 1);
    return s;
}

inline FeatureStats fit_stats(const std::vector<std::vector<double>>& rows) {
    if (rows.empty()) throw DataError("fit_stats needs at least 2 samples, got 0");
    Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].size() != rows[0].size()) throw ShapeError("feature rows differ in length");
        for (std::size_t j = 0; j < rows[i].size(); ++j) m(Eigen::Index(i), Eigen::Index(j)) = rows[i][j];
    }
    return fit_stats(m);
}

namespace detail {

/// Eigenvalues of a symmetric matrix with slightly negative values clipped to
/// zero. Anything below -tol·max(1, |λ|max) is treated as a failure.
inline Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> clipped_eigen(const Eigen::MatrixXd& a, Eigen::VectorXd& values,
                                                                     const char* what) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (a + a.transpose()));
    if (es.info() != Eigen::Success) throw NumericError(std::string("eigendecomposition failed for ") + what);
    values = es.eigenvalues();
    const double scale = std::max(1.0, values.cwiseAbs().maxCoeff());
    for (Eigen::Index i = 0; i < values.size(); ++i) {
        if (values(i) < -1e-8 * scale)
            throw NumericError(std::string(what) + " has a negative eigenvalue " + std::to_string(values(i)));
        values(i) = std::max(values(i), 0.0);
    }
    return es;
}

}  // namespace detail

/// ‖μa − μb‖² + tr(Σa + Σb − 2(Σa Σb)^½). The trace term uses
/// (Σa Σb)^½ ~ (Σa^½ Σb Σa^½)^½, which has the same eigenvalues and stays
/// symmetric.
inline double fid(const FeatureStats& a, const FeatureStats& b) {
    if (a.dim() != b.dim())
        throw ShapeError("fid dimension mismatch: " + std::to_string(a.dim()) + " vs " + std::to_string(b.dim()));
    Eigen::VectorXd va;
    auto ea = detail::clipped_eigen(a.cov, va, "covariance");
    const Eigen::MatrixXd sqrt_a = ea.eigenvectors() * va.cwiseSqrt().asDiagonal() * ea.eigenvectors().transpose();
    Eigen::VectorXd vm;
    detail::clipped_eigen(sqrt_a * b.cov * sqrt_a, vm, "covariance product");
    const double mean_term = (a.mean - b.mean).squaredNorm();
    return mean_term + a.cov.trace() + b.cov.trace() - 2.0 * vm.cwiseSqrt().sum();
}

/// Per-image FID features: global average of the last extractor layer.
template <class T>
Eigen::MatrixXd fid_features(const FeatureExtractor<T>& extractor, const Tensor<T>& images) {
    NoGradGuard ng;
    auto feats = extractor(Var<T>(images));
    const Tensor<T> pooled = ops::global_avg_pool(feats.back()).value();
    const Shape& s = pooled.shape();
    Eigen::MatrixXd m(s[0], s[1]);
    for (int i = 0; i < s[0]; ++i)
        for (int j = 0; j < s[1]; ++j) m(i, j) = pooled[static_cast<std::size_t>(i) * s[1] + j];
    return m;
}

/// Perceptual distance between two batches: per layer, features are scaled
/// to unit length along channels, squared differences are summed over
/// channels and averaged over positions; layers are summed with unit
/// weights. Returns one value per batch item.
template <class T>
std::vector<double> lpips_batch(const FeatureExtractor<T>& extractor, const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a.shape(), b.shape(), "lpips");
    NoGradGuard ng;
    auto fa = extractor(Var<T>(a));
    auto fb = extractor(Var<T>(b));
    const int n = a.shape().n();
    std::vector<double> out(static_cast<std::size_t>(n), 0.0);
    constexpr double eps = 1e-10;
    for (std::size_t l = 0; l < fa.size(); ++l) {
        const Tensor<T>& x = fa[l].value();
        const Tensor<T>& y = fb[l].value();
        const Shape& s = x.shape();
        for (int i = 0; i < n; ++i) {
            double layer = 0;
            for (int h = 0; h < s.h(); ++h)
                for (int w = 0; w < s.w(); ++w) {
                    double nx = 0, ny = 0;
                    for (int c = 0; c < s.c(); ++c) {
                        nx += double(x.at(i, c, h, w)) * x.at(i, c, h, w);
                        ny += double(y.at(i, c, h, w)) * y.at(i, c, h, w);
                    }
                    nx = std::sqrt(nx) + eps;
                    ny = std::sqrt(ny) + eps;
                    for (int c = 0; c < s.c(); ++c) {
                        const double d = x.at(i, c, h, w) / nx - y.at(i, c, h, w) / ny;
                        layer += d * d;
                    }
                }
            out[static_cast<std::size_t>(i)] += layer / (s.h() * s.w());
        }
    }
    return out;
}

template <class T>
double lpips(const FeatureExtractor<T>& extractor, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape().rank() != 4 || a.shape().n() != 1) throw ShapeError("lpips expects single images, got " + a.shape().str());
    return lpips_batch(extractor, a, b)[0];
}

inline double lpips(const FeatureExtractor<float>& extractor, const Image& a, const Image& b) {
    return lpips(extractor, a.tensor(), b.tensor());
}

/// Replaces pixels outside `mask` (N×1×H×W, 0/1) with `fill`.
template <class T>
Tensor<T> mask_fill(const Tensor<T>& images, const Tensor<T>& mask, T fill = T(0)) {
    const Shape& s = images.shape();
    const Shape& m = mask.shape();
    if (m.rank() != 4 || m.n() != s.n() || m.c() != 1 || m.h() != s.h() || m.w() != s.w())
        throw ShapeError("mask " + m.str() + " does not match images " + s.str());
    Tensor<T> out = images;
    for (int i = 0; i < s.n(); ++i)
        for (int c = 0; c < s.c(); ++c)
            for (int h = 0; h < s.h(); ++h)
                for (int w = 0; w < s.w(); ++w)
                    if (mask.at(i, 0, h, w) == T(0)) out.at(i, c, h, w) = fill;
    return out;
}

template <class T>
double mask_lpips(const FeatureExtractor<T>& extractor, const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& mask) {
    return lpips(extractor, mask_fill(a, mask), mask_fill(b, mask));
}

inline double mask_lpips(const FeatureExtractor<float>& extractor, const Image& a, const Image& b, const PoseMask& mask) {
    return mask_lpips(extractor, a.tensor(), b.tensor(), mask.to_tensor<float>());
}

/// Mean absolute error over foreground pixels (mask N×1×H×W), averaged over
/// the three color channels.
template <class T>
double masked_l1(const Tensor<T>& generated, const Tensor<T>& target, const Tensor<T>& mask) {
    require_same_shape(generated.shape(), target.shape(), "masked_l1");
    const Shape& s = generated.shape();
    double acc = 0, count = 0;
    for (int i = 0; i < s.n(); ++i)
        for (int h = 0; h < s.h(); ++h)
            for (int w = 0; w < s.w(); ++w) {
                if (mask.at(i, 0, h, w) == T(0)) continue;
                for (int c = 0; c < s.c(); ++c) acc += std::abs(double(generated.at(i, c, h, w)) - target.at(i, c, h, w));
                count += s.c();
            }
    if (count == 0) throw EmptyResultError("masked_l1: mask has no foreground pixels");
    return acc / count;
}

}  // namespace san
