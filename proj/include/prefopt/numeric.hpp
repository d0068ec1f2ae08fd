#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

namespace prefopt {

// sigma(z), never forming exp of a large positive number
inline double sigmoid(double z) noexcept
{
    if (z >= 0.0) {
        return 1.0 / (1.0 + std::exp(-z));
    }
    const double e = std::exp(z);
    return e / (1.0 + e);
}

// log(1 + e^z) = max(z,0) + log1p(e^{-|z|})
inline double softplus(double z) noexcept
{
    return std::fmax(z, 0.0) + std::log1p(std::exp(-std::fabs(z)));
}

inline double log_sigmoid(double z) noexcept { return -softplus(-z); }

// sigma(z)(1 - sigma(z)) evaluated as sigma(z) sigma(-z)
inline double logistic_curvature(double z) noexcept { return sigmoid(z) * sigmoid(-z); }

// Only for diagnostics; losses never clamp.
inline double clamped_logit(double p) noexcept
{
    constexpr double eps = 1e-15;
    const double q = std::fmin(std::fmax(p, eps), 1.0 - eps);
    return std::log(q) - std::log1p(-q);
}

inline double log_sum_exp(std::span<const double> xs) noexcept
{
    double m = -std::numeric_limits<double>::infinity();
    for (double x : xs) m = std::fmax(m, x);
    if (!std::isfinite(m)) return m;
    double s = 0.0;
    for (double x : xs) s += std::exp(x - m);
    return m + std::log(s);
}

inline std::vector<double> softmax(std::span<const double> xs)
{
    double m = -std::numeric_limits<double>::infinity();
    for (double x : xs) m = std::fmax(m, x);
    std::vector<double> out(xs.size());
    double s = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        out[i] = std::exp(xs[i] - m);
        s += out[i];
    }
    for (double& v : out) v /= s;
    return out;
}

// Neumaier compensated sum; the order of add() calls fixes the result.
class CompensatedSum {
public:
    void add(double x) noexcept
    {
        const double t = sum_ + x;
        if (std::fabs(sum_) >= std::fabs(x)) {
            comp_ += (sum_ - t) + x;
        } else {
            comp_ += (x - t) + sum_;
        }
        sum_ = t;
    }
    double value() const noexcept { return sum_ + comp_; }

private:
    double sum_ = 0.0;
    double comp_ = 0.0;
};

} // namespace prefopt
