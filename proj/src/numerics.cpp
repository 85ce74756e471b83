#include "hasd/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "hasd/error.hpp"

namespace hasd {

double logsumexp(std::span<const double> v) {
    if (v.empty()) throw ArgumentError("logsumexp: empty vector");
    double m = -std::numeric_limits<double>::infinity();
    for (double x : v) m = std::max(m, x);
    if (std::isinf(m) && m < 0) return m;  // all entries -inf: log(0)
    double sum = 0.0;
    for (double x : v) sum += std::exp(x - m);
    return m + std::log(sum);
}

Matrix gram(const Matrix& x) {
    const std::size_t p = x.rows();
    const std::size_t m = x.cols();
    Matrix g(p, p);
#pragma omp parallel for schedule(static) if (p * m >= 4096)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(p); ++i) {
        const auto ri = x.row(static_cast<std::size_t>(i));
        for (std::size_t j = static_cast<std::size_t>(i); j < p; ++j) {
            const auto rj = x.row(j);
            double s = 0.0;
            for (std::size_t k = 0; k < m; ++k) s += ri[k] * rj[k];
            g(static_cast<std::size_t>(i), j) = s;
            g(j, static_cast<std::size_t>(i)) = s;
        }
    }
    return g;
}

double frobenius_distance(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "frobenius_distance");
    double sum = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a.data()[i] - b.data()[i];
        sum += d * d;
    }
    return std::sqrt(sum);
}

std::vector<double> finite_diff_grad(
    const std::function<double(std::span<const double>)>& f,
    std::span<const double> x, double h) {
    if (h <= 0.0) throw ArgumentError("finite_diff_grad: step must be positive");
    std::vector<double> xp(x.begin(), x.end());
    std::vector<double> grad(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double xi = xp[i];
        xp[i] = xi + h;
        const double fp = f(xp);
        xp[i] = xi - h;
        const double fm = f(xp);
        xp[i] = xi;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw NumericError("finite_diff_grad: non-finite evaluation at coordinate " +
                               std::to_string(i));
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    return grad;
}

}  // namespace hasd
