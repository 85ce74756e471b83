#include "hasd/ot.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "hasd/error.hpp"
#include "hasd/numerics.hpp"

namespace hasd {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_weights(std::span<const double> w, const char* name) {
    double sum = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        if (!(w[i] >= 0.0)) {
            throw ArgumentError(std::string("sinkhorn: ") + name + "[" +
                                std::to_string(i) + "] must be >= 0");
        }
        sum += w[i];
    }
    if (!(sum > 0.0)) {
        throw ArgumentError(std::string("sinkhorn: ") + name + " has zero total mass");
    }
}

std::vector<double> log_or_neg_inf(std::span<const double> w) {
    std::vector<double> lw(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) lw[i] = w[i] > 0.0 ? std::log(w[i]) : -kInf;
    return lw;
}

}  // namespace

std::string to_string(CostMetric metric) {
    return metric == CostMetric::cosine_distance ? "cosine" : "sqeuclidean";
}

CostMetric cost_metric_from_string(const std::string& name) {
    if (name == "cosine") return CostMetric::cosine_distance;
    if (name == "sqeuclidean") return CostMetric::squared_euclidean;
    throw ArgumentError("unknown cost metric '" + name + "' (cosine | sqeuclidean)");
}

CostMatrix cost_matrix(const Matrix& src, const Matrix& tgt, CostMetric metric) {
    if (src.cols() != tgt.cols()) {
        throw ArgumentError("cost_matrix: feature dims differ, " +
                            std::to_string(src.cols()) + " vs " +
                            std::to_string(tgt.cols()));
    }
    if (src.rows() == 0 || tgt.rows() == 0) {
        throw ArgumentError("cost_matrix: empty point set");
    }
    const std::size_t n = src.rows(), m = tgt.rows(), dim = src.cols();
    CostMatrix out;
    out.metric = metric;
    out.C = Matrix(n, m);

    if (metric == CostMetric::cosine_distance) {
        auto norms = [dim](const Matrix& x, const char* side) {
            std::vector<double> r(x.rows());
            for (std::size_t i = 0; i < x.rows(); ++i) {
                double s = 0.0;
                for (std::size_t k = 0; k < dim; ++k) s += x(i, k) * x(i, k);
                r[i] = std::sqrt(s);
                if (!(r[i] > 1e-12)) {
                    throw ArgumentError("cost_matrix: cosine metric requires nonzero rows; " +
                                        std::string(side) + " row " + std::to_string(i) +
                                        " has norm " + std::to_string(r[i]));
                }
            }
            return r;
        };
        const auto sn = norms(src, "src");
        const auto tn = norms(tgt, "tgt");
#pragma omp parallel for schedule(static) if (n * m >= 4096)
        for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
            const auto si = src.row(static_cast<std::size_t>(i));
            for (std::size_t j = 0; j < m; ++j) {
                const auto tj = tgt.row(j);
                double dot = 0.0;
                for (std::size_t k = 0; k < dim; ++k) dot += si[k] * tj[k];
                const double c = 1.0 - dot / (sn[static_cast<std::size_t>(i)] * tn[j]);
                out.C(static_cast<std::size_t>(i), j) = std::clamp(c, 0.0, 2.0);
            }
        }
    } else {
#pragma omp parallel for schedule(static) if (n * m >= 4096)
        for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
            const auto si = src.row(static_cast<std::size_t>(i));
            for (std::size_t j = 0; j < m; ++j) {
                const auto tj = tgt.row(j);
                double s = 0.0;
                for (std::size_t k = 0; k < dim; ++k) {
                    const double d = si[k] - tj[k];
                    s += d * d;
                }
                out.C(static_cast<std::size_t>(i), j) = s;
            }
        }
    }
    return out;
}

double entropy(const Matrix& gamma) {
    const std::size_t n = gamma.rows();
    for (std::size_t i = 0; i < gamma.size(); ++i) {
        if (gamma.data()[i] < 0.0) {
            throw ArgumentError("entropy: negative entry at (" +
                                std::to_string(i / gamma.cols()) + "," +
                                std::to_string(i % gamma.cols()) + ")");
        }
    }
    std::vector<double> row_sums(n, 0.0);
#pragma omp parallel for schedule(static) if (gamma.size() >= 4096)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < gamma.cols(); ++j) {
            const double g = gamma(static_cast<std::size_t>(i), j);
            if (g > 0.0) s += g * (std::log(g) - 1.0);
        }
        row_sums[static_cast<std::size_t>(i)] = s;
    }
    double total = 0.0;
    for (double s : row_sums) total += s;  // fixed-order reduction
    return total;
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) {
        throw ArgumentError("kl_divergence: length mismatch " + std::to_string(p.size()) +
                            " vs " + std::to_string(q.size()));
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (!(q[i] > 0.0)) {
            throw ArgumentError("kl_divergence: q[" + std::to_string(i) +
                                "] must be positive");
        }
        if (p[i] < 0.0) {
            throw ArgumentError("kl_divergence: p[" + std::to_string(i) +
                                "] must be >= 0");
        }
        if (p[i] > 0.0) sum += p[i] * std::log(p[i] / q[i]) - p[i] + q[i];
        else sum += q[i];
    }
    return sum;
}

TransportPlan sinkhorn(const CostMatrix& cost, std::span<const double> a,
                       std::span<const double> b, const SinkhornConfig& cfg,
                       const std::vector<double>* f_init,
                       const std::vector<double>* g_init,
                       std::vector<double>* f_out, std::vector<double>* g_out) {
    const Matrix& C = cost.C;
    const std::size_t n = C.rows(), m = C.cols();
    if (a.size() != n || b.size() != m) {
        throw ArgumentError("sinkhorn: marginal lengths do not match cost matrix");
    }
    check_weights(a, "a");
    check_weights(b, "b");
    if (!(cfg.epsilon > 0.0)) throw ArgumentError("sinkhorn: epsilon must be > 0");
    if (cfg.mode == SinkhornMode::partial && !(cfg.tau > 0.0)) {
        throw ArgumentError("sinkhorn: partial mode requires tau > 0");
    }
    if (cfg.mode == SinkhornMode::balanced) {
        double sa = 0.0, sb = 0.0;
        for (double v : a) sa += v;
        for (double v : b) sb += v;
        if (std::fabs(sa - sb) > 1e-9) {
            throw ArgumentError("sinkhorn: balanced mode needs equal masses, |" +
                                std::to_string(sa) + " - " + std::to_string(sb) +
                                "| > 1e-9");
        }
    }

    const double eps = cfg.epsilon;
    const double damp =
        cfg.mode == SinkhornMode::partial ? cfg.tau / (cfg.tau + eps) : 1.0;
    const auto log_a = log_or_neg_inf(a);
    const auto log_b = log_or_neg_inf(b);

    std::vector<double> f(n, 0.0), g(m, 0.0);
    if (f_init && f_init->size() == n) f = *f_init;
    if (g_init && g_init->size() == m) g = *g_init;
    for (std::size_t i = 0; i < n; ++i)
        if (a[i] == 0.0) f[i] = -kInf;
    for (std::size_t j = 0; j < m; ++j)
        if (b[j] == 0.0) g[j] = -kInf;

    // When the cost spread allows it, the Gibbs kernel exp(-C/eps) is
    // cached once so each log-domain refresh is a plain dot product under
    // a global potential shift instead of n*m exp() calls. Rows whose sum
    // degrades to the subnormal range fall back to the exact per-row
    // max-shifted logsumexp, so the iteration stays the stabilized one.
    double c_min = C(0, 0), c_max = C(0, 0);
    for (double v : C.data()) {
        c_min = std::min(c_min, v);
        c_max = std::max(c_max, v);
    }
    const bool cache_kernel = (c_max - c_min) / eps <= 600.0;
    Matrix kernel;
    if (cache_kernel) {
        kernel = Matrix(n, m);
#pragma omp parallel for schedule(static) if (n * m >= 4096)
        for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(n); ++ii) {
            const auto i = static_cast<std::size_t>(ii);
            for (std::size_t j = 0; j < m; ++j)
                kernel(i, j) = std::exp(-(C(i, j) - c_min) / eps);
        }
    }
    constexpr double kSumFloor = 1e-280;

    std::vector<double> f_prev(n), g_prev(m), row_marg(n);
    std::vector<double> scaled_f(n), scaled_g(m);
    int iters = 0;
    bool converged = false;

    auto lse_row_exact = [&](std::size_t i) {
        double mx = -kInf;
        for (std::size_t j = 0; j < m; ++j) mx = std::max(mx, (g[j] - C(i, j)) / eps);
        double s = 0.0;
        for (std::size_t j = 0; j < m; ++j) s += std::exp((g[j] - C(i, j)) / eps - mx);
        return mx + std::log(s);
    };
    auto lse_col_exact = [&](std::size_t j) {
        double mx = -kInf;
        for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, (f[i] - C(i, j)) / eps);
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += std::exp((f[i] - C(i, j)) / eps - mx);
        return mx + std::log(s);
    };

    for (int it = 1; it <= cfg.max_iters; ++it) {
        iters = it;
        f_prev = f;
        g_prev = g;

        // f_i = damp * (eps log a_i - eps lse_j((g_j - C_ij)/eps))
        if (cache_kernel) {
            double g_max = -kInf;
            for (std::size_t j = 0; j < m; ++j) g_max = std::max(g_max, g[j]);
            for (std::size_t j = 0; j < m; ++j)
                scaled_g[j] = std::isinf(g[j]) ? 0.0 : std::exp((g[j] - g_max) / eps);
            const double shift = (g_max - c_min) / eps;
#pragma omp parallel for schedule(static) if (n * m >= 4096)
            for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(n); ++ii) {
                const auto i = static_cast<std::size_t>(ii);
                if (a[i] == 0.0) continue;
                double s = 0.0;
                const auto kr = kernel.row(i);
                for (std::size_t j = 0; j < m; ++j) s += kr[j] * scaled_g[j];
                const double lse = s > kSumFloor ? shift + std::log(s) : lse_row_exact(i);
                f[i] = damp * (eps * log_a[i] - eps * lse);
            }
            double f_max = -kInf;
            for (std::size_t i = 0; i < n; ++i) f_max = std::max(f_max, f[i]);
            for (std::size_t i = 0; i < n; ++i)
                scaled_f[i] = std::isinf(f[i]) ? 0.0 : std::exp((f[i] - f_max) / eps);
            const double shift_g = (f_max - c_min) / eps;
#pragma omp parallel for schedule(static) if (n * m >= 4096)
            for (std::ptrdiff_t jj = 0; jj < static_cast<std::ptrdiff_t>(m); ++jj) {
                const auto j = static_cast<std::size_t>(jj);
                if (b[j] == 0.0) continue;
                double s = 0.0;
                for (std::size_t i = 0; i < n; ++i) s += kernel(i, j) * scaled_f[i];
                const double lse = s > kSumFloor ? shift_g + std::log(s) : lse_col_exact(j);
                g[j] = damp * (eps * log_b[j] - eps * lse);
            }
        } else {
#pragma omp parallel for schedule(static) if (n * m >= 4096)
            for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(n); ++ii) {
                const auto i = static_cast<std::size_t>(ii);
                if (a[i] > 0.0) f[i] = damp * (eps * log_a[i] - eps * lse_row_exact(i));
            }
#pragma omp parallel for schedule(static) if (n * m >= 4096)
            for (std::ptrdiff_t jj = 0; jj < static_cast<std::ptrdiff_t>(m); ++jj) {
                const auto j = static_cast<std::size_t>(jj);
                if (b[j] > 0.0) g[j] = damp * (eps * log_b[j] - eps * lse_col_exact(j));
            }
        }

        for (std::size_t i = 0; i < n; ++i) {
            if (a[i] > 0.0 && !(std::isfinite(f[i]))) {
                throw NumericError("sinkhorn: non-finite potential f[" + std::to_string(i) +
                                   "] at iteration " + std::to_string(it));
            }
        }
        for (std::size_t j = 0; j < m; ++j) {
            if (b[j] > 0.0 && !(std::isfinite(g[j]))) {
                throw NumericError("sinkhorn: non-finite potential g[" + std::to_string(j) +
                                   "] at iteration " + std::to_string(it));
            }
        }

        if (cfg.mode == SinkhornMode::balanced) {
            // After the g refresh the column marginals match b exactly, so
            // convergence is judged on the row violation. The extra pass is
            // skipped on most iterations once the solve is warmed up.
            const bool check = it <= 8 || it % 4 == 0 || it == cfg.max_iters;
            if (!check) continue;
            if (cache_kernel) {
                double g_max = -kInf;
                for (std::size_t j = 0; j < m; ++j) g_max = std::max(g_max, g[j]);
                for (std::size_t j = 0; j < m; ++j)
                    scaled_g[j] = std::isinf(g[j]) ? 0.0 : std::exp((g[j] - g_max) / eps);
                const double shift = (g_max - c_min) / eps;
#pragma omp parallel for schedule(static) if (n * m >= 4096)
                for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(n); ++ii) {
                    const auto i = static_cast<std::size_t>(ii);
                    double s = 0.0;
                    const auto kr = kernel.row(i);
                    for (std::size_t j = 0; j < m; ++j) s += kr[j] * scaled_g[j];
                    row_marg[i] = (std::isinf(f[i]) || s <= 0.0)
                        ? 0.0
                        : std::exp(f[i] / eps + shift + std::log(s));
                }
            } else {
#pragma omp parallel for schedule(static) if (n * m >= 4096)
                for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(n); ++ii) {
                    const auto i = static_cast<std::size_t>(ii);
                    double s = 0.0;
                    for (std::size_t j = 0; j < m; ++j)
                        s += std::exp((f[i] + g[j] - C(i, j)) / eps);
                    row_marg[i] = s;
                }
            }
            double viol = 0.0;
            for (std::size_t i = 0; i < n; ++i)
                viol = std::max(viol, std::fabs(row_marg[i] - a[i]));
            if (viol <= cfg.tol) {
                converged = true;
                break;
            }
        } else {
            double delta = 0.0;
            for (std::size_t i = 0; i < n; ++i)
                if (a[i] > 0.0) delta = std::max(delta, std::fabs(f[i] - f_prev[i]));
            for (std::size_t j = 0; j < m; ++j)
                if (b[j] > 0.0) delta = std::max(delta, std::fabs(g[j] - g_prev[j]));
            if (delta <= cfg.tol) {
                converged = true;
                break;
            }
        }
    }

    TransportPlan plan;
    plan.gamma = Matrix(n, m);
#pragma omp parallel for schedule(static) if (n * m >= 4096)
    for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(n); ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        for (std::size_t j = 0; j < m; ++j) {
            const double e = (f[i] + g[j] - C(i, j)) / eps;
            plan.gamma(i, j) = std::isinf(e) && e < 0 ? 0.0 : std::exp(e);
        }
    }
    plan.row_marginal.assign(n, 0.0);
    plan.col_marginal.assign(m, 0.0);
    std::vector<double> cost_rows(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double rs = 0.0, cs = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            const double gij = plan.gamma(i, j);
            rs += gij;
            cs += gij * C(i, j);
            plan.col_marginal[j] += gij;
        }
        plan.row_marginal[i] = rs;
        cost_rows[i] = cs;
    }
    for (double v : cost_rows) plan.transport_cost += v;
    plan.entropy_term = entropy(plan.gamma);
    plan.partial_penalty = 0.0;
    {
        // Penalty reported against the requested marginals; zero-mass
        // entries are excluded because generalized KL needs q > 0.
        double pen = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            if (a[i] > 0.0) {
                const double p = plan.row_marginal[i];
                pen += (p > 0.0 ? p * std::log(p / a[i]) - p : 0.0) + a[i];
            }
        }
        for (std::size_t j = 0; j < m; ++j) {
            if (b[j] > 0.0) {
                const double p = plan.col_marginal[j];
                pen += (p > 0.0 ? p * std::log(p / b[j]) - p : 0.0) + b[j];
            }
        }
        plan.partial_penalty = pen;
    }
    plan.iterations_used = iters;
    plan.converged = converged;
    if (f_out) *f_out = f;
    if (g_out) *g_out = g;
    return plan;
}

double das_loss(const TransportPlan& plan, const CostMatrix& cost,
                std::span<const double> a, std::span<const double> b,
                const SinkhornConfig& cfg) {
    require_same_shape(plan.gamma, cost.C, "das_loss");
    const std::size_t n = plan.gamma.rows(), m = plan.gamma.cols();
    std::vector<double> rows(n, 0.0);
#pragma omp parallel for schedule(static) if (n * m >= 4096)
    for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(n); ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        double s = 0.0;
        for (std::size_t j = 0; j < m; ++j) s += plan.gamma(i, j) * cost.C(i, j);
        rows[i] = s;
    }
    double transport = 0.0;
    for (double v : rows) transport += v;

    double loss = transport + cfg.epsilon * entropy(plan.gamma);
    if (cfg.mode == SinkhornMode::partial) {
        std::vector<double> rm(n, 0.0), cm(m, 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) {
                rm[i] += plan.gamma(i, j);
                cm[j] += plan.gamma(i, j);
            }
        loss += cfg.tau * (kl_divergence(rm, a) + kl_divergence(cm, b));
    }
    return loss;
}

std::vector<double> uniform_marginal(std::size_t n) {
    if (n == 0) throw ArgumentError("uniform_marginal: empty");
    return std::vector<double>(n, 1.0 / static_cast<double>(n));
}

}  // namespace hasd
