#include "hasd/ref.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "hasd/error.hpp"

namespace hasd::ref {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
}

Matrix gram(const Matrix& x) {
    Matrix g(x.rows(), x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.rows(); ++j)
            for (std::size_t k = 0; k < x.cols(); ++k) g(i, j) += x(i, k) * x(j, k);
    return g;
}

double frobenius_distance(const Matrix& a, const Matrix& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) {
            const double d = a(i, j) - b(i, j);
            s += d * d;
        }
    return std::sqrt(s);
}

Matrix cost_matrix(const Matrix& src, const Matrix& tgt, CostMetric metric) {
    Matrix c(src.rows(), tgt.rows());
    for (std::size_t i = 0; i < src.rows(); ++i) {
        for (std::size_t j = 0; j < tgt.rows(); ++j) {
            if (metric == CostMetric::squared_euclidean) {
                double s = 0.0;
                for (std::size_t k = 0; k < src.cols(); ++k) {
                    const double d = src(i, k) - tgt(j, k);
                    s += d * d;
                }
                c(i, j) = s;
            } else {
                double dot = 0.0, ni = 0.0, nj = 0.0;
                for (std::size_t k = 0; k < src.cols(); ++k) {
                    dot += src(i, k) * tgt(j, k);
                    ni += src(i, k) * src(i, k);
                    nj += tgt(j, k) * tgt(j, k);
                }
                c(i, j) = std::clamp(1.0 - dot / (std::sqrt(ni) * std::sqrt(nj)), 0.0, 2.0);
            }
        }
    }
    return c;
}

double entropy(const Matrix& gamma) {
    double s = 0.0;
    for (std::size_t i = 0; i < gamma.rows(); ++i)
        for (std::size_t j = 0; j < gamma.cols(); ++j) {
            const double g = gamma(i, j);
            if (g > 0.0) s += g * (std::log(g) - 1.0);
        }
    return s;
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] > 0.0) s += p[i] * std::log(p[i] / q[i]) - p[i] + q[i];
        else s += q[i];
    }
    return s;
}

double das_loss(const Matrix& gamma, const Matrix& cost, std::span<const double> a,
                std::span<const double> b, double eps, double tau, bool partial) {
    double transport = 0.0;
    for (std::size_t i = 0; i < gamma.rows(); ++i)
        for (std::size_t j = 0; j < gamma.cols(); ++j) transport += gamma(i, j) * cost(i, j);
    double loss = transport + eps * ref::entropy(gamma);
    if (partial) {
        std::vector<double> rm(gamma.rows(), 0.0), cm(gamma.cols(), 0.0);
        for (std::size_t i = 0; i < gamma.rows(); ++i)
            for (std::size_t j = 0; j < gamma.cols(); ++j) {
                rm[i] += gamma(i, j);
                cm[j] += gamma(i, j);
            }
        loss += tau * (ref::kl_divergence(rm, a) + ref::kl_divergence(cm, b));
    }
    return loss;
}

std::vector<double> attention_scores(const MilModel& model, const Matrix& features) {
    const std::size_t p = features.rows();
    std::vector<double> logits(p);
    for (std::size_t i = 0; i < p; ++i) {
        double s = 0.0;
        for (std::size_t a = 0; a < model.w.size(); ++a) {
            double t = 0.0;
            for (std::size_t k = 0; k < features.cols(); ++k)
                t += model.V(a, k) * features(i, k);
            s += model.w[a] * std::tanh(t);
        }
        logits[i] = s;
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    std::vector<double> attn(p);
    double denom = 0.0;
    for (std::size_t i = 0; i < p; ++i) {
        attn[i] = std::exp(logits[i] - mx);
        denom += attn[i];
    }
    for (std::size_t i = 0; i < p; ++i) attn[i] /= denom;
    return attn;
}

std::vector<double> aggregate(const MilModel& model, const Matrix& features) {
    const auto attn = ref::attention_scores(model, features);
    std::vector<double> z(features.cols(), 0.0);
    for (std::size_t i = 0; i < features.rows(); ++i)
        for (std::size_t k = 0; k < features.cols(); ++k)
            z[k] += attn[i] * features(i, k);
    return z;
}

double predict(const MilModel& model, const Matrix& features) {
    const auto z = ref::aggregate(model, features);
    double u = model.clf_bias;
    for (std::size_t k = 0; k < z.size(); ++k) u += model.clf_weight[k] * z[k];
    return 1.0 / (1.0 + std::exp(-u));
}

Matrix apply_map(const TransportMap& map, const Matrix& x) {
    Matrix y(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t a = 0; a < x.cols(); ++a) {
            double s = x(i, a) + map.bias[a];
            for (std::size_t k = 0; k < x.cols(); ++k) s += map.W(a, k) * x(i, k);
            y(i, a) = s;
        }
    return y;
}

double sgir_loss(const TransportMap& map, const std::vector<Matrix>& blocks) {
    double total = 0.0;
    for (const auto& block : blocks)
        total += ref::frobenius_distance(ref::gram(block), ref::gram(ref::apply_map(map, block)));
    return total;
}

double pacr_loss(const TransportMap& map, const MilModel& model,
                 const std::vector<Matrix>& blocks) {
    double total = 0.0;
    for (const auto& block : blocks) {
        const auto before = ref::attention_scores(model, block);
        const auto after = ref::attention_scores(model, ref::apply_map(map, block));
        for (std::size_t p = 0; p < before.size(); ++p)
            total += (after[p] - before[p]) * (after[p] - before[p]);
    }
    return total;
}

double auroc_pairwise(std::span<const double> scores, std::span<const int> labels) {
    double wins = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] != 1) continue;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (labels[j] != 0) continue;
            ++pairs;
            if (scores[i] > scores[j]) wins += 1.0;
            else if (scores[i] == scores[j]) wins += 0.5;
        }
    }
    if (pairs == 0) throw ArgumentError("auroc_pairwise: both classes must be present");
    return wins / static_cast<double>(pairs);
}

double min_permutation_cost(const Matrix& cost) {
    const std::size_t n = cost.rows();
    if (n != cost.cols()) throw ArgumentError("min_permutation_cost: square matrix only");
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    double best = kInf;
    do {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += cost(i, perm[i]);
        best = std::min(best, s);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best / static_cast<double>(n);  // coupling mass 1/n on each match
}

TransportPlan sinkhorn(const CostMatrix& cost, std::span<const double> a,
                       std::span<const double> b, const SinkhornConfig& cfg) {
    const Matrix& C = cost.C;
    const std::size_t n = C.rows(), m = C.cols();
    const double eps = cfg.epsilon;
    const double damp =
        cfg.mode == SinkhornMode::partial ? cfg.tau / (cfg.tau + eps) : 1.0;

    std::vector<double> f(n, 0.0), g(m, 0.0), f_prev(n), g_prev(m);
    for (std::size_t i = 0; i < n; ++i)
        if (a[i] == 0.0) f[i] = -kInf;
    for (std::size_t j = 0; j < m; ++j)
        if (b[j] == 0.0) g[j] = -kInf;

    auto lse_row = [&](std::size_t i) {
        double mx = -kInf;
        for (std::size_t j = 0; j < m; ++j) mx = std::max(mx, (g[j] - C(i, j)) / eps);
        double s = 0.0;
        for (std::size_t j = 0; j < m; ++j) s += std::exp((g[j] - C(i, j)) / eps - mx);
        return mx + std::log(s);
    };
    auto lse_col = [&](std::size_t j) {
        double mx = -kInf;
        for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, (f[i] - C(i, j)) / eps);
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += std::exp((f[i] - C(i, j)) / eps - mx);
        return mx + std::log(s);
    };

    bool converged = false;
    int iters = 0;
    for (int it = 1; it <= cfg.max_iters; ++it) {
        iters = it;
        f_prev = f;
        g_prev = g;
        for (std::size_t i = 0; i < n; ++i)
            if (a[i] > 0.0) f[i] = damp * (eps * std::log(a[i]) - eps * lse_row(i));
        for (std::size_t j = 0; j < m; ++j)
            if (b[j] > 0.0) g[j] = damp * (eps * std::log(b[j]) - eps * lse_col(j));

        if (cfg.mode == SinkhornMode::balanced) {
            double viol = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                double s = 0.0;
                for (std::size_t j = 0; j < m; ++j)
                    s += std::exp((f[i] + g[j] - C(i, j)) / eps);
                viol = std::max(viol, std::fabs(s - a[i]));
            }
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
    plan.row_marginal.assign(n, 0.0);
    plan.col_marginal.assign(m, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            const double e = (f[i] + g[j] - C(i, j)) / eps;
            const double v = std::isinf(e) && e < 0 ? 0.0 : std::exp(e);
            plan.gamma(i, j) = v;
            plan.row_marginal[i] += v;
            plan.col_marginal[j] += v;
            plan.transport_cost += v * C(i, j);
        }
    plan.entropy_term = ref::entropy(plan.gamma);
    plan.iterations_used = iters;
    plan.converged = converged;
    return plan;
}

double kmeans_inertia(const Matrix& points, const Matrix& centroids) {
    double total = 0.0;
    for (std::size_t i = 0; i < points.rows(); ++i) {
        double best = kInf;
        for (std::size_t c = 0; c < centroids.rows(); ++c) {
            double d = 0.0;
            for (std::size_t k = 0; k < points.cols(); ++k) {
                const double x = points(i, k) - centroids(c, k);
                d += x * x;
            }
            best = std::min(best, d);
        }
        total += best;
    }
    return total;
}

}  // namespace hasd::ref
