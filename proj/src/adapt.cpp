#include "hasd/adapt.hpp"

#include <algorithm>
#include <cmath>

#include "hasd/error.hpp"
#include "hasd/numerics.hpp"

namespace hasd {

namespace {

Matrix stack(const std::vector<Matrix>& blocks) {
    std::size_t rows = 0;
    for (const auto& b : blocks) rows += b.rows();
    if (rows == 0) throw ArgumentError("stack: no prototype rows");
    const std::size_t m = blocks.front().cols();
    Matrix out(rows, m);
    std::size_t r = 0;
    for (const auto& b : blocks) {
        if (b.cols() != m) throw ArgumentError("stack: inconsistent feature dims");
        for (std::size_t i = 0; i < b.rows(); ++i, ++r)
            std::copy(b.row(i).begin(), b.row(i).end(), out.row(r).begin());
    }
    return out;
}

// Accumulate dL/dW += dY^T X and dL/dbias += column sums of dY for one
// block, where dY is the loss gradient w.r.t. the transformed rows.
void chain_to_map(const Matrix& d_y, const Matrix& x, MapGradient& grad) {
    const std::size_t rows = x.rows(), m = x.cols();
    for (std::size_t p = 0; p < rows; ++p) {
        const auto dy = d_y.row(p);
        const auto xr = x.row(p);
        for (std::size_t a = 0; a < m; ++a) {
            const double da = dy[a];
            if (da == 0.0) continue;
            grad.bias[a] += da;
            auto gw = grad.W.row(a);
            for (std::size_t bq = 0; bq < m; ++bq) gw[bq] += da * xr[bq];
        }
    }
}

// dL/dY for one slide's Gram term || G(X) - G(Y) ||_F: -2 D Y / ||D||_F
// with D = G(X) - G(Y); zero subgradient at D = 0.
Matrix sgir_block_grad(const Matrix& x, const Matrix& y) {
    const Matrix gx = gram(x);
    const Matrix gy = gram(y);
    Matrix d(gx.rows(), gx.cols());
    double norm_sq = 0.0;
    for (std::size_t i = 0; i < gx.size(); ++i) {
        d.data()[i] = gx.data()[i] - gy.data()[i];
        norm_sq += d.data()[i] * d.data()[i];
    }
    Matrix dy(y.rows(), y.cols());
    if (norm_sq <= 0.0) return dy;
    const double inv_norm = 1.0 / std::sqrt(norm_sq);
    const std::size_t p = y.rows(), m = y.cols();
    for (std::size_t i = 0; i < p; ++i) {
        for (std::size_t k = 0; k < m; ++k) {
            double s = 0.0;
            for (std::size_t j = 0; j < p; ++j) s += d(i, j) * y(j, k);
            dy(i, k) = -2.0 * inv_norm * s;
        }
    }
    return dy;
}

// dL/dY for one slide's attention-consistency term, attention constants
// taken from the untransformed block.
Matrix pacr_block_grad(const MilModel& model, const Matrix& y,
                       const std::vector<double>& attn_ref) {
    const std::size_t p = y.rows(), m = y.cols(), l = model.hidden_dim();

    // Forward on the transformed block, keeping tanh activations.
    Matrix h(p, l);
    std::vector<double> logits(p);
    for (std::size_t i = 0; i < p; ++i) {
        const auto r = y.row(i);
        double s = 0.0;
        for (std::size_t a = 0; a < l; ++a) {
            double t = 0.0;
            for (std::size_t k = 0; k < m; ++k) t += model.V(a, k) * r[k];
            h(i, a) = std::tanh(t);
            s += model.w[a] * h(i, a);
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

    std::vector<double> d_attn(p);
    double weighted = 0.0;
    for (std::size_t i = 0; i < p; ++i) {
        d_attn[i] = 2.0 * (attn[i] - attn_ref[i]);
        weighted += attn[i] * d_attn[i];
    }

    Matrix dy(p, m);
    for (std::size_t i = 0; i < p; ++i) {
        const double ds = attn[i] * (d_attn[i] - weighted);
        if (ds == 0.0) continue;
        for (std::size_t a = 0; a < l; ++a) {
            const double dt = ds * model.w[a] * (1.0 - h(i, a) * h(i, a));
            for (std::size_t k = 0; k < m; ++k) dy(i, k) += dt * model.V(a, k);
        }
    }
    return dy;
}

// dL/dY of the transport term sum_ij gamma_ij c(y_i, z_j), plan fixed.
Matrix das_grad_wrt_transformed(const TransportPlan& plan, const Matrix& y,
                                const Matrix& tgt, CostMetric metric) {
    const std::size_t n = y.rows(), m = tgt.rows(), dim = y.cols();
    Matrix dy(n, dim);
    if (metric == CostMetric::squared_euclidean) {
        // 2 (rho_i y_i - (gamma Z)_i)
#pragma omp parallel for schedule(static) if (n * m >= 2048)
        for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(n); ++ii) {
            const auto i = static_cast<std::size_t>(ii);
            const double rho = plan.row_marginal[i];
            std::vector<double> gz(dim, 0.0);
            for (std::size_t j = 0; j < m; ++j) {
                const double g = plan.gamma(i, j);
                if (g == 0.0) continue;
                const auto z = tgt.row(j);
                for (std::size_t k = 0; k < dim; ++k) gz[k] += g * z[k];
            }
            for (std::size_t k = 0; k < dim; ++k) dy(i, k) = 2.0 * (rho * y(i, k) - gz[k]);
        }
    } else {
        // -m_i/|y_i| + (y_i . m_i) y_i/|y_i|^3, with m_i = sum_j gamma_ij z_j/|z_j|.
        std::vector<double> tnorm(m);
        for (std::size_t j = 0; j < m; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < dim; ++k) s += tgt(j, k) * tgt(j, k);
            tnorm[j] = std::sqrt(s);
        }
#pragma omp parallel for schedule(static) if (n * m >= 2048)
        for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(n); ++ii) {
            const auto i = static_cast<std::size_t>(ii);
            std::vector<double> mi(dim, 0.0);
            for (std::size_t j = 0; j < m; ++j) {
                const double g = plan.gamma(i, j);
                if (g == 0.0) continue;
                const double inv = 1.0 / tnorm[j];
                const auto z = tgt.row(j);
                for (std::size_t k = 0; k < dim; ++k) mi[k] += g * z[k] * inv;
            }
            double ynorm_sq = 0.0, dot = 0.0;
            for (std::size_t k = 0; k < dim; ++k) {
                ynorm_sq += y(i, k) * y(i, k);
                dot += y(i, k) * mi[k];
            }
            const double ynorm = std::sqrt(ynorm_sq);
            const double inv1 = 1.0 / ynorm;
            const double inv3 = inv1 / ynorm_sq;
            for (std::size_t k = 0; k < dim; ++k)
                dy(i, k) = -mi[k] * inv1 + dot * y(i, k) * inv3;
        }
    }
    return dy;
}

}  // namespace

Matrix apply_map(const TransportMap& map, const Matrix& x) {
    const std::size_t m = map.dim();
    if (x.cols() != m) {
        throw ArgumentError("apply_map: feature dim " + std::to_string(x.cols()) +
                            " does not match map dim " + std::to_string(m));
    }
    Matrix y(x.rows(), m);
#pragma omp parallel for schedule(static) if (x.rows() * m >= 4096)
    for (std::ptrdiff_t pi = 0; pi < static_cast<std::ptrdiff_t>(x.rows()); ++pi) {
        const auto i = static_cast<std::size_t>(pi);
        const auto r = x.row(i);
        auto out = y.row(i);
        for (std::size_t a = 0; a < m; ++a) {
            double s = r[a] + map.bias[a];
            const auto wr = map.W.row(a);
            for (std::size_t k = 0; k < m; ++k) s += wr[k] * r[k];
            out[a] = s;
        }
    }
    return y;
}

double sgir_loss(const TransportMap& map, const std::vector<Matrix>& blocks) {
    double total = 0.0;
    for (const auto& block : blocks) {
        total += frobenius_distance(gram(block), gram(apply_map(map, block)));
    }
    return total;
}

double pacr_loss(const TransportMap& map, const MilModel& model,
                 const std::vector<Matrix>& blocks) {
    double total = 0.0;
    for (const auto& block : blocks) {
        const auto before = attention_scores(model, block);
        const auto after = attention_scores(model, apply_map(map, block));
        for (std::size_t p = 0; p < before.size(); ++p) {
            const double d = after[p] - before[p];
            total += d * d;
        }
    }
    return total;
}

LossBreakdown total_loss(const TransportMap& map, const TransportPlan& plan,
                         const std::vector<Matrix>& src_blocks, const Matrix& tgt,
                         const MilModel& model, const AdaptConfig& cfg,
                         std::span<const double> a, std::span<const double> b) {
    LossBreakdown out;
    const Matrix transformed = apply_map(map, stack(src_blocks));
    const CostMatrix cost = cost_matrix(transformed, tgt, cfg.metric);
    out.das = das_loss(plan, cost, a, b, cfg.sinkhorn);
    out.sgir = sgir_loss(map, src_blocks);
    out.pacr = pacr_loss(map, model, src_blocks);
    out.total = out.das + cfg.lambda1 * out.sgir + cfg.lambda2 * out.pacr;
    return out;
}

MapGradient sgir_gradient(const TransportMap& map, const std::vector<Matrix>& blocks) {
    const std::size_t m = map.dim();
    MapGradient grad;
    grad.W = Matrix(m, m);
    grad.bias.assign(m, 0.0);
    for (const auto& block : blocks) {
        chain_to_map(sgir_block_grad(block, apply_map(map, block)), block, grad);
    }
    return grad;
}

MapGradient pacr_gradient(const TransportMap& map, const MilModel& model,
                          const std::vector<Matrix>& blocks) {
    const std::size_t m = map.dim();
    MapGradient grad;
    grad.W = Matrix(m, m);
    grad.bias.assign(m, 0.0);
    for (const auto& block : blocks) {
        const auto attn_ref = attention_scores(model, block);
        chain_to_map(pacr_block_grad(model, apply_map(map, block), attn_ref), block, grad);
    }
    return grad;
}

MapGradient total_loss_gradient(const TransportMap& map, const TransportPlan& plan,
                                const std::vector<Matrix>& src_blocks, const Matrix& tgt,
                                const MilModel& model, const AdaptConfig& cfg) {
    const std::size_t m = map.dim();
    MapGradient grad;
    grad.W = Matrix(m, m);
    grad.bias.assign(m, 0.0);

    const Matrix src = stack(src_blocks);
    const Matrix transformed = apply_map(map, src);
    const Matrix d_das = das_grad_wrt_transformed(plan, transformed, tgt, cfg.metric);
    chain_to_map(d_das, src, grad);

    for (const auto& block : src_blocks) {
        const Matrix y = apply_map(map, block);
        if (cfg.lambda1 != 0.0) {
            Matrix dy = sgir_block_grad(block, y);
            for (double& v : dy.data()) v *= cfg.lambda1;
            chain_to_map(dy, block, grad);
        }
        if (cfg.lambda2 != 0.0) {
            const auto attn_ref = attention_scores(model, block);
            Matrix dy = pacr_block_grad(model, y, attn_ref);
            for (double& v : dy.data()) v *= cfg.lambda2;
            chain_to_map(dy, block, grad);
        }
    }
    return grad;
}

AdaptReport fit(const std::vector<Matrix>& src_blocks, const Matrix& tgt_protos,
                const MilModel& model, const AdaptConfig& cfg, Rng& rng) {
    (void)rng;
    if (src_blocks.empty()) throw ArgumentError("fit: no source blocks");
    if (cfg.replan_every < 1) throw ArgumentError("fit: replan_every must be >= 1");
    if (cfg.steps < 0) throw ArgumentError("fit: steps must be >= 0");
    if (!(cfg.step_size > 0.0)) throw ArgumentError("fit: step_size must be > 0");

    const std::size_t dim = src_blocks.front().cols();
    if (tgt_protos.cols() != dim) {
        throw ArgumentError("fit: source dim " + std::to_string(dim) +
                            " does not match target dim " + std::to_string(tgt_protos.cols()));
    }

    AdaptReport report;
    report.map = TransportMap::identity(dim);
    if (cfg.steps == 0) return report;

    const Matrix src = stack(src_blocks);
    const auto a = uniform_marginal(src.rows());
    const auto b = uniform_marginal(tgt_protos.rows());

    TransportPlan plan;
    std::vector<double> f_warm, g_warm;
    double plan_fixed_terms = 0.0;  // eps*H + tau*KL, constant between re-solves
    report.steps.reserve(static_cast<std::size_t>(cfg.steps));

    for (int step = 0; step < cfg.steps; ++step) {
        const Matrix transformed = apply_map(report.map, src);
        const CostMatrix cost = cost_matrix(transformed, tgt_protos, cfg.metric);

        if (step % cfg.replan_every == 0) {
            try {
                plan = sinkhorn(cost, a, b, cfg.sinkhorn,
                                f_warm.empty() ? nullptr : &f_warm,
                                g_warm.empty() ? nullptr : &g_warm, &f_warm, &g_warm);
            } catch (const NumericError& e) {
                throw NumericError("fit: plan solve failed at step " + std::to_string(step) +
                                   ": " + e.what());
            }
            plan_fixed_terms = cfg.sinkhorn.epsilon * plan.entropy_term;
            if (cfg.sinkhorn.mode == SinkhornMode::partial) {
                std::vector<double> am(a.begin(), a.end()), bm(b.begin(), b.end());
                plan_fixed_terms += cfg.sinkhorn.tau *
                    (kl_divergence(plan.row_marginal, am) +
                     kl_divergence(plan.col_marginal, bm));
            }
        }

        LossBreakdown losses;
        {
            std::vector<double> rows(plan.gamma.rows(), 0.0);
#pragma omp parallel for schedule(static) if (plan.gamma.size() >= 4096)
            for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(plan.gamma.rows());
                 ++ii) {
                const auto i = static_cast<std::size_t>(ii);
                double s = 0.0;
                for (std::size_t j = 0; j < plan.gamma.cols(); ++j)
                    s += plan.gamma(i, j) * cost.C(i, j);
                rows[i] = s;
            }
            double transport = 0.0;
            for (double v : rows) transport += v;
            losses.das = transport + plan_fixed_terms;
        }
        losses.sgir = sgir_loss(report.map, src_blocks);
        losses.pacr = pacr_loss(report.map, model, src_blocks);
        losses.total = losses.das + cfg.lambda1 * losses.sgir + cfg.lambda2 * losses.pacr;
        report.steps.push_back(
            {losses.total, losses.das, losses.sgir, losses.pacr, plan.converged});

        MapGradient grad;
        grad.W = Matrix(dim, dim);
        grad.bias.assign(dim, 0.0);
        chain_to_map(das_grad_wrt_transformed(plan, transformed, tgt_protos, cfg.metric),
                     src, grad);
        for (const auto& block : src_blocks) {
            if (cfg.lambda1 != 0.0) {
                Matrix dy = sgir_block_grad(block, apply_map(report.map, block));
                for (double& v : dy.data()) v *= cfg.lambda1;
                chain_to_map(dy, block, grad);
            }
            if (cfg.lambda2 != 0.0) {
                const auto attn_ref = attention_scores(model, block);
                Matrix dy = pacr_block_grad(model, apply_map(report.map, block), attn_ref);
                for (double& v : dy.data()) v *= cfg.lambda2;
                chain_to_map(dy, block, grad);
            }
        }

        for (std::size_t i = 0; i < grad.W.size(); ++i) {
            if (!std::isfinite(grad.W.data()[i])) {
                throw NumericError("fit: non-finite gradient at step " + std::to_string(step));
            }
        }
        for (double v : grad.bias) {
            if (!std::isfinite(v)) {
                throw NumericError("fit: non-finite gradient at step " + std::to_string(step));
            }
        }

        double lr = cfg.step_size;
        if (cfg.decay_every > 0) {
            for (int s = cfg.decay_every; s <= step; s += cfg.decay_every) lr *= cfg.decay;
        }
        for (std::size_t i = 0; i < grad.W.size(); ++i)
            report.map.W.data()[i] -= lr * grad.W.data()[i];
        for (std::size_t i = 0; i < dim; ++i) report.map.bias[i] -= lr * grad.bias[i];
    }
    return report;
}

MilModel refit_head(const MilModel& model, const TransportMap& map,
                    const std::vector<Matrix>& src_blocks,
                    const std::vector<int>& labels, const HeadRefitConfig& cfg) {
    if (src_blocks.size() != labels.size()) {
        throw ArgumentError("refit_head: block/label count mismatch");
    }
    if (src_blocks.empty()) throw ArgumentError("refit_head: no blocks");
    bool has_pos = false, has_neg = false;
    for (int y : labels) (y ? has_pos : has_neg) = true;
    if (!has_pos || !has_neg) {
        throw ArgumentError("refit_head: labels contain a single class");
    }

    const std::size_t m = model.feature_dim();
    std::vector<std::vector<double>> embeds;
    embeds.reserve(src_blocks.size());
    for (const auto& block : src_blocks) {
        embeds.push_back(aggregate(model, apply_map(map, block)));
    }

    MilModel out = model;
    const double inv_n = 1.0 / static_cast<double>(embeds.size());
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<double> gw(m, 0.0);
        double gb = 0.0;
        for (std::size_t n = 0; n < embeds.size(); ++n) {
            double u = out.clf_bias;
            for (std::size_t k = 0; k < m; ++k) u += out.clf_weight[k] * embeds[n][k];
            const double delta = 1.0 / (1.0 + std::exp(-u)) - static_cast<double>(labels[n]);
            for (std::size_t k = 0; k < m; ++k) gw[k] += inv_n * delta * embeds[n][k];
            gb += inv_n * delta;
        }
        for (std::size_t k = 0; k < m; ++k) out.clf_weight[k] -= cfg.step_size * gw[k];
        out.clf_bias -= cfg.step_size * gb;
    }
    return out;
}

std::vector<Matrix> slide_blocks(const PrototypeDomain& domain) {
    std::vector<Matrix> blocks;
    blocks.reserve(domain.sets.size());
    for (const auto& set : domain.sets) blocks.push_back(set.centroids);
    return blocks;
}

}  // namespace hasd
