#pragma once

#include <vector>

#include "hasd/matrix.hpp"
#include "hasd/mil.hpp"
#include "hasd/ot.hpp"
#include "hasd/proto.hpp"
#include "hasd/rng.hpp"

namespace hasd {

// Residual affine transformation r -> r + W r + bias. W = 0, bias = 0 is
// the exact identity, so regularizers start at zero.
struct TransportMap {
    Matrix W;                  // M x M
    std::vector<double> bias;  // M

    static TransportMap identity(std::size_t dim) {
        TransportMap t;
        t.W = Matrix(dim, dim);
        t.bias.assign(dim, 0.0);
        return t;
    }
    std::size_t dim() const { return bias.size(); }
};

struct AdaptConfig {
    double lambda1 = 0.01;  // slide-level Gram preservation weight
    double lambda2 = 0.01;  // patch-level attention consistency weight
    // Inner solver: looser tolerance than a standalone solve, since the
    // coupling only steers gradient steps and is re-solved constantly.
    SinkhornConfig sinkhorn = [] {
        SinkhornConfig s;
        s.tol = 1e-6;
        return s;
    }();
    CostMetric metric = CostMetric::squared_euclidean;
    int steps = 500;
    double step_size = 1e-2;
    int replan_every = 1;
    int decay_every = 200;  // step size halves on this cadence
    double decay = 0.5;
};

struct AdaptStep {
    double total = 0.0;
    double das = 0.0;
    double sgir = 0.0;
    double pacr = 0.0;
    bool plan_converged = false;
};

struct AdaptReport {
    std::vector<AdaptStep> steps;
    TransportMap map;
};

struct LossBreakdown {
    double total = 0.0;
    double das = 0.0;
    double sgir = 0.0;
    double pacr = 0.0;
};

struct MapGradient {
    Matrix W;
    std::vector<double> bias;
};

// Row-wise r + W r + bias.
Matrix apply_map(const TransportMap& map, const Matrix& x);

// sum_n || G(B_n) - G(T(B_n)) ||_F over per-slide prototype blocks.
double sgir_loss(const TransportMap& map, const std::vector<Matrix>& blocks);

// sum_n sum_p (Atten(T(r)) - Atten(r))^2, attention taken within each block.
double pacr_loss(const TransportMap& map, const MilModel& model,
                 const std::vector<Matrix>& blocks);

// das + lambda1 * sgir + lambda2 * pacr with the plan held fixed. The
// transport term is re-evaluated on cost_matrix(T(src), tgt).
LossBreakdown total_loss(const TransportMap& map, const TransportPlan& plan,
                         const std::vector<Matrix>& src_blocks, const Matrix& tgt,
                         const MilModel& model, const AdaptConfig& cfg,
                         std::span<const double> a, std::span<const double> b);

// Analytic gradients w.r.t. (W, bias).
MapGradient sgir_gradient(const TransportMap& map, const std::vector<Matrix>& blocks);
MapGradient pacr_gradient(const TransportMap& map, const MilModel& model,
                          const std::vector<Matrix>& blocks);

// Analytic gradient of total_loss w.r.t. (W, bias), plan fixed.
MapGradient total_loss_gradient(const TransportMap& map, const TransportPlan& plan,
                                const std::vector<Matrix>& src_blocks, const Matrix& tgt,
                                const MilModel& model, const AdaptConfig& cfg);

// Block-coordinate descent: re-solve the coupling every replan_every steps
// (warm-started), otherwise take gradient steps on the map with the plan
// fixed. T starts at identity. rng is reserved for future stochastic
// schedules; the default path draws nothing from it.
AdaptReport fit(const std::vector<Matrix>& src_blocks, const Matrix& tgt_protos,
                const MilModel& model, const AdaptConfig& cfg, Rng& rng);

// Post-adaptation inference: refit only the linear head on the
// attention-aggregated transformed source blocks, attention frozen.
struct HeadRefitConfig {
    int epochs = 500;
    double step_size = 0.5;
};
MilModel refit_head(const MilModel& model, const TransportMap& map,
                    const std::vector<Matrix>& src_blocks,
                    const std::vector<int>& labels, const HeadRefitConfig& cfg);

// Per-slide prototype blocks of a stacked prototype domain.
std::vector<Matrix> slide_blocks(const PrototypeDomain& domain);

}  // namespace hasd
