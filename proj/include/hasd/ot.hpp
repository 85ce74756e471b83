#pragma once

#include <string>
#include <vector>

#include "hasd/matrix.hpp"

namespace hasd {

enum class CostMetric { cosine_distance, squared_euclidean };

std::string to_string(CostMetric metric);
CostMetric cost_metric_from_string(const std::string& name);

// Pairwise feature distances between two point clouds sharing a feature
// dimension. Entries are >= 0; cosine distance additionally <= 2.
struct CostMatrix {
    Matrix C;  // n_src x n_tgt
    CostMetric metric = CostMetric::squared_euclidean;
};

enum class SinkhornMode { balanced, partial };

struct SinkhornConfig {
    double epsilon = 0.05;  // entropic weight, > 0
    double tau = 1.0;       // marginal-relaxation weight, used in partial mode
    int max_iters = 5000;
    double tol = 1e-8;
    SinkhornMode mode = SinkhornMode::balanced;
};

// Entropic coupling between source and target points together with the
// quantities the objective decomposes into.
struct TransportPlan {
    Matrix gamma;  // n_src x n_tgt, entries >= 0
    std::vector<double> row_marginal;
    std::vector<double> col_marginal;
    double transport_cost = 0.0;   // sum_ij gamma_ij C_ij
    double entropy_term = 0.0;     // sum_ij gamma_ij (log gamma_ij - 1)
    double partial_penalty = 0.0;  // KL(gamma 1 | a) + KL(gamma^T 1 | b)
    int iterations_used = 0;
    bool converged = false;
};

// cosine_distance: 1 - <s,t>/(|s||t|); squared_euclidean: |s - t|^2.
// Cosine requires every row norm > 1e-12 and reports the offending row.
CostMatrix cost_matrix(const Matrix& src, const Matrix& tgt, CostMetric metric);

// sum_ij g_ij (log g_ij - 1) with the 0 log 0 = 0 convention.
double entropy(const Matrix& gamma);

// Generalized KL: sum_i p_i log(p_i/q_i) - p_i + q_i. Finite for
// unnormalized p; zero iff p = q. Requires q > 0 elementwise.
double kl_divergence(std::span<const double> p, std::span<const double> q);

// Log-domain Sinkhorn-Knopp scaling. Balanced mode alternates exact
// marginal projections of the potentials; partial mode damps each refresh
// by tau/(tau+epsilon), which realizes the KL relaxation of the marginals.
// Never errors on slow convergence: the plan comes back converged=false.
// Optional warm-start potentials shorten re-solves inside adapt::fit.
TransportPlan sinkhorn(const CostMatrix& cost, std::span<const double> a,
                       std::span<const double> b, const SinkhornConfig& cfg,
                       const std::vector<double>* f_init = nullptr,
                       const std::vector<double>* g_init = nullptr,
                       std::vector<double>* f_out = nullptr,
                       std::vector<double>* g_out = nullptr);

// <gamma, C> + epsilon * entropy(gamma) + tau * (KL(gamma 1|a) + KL(gamma^T 1|b)).
// Balanced mode drops the tau term.
double das_loss(const TransportPlan& plan, const CostMatrix& cost,
                std::span<const double> a, std::span<const double> b,
                const SinkhornConfig& cfg);

// Uniform marginal vector 1/n, the default weighting over prototypes.
std::vector<double> uniform_marginal(std::size_t n);

}  // namespace hasd
