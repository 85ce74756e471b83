#pragma once

#include <span>
#include <vector>

#include "hasd/adapt.hpp"
#include "hasd/matrix.hpp"
#include "hasd/mil.hpp"
#include "hasd/ot.hpp"

// Serial reference implementations: plain scalar loops, no OpenMP, written
// independently of the kernels in src/. Tests use them as oracles and the
// bench tool uses them as the serial baseline. Not linked into the main
// library or the CLI.
namespace hasd::ref {

Matrix gram(const Matrix& x);
double frobenius_distance(const Matrix& a, const Matrix& b);
Matrix cost_matrix(const Matrix& src, const Matrix& tgt, CostMetric metric);
double entropy(const Matrix& gamma);
double kl_divergence(std::span<const double> p, std::span<const double> q);

// <gamma,C> + eps * entropy + tau * (KL(row|a) + KL(col|b)) by direct
// three-term summation.
double das_loss(const Matrix& gamma, const Matrix& cost, std::span<const double> a,
                std::span<const double> b, double eps, double tau, bool partial);

// Per-patch scalar-loop attention, aggregation and prediction.
std::vector<double> attention_scores(const MilModel& model, const Matrix& features);
std::vector<double> aggregate(const MilModel& model, const Matrix& features);
double predict(const MilModel& model, const Matrix& features);

Matrix apply_map(const TransportMap& map, const Matrix& x);
double sgir_loss(const TransportMap& map, const std::vector<Matrix>& blocks);
double pacr_loss(const TransportMap& map, const MilModel& model,
                 const std::vector<Matrix>& blocks);

// O(n^2) pairwise AUROC: wins + half ties over all pos/neg pairs.
double auroc_pairwise(std::span<const double> scores, std::span<const int> labels);

// Exhaustive LP oracle for square balanced problems with uniform
// marginals: minimum of <P/n, C> over all n! permutation couplings.
double min_permutation_cost(const Matrix& cost);

// Serial log-domain Sinkhorn, same update rule as the parallel solver.
TransportPlan sinkhorn(const CostMatrix& cost, std::span<const double> a,
                       std::span<const double> b, const SinkhornConfig& cfg);

// Sum of squared distances of each row to its nearest centroid.
double kmeans_inertia(const Matrix& points, const Matrix& centroids);

}  // namespace hasd::ref
