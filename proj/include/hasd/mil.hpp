#pragma once

#include <optional>
#include <string>
#include <vector>

#include "hasd/matrix.hpp"
#include "hasd/rng.hpp"

namespace hasd {

// One slide: P patch embeddings of dimension M plus an optional binary label.
struct SlideBag {
    std::string slide_id;
    Matrix features;  // P x M
    std::optional<int> label;
};

// Tanh attention (projection V, scoring vector w) over patches, followed by
// a linear head on the attention-weighted bag embedding.
struct MilModel {
    Matrix V;                        // L x M
    std::vector<double> w;           // L
    std::vector<double> clf_weight;  // M
    double clf_bias = 0.0;

    std::size_t hidden_dim() const { return V.rows(); }
    std::size_t feature_dim() const { return V.cols(); }
};

// Gradient of a scalar loss with respect to every model parameter.
struct MilGradient {
    Matrix V;
    std::vector<double> w;
    std::vector<double> clf_weight;
    double clf_bias = 0.0;
};

struct MilTrainConfig {
    int epochs = 600;
    double step_size = 5e-3;
    std::size_t hidden_dim = 64;
    double init_range = 0.05;  // uniform [-r, r] init
};

// softmax over patches of w^T tanh(V r_p). Entries are positive and sum to 1.
std::vector<double> attention_scores(const MilModel& model, const Matrix& bag_features);

// Attention-weighted mean of the patch features.
std::vector<double> aggregate(const MilModel& model, const Matrix& bag_features);
std::vector<double> aggregate(const MilModel& model, const SlideBag& bag);

// sigmoid(clf_weight . aggregate + clf_bias), in (0, 1).
double predict(const MilModel& model, const Matrix& bag_features);
double predict(const MilModel& model, const SlideBag& bag);

// Mean binary cross-entropy of predict over labeled bags.
double bce_loss(const MilModel& model, const std::vector<SlideBag>& bags);

// Analytic gradient of bce_loss via backprop through sigmoid, linear head,
// weighted sum, softmax and tanh.
MilGradient bce_gradient(const MilModel& model, const std::vector<SlideBag>& bags);

// Parameter init uniform in [-r, r], draw order: V row-major, w,
// clf_weight, clf_bias.
MilModel init_model(std::size_t feature_dim, const MilTrainConfig& cfg, Rng& rng);

// Full-batch gradient descent on bce_loss. Deterministic given bag order,
// config and seed. Requires both classes present.
MilModel train_source(const std::vector<SlideBag>& bags, const MilTrainConfig& cfg,
                      Rng& rng);

}  // namespace hasd
