#include "hasd/mil.hpp"

#include <algorithm>
#include <cmath>

#include "hasd/error.hpp"

namespace hasd {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// log(1 + e^x) without overflow.
double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

void check_dims(const MilModel& model, const Matrix& features, const char* where) {
    if (features.rows() == 0) {
        throw ArgumentError(std::string(where) + ": bag has no patches");
    }
    if (features.cols() != model.feature_dim()) {
        throw ArgumentError(std::string(where) + ": feature dim " +
                            std::to_string(features.cols()) + " does not match model dim " +
                            std::to_string(model.feature_dim()));
    }
}

struct Forward {
    Matrix h;                  // P x L, tanh(V r_p)
    std::vector<double> attn;  // P
    std::vector<double> z;     // M
    double logit = 0.0;
    double prob = 0.0;
};

Forward forward(const MilModel& model, const Matrix& features) {
    const std::size_t p = features.rows();
    const std::size_t l = model.hidden_dim();
    const std::size_t m = model.feature_dim();

    Forward fw;
    fw.h = Matrix(p, l);
    std::vector<double> logits(p);
#pragma omp parallel for schedule(static) if (p * l * m >= 8192)
    for (std::ptrdiff_t pi = 0; pi < static_cast<std::ptrdiff_t>(p); ++pi) {
        const auto i = static_cast<std::size_t>(pi);
        const auto r = features.row(i);
        double s = 0.0;
        for (std::size_t a = 0; a < l; ++a) {
            double t = 0.0;
            for (std::size_t k = 0; k < m; ++k) t += model.V(a, k) * r[k];
            const double ha = std::tanh(t);
            fw.h(i, a) = ha;
            s += model.w[a] * ha;
        }
        logits[i] = s;
    }

    const double mx = *std::max_element(logits.begin(), logits.end());
    double denom = 0.0;
    fw.attn.resize(p);
    for (std::size_t i = 0; i < p; ++i) {
        fw.attn[i] = std::exp(logits[i] - mx);
        denom += fw.attn[i];
    }
    for (std::size_t i = 0; i < p; ++i) fw.attn[i] /= denom;

    fw.z.assign(m, 0.0);
    for (std::size_t i = 0; i < p; ++i) {
        const auto r = features.row(i);
        for (std::size_t k = 0; k < m; ++k) fw.z[k] += fw.attn[i] * r[k];
    }
    fw.logit = model.clf_bias;
    for (std::size_t k = 0; k < m; ++k) fw.logit += model.clf_weight[k] * fw.z[k];
    fw.prob = sigmoid(fw.logit);
    return fw;
}

}  // namespace

std::vector<double> attention_scores(const MilModel& model, const Matrix& bag_features) {
    check_dims(model, bag_features, "attention_scores");
    return forward(model, bag_features).attn;
}

std::vector<double> aggregate(const MilModel& model, const Matrix& bag_features) {
    check_dims(model, bag_features, "aggregate");
    return forward(model, bag_features).z;
}

std::vector<double> aggregate(const MilModel& model, const SlideBag& bag) {
    return aggregate(model, bag.features);
}

double predict(const MilModel& model, const Matrix& bag_features) {
    check_dims(model, bag_features, "predict");
    return forward(model, bag_features).prob;
}

double predict(const MilModel& model, const SlideBag& bag) {
    return predict(model, bag.features);
}

double bce_loss(const MilModel& model, const std::vector<SlideBag>& bags) {
    if (bags.empty()) throw ArgumentError("bce_loss: no bags");
    double total = 0.0;
    for (const auto& bag : bags) {
        if (!bag.label) {
            throw ArgumentError("bce_loss: bag '" + bag.slide_id + "' has no label");
        }
        check_dims(model, bag.features, "bce_loss");
        const Forward fw = forward(model, bag.features);
        const double y = static_cast<double>(*bag.label);
        // -y log p - (1-y) log(1-p), evaluated from the logit.
        total += y * softplus(-fw.logit) + (1.0 - y) * softplus(fw.logit);
    }
    return total / static_cast<double>(bags.size());
}

MilGradient bce_gradient(const MilModel& model, const std::vector<SlideBag>& bags) {
    if (bags.empty()) throw ArgumentError("bce_gradient: no bags");
    const std::size_t l = model.hidden_dim();
    const std::size_t m = model.feature_dim();

    MilGradient grad;
    grad.V = Matrix(l, m);
    grad.w.assign(l, 0.0);
    grad.clf_weight.assign(m, 0.0);
    grad.clf_bias = 0.0;

    const double inv_n = 1.0 / static_cast<double>(bags.size());
    for (const auto& bag : bags) {
        if (!bag.label) {
            throw ArgumentError("bce_gradient: bag '" + bag.slide_id + "' has no label");
        }
        check_dims(model, bag.features, "bce_gradient");
        const Forward fw = forward(model, bag.features);
        const std::size_t p = bag.features.rows();
        const double delta = fw.prob - static_cast<double>(*bag.label);  // dL/dlogit

        for (std::size_t k = 0; k < m; ++k) grad.clf_weight[k] += inv_n * delta * fw.z[k];
        grad.clf_bias += inv_n * delta;

        // dL/dz then back through softmax attention.
        std::vector<double> dz(m);
        for (std::size_t k = 0; k < m; ++k) dz[k] = delta * model.clf_weight[k];

        std::vector<double> da(p);
        double weighted = 0.0;
        for (std::size_t i = 0; i < p; ++i) {
            const auto r = bag.features.row(i);
            double s = 0.0;
            for (std::size_t k = 0; k < m; ++k) s += dz[k] * r[k];
            da[i] = s;
            weighted += fw.attn[i] * s;
        }
        std::vector<double> ds(p);
        for (std::size_t i = 0; i < p; ++i) ds[i] = fw.attn[i] * (da[i] - weighted);

        // Each thread owns a band of hidden units, so accumulation order
        // per parameter is fixed regardless of the schedule.
#pragma omp parallel for schedule(static) if (p * l * m >= 8192)
        for (std::ptrdiff_t ai = 0; ai < static_cast<std::ptrdiff_t>(l); ++ai) {
            const auto a = static_cast<std::size_t>(ai);
            auto gv = grad.V.row(a);
            double gw = 0.0;
            for (std::size_t i = 0; i < p; ++i) {
                const double h = fw.h(i, a);
                gw += ds[i] * h;
                const double dt = ds[i] * model.w[a] * (1.0 - h * h);
                if (dt == 0.0) continue;
                const auto r = bag.features.row(i);
                for (std::size_t k = 0; k < m; ++k) gv[k] += inv_n * dt * r[k];
            }
            grad.w[a] += inv_n * gw;
        }
    }
    return grad;
}

MilModel init_model(std::size_t feature_dim, const MilTrainConfig& cfg, Rng& rng) {
    if (cfg.hidden_dim == 0) throw ArgumentError("init_model: hidden_dim must be >= 1");
    MilModel model;
    model.V = Matrix(cfg.hidden_dim, feature_dim);
    for (double& v : model.V.data()) v = rng.uniform(-cfg.init_range, cfg.init_range);
    model.w.resize(cfg.hidden_dim);
    for (double& v : model.w) v = rng.uniform(-cfg.init_range, cfg.init_range);
    model.clf_weight.resize(feature_dim);
    for (double& v : model.clf_weight) v = rng.uniform(-cfg.init_range, cfg.init_range);
    model.clf_bias = rng.uniform(-cfg.init_range, cfg.init_range);
    return model;
}

MilModel train_source(const std::vector<SlideBag>& bags, const MilTrainConfig& cfg,
                      Rng& rng) {
    if (bags.size() < 2) throw ArgumentError("train_source: need at least 2 bags");
    bool has_pos = false, has_neg = false;
    for (const auto& bag : bags) {
        if (!bag.label) {
            throw ArgumentError("train_source: bag '" + bag.slide_id + "' has no label");
        }
        (*bag.label ? has_pos : has_neg) = true;
    }
    if (!has_pos || !has_neg) {
        throw ArgumentError("train_source: training set contains a single class");
    }

    MilModel model = init_model(bags.front().features.cols(), cfg, rng);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const MilGradient grad = bce_gradient(model, bags);
        double checksum = grad.clf_bias;
        for (double v : grad.w) checksum += v;
        if (!std::isfinite(checksum)) {
            throw NumericError("train_source: non-finite loss gradient at epoch " +
                               std::to_string(epoch));
        }
        for (std::size_t i = 0; i < model.V.size(); ++i)
            model.V.data()[i] -= cfg.step_size * grad.V.data()[i];
        for (std::size_t i = 0; i < model.w.size(); ++i)
            model.w[i] -= cfg.step_size * grad.w[i];
        for (std::size_t i = 0; i < model.clf_weight.size(); ++i)
            model.clf_weight[i] -= cfg.step_size * grad.clf_weight[i];
        model.clf_bias -= cfg.step_size * grad.clf_bias;
    }
    return model;
}

}  // namespace hasd
