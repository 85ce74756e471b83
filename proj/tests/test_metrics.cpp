#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "hasd/error.hpp"
#include "hasd/metrics.hpp"
#include "hasd/ref.hpp"
#include "testutil.hpp"

#include <json.hpp>

using namespace hasd;
namespace tu = testutil;

TEST_CASE("auroc on simple rankings") {
    CHECK(auroc(std::vector<double>{0.9, 0.1}, std::vector<int>{1, 0}) == 1.0);
    CHECK(auroc(std::vector<double>{0.1, 0.9}, std::vector<int>{1, 0}) == 0.0);
    CHECK(auroc(std::vector<double>{0.5, 0.5, 0.5, 0.5}, std::vector<int>{1, 0, 1, 0}) == 0.5);
    CHECK_THROWS_AS(auroc(std::vector<double>{0.5, 0.4}, std::vector<int>{1, 1}), ArgumentError);
    CHECK_THROWS_AS(auroc(std::vector<double>{0.5}, std::vector<int>{1, 0}), ArgumentError);
    CHECK_THROWS_AS(auroc(std::vector<double>{0.5, 0.4}, std::vector<int>{1, 2}), ArgumentError);
}

TEST_CASE("auroc equals the pairwise-count oracle, ties included") {
    Rng rng(7);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 20;
        std::vector<double> scores(n);
        std::vector<int> labels(n);
        bool pos = false, neg = false;
        for (std::size_t i = 0; i < n; ++i) {
            // Half the trials quantize scores so ties actually occur.
            scores[i] = trial % 2 == 0 ? rng.uniform() : std::floor(rng.uniform() * 5.0) / 5.0;
            labels[i] = rng.uniform() < 0.4 ? 1 : 0;
            (labels[i] ? pos : neg) = true;
        }
        if (!pos || !neg) continue;
        CHECK(auroc(scores, labels) == ref::auroc_pairwise(scores, labels));
    }
}

TEST_CASE("auroc is invariant under strictly increasing transforms") {
    Rng rng(11);
    std::vector<double> scores(30);
    std::vector<int> labels(30);
    for (std::size_t i = 0; i < 30; ++i) {
        scores[i] = rng.uniform(-2.0, 2.0);
        labels[i] = i % 3 == 0;
    }
    std::vector<double> warped(30);
    for (std::size_t i = 0; i < 30; ++i) warped[i] = std::exp(scores[i]);
    CHECK(auroc(scores, labels) == auroc(warped, labels));
}

TEST_CASE("flipping scores flips auroc on tie-free inputs") {
    Rng rng(13);
    std::vector<double> scores(25);
    std::vector<int> labels(25);
    for (std::size_t i = 0; i < 25; ++i) {
        scores[i] = rng.uniform();
        labels[i] = i % 2;
    }
    std::vector<double> flipped(25);
    for (std::size_t i = 0; i < 25; ++i) flipped[i] = 1.0 - scores[i];
    CHECK(auroc(flipped, labels) == 1.0 - auroc(scores, labels));
}

TEST_CASE("alignment diagnostics recompute their defining quantities") {
    Rng rng(17);
    const std::size_t dim = 4;
    std::vector<Matrix> blocks{tu::random_matrix(3, dim, rng), tu::random_matrix(3, dim, rng)};
    Matrix tgt = tu::random_matrix(6, dim, rng);
    const MilModel model = tu::random_model(3, dim, rng);
    const auto a = uniform_marginal(6);
    const auto b = uniform_marginal(6);

    SUBCASE("identity map on identical domains scores zero everywhere") {
        Matrix stacked(6, dim);
        std::size_t r = 0;
        for (const auto& blk : blocks)
            for (std::size_t i = 0; i < blk.rows(); ++i, ++r)
                std::copy(blk.row(i).begin(), blk.row(i).end(), stacked.row(r).begin());

        const TransportMap id = TransportMap::identity(dim);
        SinkhornConfig scfg;
        scfg.epsilon = 0.05;
        const auto plan =
            sinkhorn(cost_matrix(stacked, stacked, CostMetric::squared_euclidean), a, b, scfg);
        const auto diag = alignment_diagnostics(id, plan, blocks, stacked, model,
                                                CostMetric::squared_euclidean, a, b);
        CHECK(diag.mean_gram_distortion == 0.0);
        CHECK(diag.mean_attention_divergence == 0.0);
        CHECK(diag.marginal_violation <= scfg.tol * 10);
    }

    SUBCASE("random instance matches the module-level oracles") {
        const TransportMap map = tu::random_map(dim, rng, 0.2);
        Matrix stacked(6, dim);
        std::size_t r = 0;
        for (const auto& blk : blocks)
            for (std::size_t i = 0; i < blk.rows(); ++i, ++r)
                std::copy(blk.row(i).begin(), blk.row(i).end(), stacked.row(r).begin());
        SinkhornConfig scfg;
        scfg.epsilon = 0.1;
        const auto cost =
            cost_matrix(apply_map(map, stacked), tgt, CostMetric::squared_euclidean);
        const auto plan = sinkhorn(cost, a, b, scfg);
        const auto diag = alignment_diagnostics(map, plan, blocks, tgt, model,
                                                CostMetric::squared_euclidean, a, b);

        CHECK(diag.mean_gram_distortion ==
              doctest::Approx(ref::sgir_loss(map, blocks) / 2.0).epsilon(1e-12));
        CHECK(diag.mean_attention_divergence ==
              doctest::Approx(ref::pacr_loss(map, model, blocks) / 2.0).epsilon(1e-12));

        double mass = 0.0, transport = 0.0;
        for (std::size_t i = 0; i < plan.gamma.rows(); ++i)
            for (std::size_t j = 0; j < plan.gamma.cols(); ++j) {
                mass += plan.gamma(i, j);
                transport += plan.gamma(i, j) * cost.C(i, j);
            }
        CHECK(diag.mean_transport_cost == doctest::Approx(transport / mass).epsilon(1e-12));
        CHECK(diag.mean_transport_cost >= 0.0);
        CHECK(diag.marginal_violation >= 0.0);
    }
}

TEST_CASE("evaluation report JSON carries exact keys in order") {
    EvalReport report;
    report.auroc = 0.75;
    report.n_pos = 3;
    report.n_neg = 5;

    SUBCASE("without alignment") {
        const auto doc = nlohmann::ordered_json::parse(report_to_json(report));
        std::vector<std::string> keys;
        for (auto it = doc.begin(); it != doc.end(); ++it) keys.push_back(it.key());
        CHECK(keys == std::vector<std::string>{"auroc", "n_pos", "n_neg", "alignment"});
        CHECK(doc["alignment"].is_null());
        CHECK(doc["auroc"] == 0.75);
    }

    SUBCASE("with alignment") {
        report.alignment = AlignmentDiagnostics{1.5, 1e-7, 0.25, 0.01};
        const auto doc = nlohmann::ordered_json::parse(report_to_json(report));
        std::vector<std::string> keys;
        for (auto it = doc["alignment"].begin(); it != doc["alignment"].end(); ++it)
            keys.push_back(it.key());
        CHECK(keys == std::vector<std::string>{"mean_transport_cost", "marginal_violation",
                                               "mean_gram_distortion",
                                               "mean_attention_divergence"});
    }
}

TEST_CASE("evaluate scores labeled bags") {
    Rng rng(23);
    const MilModel model = tu::random_model(3, 4, rng);
    std::vector<SlideBag> bags;
    for (int n = 0; n < 6; ++n) {
        SlideBag bag;
        bag.slide_id = "s" + std::to_string(n);
        bag.features = tu::random_matrix(4, 4, rng);
        bag.label = n % 2;
        bags.push_back(std::move(bag));
    }
    const EvalReport report = evaluate(model, bags);
    CHECK(report.n_pos == 3);
    CHECK(report.n_neg == 3);
    CHECK(report.auroc >= 0.0);
    CHECK(report.auroc <= 1.0);

    bags[0].label.reset();
    CHECK_THROWS_AS(evaluate(model, bags), ArgumentError);
}
