#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "hasd/error.hpp"
#include "hasd/ot.hpp"
#include "hasd/ref.hpp"
#include "hasd/rng.hpp"
#include "testutil.hpp"

using namespace hasd;
namespace tu = testutil;

namespace {

TransportPlan solve(const Matrix& c, std::span<const double> a, std::span<const double> b,
                    SinkhornConfig cfg) {
    CostMatrix cost{c, CostMetric::squared_euclidean};
    return sinkhorn(cost, a, b, cfg);
}

Matrix random_cost(std::size_t n, std::size_t m, Rng& rng, double hi = 2.0) {
    Matrix c(n, m);
    for (double& v : c.data()) v = rng.uniform(0.0, hi);
    return c;
}

}  // namespace

TEST_CASE("cost matrix distances") {
    Matrix unit(2, 2, {1.0, 0.0, 0.0, 1.0});

    SUBCASE("identical unit vectors have zero cosine distance") {
        const CostMatrix c = cost_matrix(unit, unit, CostMetric::cosine_distance);
        CHECK(c.C(0, 0) == doctest::Approx(0.0).epsilon(1e-12));
        CHECK(c.C(1, 1) == doctest::Approx(0.0).epsilon(1e-12));
        CHECK(c.C(0, 1) == doctest::Approx(1.0));  // orthogonal pair
    }

    SUBCASE("antipodal vectors cost 2") {
        Matrix s(1, 2, {1.0, 0.0});
        Matrix t(1, 2, {-1.0, 0.0});
        CHECK(cost_matrix(s, t, CostMetric::cosine_distance).C(0, 0) == doctest::Approx(2.0));
    }

    SUBCASE("zero-norm row is rejected with its index") {
        Matrix s(2, 2, {1.0, 0.0, 0.0, 0.0});
        CHECK_THROWS_WITH_AS(cost_matrix(s, unit, CostMetric::cosine_distance),
                             doctest::Contains("row 1"), ArgumentError);
    }

    SUBCASE("squared euclidean matches the loop oracle") {
        Rng rng(3);
        const Matrix s = tu::random_matrix(4, 3, rng);
        const Matrix t = tu::random_matrix(5, 3, rng);
        const CostMatrix got = cost_matrix(s, t, CostMetric::squared_euclidean);
        const Matrix expect = ref::cost_matrix(s, t, CostMetric::squared_euclidean);
        for (std::size_t i = 0; i < got.C.size(); ++i)
            CHECK(got.C.data()[i] == doctest::Approx(expect.data()[i]).epsilon(1e-13));
    }

    SUBCASE("dimension mismatch") {
        CHECK_THROWS_AS(cost_matrix(unit, Matrix(2, 3), CostMetric::squared_euclidean),
                        ArgumentError);
    }
}

TEST_CASE("entropy of a plan") {
    Matrix uniform(2, 2, {0.25, 0.25, 0.25, 0.25});
    CHECK(entropy(uniform) == doctest::Approx(std::log(0.25) - 1.0).epsilon(1e-12));
    CHECK(entropy(uniform) == doctest::Approx(ref::entropy(uniform)));
    CHECK(entropy(Matrix(3, 3)) == 0.0);

    Matrix single(1, 1, {1.0});
    CHECK(entropy(single) == doctest::Approx(-1.0));

    Matrix bad(1, 2, {0.5, -0.1});
    CHECK_THROWS_AS(entropy(bad), ArgumentError);
}

TEST_CASE("generalized KL divergence") {
    std::vector<double> half{0.5, 0.5};
    CHECK(kl_divergence(half, half) == doctest::Approx(0.0));
    CHECK(kl_divergence(std::vector<double>{0.0, 0.0}, half) == doctest::Approx(1.0));
    CHECK(kl_divergence(std::vector<double>{1.0, 0.0}, half) ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK_THROWS_AS(kl_divergence(half, std::vector<double>{0.5, 0.0}), ArgumentError);
    CHECK_THROWS_AS(kl_divergence(std::vector<double>{0.5}, half), ArgumentError);
}

TEST_CASE("sinkhorn on a constant cost gives the independent coupling") {
    Matrix c(2, 2, {3.0, 3.0, 3.0, 3.0});
    std::vector<double> ab{0.5, 0.5};
    for (double eps : {1.0, 0.1, 0.01}) {
        SinkhornConfig cfg;
        cfg.epsilon = eps;
        const TransportPlan plan = solve(c, ab, ab, cfg);
        CHECK(plan.converged);
        for (double v : plan.gamma.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-9));
    }
}

TEST_CASE("sinkhorn closed form on the symmetric 2x2 instance") {
    Matrix c(2, 2, {0.0, 1.0, 1.0, 0.0});
    std::vector<double> ab{0.5, 0.5};
    SinkhornConfig cfg;
    cfg.epsilon = 1.0;
    cfg.tol = 1e-12;
    const TransportPlan plan = solve(c, ab, ab, cfg);
    const double diag = 0.5 / (1.0 + std::exp(-1.0));
    CHECK(plan.gamma(0, 0) == doctest::Approx(diag).epsilon(1e-9));
    CHECK(plan.gamma(1, 1) == doctest::Approx(diag).epsilon(1e-9));
    CHECK(plan.gamma(0, 1) == doctest::Approx(0.5 - diag).epsilon(1e-9));
    CHECK(plan.gamma(1, 0) == doctest::Approx(0.5 - diag).epsilon(1e-9));
}

TEST_CASE("sinkhorn approaches the exhaustive optimum at small epsilon") {
    Rng rng(7);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t n = 2 + rng.index(4);
        const Matrix c = random_cost(n, n, rng);
        const auto u = uniform_marginal(n);
        const CostMatrix cost{c, CostMetric::squared_euclidean};

        // Warm-started annealing reaches the tiny-epsilon fixed point fast.
        std::vector<double> f, g;
        SinkhornConfig cfg;
        cfg.tol = 1e-9;
        cfg.max_iters = 2000;
        for (double eps : {0.05, 0.01, 0.004}) {
            cfg.epsilon = eps;
            sinkhorn(cost, u, u, cfg, f.empty() ? nullptr : &f, g.empty() ? nullptr : &g,
                     &f, &g);
        }
        cfg.epsilon = 1e-3;
        cfg.tol = 1e-7;
        cfg.max_iters = 100000;
        const TransportPlan plan = sinkhorn(cost, u, u, cfg, &f, &g);
        CHECK(plan.converged);
        const double lp = ref::min_permutation_cost(c);
        CHECK(std::fabs(plan.transport_cost - lp) <= 1e-3);
    }
}

TEST_CASE("partial mode moves less mass from outlier rows") {
    Rng rng(19);
    // 8 source points near the targets, 2 far away from everything.
    Matrix src(10, 2), tgt(10, 2);
    for (std::size_t i = 0; i < 10; ++i) {
        tgt(i, 0) = rng.uniform(-1.0, 1.0);
        tgt(i, 1) = rng.uniform(-1.0, 1.0);
    }
    for (std::size_t i = 0; i < 8; ++i) {
        src(i, 0) = rng.uniform(-1.0, 1.0);
        src(i, 1) = rng.uniform(-1.0, 1.0);
    }
    src(8, 0) = 10.0;
    src(8, 1) = 10.0;
    src(9, 0) = -10.0;
    src(9, 1) = 10.0;

    const CostMatrix cost = cost_matrix(src, tgt, CostMetric::squared_euclidean);
    const auto u = uniform_marginal(10);
    SinkhornConfig cfg;
    cfg.epsilon = 0.05;
    cfg.tau = 1.0;
    cfg.mode = SinkhornMode::partial;
    const TransportPlan plan = sinkhorn(cost, u, u, cfg);

    double inlier_min = 1.0, outlier_max = 0.0;
    for (std::size_t i = 0; i < 8; ++i) inlier_min = std::min(inlier_min, plan.row_marginal[i]);
    for (std::size_t i = 8; i < 10; ++i)
        outlier_max = std::max(outlier_max, plan.row_marginal[i]);
    CHECK(outlier_max < inlier_min);
}

TEST_CASE("sinkhorn validates inputs") {
    Matrix c(2, 2, {0.0, 1.0, 1.0, 0.0});
    SinkhornConfig cfg;
    CHECK_THROWS_AS(solve(c, std::vector<double>{0.7, 0.5}, std::vector<double>{0.5, 0.5}, cfg),
                    ArgumentError);
    CHECK_THROWS_AS(solve(c, std::vector<double>{-0.1, 1.1}, std::vector<double>{0.5, 0.5}, cfg),
                    ArgumentError);
    CHECK_THROWS_AS(solve(c, std::vector<double>{0.0, 0.0}, std::vector<double>{0.5, 0.5}, cfg),
                    ArgumentError);
    cfg.mode = SinkhornMode::partial;
    cfg.tau = 0.0;
    CHECK_THROWS_AS(solve(c, std::vector<double>{0.5, 0.5}, std::vector<double>{0.5, 0.5}, cfg),
                    ArgumentError);
    cfg.mode = SinkhornMode::balanced;
    cfg.epsilon = 0.0;
    CHECK_THROWS_AS(solve(c, std::vector<double>{0.5, 0.5}, std::vector<double>{0.5, 0.5}, cfg),
                    ArgumentError);
}

TEST_CASE("a poisoned cost surfaces as a numeric error with an iteration index") {
    Matrix c(2, 2, {0.0, 1.0, std::numeric_limits<double>::quiet_NaN(), 0.0});
    std::vector<double> ab{0.5, 0.5};
    SinkhornConfig cfg;
    CHECK_THROWS_WITH_AS(solve(c, ab, ab, cfg), doctest::Contains("iteration"), NumericError);
}

TEST_CASE("balanced convergence on random 50x50 instances") {
    Rng rng(31);
    SinkhornConfig cfg;
    cfg.epsilon = 0.05;
    cfg.tol = 1e-6;
    cfg.max_iters = 10000;
    const auto u = uniform_marginal(50);
    for (int trial = 0; trial < 3; ++trial) {
        const TransportPlan plan = solve(random_cost(50, 50, rng), u, u, cfg);
        CHECK(plan.converged);
        CHECK(plan.iterations_used <= 10000);
        double viol = 0.0;
        for (std::size_t i = 0; i < 50; ++i)
            viol = std::max(viol, std::fabs(plan.row_marginal[i] - u[i]));
        for (std::size_t j = 0; j < 50; ++j)
            viol = std::max(viol, std::fabs(plan.col_marginal[j] - u[j]));
        CHECK(viol <= 1e-6);
    }
}

TEST_CASE("cost shift leaves the balanced plan unchanged") {
    Rng rng(37);
    const Matrix c = random_cost(8, 8, rng);
    Matrix shifted = c;
    const double shift = 1.7;
    for (double& v : shifted.data()) v += shift;
    const auto u = uniform_marginal(8);
    SinkhornConfig cfg;
    cfg.epsilon = 0.1;
    cfg.tol = 1e-10;
    const TransportPlan p1 = solve(c, u, u, cfg);
    const TransportPlan p2 = solve(shifted, u, u, cfg);
    for (std::size_t i = 0; i < p1.gamma.size(); ++i)
        CHECK(std::fabs(p1.gamma.data()[i] - p2.gamma.data()[i]) <= 1e-9);
    CHECK(p2.transport_cost == doctest::Approx(p1.transport_cost + shift).epsilon(1e-9));
}

TEST_CASE("transport cost tightens monotonically as epsilon decreases") {
    Rng rng(41);
    for (int trial = 0; trial < 4; ++trial) {
        const std::size_t n = 3 + rng.index(3);
        const Matrix c = random_cost(n, n, rng);
        const auto u = uniform_marginal(n);
        double prev = 1e18;
        for (double eps : {1.0, 0.1, 0.01}) {
            SinkhornConfig cfg;
            cfg.epsilon = eps;
            cfg.tol = 1e-10;
            cfg.max_iters = 100000;
            const TransportPlan plan = solve(c, u, u, cfg);
            CHECK(plan.transport_cost <= prev + 1e-9);
            prev = plan.transport_cost;
        }
        CHECK(prev <= ref::min_permutation_cost(c) + 5e-2);
    }
}

TEST_CASE("partial marginals approach balanced as tau grows") {
    Rng rng(43);
    const Matrix c = random_cost(10, 10, rng);
    const auto u = uniform_marginal(10);
    SinkhornConfig balanced;
    balanced.epsilon = 0.05;
    balanced.tol = 1e-10;
    const TransportPlan pb = solve(c, u, u, balanced);

    SinkhornConfig partial = balanced;
    partial.mode = SinkhornMode::partial;
    partial.tau = 100.0;
    partial.tol = 1e-12;
    partial.max_iters = 20000;
    const TransportPlan pp = solve(c, u, u, partial);

    for (std::size_t i = 0; i < 10; ++i) {
        CHECK(std::fabs(pp.row_marginal[i] - pb.row_marginal[i]) <= 1e-3);
        CHECK(std::fabs(pp.col_marginal[i] - pb.col_marginal[i]) <= 1e-3);
    }
}

TEST_CASE("solving the transposed problem transposes the plan") {
    Rng rng(47);
    const Matrix c = random_cost(6, 9, rng);
    Matrix ct(9, 6);
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 9; ++j) ct(j, i) = c(i, j);
    std::vector<double> a(6), b(9);
    double sa = 0.0;
    for (double& v : a) {
        v = rng.uniform(0.1, 1.0);
        sa += v;
    }
    for (double& v : a) v /= sa;
    double sb = 0.0;
    for (double& v : b) {
        v = rng.uniform(0.1, 1.0);
        sb += v;
    }
    for (double& v : b) v /= sb;

    SinkhornConfig cfg;
    cfg.epsilon = 0.1;
    cfg.tol = 1e-11;
    const TransportPlan p = solve(c, a, b, cfg);
    const TransportPlan pt = solve(ct, b, a, cfg);
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 9; ++j)
            CHECK(std::fabs(p.gamma(i, j) - pt.gamma(j, i)) <= 1e-9);
}

TEST_CASE("plan invariants hold") {
    Rng rng(53);
    const Matrix c = random_cost(7, 5, rng);
    std::vector<double> a(7, 1.0 / 7), b(5, 1.0 / 5);
    SinkhornConfig cfg;
    cfg.epsilon = 0.05;
    const TransportPlan plan = solve(c, a, b, cfg);
    for (double v : plan.gamma.data()) CHECK(v >= 0.0);
    std::vector<double> rm(7, 0.0), cm(5, 0.0);
    for (std::size_t i = 0; i < 7; ++i)
        for (std::size_t j = 0; j < 5; ++j) {
            rm[i] += plan.gamma(i, j);
            cm[j] += plan.gamma(i, j);
        }
    for (std::size_t i = 0; i < 7; ++i) CHECK(std::fabs(rm[i] - plan.row_marginal[i]) <= 1e-12);
    for (std::size_t j = 0; j < 5; ++j) CHECK(std::fabs(cm[j] - plan.col_marginal[j]) <= 1e-12);
}

TEST_CASE("warm started solves agree with cold solves") {
    Rng rng(59);
    const Matrix c = random_cost(12, 12, rng);
    const auto u = uniform_marginal(12);
    SinkhornConfig cfg;
    cfg.epsilon = 0.05;
    cfg.tol = 1e-11;
    CostMatrix cost{c, CostMetric::squared_euclidean};
    std::vector<double> f, g;
    const TransportPlan cold = sinkhorn(cost, u, u, cfg, nullptr, nullptr, &f, &g);
    const TransportPlan warm = sinkhorn(cost, u, u, cfg, &f, &g);
    CHECK(warm.iterations_used <= cold.iterations_used);
    for (std::size_t i = 0; i < cold.gamma.size(); ++i)
        CHECK(std::fabs(cold.gamma.data()[i] - warm.gamma.data()[i]) <= 1e-9);
}

TEST_CASE("das loss decomposition") {
    Rng rng(61);
    std::vector<double> a{0.5, 0.5}, b{0.5, 0.5};

    SUBCASE("independent coupling on constant cost") {
        Matrix c(2, 2, {2.5, 2.5, 2.5, 2.5});
        Matrix g(2, 2, {0.25, 0.25, 0.25, 0.25});
        TransportPlan plan;
        plan.gamma = g;
        plan.row_marginal = a;
        plan.col_marginal = b;
        SinkhornConfig cfg;
        cfg.epsilon = 0.1;
        const double loss =
            das_loss(plan, CostMatrix{c, CostMetric::squared_euclidean}, a, b, cfg);
        CHECK(loss == doctest::Approx(2.5 + 0.1 * entropy(g)).epsilon(1e-12));
    }

    SUBCASE("exact marginals zero the partial term") {
        Matrix c(2, 2, {0.0, 1.0, 1.0, 0.0});
        Matrix g(2, 2, {0.25, 0.25, 0.25, 0.25});
        TransportPlan plan;
        plan.gamma = g;
        SinkhornConfig balanced;
        balanced.epsilon = 0.1;
        SinkhornConfig partial = balanced;
        partial.mode = SinkhornMode::partial;
        partial.tau = 3.0;
        const CostMatrix cost{c, CostMetric::squared_euclidean};
        CHECK(das_loss(plan, cost, a, b, partial) ==
              doctest::Approx(das_loss(plan, cost, a, b, balanced)).epsilon(1e-12));
    }

    SUBCASE("random instance matches the three-term oracle") {
        const Matrix c = random_cost(4, 6, rng);
        Matrix g(4, 6);
        for (double& v : g.data()) v = rng.uniform(0.0, 0.3);
        TransportPlan plan;
        plan.gamma = g;
        std::vector<double> aa(4, 0.25), bb(6, 1.0 / 6);
        SinkhornConfig cfg;
        cfg.epsilon = 0.07;
        cfg.tau = 1.3;
        cfg.mode = SinkhornMode::partial;
        const double got = das_loss(plan, CostMatrix{c, CostMetric::squared_euclidean},
                                    aa, bb, cfg);
        const double expect = ref::das_loss(g, c, aa, bb, 0.07, 1.3, true);
        CHECK(got == doctest::Approx(expect).epsilon(1e-12));
    }
}
