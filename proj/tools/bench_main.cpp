// Times the OpenMP kernels against the serial reference implementations
// on representative shapes and prints one line per kernel.

#include <chrono>
#include <cstdio>
#include <functional>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "hasd/matrix.hpp"
#include "hasd/numerics.hpp"
#include "hasd/ot.hpp"
#include "hasd/ref.hpp"
#include "hasd/rng.hpp"

using namespace hasd;

namespace {

Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
    Matrix m(rows, cols);
    for (double& v : m.data()) v = rng.normal();
    return m;
}

double time_ms(const std::function<void()>& fn, int reps) {
    fn();  // warm up
    const auto start = std::chrono::steady_clock::now();
    for (int r = 0; r < reps; ++r) fn();
    const auto stop = std::chrono::steady_clock::now();
    return std::chrono::duration<double, std::milli>(stop - start).count() / reps;
}

void report(const char* name, double serial_ms, double parallel_ms) {
    std::printf("%-22s serial %9.3f ms   parallel %9.3f ms   speedup %.2fx\n", name,
                serial_ms, parallel_ms, serial_ms / parallel_ms);
}

}  // namespace

int main() {
#ifdef _OPENMP
    std::printf("threads: %d\n", omp_get_max_threads());
#else
    std::printf("threads: 1 (built without OpenMP)\n");
#endif

    Rng rng(7);
    const Matrix x = random_matrix(1200, 64, rng);
    const Matrix src = random_matrix(600, 64, rng);
    const Matrix tgt = random_matrix(600, 64, rng);

    report("gram 1200x64",
           time_ms([&] { volatile double s = ref::gram(x)(0, 0); (void)s; }, 3),
           time_ms([&] { volatile double s = gram(x)(0, 0); (void)s; }, 3));

    report("cost 600x600x64",
           time_ms([&] { volatile double s = ref::cost_matrix(src, tgt,
                              CostMetric::squared_euclidean)(0, 0); (void)s; }, 3),
           time_ms([&] { volatile double s = cost_matrix(src, tgt,
                              CostMetric::squared_euclidean).C(0, 0); (void)s; }, 3));

    const CostMatrix cost = cost_matrix(src, tgt, CostMetric::squared_euclidean);
    const auto a = uniform_marginal(src.rows());
    const auto b = uniform_marginal(tgt.rows());
    SinkhornConfig cfg;
    cfg.epsilon = 1.0;
    cfg.max_iters = 50;
    cfg.tol = 0.0;  // run the full iteration budget

    report("sinkhorn 600x600x50it",
           time_ms([&] { volatile bool c = ref::sinkhorn(cost, a, b, cfg).converged; (void)c; }, 1),
           time_ms([&] { volatile bool c = sinkhorn(cost, a, b, cfg).converged; (void)c; }, 1));

    return 0;
}
