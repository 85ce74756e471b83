#include "hasd/proto.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "hasd/error.hpp"

namespace hasd {

namespace {

double sq_dist(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        const double d = a[k] - b[k];
        s += d * d;
    }
    return s;
}

// k-means++: first centroid uniform, then D^2-weighted sampling.
std::vector<std::size_t> seed_centroids(const Matrix& x, std::size_t k, Rng& rng) {
    const std::size_t p = x.rows();
    std::vector<std::size_t> chosen;
    chosen.reserve(k);
    chosen.push_back(rng.index(p));

    std::vector<double> d2(p, std::numeric_limits<double>::infinity());
    while (chosen.size() < k) {
        const auto c = x.row(chosen.back());
        double total = 0.0;
        for (std::size_t i = 0; i < p; ++i) {
            d2[i] = std::min(d2[i], sq_dist(x.row(i), c));
            total += d2[i];
        }
        std::size_t pick = 0;
        if (total > 0.0) {
            const double target = rng.uniform() * total;
            double acc = 0.0;
            pick = p - 1;  // guard against rounding past the end
            for (std::size_t i = 0; i < p; ++i) {
                acc += d2[i];
                if (acc >= target) {
                    pick = i;
                    break;
                }
            }
        } else {
            pick = rng.index(p);  // all points coincide with chosen centroids
        }
        chosen.push_back(pick);
    }
    return chosen;
}

}  // namespace

PrototypeSet kmeans(const SlideBag& bag, std::size_t k, Rng& rng, int max_iters) {
    const Matrix& x = bag.features;
    const std::size_t p = x.rows();
    const std::size_t m = x.cols();
    if (k == 0) throw ArgumentError("kmeans: k must be >= 1");
    if (k > p) {
        throw ArgumentError("kmeans: k=" + std::to_string(k) + " exceeds patch count " +
                            std::to_string(p) + " for slide '" + bag.slide_id + "'");
    }

    Matrix centroids(k, m);
    const auto seeds = seed_centroids(x, k, rng);
    for (std::size_t c = 0; c < k; ++c) {
        const auto r = x.row(seeds[c]);
        std::copy(r.begin(), r.end(), centroids.row(c).begin());
    }

    std::vector<std::size_t> assign(p, 0), prev_assign;
    std::vector<std::size_t> counts(k, 0);
    std::vector<double> trace;

    for (int iter = 0; iter < max_iters; ++iter) {
        prev_assign = assign;

#pragma omp parallel for schedule(static) if (p * k * m >= 8192)
        for (std::ptrdiff_t pi = 0; pi < static_cast<std::ptrdiff_t>(p); ++pi) {
            const auto i = static_cast<std::size_t>(pi);
            const auto r = x.row(i);
            double best = std::numeric_limits<double>::infinity();
            std::size_t best_c = 0;
            for (std::size_t c = 0; c < k; ++c) {
                const double d = sq_dist(r, centroids.row(c));
                if (d < best) {
                    best = d;
                    best_c = c;
                }
            }
            assign[i] = best_c;
        }

        // Repair empty clusters with the point farthest from its centroid.
        std::fill(counts.begin(), counts.end(), 0);
        for (std::size_t i = 0; i < p; ++i) ++counts[assign[i]];
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] > 0) continue;
            double worst = -1.0;
            std::size_t worst_i = 0;
            for (std::size_t i = 0; i < p; ++i) {
                if (counts[assign[i]] <= 1) continue;  // keep donors nonempty
                const double d = sq_dist(x.row(i), centroids.row(assign[i]));
                if (d > worst) {
                    worst = d;
                    worst_i = i;
                }
            }
            --counts[assign[worst_i]];
            assign[worst_i] = c;
            ++counts[c];
        }

        for (std::size_t c = 0; c < k; ++c)
            std::fill(centroids.row(c).begin(), centroids.row(c).end(), 0.0);
        for (std::size_t i = 0; i < p; ++i) {
            const auto r = x.row(i);
            auto cr = centroids.row(assign[i]);
            for (std::size_t kk = 0; kk < m; ++kk) cr[kk] += r[kk];
        }
        for (std::size_t c = 0; c < k; ++c) {
            auto cr = centroids.row(c);
            const double inv = 1.0 / static_cast<double>(counts[c]);
            for (std::size_t kk = 0; kk < m; ++kk) cr[kk] *= inv;
        }

        double inertia = 0.0;
        for (std::size_t i = 0; i < p; ++i)
            inertia += sq_dist(x.row(i), centroids.row(assign[i]));
        trace.push_back(inertia);

        if (iter > 0 && assign == prev_assign) break;
    }

    PrototypeSet out;
    out.slide_id = bag.slide_id;
    out.centroids = std::move(centroids);
    out.assignment_counts = counts;
    out.inertia = trace.back();
    out.inertia_trace = std::move(trace);
    return out;
}

PrototypeDomain prototype_domain(const std::vector<SlideBag>& bags, std::size_t k,
                                 Rng& rng, int max_iters) {
    if (bags.empty()) throw ArgumentError("prototype_domain: no bags");
    const std::size_t m = bags.front().features.cols();
    for (const auto& bag : bags) {
        if (bag.features.cols() != m) {
            throw ArgumentError("prototype_domain: slide '" + bag.slide_id +
                                "' feature dim differs");
        }
    }

    // One derived seed per slide keeps every clustering independent of the
    // others, so slides could be processed in parallel without changing
    // results.
    std::vector<std::uint64_t> seeds(bags.size());
    for (auto& s : seeds) s = rng.next_u64();

    // Precondition checks happen up front: kmeans must not throw from
    // inside the parallel region.
    if (k == 0) throw ArgumentError("prototype_domain: k must be >= 1");
    for (const auto& bag : bags) {
        if (k > bag.features.rows()) {
            throw ArgumentError("prototype_domain: k=" + std::to_string(k) +
                                " exceeds patch count " + std::to_string(bag.features.rows()) +
                                " for slide '" + bag.slide_id + "'");
        }
    }

    PrototypeDomain out;
    out.features = Matrix(bags.size() * k, m);
    out.slide_index.assign(bags.size() * k, 0);
    out.sets.resize(bags.size());
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t ni = 0; ni < static_cast<std::ptrdiff_t>(bags.size()); ++ni) {
        const auto n = static_cast<std::size_t>(ni);
        Rng slide_rng(seeds[n]);
        PrototypeSet set = kmeans(bags[n], k, slide_rng, max_iters);
        for (std::size_t c = 0; c < k; ++c) {
            const auto src = set.centroids.row(c);
            std::copy(src.begin(), src.end(), out.features.row(n * k + c).begin());
            out.slide_index[n * k + c] = n;
        }
        out.sets[n] = std::move(set);
    }
    return out;
}

}  // namespace hasd
