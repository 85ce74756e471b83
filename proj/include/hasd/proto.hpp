#pragma once

#include <string>
#include <vector>

#include "hasd/matrix.hpp"
#include "hasd/mil.hpp"
#include "hasd/rng.hpp"

namespace hasd {

// Result of clustering one slide's patches: k centroids standing in for
// the full bag during adaptation.
struct PrototypeSet {
    std::string slide_id;
    Matrix centroids;  // k x M
    std::vector<std::size_t> assignment_counts;
    double inertia = 0.0;  // sum of squared distances to assigned centroid
    std::vector<double> inertia_trace;  // inertia after each Lloyd update
};

// Stacked per-slide centroids for a whole domain, with a parallel vector
// mapping each prototype row back to its slide. Row order is bag order x
// centroid order.
struct PrototypeDomain {
    Matrix features;                      // (N*k) x M
    std::vector<std::size_t> slide_index; // length N*k
    std::vector<PrototypeSet> sets;       // length N
};

// Lloyd iterations with k-means++ seeding. Deterministic given seed;
// empty clusters are repaired by moving the point farthest from its
// centroid; stops when assignments stop changing.
PrototypeSet kmeans(const SlideBag& bag, std::size_t k, Rng& rng, int max_iters = 100);

// kmeans over every bag with one rng stream, bag order fixed.
PrototypeDomain prototype_domain(const std::vector<SlideBag>& bags, std::size_t k,
                                 Rng& rng, int max_iters = 100);

}  // namespace hasd
