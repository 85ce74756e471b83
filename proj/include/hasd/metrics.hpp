#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hasd/adapt.hpp"
#include "hasd/mil.hpp"
#include "hasd/ot.hpp"

namespace hasd {

// Mann-Whitney AUROC with midrank tie handling: equals
// P(score_pos > score_neg) + 0.5 P(equal). Both classes must be present.
double auroc(std::span<const double> scores, std::span<const int> labels);

struct AlignmentDiagnostics {
    double mean_transport_cost = 0.0;      // <gamma, C> / total plan mass
    double marginal_violation = 0.0;       // sup-norm vs requested marginals
    double mean_gram_distortion = 0.0;     // sgir_loss / n_slides
    double mean_attention_divergence = 0.0;  // pacr_loss / n_slides
};

// Recomputes the four diagnostics from their defining modules; cost is
// measured between T(src) and tgt with the given metric.
AlignmentDiagnostics alignment_diagnostics(const TransportMap& map,
                                           const TransportPlan& plan,
                                           const std::vector<Matrix>& src_blocks,
                                           const Matrix& tgt_protos,
                                           const MilModel& model, CostMetric metric,
                                           std::span<const double> a,
                                           std::span<const double> b);

struct EvalReport {
    double auroc = 0.0;
    int n_pos = 0;
    int n_neg = 0;
    std::optional<AlignmentDiagnostics> alignment;
};

EvalReport evaluate(const MilModel& model, const std::vector<SlideBag>& bags);

// Fixed key order: auroc, n_pos, n_neg, alignment{mean_transport_cost,
// marginal_violation, mean_gram_distortion, mean_attention_divergence}.
// alignment is null when no adaptation artifacts were supplied.
std::string report_to_json(const EvalReport& report);

}  // namespace hasd
