#include "hasd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "hasd/error.hpp"

namespace hasd {

double auroc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) {
        throw ArgumentError("auroc: scores and labels differ in length");
    }
    const std::size_t n = scores.size();
    std::size_t n_pos = 0;
    for (int y : labels) {
        if (y != 0 && y != 1) throw ArgumentError("auroc: labels must be 0/1");
        n_pos += static_cast<std::size_t>(y);
    }
    const std::size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) {
        throw ArgumentError("auroc: both classes must be present");
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // Midranks: tied scores share the average of their 1-based positions.
    std::vector<double> rank(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) rank[order[k]] = mid;
        i = j + 1;
    }

    double rank_sum_pos = 0.0;
    for (std::size_t k = 0; k < n; ++k)
        if (labels[k] == 1) rank_sum_pos += rank[k];

    const double u = rank_sum_pos -
                     0.5 * static_cast<double>(n_pos) * static_cast<double>(n_pos + 1);
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

AlignmentDiagnostics alignment_diagnostics(const TransportMap& map,
                                           const TransportPlan& plan,
                                           const std::vector<Matrix>& src_blocks,
                                           const Matrix& tgt_protos,
                                           const MilModel& model, CostMetric metric,
                                           std::span<const double> a,
                                           std::span<const double> b) {
    if (src_blocks.empty()) throw ArgumentError("alignment_diagnostics: no source blocks");

    std::size_t rows = 0;
    for (const auto& blk : src_blocks) rows += blk.rows();
    Matrix stacked(rows, src_blocks.front().cols());
    std::size_t r = 0;
    for (const auto& blk : src_blocks)
        for (std::size_t i = 0; i < blk.rows(); ++i, ++r)
            std::copy(blk.row(i).begin(), blk.row(i).end(), stacked.row(r).begin());

    const CostMatrix cost = cost_matrix(apply_map(map, stacked), tgt_protos, metric);
    require_same_shape(plan.gamma, cost.C, "alignment_diagnostics");

    AlignmentDiagnostics diag;
    double mass = 0.0, transport = 0.0;
    for (std::size_t ii = 0; ii < plan.gamma.rows(); ++ii) {
        for (std::size_t j = 0; j < plan.gamma.cols(); ++j) {
            mass += plan.gamma(ii, j);
            transport += plan.gamma(ii, j) * cost.C(ii, j);
        }
    }
    diag.mean_transport_cost = mass > 0.0 ? transport / mass : 0.0;

    double viol = 0.0;
    for (std::size_t ii = 0; ii < plan.row_marginal.size(); ++ii)
        viol = std::max(viol, std::fabs(plan.row_marginal[ii] - a[ii]));
    for (std::size_t j = 0; j < plan.col_marginal.size(); ++j)
        viol = std::max(viol, std::fabs(plan.col_marginal[j] - b[j]));
    diag.marginal_violation = viol;

    const double n_slides = static_cast<double>(src_blocks.size());
    diag.mean_gram_distortion = sgir_loss(map, src_blocks) / n_slides;
    diag.mean_attention_divergence = pacr_loss(map, model, src_blocks) / n_slides;
    return diag;
}

EvalReport evaluate(const MilModel& model, const std::vector<SlideBag>& bags) {
    std::vector<double> scores;
    std::vector<int> labels;
    for (const auto& bag : bags) {
        if (!bag.label) {
            throw ArgumentError("evaluate: bag '" + bag.slide_id + "' has no label");
        }
        scores.push_back(predict(model, bag));
        labels.push_back(*bag.label);
    }
    EvalReport report;
    report.auroc = auroc(scores, labels);
    report.n_pos = static_cast<int>(std::count(labels.begin(), labels.end(), 1));
    report.n_neg = static_cast<int>(labels.size()) - report.n_pos;
    return report;
}

std::string report_to_json(const EvalReport& report) {
    nlohmann::ordered_json doc;
    doc["auroc"] = report.auroc;
    doc["n_pos"] = report.n_pos;
    doc["n_neg"] = report.n_neg;
    if (report.alignment) {
        nlohmann::ordered_json a;
        a["mean_transport_cost"] = report.alignment->mean_transport_cost;
        a["marginal_violation"] = report.alignment->marginal_violation;
        a["mean_gram_distortion"] = report.alignment->mean_gram_distortion;
        a["mean_attention_divergence"] = report.alignment->mean_attention_divergence;
        doc["alignment"] = std::move(a);
    } else {
        doc["alignment"] = nullptr;
    }
    return doc.dump(2);
}

}  // namespace hasd
