// hasd: synthesize two-domain slide benchmarks, train an attention-MIL
// model on the source domain, select per-slide prototypes, fit the
// hierarchical transport adaptation, and evaluate with or without it.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "hasd/adapt.hpp"
#include "hasd/error.hpp"
#include "hasd/io.hpp"
#include "hasd/metrics.hpp"
#include "hasd/mil.hpp"
#include "hasd/ot.hpp"
#include "hasd/proto.hpp"
#include "hasd/synth.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

void log_line(const json& fields) { std::cerr << fields.dump() << "\n"; }

struct SynthArgs {
    std::string out;
    std::uint64_t seed = 0;
    hasd::SynthSpec spec;
    int patches_exact = -1;
    bool no_warp = false;
};

int run_synth(SynthArgs& args) {
    if (args.patches_exact >= 0) {
        if (args.patches_exact < 1) {
            throw hasd::ArgumentError("--patches must be >= 1");
        }
        args.spec.patches_min = static_cast<std::uint32_t>(args.patches_exact);
        args.spec.patches_max = static_cast<std::uint32_t>(args.patches_exact);
    }
    args.spec.seed = args.seed;
    args.spec.shift.orthogonal_warp = !args.no_warp;

    const auto paths = hasd::write_synth(args.spec, args.out);
    json summary;
    summary["source_manifest"] = paths.source_manifest.string();
    summary["target_manifest"] = paths.target_manifest.string();
    summary["ground_truth"] = paths.ground_truth.string();
    summary["slides_per_domain"] = args.spec.n_slides;
    summary["feature_dim"] = args.spec.feature_dim;
    summary["seed"] = args.seed;
    std::cout << summary.dump() << "\n";
    return 0;
}

struct TrainArgs {
    std::string manifest;
    std::string out;
    std::uint64_t seed = 0;
    hasd::MilTrainConfig cfg;
    double holdout = 0.2;
};

// Seeded stratified split: per class, the last holdout share is held out.
void split_bags(const std::vector<hasd::SlideBag>& bags, double holdout, hasd::Rng& rng,
                std::vector<hasd::SlideBag>& train, std::vector<hasd::SlideBag>& held) {
    std::vector<std::size_t> pos, neg;
    for (std::size_t i = 0; i < bags.size(); ++i) {
        if (!bags[i].label) {
            throw hasd::ArgumentError("slide '" + bags[i].slide_id + "' has no label");
        }
        (*bags[i].label ? pos : neg).push_back(i);
    }
    auto deal = [&](std::vector<std::size_t>& idx) {
        for (std::size_t i = idx.size(); i > 1; --i)
            std::swap(idx[i - 1], idx[rng.index(i)]);
        const auto n_held = static_cast<std::size_t>(
            std::floor(holdout * static_cast<double>(idx.size())));
        for (std::size_t i = 0; i < idx.size(); ++i) {
            (i < idx.size() - n_held ? train : held).push_back(bags[idx[i]]);
        }
    };
    deal(pos);
    deal(neg);
}

int run_train(const TrainArgs& args) {
    const auto manifest = hasd::read_manifest(args.manifest);
    const auto bags = hasd::load_bags(manifest);

    hasd::Rng rng(args.seed);
    std::vector<hasd::SlideBag> train, held;
    split_bags(bags, args.holdout, rng, train, held);
    log_line({{"event", "train_split"},
              {"n_train", train.size()},
              {"n_heldout", held.size()}});

    const hasd::MilModel model = hasd::train_source(train, args.cfg, rng);
    const double final_loss = hasd::bce_loss(model, train);

    json summary;
    summary["model"] = args.out;
    summary["final_loss"] = final_loss;
    if (!held.empty()) {
        const auto report = hasd::evaluate(model, held);
        summary["id_auroc"] = report.auroc;
    } else {
        summary["id_auroc"] = nullptr;
    }
    summary["n_train"] = train.size();
    summary["n_heldout"] = held.size();

    hasd::save_model(args.out, model);
    std::cout << summary.dump() << "\n";
    return 0;
}

struct ProtoArgs {
    std::string manifest;
    std::string out;
    std::size_t k = 10;
    std::uint64_t seed = 0;
};

int run_prototypes(const ProtoArgs& args) {
    const auto manifest = hasd::read_manifest(args.manifest);
    const auto bags = hasd::load_bags(manifest);

    hasd::Rng rng(args.seed);
    const auto domain = hasd::prototype_domain(bags, args.k, rng);

    const fs::path out_dir(args.out);
    fs::create_directories(out_dir / "protos");
    hasd::DomainManifest proto_manifest;
    proto_manifest.domain_name = manifest.domain_name + "_protos";
    proto_manifest.feature_dim = manifest.feature_dim;
    for (std::size_t n = 0; n < domain.sets.size(); ++n) {
        const std::string rel = "protos/" + domain.sets[n].slide_id + ".hasd";
        hasd::write_features(out_dir / rel, domain.sets[n].centroids);
        proto_manifest.slides.push_back({domain.sets[n].slide_id, rel,
                                         static_cast<std::uint32_t>(args.k),
                                         bags[n].label});
    }
    const auto manifest_path = out_dir / "manifest.json";
    hasd::write_manifest(manifest_path, proto_manifest);

    json summary;
    summary["manifest"] = manifest_path.string();
    summary["slides"] = domain.sets.size();
    summary["k"] = args.k;
    std::cout << summary.dump() << "\n";
    return 0;
}

struct AdaptArgs {
    std::string src_protos;
    std::string tgt_protos;
    std::string model;
    std::string out;
    std::string model_out;
    std::string loss_log;
    std::uint64_t seed = 0;
    hasd::AdaptConfig cfg;
    std::string metric = "sqeuclidean";
    bool partial = false;
    bool no_refit_head = false;
    hasd::HeadRefitConfig refit;
};

int run_adapt(AdaptArgs& args) {
    const auto src_manifest = hasd::read_manifest(args.src_protos);
    const auto tgt_manifest = hasd::read_manifest(args.tgt_protos);
    const auto src_bags = hasd::load_bags(src_manifest);
    const auto tgt_bags = hasd::load_bags(tgt_manifest);
    const auto model = hasd::load_model(args.model);

    args.cfg.metric = hasd::cost_metric_from_string(args.metric);
    args.cfg.sinkhorn.mode =
        args.partial ? hasd::SinkhornMode::partial : hasd::SinkhornMode::balanced;

    std::vector<hasd::Matrix> src_blocks;
    src_blocks.reserve(src_bags.size());
    for (const auto& bag : src_bags) src_blocks.push_back(bag.features);

    std::size_t tgt_rows = 0;
    for (const auto& bag : tgt_bags) tgt_rows += bag.features.rows();
    hasd::Matrix tgt(tgt_rows, tgt_manifest.feature_dim);
    std::size_t r = 0;
    for (const auto& bag : tgt_bags)
        for (std::size_t i = 0; i < bag.features.rows(); ++i, ++r)
            std::copy(bag.features.row(i).begin(), bag.features.row(i).end(),
                      tgt.row(r).begin());

    hasd::Rng rng(args.seed);
    const hasd::AdaptReport report =
        hasd::fit(src_blocks, tgt, model, args.cfg, rng);

    if (!args.loss_log.empty()) {
        std::ofstream log(args.loss_log);
        if (!log) throw hasd::ArgumentError("cannot open loss log: " + args.loss_log);
        for (std::size_t s = 0; s < report.steps.size(); ++s) {
            const auto& st = report.steps[s];
            json line;
            line["step"] = s;
            line["total"] = st.total;
            line["das"] = st.das;
            line["sgir"] = st.sgir;
            line["pacr"] = st.pacr;
            line["plan_converged"] = st.plan_converged;
            log << line.dump() << "\n";
        }
    }

    hasd::save_transport_map(args.out, report.map);

    json summary;
    summary["transport_map"] = args.out;
    if (!args.no_refit_head) {
        std::vector<int> labels;
        for (const auto& bag : src_bags) {
            if (!bag.label) {
                throw hasd::ArgumentError(
                    "head refit needs labels in the source prototype manifest "
                    "(slide '" + bag.slide_id + "' has none); pass --no-refit-head to skip");
            }
            labels.push_back(*bag.label);
        }
        const auto adapted = hasd::refit_head(model, report.map, src_blocks, labels,
                                              args.refit);
        if (args.model_out.empty()) {
            args.model_out = (fs::path(args.out).parent_path() / "model_adapted.hasm").string();
        }
        hasd::save_model(args.model_out, adapted);
        summary["adapted_model"] = args.model_out;
    } else {
        summary["adapted_model"] = nullptr;
    }
    if (!report.steps.empty()) {
        summary["final_total"] = report.steps.back().total;
        summary["final_das"] = report.steps.back().das;
        summary["final_sgir"] = report.steps.back().sgir;
        summary["final_pacr"] = report.steps.back().pacr;
        summary["plan_converged"] = report.steps.back().plan_converged;
    }
    summary["steps"] = report.steps.size();
    std::cout << summary.dump() << "\n";
    return 0;
}

struct EvalArgs {
    std::string manifest;
    std::string model;
    std::string transform;
    std::string src_protos;
    std::string tgt_protos;
    std::string out;
    std::string metric = "sqeuclidean";
    double epsilon = 0.05;
};

int run_eval(const EvalArgs& args) {
    const auto manifest = hasd::read_manifest(args.manifest);
    const auto bags = hasd::load_bags(manifest);
    const auto model = hasd::load_model(args.model);

    hasd::EvalReport report = hasd::evaluate(model, bags);

    // Alignment diagnostics need the transform and both prototype sets.
    if (!args.transform.empty() && !args.src_protos.empty() && !args.tgt_protos.empty()) {
        const auto map = hasd::load_transport_map(args.transform);
        const auto src_bags = hasd::load_bags(hasd::read_manifest(args.src_protos));
        const auto tgt_bags = hasd::load_bags(hasd::read_manifest(args.tgt_protos));
        std::vector<hasd::Matrix> src_blocks;
        for (const auto& bag : src_bags) src_blocks.push_back(bag.features);
        std::size_t rows = 0;
        for (const auto& bag : tgt_bags) rows += bag.features.rows();
        hasd::Matrix tgt(rows, tgt_bags.front().features.cols());
        std::size_t r = 0;
        for (const auto& bag : tgt_bags)
            for (std::size_t i = 0; i < bag.features.rows(); ++i, ++r)
                std::copy(bag.features.row(i).begin(), bag.features.row(i).end(),
                          tgt.row(r).begin());

        std::size_t src_rows = 0;
        for (const auto& blk : src_blocks) src_rows += blk.rows();
        const auto a = hasd::uniform_marginal(src_rows);
        const auto b = hasd::uniform_marginal(rows);

        hasd::Matrix stacked(src_rows, tgt.cols());
        r = 0;
        for (const auto& blk : src_blocks)
            for (std::size_t i = 0; i < blk.rows(); ++i, ++r)
                std::copy(blk.row(i).begin(), blk.row(i).end(), stacked.row(r).begin());

        hasd::SinkhornConfig scfg;
        scfg.epsilon = args.epsilon;
        const auto metric = hasd::cost_metric_from_string(args.metric);
        const auto cost = hasd::cost_matrix(hasd::apply_map(map, stacked), tgt, metric);
        const auto plan = hasd::sinkhorn(cost, a, b, scfg);
        report.alignment = hasd::alignment_diagnostics(map, plan, src_blocks, tgt, model,
                                                       metric, a, b);
    }

    const std::string doc = hasd::report_to_json(report);
    if (args.out.empty()) {
        std::cout << doc << "\n";
    } else {
        std::ofstream out(args.out);
        if (!out) throw hasd::ArgumentError("cannot open report for writing: " + args.out);
        out << doc << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"hierarchical slide-level domain adaptation"};
    app.require_subcommand(1);

    SynthArgs synth;
    auto* synth_cmd = app.add_subcommand("synth", "generate a two-domain synthetic benchmark");
    synth_cmd->add_option("--out", synth.out, "output directory")->required();
    synth_cmd->add_option("--seed", synth.seed, "rng seed")->required();
    synth_cmd->add_option("--slides", synth.spec.n_slides, "slides per domain");
    synth_cmd->add_option("--patches-min", synth.spec.patches_min, "min patches per slide");
    synth_cmd->add_option("--patches-max", synth.spec.patches_max, "max patches per slide");
    synth_cmd->add_option("--patches", synth.patches_exact, "exact patches per slide");
    synth_cmd->add_option("--dim", synth.spec.feature_dim, "feature dimension");
    synth_cmd->add_option("--signal-fraction", synth.spec.signal_fraction,
                          "diagnostic patch share in positive slides");
    synth_cmd->add_option("--prevalence-src", synth.spec.prevalence_src,
                          "positive share, source");
    synth_cmd->add_option("--prevalence-tgt", synth.spec.prevalence_tgt,
                          "positive share, target");
    synth_cmd->add_flag("--no-warp", synth.no_warp, "disable the orthogonal warp");
    synth_cmd->add_option("--warp-strength", synth.spec.shift.warp_strength,
                          "identity bias of the warp");
    synth_cmd->add_option("--translation", synth.spec.shift.translation,
                          "translation magnitude");
    synth_cmd->add_option("--noise", synth.spec.shift.noise_sigma, "target noise sigma");

    TrainArgs train;
    auto* train_cmd = app.add_subcommand("train", "train the source-domain attention model");
    train_cmd->add_option("manifest", train.manifest, "domain manifest")->required();
    train_cmd->add_option("--out", train.out, "model checkpoint path")->required();
    train_cmd->add_option("--seed", train.seed, "rng seed")->required();
    train_cmd->add_option("--epochs", train.cfg.epochs, "training epochs");
    train_cmd->add_option("--step-size", train.cfg.step_size, "gradient step size");
    train_cmd->add_option("--hidden", train.cfg.hidden_dim, "attention hidden width");
    train_cmd->add_option("--holdout", train.holdout, "held-out share for ID AUROC");

    ProtoArgs protos;
    auto* proto_cmd = app.add_subcommand("prototypes", "per-slide k-means prototypes");
    proto_cmd->add_option("manifest", protos.manifest, "domain manifest")->required();
    proto_cmd->add_option("--out", protos.out, "output directory")->required();
    proto_cmd->add_option("--k", protos.k, "prototypes per slide");
    proto_cmd->add_option("--seed", protos.seed, "rng seed (default 0)");

    AdaptArgs adapt;
    auto* adapt_cmd = app.add_subcommand("adapt", "fit the hierarchical transport map");
    adapt_cmd->add_option("--src-protos", adapt.src_protos, "source prototype manifest")
        ->required();
    adapt_cmd->add_option("--tgt-protos", adapt.tgt_protos, "target prototype manifest")
        ->required();
    adapt_cmd->add_option("--model", adapt.model, "source model checkpoint")->required();
    adapt_cmd->add_option("--out", adapt.out, "transport map output path")->required();
    adapt_cmd->add_option("--seed", adapt.seed, "rng seed")->required();
    adapt_cmd->add_option("--model-out", adapt.model_out, "adapted model output path");
    adapt_cmd->add_option("--loss-log", adapt.loss_log, "per-step JSON loss log");
    adapt_cmd->add_option("--epsilon", adapt.cfg.sinkhorn.epsilon, "entropic weight");
    adapt_cmd->add_option("--tau", adapt.cfg.sinkhorn.tau, "partial relaxation weight");
    adapt_cmd->add_flag("--partial", adapt.partial, "partial (KL-relaxed) marginals");
    adapt_cmd->add_option("--metric", adapt.metric, "cosine | sqeuclidean");
    adapt_cmd->add_option("--lambda1", adapt.cfg.lambda1, "Gram preservation weight");
    adapt_cmd->add_option("--lambda2", adapt.cfg.lambda2, "attention consistency weight");
    adapt_cmd->add_option("--steps", adapt.cfg.steps, "gradient steps");
    adapt_cmd->add_option("--step-size", adapt.cfg.step_size, "gradient step size");
    adapt_cmd->add_option("--replan-every", adapt.cfg.replan_every,
                          "steps between coupling re-solves");
    adapt_cmd->add_option("--max-iters", adapt.cfg.sinkhorn.max_iters,
                          "sinkhorn iteration cap");
    adapt_cmd->add_option("--tol", adapt.cfg.sinkhorn.tol, "sinkhorn stop tolerance");
    adapt_cmd->add_flag("--no-refit-head", adapt.no_refit_head,
                        "keep the classifier head frozen");

    EvalArgs eval;
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a model on a labeled manifest");
    eval_cmd->add_option("manifest", eval.manifest, "domain manifest")->required();
    eval_cmd->add_option("--model", eval.model, "model checkpoint")->required();
    eval_cmd->add_option("--transform", eval.transform, "transport map checkpoint");
    eval_cmd->add_option("--src-protos", eval.src_protos,
                         "source prototype manifest (alignment diagnostics)");
    eval_cmd->add_option("--tgt-protos", eval.tgt_protos,
                         "target prototype manifest (alignment diagnostics)");
    eval_cmd->add_option("--out", eval.out, "report path (default: stdout)");
    eval_cmd->add_option("--metric", eval.metric, "cosine | sqeuclidean");
    eval_cmd->add_option("--epsilon", eval.epsilon, "entropic weight for diagnostics");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        log_line({{"event", "usage_error"}, {"message", e.what()}});
        return 2;
    }

    try {
        if (synth_cmd->parsed()) return run_synth(synth);
        if (train_cmd->parsed()) return run_train(train);
        if (proto_cmd->parsed()) return run_prototypes(protos);
        if (adapt_cmd->parsed()) return run_adapt(adapt);
        if (eval_cmd->parsed()) return run_eval(eval);
    } catch (const hasd::NumericError& e) {
        log_line({{"event", "numeric_error"}, {"message", e.what()}});
        return 3;
    } catch (const hasd::Error& e) {
        log_line({{"event", "error"}, {"message", e.what()}});
        return 2;
    } catch (const std::exception& e) {
        log_line({{"event", "error"}, {"message", e.what()}});
        return 2;
    }
    return 0;
}
