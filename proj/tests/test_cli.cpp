#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>

#include "hasd/io.hpp"
#include "hasd/metrics.hpp"
#include "hasd/mil.hpp"
#include "testutil.hpp"

#include <json.hpp>

using namespace hasd;
namespace tu = testutil;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::string cli_path() {
    const char* env = std::getenv("HASD_BIN");
    REQUIRE_MESSAGE(env != nullptr, "HASD_BIN must point at the hasd binary");
    return env;
}

struct RunResult {
    int exit_code = -1;
    std::string stdout_text;
};

RunResult run(const std::string& args, const fs::path& workdir) {
    const fs::path out = workdir / "stdout.txt";
    const std::string cmd = "cd '" + workdir.string() + "' && '" + cli_path() + "' " + args +
                            " > '" + out.string() + "' 2> /dev/null";
    const int status = std::system(cmd.c_str());
    RunResult result;
    result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream in(out);
    std::stringstream ss;
    ss << in.rdbuf();
    result.stdout_text = ss.str();
    return result;
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// A small two-domain benchmark shared by the pipeline cases.
void make_small_benchmark(const fs::path& dir) {
    const RunResult synth = run(
        "synth --out data --seed 77 --slides 12 --patches-min 16 --patches-max 24 --dim 8",
        dir);
    REQUIRE(synth.exit_code == 0);
}

}  // namespace

TEST_CASE("synth is deterministic and validates flags") {
    tu::TempDir dir("cli_synth");

    SUBCASE("identical seeds give identical bytes") {
        REQUIRE(run("synth --out a --seed 5 --slides 8 --patches-min 8 --patches-max 12 --dim 6",
                    dir.path()).exit_code == 0);
        REQUIRE(run("synth --out b --seed 5 --slides 8 --patches-min 8 --patches-max 12 --dim 6",
                    dir.path()).exit_code == 0);
        CHECK(slurp(dir.path() / "a" / "source" / "manifest.json") ==
              slurp(dir.path() / "b" / "source" / "manifest.json"));
        CHECK(slurp(dir.path() / "a" / "groundtruth.hasm") ==
              slurp(dir.path() / "b" / "groundtruth.hasm"));
        const auto manifest = read_manifest(dir.path() / "a" / "source" / "manifest.json");
        REQUIRE(!manifest.slides.empty());
        CHECK(slurp(dir.path() / "a" / "source" / manifest.slides[0].file_path) ==
              slurp(dir.path() / "b" / "source" / manifest.slides[0].file_path));
    }

    SUBCASE("zero patches is a usage error") {
        const RunResult r = run("synth --out bad --seed 1 --patches 0", dir.path());
        CHECK(r.exit_code == 2);
    }

    SUBCASE("missing seed is a usage error") {
        CHECK(run("synth --out bad", dir.path()).exit_code == 2);
    }

    SUBCASE("prevalence flag lands in the target manifest") {
        REQUIRE(run("synth --out prev --seed 9 --slides 20 --patches-min 8 --patches-max 10 "
                    "--dim 6 --prevalence-tgt 0.2",
                    dir.path()).exit_code == 0);
        const auto manifest = read_manifest(dir.path() / "prev" / "target" / "manifest.json");
        int pos = 0;
        for (const auto& slide : manifest.slides) pos += slide.label.value_or(0);
        CHECK(std::fabs(pos / 20.0 - 0.2) <= 1.0 / 20.0);
    }
}

TEST_CASE("train writes a model and reports the held-out score") {
    tu::TempDir dir("cli_train");
    make_small_benchmark(dir.path());

    const RunResult r = run(
        "train data/source/manifest.json --out model.hasm --seed 3 --epochs 60 --hidden 8",
        dir.path());
    REQUIRE(r.exit_code == 0);
    const auto summary = json::parse(r.stdout_text);
    CHECK(summary.contains("final_loss"));
    CHECK(summary.contains("id_auroc"));
    const MilModel model = load_model(dir.path() / "model.hasm");
    CHECK(model.feature_dim() == 8);

    SUBCASE("inputs are left untouched") {
        const std::string before = slurp(dir.path() / "data" / "source" / "manifest.json");
        run("train data/source/manifest.json --out model2.hasm --seed 4 --epochs 5 --hidden 8",
            dir.path());
        CHECK(slurp(dir.path() / "data" / "source" / "manifest.json") == before);
    }

    SUBCASE("single-class manifests are rejected") {
        auto manifest = read_manifest(dir.path() / "data" / "source" / "manifest.json");
        for (auto& slide : manifest.slides) slide.label = 1;
        write_manifest(dir.path() / "single.json", manifest);
        // Feature paths resolve relative to the manifest, so move it next
        // to the original.
        fs::copy_file(dir.path() / "single.json",
                      dir.path() / "data" / "source" / "single.json");
        const RunResult bad =
            run("train data/source/single.json --out nope.hasm --seed 3", dir.path());
        CHECK(bad.exit_code == 2);
    }

    SUBCASE("missing manifest exits 2") {
        CHECK(run("train missing.json --out x.hasm --seed 0", dir.path()).exit_code == 2);
    }
}

TEST_CASE("prototypes wrap per-slide clustering") {
    tu::TempDir dir("cli_proto");
    make_small_benchmark(dir.path());

    const RunResult r =
        run("prototypes data/source/manifest.json --k 1 --out sp --seed 2", dir.path());
    REQUIRE(r.exit_code == 0);
    const auto manifest = read_manifest(dir.path() / "sp" / "manifest.json");
    CHECK(manifest.slides.size() == 12);

    // k = 1 prototypes are exact per-slide means of the stored features.
    const auto bags = load_bags(read_manifest(dir.path() / "data" / "source" / "manifest.json"));
    const auto protos = load_bags(manifest);
    for (std::size_t n = 0; n < bags.size(); ++n) {
        REQUIRE(protos[n].features.rows() == 1);
        CHECK(protos[n].label == bags[n].label);
        for (std::size_t k = 0; k < 8; ++k) {
            double mean = 0.0;
            for (std::size_t p = 0; p < bags[n].features.rows(); ++p)
                mean += bags[n].features(p, k);
            mean /= static_cast<double>(bags[n].features.rows());
            // Stored at real32, so compare at that precision.
            CHECK(protos[n].features(0, k) ==
                  doctest::Approx(mean).epsilon(1e-6));
        }
    }

    CHECK(run("prototypes data/source/manifest.json --k 100 --out toolarge --seed 2",
              dir.path()).exit_code == 2);
}

TEST_CASE("adapt writes the transport map, loss log and adapted model") {
    tu::TempDir dir("cli_adapt");
    make_small_benchmark(dir.path());
    REQUIRE(run("train data/source/manifest.json --out model.hasm --seed 3 --epochs 40 "
                "--hidden 8",
                dir.path()).exit_code == 0);
    REQUIRE(run("prototypes data/source/manifest.json --k 2 --out sp --seed 2",
                dir.path()).exit_code == 0);
    REQUIRE(run("prototypes data/target/manifest.json --k 2 --out tp --seed 2",
                dir.path()).exit_code == 0);

    SUBCASE("zero steps returns the identity map") {
        const RunResult r = run(
            "adapt --src-protos sp/manifest.json --tgt-protos tp/manifest.json "
            "--model model.hasm --out tmap.hasm --seed 5 --steps 0",
            dir.path());
        REQUIRE(r.exit_code == 0);
        const TransportMap map = load_transport_map(dir.path() / "tmap.hasm");
        CHECK(map.W == Matrix(8, 8));
        for (double v : map.bias) CHECK(v == 0.0);
        const auto summary = json::parse(r.stdout_text);
        CHECK(!summary["adapted_model"].is_null());
    }

    SUBCASE("loss log carries one line per step") {
        const RunResult r = run(
            "adapt --src-protos sp/manifest.json --tgt-protos tp/manifest.json "
            "--model model.hasm --out tmap.hasm --seed 5 --steps 7 --loss-log steps.jsonl "
            "--no-refit-head",
            dir.path());
        REQUIRE(r.exit_code == 0);
        std::ifstream log(dir.path() / "steps.jsonl");
        std::string line;
        int lines = 0;
        while (std::getline(log, line)) {
            const auto entry = json::parse(line);
            CHECK(entry.contains("total"));
            CHECK(entry.contains("das"));
            CHECK(entry.contains("sgir"));
            CHECK(entry.contains("pacr"));
            ++lines;
        }
        CHECK(lines == 7);
        const auto summary = json::parse(r.stdout_text);
        CHECK(summary["adapted_model"].is_null());
    }

    SUBCASE("partial marginals are a flag away") {
        const RunResult r = run(
            "adapt --src-protos sp/manifest.json --tgt-protos tp/manifest.json "
            "--model model.hasm --out tmap_partial.hasm --seed 5 --steps 5 --partial "
            "--tau 1.0 --no-refit-head",
            dir.path());
        REQUIRE(r.exit_code == 0);
        CHECK(fs::exists(dir.path() / "tmap_partial.hasm"));
    }

    SUBCASE("dimension mismatch exits 2") {
        REQUIRE(run("synth --out other --seed 8 --slides 4 --patches-min 8 --patches-max 8 "
                    "--dim 6",
                    dir.path()).exit_code == 0);
        REQUIRE(run("prototypes other/source/manifest.json --k 2 --out op --seed 2",
                    dir.path()).exit_code == 0);
        CHECK(run("adapt --src-protos op/manifest.json --tgt-protos tp/manifest.json "
                  "--model model.hasm --out bad.hasm --seed 5 --steps 1",
                  dir.path()).exit_code == 2);
    }
}

TEST_CASE("eval reports scores and optional alignment diagnostics") {
    tu::TempDir dir("cli_eval");
    make_small_benchmark(dir.path());
    REQUIRE(run("train data/source/manifest.json --out model.hasm --seed 3 --epochs 40 "
                "--hidden 8",
                dir.path()).exit_code == 0);

    SUBCASE("report matches a library-level evaluation byte for byte") {
        const RunResult r = run("eval data/target/manifest.json --model model.hasm", dir.path());
        REQUIRE(r.exit_code == 0);

        const auto bags =
            load_bags(read_manifest(dir.path() / "data" / "target" / "manifest.json"));
        const MilModel model = load_model(dir.path() / "model.hasm");
        const std::string expect = report_to_json(evaluate(model, bags)) + "\n";
        CHECK(r.stdout_text == expect);
    }

    SUBCASE("--out writes the identical document to a file") {
        const RunResult direct =
            run("eval data/target/manifest.json --model model.hasm", dir.path());
        REQUIRE(run("eval data/target/manifest.json --model model.hasm --out report.json",
                    dir.path()).exit_code == 0);
        CHECK(slurp(dir.path() / "report.json") == direct.stdout_text);
    }

    SUBCASE("transform plus prototypes fills the alignment block") {
        REQUIRE(run("prototypes data/source/manifest.json --k 2 --out sp --seed 2",
                    dir.path()).exit_code == 0);
        REQUIRE(run("prototypes data/target/manifest.json --k 2 --out tp --seed 2",
                    dir.path()).exit_code == 0);
        REQUIRE(run("adapt --src-protos sp/manifest.json --tgt-protos tp/manifest.json "
                    "--model model.hasm --out tmap.hasm --seed 5 --steps 5",
                    dir.path()).exit_code == 0);
        const RunResult r = run(
            "eval data/target/manifest.json --model model_adapted.hasm --transform tmap.hasm "
            "--src-protos sp/manifest.json --tgt-protos tp/manifest.json",
            dir.path());
        REQUIRE(r.exit_code == 0);
        const auto doc = json::parse(r.stdout_text);
        REQUIRE(!doc["alignment"].is_null());
        CHECK(doc["alignment"].contains("mean_transport_cost"));
        CHECK(doc["alignment"].contains("marginal_violation"));
        CHECK(doc["alignment"].contains("mean_gram_distortion"));
        CHECK(doc["alignment"].contains("mean_attention_divergence"));
    }

    SUBCASE("missing model exits 2") {
        CHECK(run("eval data/target/manifest.json --model absent.hasm", dir.path()).exit_code ==
              2);
    }
}
