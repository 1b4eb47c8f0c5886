#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "sre_test_cli";

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

struct Run {
    int code;
    std::string err;
};

Run cli(const std::string& args) {
    fs::create_directories(kRoot);
    const fs::path errfile = kRoot / "stderr.txt";
    const std::string cmd = std::string(SRE_CLI_PATH) + " " + args + " 2> " + errfile.string() + " > /dev/null";
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(errfile)};
}

fs::path write_config(const std::string& name, const std::string& text) {
    fs::create_directories(kRoot);
    const fs::path p = kRoot / name;
    std::ofstream(p) << text;
    return p;
}

std::string run_dir(const std::string& name) {
    const fs::path d = kRoot / name;
    fs::remove_all(d);
    return d.string();
}

const char* kGaussian = R"({
  "task": {"kind": "gaussian", "mean": [0.5, -0.5], "rho": 0.8},
  "paradigm": {"kind": "cosine-flow"},
  "denoiser": {"kind": "oracle"},
  "schedule": {"kind": "sequential", "d": 32},
  "sampler": {"method": "ddim", "eta": 1.0, "seed": 4, "chains": 64, "record": true}
})";

}  // namespace

TEST_CASE("sample is bit-identical across runs and writes provenance") {
    const auto cfg = write_config("gauss.json", kGaussian);
    const auto a = run_dir("a");
    const auto b = run_dir("b");
    REQUIRE(cli("sample --config " + cfg.string() + " --out " + a).code == 0);
    REQUIRE(cli("sample --config " + cfg.string() + " --out " + b).code == 0);
    const std::string sa = slurp(fs::path(a) / "samples.csv");
    CHECK(!sa.empty());
    CHECK(sa == slurp(fs::path(b) / "samples.csv"));
    CHECK(fs::exists(fs::path(a) / "trajectory.csv"));
    CHECK(fs::exists(fs::path(a) / "resolved_config.json"));

    // the resolved config re-runs to the same result
    const auto c = run_dir("c");
    REQUIRE(cli("sample --config " + (fs::path(a) / "resolved_config.json").string() + " --out " + c).code == 0);
    CHECK(slurp(fs::path(c) / "samples.csv") == sa);

    // a different seed changes the output
    const auto d = run_dir("d");
    REQUIRE(cli("sample --config " + cfg.string() + " --seed 99 --out " + d).code == 0);
    CHECK(slurp(fs::path(d) / "samples.csv") != sa);

    // eval reads the samples and writes flat metrics
    REQUIRE(cli("eval --config " + cfg.string() + " --out " + a).code == 0);
    const auto metrics = nlohmann::json::parse(slurp(fs::path(a) / "metrics.json"));
    CHECK(metrics.contains("moment_error"));
    CHECK(metrics.contains("nll"));
    CHECK(metrics["validity_rate"].is_null());
    CHECK(metrics["moment_error"].get<double>() < 0.5);
}

TEST_CASE("thread count does not change results") {
    const auto cfg = write_config("gauss_threads.json", kGaussian);
    const auto a = run_dir("t1");
    const auto b = run_dir("t3");
    REQUIRE(cli("sample --config " + cfg.string() + " --out " + a).code == 0);
    REQUIRE(std::system(("SRE_THREADS=3 " + std::string(SRE_CLI_PATH) + " sample --config " + cfg.string() +
                         " --out " + b + " 2>/dev/null")
                            .c_str()) == 0);
    CHECK(slurp(fs::path(a) / "samples.csv") == slurp(fs::path(b) / "samples.csv"));
}

TEST_CASE("config errors exit 1 and name the keys") {
    auto unknown = write_config("unknown.json", R"({"task": {"kind": "gaussian", "mean": [0], "colour": 1}})");
    Run r = cli("sample --config " + unknown.string() + " --out " + run_dir("u"));
    CHECK(r.code == 1);
    CHECK(r.err.find("task.colour") != std::string::npos);

    auto vlb = write_config("vlb.json", R"({
      "task": {"kind": "gaussian", "mean": [0]},
      "paradigm": {"kind": "rectified-flow"},
      "denoiser": {"kind": "neural", "variance_head": true, "checkpoint": "x.bin"},
      "training": {"losses": [{"kind": "vlb"}]}
    })");
    r = cli("train --config " + vlb.string() + " --out " + run_dir("v"));
    CHECK(r.code == 1);
    CHECK(r.err.find("vlb") != std::string::npos);
    CHECK(r.err.find("rectified-flow") != std::string::npos);

    auto anc = write_config("anc.json", R"({
      "task": {"kind": "gaussian", "mean": [0]},
      "paradigm": {"kind": "cosine-flow"},
      "sampler": {"method": "ddpm-ancestral"}
    })");
    CHECK(cli("sample --config " + anc.string() + " --out " + run_dir("w")).code == 1);

    auto badtype = write_config("badtype.json", R"({"schedule": {"d": "many"}})");
    r = cli("sample --config " + badtype.string() + " --out " + run_dir("x"));
    CHECK(r.code == 1);
    CHECK(r.err.find("schedule.d") != std::string::npos);

    auto notjson = write_config("broken.json", "{ not json");
    CHECK(cli("sample --config " + notjson.string()).code == 1);
    CHECK(cli("sample --config " + (kRoot / "missing.json").string()).code == 1);
    CHECK(cli("sample").code == 1);
    CHECK(cli("frobnicate --config x").code == 1);

    auto nockpt = write_config("nockpt.json", R"({
      "task": {"kind": "gaussian", "mean": [0]},
      "denoiser": {"kind": "neural", "checkpoint": "does_not_exist.bin"}
    })");
    r = cli("sample --config " + nockpt.string() + " --out " + run_dir("y"));
    CHECK(r.code == 1);
    CHECK(r.err.find("does_not_exist.bin") != std::string::npos);
}

TEST_CASE("runtime errors exit 2") {
    const auto cfg = write_config("gauss_rt.json", kGaussian);
    const auto dir = run_dir("rt");
    fs::create_directories(dir);
    std::ofstream(fs::path(dir) / "samples.csv") << "chain,variable,value_0\n0,0,abc\n";
    CHECK(cli("eval --config " + cfg.string() + " --out " + dir).code == 2);
}

TEST_CASE("viz-schedule renders the schedule grid") {
    auto cfg = write_config("viz.json", R"({
      "task": {"kind": "gaussian", "mean": [0, 0, 0, 0], "rho": 0.5},
      "schedule": {"kind": "sequential", "d": 16, "overlap": 0.0}
    })");
    const auto dir = run_dir("viz");
    REQUIRE(cli("viz-schedule --config " + cfg.string() + " --out " + dir).code == 0);
    const std::string pgm = slurp(fs::path(dir) / "schedule.pgm");
    CHECK(pgm.substr(0, 3) == "P5\n");
    std::istringstream hdr(pgm.substr(3));
    std::size_t w = 0, h = 0;
    hdr >> w >> h;
    CHECK(w == 17 * 8);
    CHECK(h == 4 * 8);
    CHECK(fs::exists(fs::path(dir) / "schedule.csv"));

    // adaptive schedules are realized on one chain
    auto adaptive = write_config("viz_adaptive.json", R"({
      "task": {"kind": "latin-square", "order": 2, "sigma": 0.1},
      "schedule": {"kind": "adaptive-certainty", "d": 16, "k": 1}
    })");
    const auto adir = run_dir("viz_adaptive");
    REQUIRE(cli("viz-schedule --config " + adaptive.string() + " --out " + adir).code == 0);
    CHECK(fs::exists(fs::path(adir) / "schedule.pgm"));
}

TEST_CASE("train then sample with the checkpoint") {
    const auto dir = run_dir("neural");
    const std::string ckpt = (fs::path(dir) / "checkpoint.bin").string();
    nlohmann::json cfg = {
        {"task", {{"kind", "gaussian"}, {"mean", {0.5}}}},
        {"paradigm", {{"kind", "rectified-flow"}}},
        {"denoiser",
         {{"kind", "neural"}, {"encoder", {8}}, {"head", {8}}, {"uncertainty_head", true}, {"checkpoint", ckpt}}},
        {"training",
         {{"steps", 30}, {"batch", 4}, {"losses", {{{"kind", "mse"}}, {{"kind", "nll"}, {"weight", 0.1}}}}}},
        {"schedule", {{"kind", "adaptive-certainty"}, {"d", 8}}},
        {"sampler", {{"chains", 8}}},
    };
    const auto path = write_config("neural.json", cfg.dump());
    REQUIRE(cli("train --config " + path.string() + " --out " + dir).code == 0);
    CHECK(fs::exists(ckpt));
    CHECK(slurp(fs::path(dir) / "checkpoint.bin").substr(0, 5) == "SRNN1");
    std::ifstream trace(fs::path(dir) / "loss_trace.csv");
    std::size_t lines = 0;
    for (std::string line; std::getline(trace, line);) ++lines;
    CHECK(lines == 31);

    REQUIRE(cli("sample --config " + path.string() + " --out " + dir).code == 0);
    CHECK(fs::exists(fs::path(dir) / "predictions.csv"));
    REQUIRE(cli("eval --config " + path.string() + " --out " + dir).code == 0);
    const auto m = nlohmann::json::parse(slurp(fs::path(dir) / "metrics.json"));
    CHECK(m["uncertainty_calibration"].is_number());
}

TEST_CASE("shipped configs resolve") {
    for (const char* name : {"latin_oracle.json", "gaussian_parallel.json", "sequence_rolling.json"}) {
        const auto cfg = (fs::path(SRE_CONFIG_DIR) / name).string();
        const auto dir = run_dir(std::string("shipped_") + name);
        CHECK_MESSAGE(cli("viz-schedule --config " + cfg + " --out " + dir).code == 0, name);
    }
}
