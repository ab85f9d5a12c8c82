#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "t2ldm/cli.hpp"

namespace fs = std::filesystem;
using t2ldm::cli::run;

namespace {

struct Capture {
  std::ostringstream out, err;
  std::streambuf* old_out = std::cout.rdbuf(out.rdbuf());
  std::streambuf* old_err = std::cerr.rdbuf(err.rdbuf());
  ~Capture() {
    std::cout.rdbuf(old_out);
    std::cerr.rdbuf(old_err);
  }
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

int count_ext(const fs::path& dir, const std::string& suffix) {
  int n = 0;
  for (const auto& e : fs::directory_iterator(dir)) n += e.path().filename().string().ends_with(suffix);
  return n;
}

fs::path scratch_dir() {
  const auto d = fs::temp_directory_path() / "t2ldm_cli_test";
  static bool cleaned = false;
  if (!cleaned) {
    fs::remove_all(d);
    cleaned = true;
  }
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST_CASE("help and argument errors") {
  {
    Capture c;
    CHECK(run({"--help"}) == 0);
    for (const char* verb : {"synth", "annotate", "train", "sample", "control-train", "upsample",
                             "downsample", "eval", "project"}) {
      CHECK(c.out.str().find(verb) != std::string::npos);
    }
  }
  Capture c;
  CHECK(run({}) == 1);
  CHECK(run({"fly"}) == 1);
  CHECK(run({"synth", "--scenes", "2"}) == 1);
  CHECK(run({"synth", "--scenes", "two", "--out", "x"}) == 1);
  CHECK(run({"synth", "--scenes", "2", "--out", (scratch_dir() / "bad").string(), "--template", "colour"}) == 1);
  CHECK(run({"sample", "--ckpt", (scratch_dir() / "missing.ckpt").string(), "--out", (scratch_dir() / "s").string()}) != 0);
}

TEST_CASE("pipeline from synthesis to evaluation") {
  const auto d = scratch_dir();
  const auto a = d / "scenes_a", b = d / "scenes_b";
  REQUIRE(run({"synth", "--scenes", "4", "--out", a.string(), "--seed", "7", "--template", "wea_qua"}) == 0);
  REQUIRE(run({"synth", "--scenes", "4", "--out", b.string(), "--seed", "7", "--template", "wea_qua"}) == 0);
  CHECK(count_ext(a, ".bin") == 4);
  CHECK(count_ext(a, ".jsonl") == 4);
  for (const auto& e : fs::directory_iterator(a)) {
    CHECK(slurp(e.path()) == slurp(b / e.path().filename()));
  }
  CHECK(nlohmann::json::parse(slurp(a / "manifest.json"))["config"]["seed"] == 7);

  const auto prompts = d / "prompts.jsonl";
  REQUIRE(run({"annotate", "--scenes", a.string(), "--out", prompts.string(), "--template", "quantity"}) == 0);
  std::ifstream pin(prompts);
  int lines = 0;
  for (std::string line; std::getline(pin, line);) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.contains("id"));
    CHECK(j.contains("prompt"));
    CHECK(j["parts"].contains("quantity"));
    ++lines;
  }
  CHECK(lines == 4);

  const auto ckpt = d / "model.ckpt";
  REQUIRE(run({"train", "--data", a.string(), "--out", ckpt.string(), "--steps", "3", "--seed", "1"}) == 0);
  CHECK(fs::exists(ckpt));
  CHECK(slurp(d / "model.ckpt.csv").starts_with("step,loss_denoise,loss_guidance,loss_align,lambda,lr"));
  CHECK(fs::exists(d / "model.ckpt.manifest.json"));

  const auto cfg = d / "train.cfg";
  std::ofstream(cfg) << "total_steps = 2\nno_such_key = 1\n";
  CHECK(run({"train", "--data", a.string(), "--out", (d / "bad.ckpt").string(), "--config", cfg.string()}) == 1);

  const auto gen = d / "gen";
  REQUIRE(run({"sample", "--ckpt", ckpt.string(), "--prompt", "Rainy. One car is around one pedestrian.",
               "--n", "2", "--out", gen.string(), "--seed", "3"}) == 0);
  CHECK(count_ext(gen, ".bin") == 2);
  CHECK(count_ext(gen, "_bev.png") == 2);
  CHECK(count_ext(gen, "_range.png") == 2);

  const auto report = d / "report.json";
  REQUIRE(run({"eval", "--gen", gen.string(), "--ref", a.string(), "--out", report.string()}) == 0);
  const auto j = nlohmann::json::parse(slurp(report));
  for (const char* k : {"jsd", "mmd_e4", "cd_e5", "mse_e5", "emd_e3", "tbr_pct", "n_generated", "n_reference"}) {
    CHECK(j.contains(k));
  }
  CHECK(j["n_generated"] == 2);
  CHECK(j["n_reference"] == 4);
  CHECK(j["jsd"].get<double>() >= 0.0);
  CHECK(j["jsd"].get<double>() <= 1.0);

  const auto ctl = d / "control.ckpt";
  REQUIRE(run({"control-train", "--ckpt", ckpt.string(), "--data", a.string(), "--out", ctl.string(),
               "--steps", "2", "--rate", "4"}) == 0);
  const auto up = d / "up";
  const auto input = a / "scene_00000.bin";
  REQUIRE(run({"upsample", "--ckpt", ckpt.string(), "--control", ctl.string(), "--input", input.string(),
               "--out", up.string(), "--reference", input.string()}) == 0);
  CHECK(count_ext(up, ".bin") >= 1);
  CHECK(run({"downsample", "--ckpt", ckpt.string(), "--control", ctl.string(), "--input", input.string(),
             "--out", (d / "down").string(), "--rows", "64"}) == 1);

  const auto rmg = d / "scene.rmg";
  REQUIRE(run({"project", "--input", input.string(), "--out", rmg.string(), "--height", "8", "--width",
               "128", "--png", (d / "scene.png").string()}) == 0);
  CHECK(slurp(rmg).starts_with("RMG1"));
  CHECK(fs::file_size(d / "scene.png") > 0);
}
