#include "t2ldm/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>

#include "t2ldm/annotate.hpp"
#include "t2ldm/controlnet.hpp"
#include "t2ldm/evalmetrics.hpp"
#include "t2ldm/network.hpp"
#include "t2ldm/parallel.hpp"
#include "t2ldm/plot.hpp"
#include "t2ldm/rangemap.hpp"
#include "t2ldm/schedule.hpp"
#include "t2ldm/synthscene.hpp"
#include "t2ldm/textenc.hpp"
#include "t2ldm/training.hpp"

namespace t2ldm::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using network::Scalar;
using network::Tensor;

namespace {

// Thrown for bad inputs discovered after flag parsing; maps to exit status 1.
struct ValidationError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

void require(bool ok, const std::string& msg) {
  if (!ok) throw ValidationError(msg);
}

void require_file(const fs::path& p, const std::string& what) {
  require(fs::is_regular_file(p), what + " '" + p.string() + "' does not exist");
}

void require_dir(const fs::path& p, const std::string& what) {
  require(fs::is_directory(p), what + " '" + p.string() + "' is not a directory");
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

fs::path manifest_for_file(const fs::path& out) { return fs::path(out.string() + ".manifest.json"); }

void write_manifest(const fs::path& path, const std::string& verb, json resolved) {
  write_json(path, {{"tool", "t2ldm"}, {"verb", verb}, {"config", std::move(resolved)}});
}

std::string stem_name(const std::string& prefix, std::size_t i) {
  std::ostringstream os;
  os << prefix << '_' << std::setw(5) << std::setfill('0') << i;
  return os.str();
}

/// Sorted *.bin files of a directory.
std::vector<fs::path> cloud_files(const fs::path& dir) {
  require_dir(dir, "data directory");
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".bin") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

rangemap::PointCloud read_cloud_with_labels(const fs::path& bin) {
  auto cloud = rangemap::read_point_cloud(bin);
  auto label_path = bin;
  label_path.replace_extension(".label");
  if (fs::is_regular_file(label_path)) {
    std::ifstream is(label_path, std::ios::binary);
    std::uint32_t v = 0;
    while (is.read(reinterpret_cast<char*>(&v), 4)) cloud.labels.push_back(static_cast<int>(v));
    if (cloud.labels.size() != cloud.size()) {
      throw std::runtime_error(label_path.string() + ": label count does not match the cloud");
    }
  }
  return cloud;
}

std::optional<std::string> sidecar_prompt(const fs::path& bin) {
  auto side = bin;
  side.replace_extension(".jsonl");
  if (!fs::is_regular_file(side)) return std::nullopt;
  std::ifstream is(side);
  std::string line;
  std::getline(is, line);
  const auto j = json::parse(line);
  if (!j.contains("prompt")) return std::nullopt;
  return j["prompt"].get<std::string>();
}

std::vector<Scalar> normalized_values(const rangemap::PointCloud& cloud,
                                      const rangemap::SensorConfig& sensor) {
  const auto norm = rangemap::normalize(rangemap::project(cloud, sensor));
  return {norm.values.begin(), norm.values.end()};
}

rangemap::RangeImage to_range_image(const std::vector<float>& values,
                                    const rangemap::SensorConfig& sensor) {
  rangemap::NormalizedImage norm(sensor);
  norm.values = values;
  return rangemap::denormalize(norm, sensor);
}

void write_outputs(const fs::path& dir, const std::string& stem, const rangemap::RangeImage& img) {
  const auto cloud = rangemap::unproject(img);
  rangemap::write_point_cloud(dir / (stem + ".bin"), cloud);
  plot::write_png(dir / (stem + "_range.png"), plot::range_image_plot(img));
  plot::write_png(dir / (stem + "_bev.png"), plot::bev_plot(cloud, img.config.depth_max));
}

network::UNetConfig model_config(const std::string& model, int height, int width) {
  network::UNetConfig c;
  if (model == "desk") {
    c = network::UNetConfig::desk();
  } else if (model != "full") {
    throw ValidationError("unknown model '" + model + "' (expected desk or full)");
  }
  if (height > 0) c.sensor.height = height;
  if (width > 0) c.sensor.width = width;
  c.validate();
  return c;
}

training::TrainConfig train_config(const std::string& model, std::int64_t steps, std::uint64_t seed,
                                   const std::vector<std::string>& sets, const std::string& config) {
  auto tc = model == "desk" ? training::TrainConfig::desk() : training::TrainConfig{};
  if (steps >= 0) tc.total_steps = steps;
  tc.seed = seed;
  std::string text;
  for (const auto& s : sets) text += s + "\n";
  training::apply_config_text(text, tc);
  // The config file has the last word over flags.
  if (!config.empty()) {
    require_file(config, "config file");
    training::apply_config_file(config, tc);
  }
  tc.validate();
  return tc;
}

struct LoadedDn {
  std::unique_ptr<network::DenoiseNet> dn;
  training::TrainConfig train;
  network::Checkpoint ckpt;
};

LoadedDn load_dn(const fs::path& path, bool use_ema) {
  require_file(path, "checkpoint");
  LoadedDn r;
  r.ckpt = network::load_checkpoint(path);
  const auto cfg = network::unet_config_from_json(r.ckpt.config.at("unet"));
  r.dn = std::make_unique<network::DenoiseNet>(cfg, 0);
  const bool ema = use_ema && r.ckpt.has("ema.conv_in.w");
  r.ckpt.load_into(ema ? "ema." : "dn.", r.dn->parameters());
  training::TrainConfig tc;
  training::apply_config_text("", tc);
  if (r.ckpt.config.contains("train")) {
    std::ostringstream os;
    for (const auto& [k, v] : r.ckpt.config["train"].items()) {
      if (v.is_array()) {
        os << k << " = ";
        for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i].get<double>();
        os << '\n';
      } else if (v.is_boolean()) {
        os << k << " = " << (v.get<bool>() ? "true" : "false") << '\n';
      } else {
        os << k << " = " << v.dump() << '\n';
      }
    }
    training::apply_config_text(os.str(), tc);
  }
  r.train = tc;
  return r;
}

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
  std::size_t scenes = 0;
  std::string out;
  std::uint64_t seed = 0;
  int height = 8, width = 128;
  std::string templ = "quantity";
};

int cmd_synth(const SynthArgs& a) {
  require(a.scenes > 0, "--scenes must be positive");
  synthscene::SceneSpec base;
  base.sensor = model_config("desk", a.height, a.width).sensor;
  base.prompt_template = a.templ;
  annotate::parse_template(a.templ);
  fs::create_directories(a.out);
  parallel_for(a.scenes, [&](std::size_t i) {
    auto spec = synthscene::random_scene_spec(base, a.seed * 1000003ULL + i);
    auto rec = synthscene::generate_scene(spec);
    rec.id = stem_name("scene", i);
    synthscene::write_scene(a.out, rec.id, rec);
  });
  write_manifest(fs::path(a.out) / "manifest.json", "synth",
                 {{"scenes", a.scenes},
                  {"seed", a.seed},
                  {"template", a.templ},
                  {"sensor", {{"height", base.sensor.height}, {"width", base.sensor.width}}}});
  std::cerr << "wrote " << a.scenes << " scenes to " << a.out << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// annotate

struct AnnotateArgs {
  std::string scenes, out, templ = "quantity";
};

int cmd_annotate(const AnnotateArgs& a) {
  std::vector<fs::path> inputs;
  if (fs::is_directory(a.scenes)) {
    for (const auto& e : fs::directory_iterator(a.scenes)) {
      if (e.is_regular_file() && e.path().extension() == ".jsonl") inputs.push_back(e.path());
    }
    std::sort(inputs.begin(), inputs.end());
  } else {
    require_file(a.scenes, "scenes file");
    inputs.push_back(a.scenes);
  }
  const auto keys = annotate::parse_template(a.templ);
  if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
  std::ofstream os(a.out);
  if (!os) throw std::runtime_error("cannot write " + a.out);
  std::size_t n = 0;
  for (const auto& in : inputs) {
    for (const auto& s : annotate::read_scenes_jsonl(in)) {
      const auto ann = annotate::annotate_scene(s.boxes, s.meta, annotate::AnnotationRules{}, keys);
      const std::string id = s.id.empty() ? stem_name("scene", n) : s.id;
      os << annotate::annotation_to_json(id, ann).dump() << '\n';
      ++n;
    }
  }
  write_manifest(manifest_for_file(a.out), "annotate",
                 {{"scenes", a.scenes}, {"template", a.templ}, {"records", n}});
  std::cerr << "annotated " << n << " scenes\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string data, out, config, prompts, log, model = "desk";
  std::vector<std::string> sets;
  std::int64_t steps = -1;
  std::uint64_t seed = 0;
  bool no_scrg = false, unconditional = false;
  int height = 0, width = 0;
};

std::vector<training::Example> load_examples(const fs::path& dir, const rangemap::SensorConfig& sensor,
                                             const std::string& prompts_file, bool conditional) {
  std::map<std::string, std::string> by_id;
  if (!prompts_file.empty()) {
    require_file(prompts_file, "prompts file");
    for (const auto& r : textenc::read_prompts_jsonl(prompts_file)) by_id[r.id] = r.prompt;
  }
  const auto files = cloud_files(dir);
  require(!files.empty(), "no .bin clouds in '" + dir.string() + "'");
  std::vector<training::Example> data(files.size());
  parallel_for(files.size(), [&](std::size_t i) {
    data[i].x0 = normalized_values(rangemap::read_point_cloud(files[i]), sensor);
    if (!conditional) return;
    const auto stem = files[i].stem().string();
    if (auto it = by_id.find(stem); it != by_id.end()) {
      data[i].prompt = it->second;
    } else if (auto p = sidecar_prompt(files[i])) {
      data[i].prompt = *p;
    } else {
      throw ValidationError("no prompt for " + stem);
    }
  });
  return data;
}

int cmd_train(const TrainArgs& a) {
  const auto net = model_config(a.model, a.height, a.width);
  auto tc = train_config(a.model, a.steps, a.seed, a.sets, a.config);
  if (a.no_scrg) tc.scrg = false;
  const bool conditional = !a.unconditional;
  const auto data = load_examples(a.data, net.sensor, a.prompts, conditional);

  training::Trainer trainer(net, tc);
  const fs::path log_path = a.log.empty() ? fs::path(a.out + ".csv") : fs::path(a.log);
  if (log_path.has_parent_path()) fs::create_directories(log_path.parent_path());
  std::ofstream log(log_path);
  if (!log) throw std::runtime_error("cannot write " + log_path.string());
  log << training::log_header() << '\n';

  std::mt19937_64 pick(tc.seed ^ 0x5deece66dULL);
  std::uniform_int_distribution<std::size_t> idx(0, data.size() - 1);
  for (std::int64_t s = 0; s < tc.total_steps; ++s) {
    std::vector<std::size_t> ids(static_cast<std::size_t>(tc.batch_size));
    for (auto& i : ids) i = idx(pick);
    const auto batch =
        training::make_batch(data, ids, net.sensor.height, net.sensor.width, conditional);
    const auto rep = trainer.train_step(batch);
    log << training::log_row(rep) << '\n';
    if ((s + 1) % 100 == 0 || s + 1 == tc.total_steps) {
      std::cerr << "step " << s + 1 << "/" << tc.total_steps << " denoise " << rep.loss_denoise
                << " align " << rep.loss_align << "\n";
    }
  }
  auto ckpt = trainer.checkpoint();
  ckpt.config["conditional"] = conditional;
  if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
  network::save_checkpoint(a.out, ckpt);
  write_manifest(manifest_for_file(a.out), "train",
                 {{"data", a.data},
                  {"examples", data.size()},
                  {"conditional", conditional},
                  {"unet", network::to_json(net)},
                  {"train", training::to_json(tc)}});
  return kExitOk;
}

// ---------------------------------------------------------------------------
// sample

struct SampleArgs {
  std::string ckpt, prompt, prompts, out;
  std::size_t n = 1;
  std::uint64_t seed = 0;
  double cfg_scale = 2.0;
  int rows = 0;
  bool live = false;
};

std::vector<float> sample_one(const network::DenoiseNet& dn, const schedule::NoiseSchedule& sched,
                              const std::string& prompt, bool conditional, int rows, int width,
                              double cfg_scale, std::uint64_t seed) {
  const schedule::SampleShape shape{1, 2, rows, width};
  std::optional<network::TextBatch> cond, uncond;
  if (conditional) {
    cond = network::make_text_batch({textenc::encode_text(prompt)});
    uncond = network::make_text_batch({textenc::null_embedding()});
  }
  const schedule::VModel model = [&](const std::vector<float>& x, int t, bool c) {
    nn::NoGradGuard guard;
    const Tensor xt = Tensor::from({1, 2, rows, width}, std::vector<Scalar>(x.begin(), x.end()));
    const network::TextBatch* text = conditional ? (c ? &*cond : &*uncond) : nullptr;
    const auto out = dn.forward(xt, {t}, text);
    return std::vector<float>(out.v.values().begin(), out.v.values().end());
  };
  schedule::SamplerOptions opt;
  opt.has_condition = conditional;
  opt.cfg_scale = cfg_scale;
  opt.seed = seed;
  return schedule::sample_loop(model, shape, sched, opt);
}

int cmd_sample(const SampleArgs& a) {
  require(a.n > 0, "--n must be positive");
  require(a.prompt.empty() || a.prompts.empty(), "--prompt and --prompts are exclusive");
  require(a.cfg_scale >= 0, "--cfg-scale must be >= 0");
  auto loaded = load_dn(a.ckpt, !a.live);
  const auto& net = loaded.dn->config();
  const bool conditional = loaded.ckpt.config.value("conditional", true);
  std::vector<std::string> prompts(a.n, a.prompt);
  if (!a.prompts.empty()) {
    require_file(a.prompts, "prompts file");
    const auto recs = textenc::read_prompts_jsonl(a.prompts);
    require(!recs.empty(), "prompts file is empty");
    for (std::size_t i = 0; i < a.n; ++i) prompts[i] = recs[i % recs.size()].prompt;
  }
  const int rows = a.rows > 0 ? a.rows : net.sensor.height;
  require(rows % net.total_stride().first == 0,
          "--rows must be a multiple of " + std::to_string(net.total_stride().first));
  const auto sensor = net.sensor.resized(rows, net.sensor.width);
  const auto sched = schedule::cosine_schedule(loaded.train.diffusion_steps);
  fs::create_directories(a.out);
  std::vector<textenc::PromptRecord> records(a.n);
  parallel_for(a.n, [&](std::size_t k) {
    const auto values = sample_one(*loaded.dn, sched, prompts[k], conditional, rows,
                                   net.sensor.width, a.cfg_scale, a.seed * 7919ULL + k);
    const auto stem = stem_name("sample", k);
    write_outputs(a.out, stem, to_range_image(values, sensor));
    records[k] = {stem, prompts[k]};
  });
  textenc::write_prompts_jsonl(fs::path(a.out) / "prompts.jsonl", records);
  write_manifest(fs::path(a.out) / "manifest.json", "sample",
                 {{"ckpt", a.ckpt},
                  {"n", a.n},
                  {"seed", a.seed},
                  {"cfg_scale", a.cfg_scale},
                  {"rows", rows},
                  {"weights", a.live ? "live" : "ema"},
                  {"conditional", conditional}});
  std::cerr << "wrote " << a.n << " samples to " << a.out << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// control-train, upsample, downsample

struct ControlTrainArgs {
  std::string ckpt, data, out, task = "sparse", config;
  std::vector<std::string> sets;
  int rate = 4;
  std::int64_t steps = -1;
  std::uint64_t seed = 0;
  bool feed_xt = false;
};

controlnet::ConditionImage build_condition(const std::string& task, const rangemap::PointCloud& cloud,
                                           int rate, const rangemap::SensorConfig& sensor) {
  if (task == "sparse") return controlnet::make_sparse_condition(cloud, rate, sensor);
  if (task == "semantic") {
    return controlnet::make_semantic_condition(cloud, synthscene::kLabelCount, sensor);
  }
  throw ValidationError("unknown task '" + task + "' (expected sparse or semantic)");
}

int cmd_control_train(const ControlTrainArgs& a) {
  require(a.rate >= 1, "--rate must be >= 1");
  require(a.task == "sparse" || a.task == "semantic", "--task must be sparse or semantic");
  auto loaded = load_dn(a.ckpt, true);
  const auto& net = loaded.dn->config();
  auto tc = train_config("desk", a.steps, a.seed, a.sets, a.config);
  tc.diffusion_steps = loaded.train.diffusion_steps;
  tc.validate();
  const auto files = cloud_files(a.data);
  require(!files.empty(), "no .bin clouds in '" + a.data + "'");
  std::vector<controlnet::ControlExample> data(files.size());
  parallel_for(files.size(), [&](std::size_t i) {
    const auto cloud = read_cloud_with_labels(files[i]);
    data[i].x0 = normalized_values(cloud, net.sensor);
    data[i].condition = build_condition(a.task, cloud, a.rate, net.sensor);
  });
  controlnet::ControlConfig cc;
  cc.condition_channels = a.task == "sparse" ? 2 : 1;
  cc.feed_xt = a.feed_xt;
  cc.seed = a.seed;
  controlnet::ControlTrainer trainer(*loaded.dn, cc, tc);
  std::mt19937_64 pick(tc.seed ^ 0x5deece66dULL);
  std::uniform_int_distribution<std::size_t> idx(0, data.size() - 1);
  for (std::int64_t s = 0; s < tc.total_steps; ++s) {
    std::vector<controlnet::ControlExample> batch;
    for (int b = 0; b < tc.batch_size; ++b) batch.push_back(data[idx(pick)]);
    const double loss = trainer.train_step(batch);
    if ((s + 1) % 100 == 0 || s + 1 == tc.total_steps) {
      std::cerr << "control step " << s + 1 << "/" << tc.total_steps << " loss " << loss << "\n";
    }
  }
  auto ckpt = trainer.checkpoint();
  ckpt.config["control"]["task"] = a.task;
  ckpt.config["control"]["rate"] = a.rate;
  ckpt.config["dn_checkpoint"] = a.ckpt;
  if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
  network::save_checkpoint(a.out, ckpt);
  write_manifest(manifest_for_file(a.out), "control-train",
                 {{"ckpt", a.ckpt},
                  {"data", a.data},
                  {"task", a.task},
                  {"rate", a.rate},
                  {"feed_xt", a.feed_xt},
                  {"train", training::to_json(tc)}});
  return kExitOk;
}

struct ControlSampleArgs {
  std::string ckpt, control, input, out, reference;
  std::uint64_t seed = 0;
  int rows = 0;
};

int cmd_control_sample(const ControlSampleArgs& a, const std::string& verb) {
  auto loaded = load_dn(a.ckpt, true);
  const auto& net = loaded.dn->config();
  require_file(a.control, "control checkpoint");
  const auto cckpt = network::load_checkpoint(a.control);
  require(cckpt.config.contains("control"), "'" + a.control + "' is not a control checkpoint");
  const auto& cj = cckpt.config["control"];
  controlnet::ControlConfig cc;
  cc.condition_channels = cj.at("condition_channels").get<int>();
  cc.feed_xt = cj.value("feed_xt", false);
  controlnet::ControlState state(*loaded.dn, cc);
  cckpt.load_into("control.", state.parameters());
  const std::string task = cj.value("task", std::string("sparse"));

  const int rows = a.rows > 0 ? a.rows : net.sensor.height;
  require(rows % net.total_stride().first == 0,
          "--rows must be a multiple of " + std::to_string(net.total_stride().first));
  if (verb == "downsample") require(rows < net.sensor.height, "--rows must be below the trained height");
  const auto sensor = net.sensor.resized(rows, net.sensor.width);
  require_file(a.input, "input cloud");
  const auto cloud = read_cloud_with_labels(a.input);
  require(!cloud.empty(), "input cloud is empty");
  // The input is already the sparse observation; it is projected as is.
  const auto cond = controlnet::condition_tensor({build_condition(task, cloud, 1, sensor)});
  const schedule::SampleShape shape{1, 2, rows, net.sensor.width};
  const auto sched = schedule::cosine_schedule(loaded.train.diffusion_steps);
  schedule::SamplerOptions opt;
  opt.seed = a.seed;
  const auto values = schedule::sample_loop(controlnet::control_model(state, cond, shape), shape, sched, opt);
  fs::create_directories(a.out);
  const auto stem = fs::path(a.input).stem().string() + (verb == "upsample" ? "_dense" : "_sparse");
  const auto img = to_range_image(values, sensor);
  write_outputs(a.out, stem, img);
  json resolved = {{"ckpt", a.ckpt}, {"control", a.control}, {"input", a.input},
                   {"task", task},   {"rows", rows},         {"seed", a.seed}};
  if (!a.reference.empty()) {
    require_file(a.reference, "reference cloud");
    const auto s = evalmetrics::upsample_metrics(rangemap::unproject(img),
                                                 rangemap::read_point_cloud(a.reference));
    const json scores = {{"cd_e5", s.cd * 1e5}, {"mse_e5", s.mse * 1e5}, {"emd_e3", s.emd * 1e3}};
    write_json(fs::path(a.out) / (stem + "_scores.json"), scores);
    std::cout << scores.dump() << "\n";
    resolved["reference"] = a.reference;
  }
  write_manifest(fs::path(a.out) / (stem + ".manifest.json"), verb, resolved);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string gen, ref, out, prompts;
  bool paired = false;
  int grid = 100;
  double radius = 50.0;
};

std::vector<double> mean_mass(const std::vector<evalmetrics::BEVHistogram>& hs, int grid) {
  std::vector<double> m(static_cast<std::size_t>(grid) * grid, 0.0);
  std::size_t used = 0;
  for (const auto& h : hs) {
    if (h.empty()) continue;
    for (std::size_t i = 0; i < m.size(); ++i) m[i] += h.mass[i];
    ++used;
  }
  if (used) {
    for (auto& v : m) v /= static_cast<double>(used);
  }
  return m;
}

int cmd_eval(const EvalArgs& a) {
  require(a.grid >= 2 && a.radius > 0, "--grid must be >= 2 and --radius > 0");
  const auto gen_files = cloud_files(a.gen);
  const auto ref_files = cloud_files(a.ref);
  require(!gen_files.empty(), "no .bin clouds in '" + a.gen + "'");
  require(!ref_files.empty(), "no .bin clouds in '" + a.ref + "'");

  std::vector<rangemap::PointCloud> gen(gen_files.size()), ref(ref_files.size());
  parallel_for(gen.size(), [&](std::size_t i) { gen[i] = rangemap::read_point_cloud(gen_files[i]); });
  parallel_for(ref.size(), [&](std::size_t i) { ref[i] = rangemap::read_point_cloud(ref_files[i]); });
  std::vector<evalmetrics::BEVHistogram> hg(gen.size()), hr(ref.size());
  for (std::size_t i = 0; i < gen.size(); ++i) hg[i] = evalmetrics::bev_histogram(gen[i], a.grid, a.radius);
  for (std::size_t i = 0; i < ref.size(); ++i) hr[i] = evalmetrics::bev_histogram(ref[i], a.grid, a.radius);

  evalmetrics::EvalReport rep;
  rep.n_generated = gen.size();
  rep.n_reference = ref.size();
  const auto pg = mean_mass(hg, a.grid), pr = mean_mass(hr, a.grid);
  const bool eg = std::all_of(pg.begin(), pg.end(), [](double v) { return v == 0; });
  const bool er = std::all_of(pr.begin(), pr.end(), [](double v) { return v == 0; });
  rep.jsd = eg && er ? 0.0 : (eg || er ? 1.0 : evalmetrics::jsd(pg, pr));
  rep.mmd_e4 = evalmetrics::mmd(hg, hr) * 1e4;

  if (a.paired) {
    std::map<std::string, std::size_t> ref_by_stem;
    for (std::size_t i = 0; i < ref_files.size(); ++i) ref_by_stem[ref_files[i].stem().string()] = i;
    double cd = 0, mse = 0, emd = 0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < gen_files.size(); ++i) {
      auto it = ref_by_stem.find(gen_files[i].stem().string());
      if (it == ref_by_stem.end() || gen[i].empty() || ref[it->second].empty()) continue;
      const auto s = evalmetrics::upsample_metrics(gen[i], ref[it->second]);
      cd += s.cd;
      mse += s.mse;
      emd += s.emd;
      ++pairs;
    }
    require(pairs > 0, "--paired: no generated cloud has a same-named reference");
    rep.cd_e5 = cd / pairs * 1e5;
    rep.mse_e5 = mse / pairs * 1e5;
    rep.emd_e3 = emd / pairs * 1e3;
  }

  fs::path prompts_path = a.prompts;
  if (prompts_path.empty() && fs::is_regular_file(fs::path(a.gen) / "prompts.jsonl")) {
    prompts_path = fs::path(a.gen) / "prompts.jsonl";
  }
  if (!prompts_path.empty()) {
    require_file(prompts_path, "prompts file");
    std::map<std::string, std::string> by_id;
    for (const auto& r : textenc::read_prompts_jsonl(prompts_path)) by_id[r.id] = r.prompt;
    std::vector<std::string> prompts;
    std::vector<std::vector<evalmetrics::Detection>> dets;
    for (std::size_t i = 0; i < gen_files.size(); ++i) {
      auto it = by_id.find(gen_files[i].stem().string());
      if (it == by_id.end()) continue;
      prompts.push_back(it->second);
      dets.push_back(evalmetrics::detect_objects(gen[i]));
    }
    if (!prompts.empty()) rep.tbr_pct = evalmetrics::tbr(prompts, dets);
  }

  const json report = rep.to_json();
  const fs::path out = a.out.empty() ? fs::path(a.gen) / "report.json" : fs::path(a.out);
  write_json(out, report);
  write_manifest(manifest_for_file(out), "eval",
                 {{"gen", a.gen},
                  {"ref", a.ref},
                  {"paired", a.paired},
                  {"grid", a.grid},
                  {"radius", a.radius},
                  {"prompts", prompts_path.string()}});
  std::cout << report.dump() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// project

struct ProjectArgs {
  std::string input, out, png;
  int height = 8, width = 128;
};

int cmd_project(const ProjectArgs& a) {
  require_file(a.input, "input cloud");
  auto sensor = rangemap::SensorConfig{}.resized(a.height, a.width);
  sensor.validate();
  const auto img = rangemap::project(rangemap::read_point_cloud(a.input), sensor);
  if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
  rangemap::write_range_image(a.out, img);
  if (!a.png.empty()) plot::write_png(a.png, plot::range_image_plot(img));
  write_manifest(manifest_for_file(a.out), "project",
                 {{"input", a.input}, {"height", a.height}, {"width", a.width}, {"png", a.png}});
  return kExitOk;
}

}  // namespace

int parse_and_dispatch(int argc, const char* const* argv) {
  CLI::App app{"Text-conditioned LiDAR range-image diffusion toolkit", "t2ldm"};
  app.require_subcommand(1);
  app.footer("Verbs: synth, annotate, train, sample, control-train, upsample, downsample, eval, project.\n"
             "Exit status: 0 success, 1 invalid input, 2 runtime failure. "
             "T2LDM_THREADS caps worker threads.");

  SynthArgs sy;
  auto* synth = app.add_subcommand("synth", "Generate synthetic scenes with boxes and prompts");
  synth->add_option("--scenes", sy.scenes, "Number of scenes")->required();
  synth->add_option("--out", sy.out, "Output directory")->required();
  synth->add_option("--seed", sy.seed, "Random seed");
  synth->add_option("--height", sy.height, "Sensor rows");
  synth->add_option("--width", sy.width, "Sensor columns");
  synth->add_option("--template", sy.templ, "Prompt template keys, e.g. quantity or wea_loc");

  AnnotateArgs an;
  auto* annot = app.add_subcommand("annotate", "Turn scene box records into prompt records");
  annot->add_option("--scenes", an.scenes, "Scenes JSONL file or a directory of sidecars")->required();
  annot->add_option("--out", an.out, "Output prompts JSONL")->required();
  annot->add_option("--template", an.templ, "Prompt template keys");

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "Train the denoising network (with SCRG by default)");
  train->add_option("--data", tr.data, "Directory of .bin clouds with sidecars")->required();
  train->add_option("--out", tr.out, "Checkpoint path")->required();
  train->add_option("--config", tr.config, "key = value file; overrides flags");
  train->add_option("--set", tr.sets, "Single key=value override");
  train->add_option("--steps", tr.steps, "Total steps");
  train->add_option("--seed", tr.seed, "Random seed");
  train->add_option("--prompts", tr.prompts, "Prompt JSONL keyed by file stem");
  train->add_option("--log", tr.log, "CSV log path (default <out>.csv)");
  train->add_option("--model", tr.model, "desk or full");
  train->add_option("--height", tr.height, "Override sensor rows");
  train->add_option("--width", tr.width, "Override sensor columns");
  train->add_flag("--no-scrg", tr.no_scrg, "Disable the guidance network and alignment loss");
  train->add_flag("--unconditional", tr.unconditional, "Ignore prompts");

  SampleArgs sa;
  auto* sample = app.add_subcommand("sample", "Generate point clouds from a checkpoint");
  sample->add_option("--ckpt", sa.ckpt, "Checkpoint path")->required();
  sample->add_option("--prompt", sa.prompt, "Prompt for every sample");
  sample->add_option("--prompts", sa.prompts, "Prompt JSONL, cycled over samples");
  sample->add_option("--n", sa.n, "Number of samples");
  sample->add_option("--out", sa.out, "Output directory")->required();
  sample->add_option("--seed", sa.seed, "Random seed");
  sample->add_option("--cfg-scale", sa.cfg_scale, "Classifier-free guidance scale");
  sample->add_option("--rows", sa.rows, "Rows of the generated range image");
  sample->add_flag("--live", sa.live, "Use live weights instead of the EMA");

  ControlTrainArgs ct;
  auto* ctrain = app.add_subcommand("control-train", "Train a control encoder on a frozen network");
  ctrain->add_option("--ckpt", ct.ckpt, "Denoiser checkpoint")->required();
  ctrain->add_option("--data", ct.data, "Directory of .bin clouds")->required();
  ctrain->add_option("--out", ct.out, "Control checkpoint path")->required();
  ctrain->add_option("--task", ct.task, "sparse or semantic");
  ctrain->add_option("--rate", ct.rate, "FPS rate for sparse conditions");
  ctrain->add_option("--steps", ct.steps, "Total steps");
  ctrain->add_option("--seed", ct.seed, "Random seed");
  ctrain->add_option("--config", ct.config, "key = value file; overrides flags");
  ctrain->add_option("--set", ct.sets, "Single key=value override");
  ctrain->add_flag("--feed-xt", ct.feed_xt, "Also feed x_t into the control encoder");

  ControlSampleArgs us, ds;
  auto add_control_sample = [&](const std::string& name, const std::string& help, ControlSampleArgs& c) {
    auto* s = app.add_subcommand(name, help);
    s->add_option("--ckpt", c.ckpt, "Denoiser checkpoint")->required();
    s->add_option("--control", c.control, "Control checkpoint")->required();
    s->add_option("--input", c.input, "Conditioning .bin cloud")->required();
    s->add_option("--out", c.out, "Output directory")->required();
    s->add_option("--seed", c.seed, "Random seed");
    s->add_option("--rows", c.rows, "Rows of the generated range image");
    s->add_option("--reference", c.reference, "Ground-truth cloud for CD/MSE/EMD");
    return s;
  };
  auto* upsample = add_control_sample("upsample", "Controlled generation at full resolution", us);
  auto* downsample = add_control_sample("downsample", "Controlled generation with fewer rows", ds);
  downsample->get_option("--rows")->required();

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "Score generated clouds against references");
  eval->add_option("--gen", ev.gen, "Generated clouds directory")->required();
  eval->add_option("--ref", ev.ref, "Reference clouds directory")->required();
  eval->add_option("--out", ev.out, "Report path (default <gen>/report.json)");
  eval->add_option("--prompts", ev.prompts, "Prompt JSONL for TBR (default <gen>/prompts.jsonl)");
  eval->add_flag("--paired", ev.paired, "Compute CD/MSE/EMD on same-named pairs");
  eval->add_option("--grid", ev.grid, "BEV grid size");
  eval->add_option("--radius", ev.radius, "BEV radius in metres");

  ProjectArgs pj;
  auto* project = app.add_subcommand("project", "Project a cloud into an RMG1 range image");
  project->add_option("--input", pj.input, "Input .bin cloud")->required();
  project->add_option("--out", pj.out, "Output range image")->required();
  project->add_option("--height", pj.height, "Rows");
  project->add_option("--width", pj.width, "Columns");
  project->add_option("--png", pj.png, "Optional PNG preview");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e) == 0 ? kExitOk : kExitInvalid;
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e) == 0 ? kExitOk : kExitInvalid;
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return kExitInvalid;
  }

  try {
    if (synth->parsed()) return cmd_synth(sy);
    if (annot->parsed()) return cmd_annotate(an);
    if (train->parsed()) return cmd_train(tr);
    if (sample->parsed()) return cmd_sample(sa);
    if (ctrain->parsed()) return cmd_control_train(ct);
    if (upsample->parsed()) return cmd_control_sample(us, "upsample");
    if (downsample->parsed()) return cmd_control_sample(ds, "downsample");
    if (eval->parsed()) return cmd_eval(ev);
    if (project->parsed()) return cmd_project(pj);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInvalid;
  } catch (const std::exception& e) {
    std::cerr << "failed: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitInvalid;
}

int run(const std::vector<std::string>& args) {
  std::vector<const char*> argv{"t2ldm"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return parse_and_dispatch(static_cast<int>(argv.size()), argv.data());
}

}  // namespace t2ldm::cli
