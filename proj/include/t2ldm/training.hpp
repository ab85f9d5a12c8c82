#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "t2ldm/network.hpp"
#include "t2ldm/schedule.hpp"
#include "t2ldm/textenc.hpp"

namespace t2ldm::training {

using network::Scalar;
using network::Tensor;

struct TrainConfig {
  std::int64_t total_steps = 400000;
  std::int64_t gn_active_steps = 100000;
  std::vector<double> lambda_values{0.001, 0.01, 0.1, 1.0};
  std::int64_t lambda_interval = 25000;
  double snr_gamma = 5.0;
  double cfg_dropout = 0.1;
  double ema_decay = 0.9997;
  int ema_update_every = 1;
  double lr = 1e-4;
  /// Cosine decay ends at lr * lr_final_ratio.
  double lr_final_ratio = 0.0;
  std::int64_t warmup_steps = 0;
  double weight_decay = 0.01;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  /// Global gradient-norm clip; 0 disables.
  double grad_clip = 0.0;
  int batch_size = 16;
  int diffusion_steps = 1024;
  double huber_delta = 1.0;
  /// Train the guidance network and the alignment term at all.
  bool scrg = true;
  /// After the freeze step keep the frozen guidance network as an alignment teacher.
  bool scrg_after_freeze = true;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument when a value is out of range.
  void validate() const;
  /// Multiplies total, guidance, lambda-interval and warm-up step counts by `ratio`.
  TrainConfig scaled(double ratio) const;
  /// Short runs on the desk model: step constants scaled by 1/100 and a faster schedule.
  static TrainConfig desk();
};

/// Applies flat `key = value` lines (# comments) to cfg. Unknown keys throw.
void apply_config_text(const std::string& text, TrainConfig& cfg);
void apply_config_file(const std::filesystem::path& path, TrainConfig& cfg);
/// Flat key=value rendering, readable by apply_config_text.
std::string to_config_text(const TrainConfig& cfg);
nlohmann::json to_json(const TrainConfig& cfg);

double lambda_of_step(std::int64_t step, const TrainConfig& cfg);
double lr_at(std::int64_t step, const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Losses

Tensor loss_denoise(const Tensor& v_hat, const std::vector<Scalar>& v,
                    const std::vector<Scalar>& sample_weight, double delta = 1.0);
Tensor loss_guidance(const Tensor& x0_recon, const std::vector<Scalar>& x0);
/// Mean over pyramid entries of the per-position cosine distance. Throws on scale mismatch.
Tensor loss_align(const network::FeaturePyramid& f_recon, const network::FeaturePyramid& f_noise);

// ---------------------------------------------------------------------------
// Optimizer and EMA

class AdamW {
 public:
  AdamW(double beta1, double beta2, double eps, double weight_decay)
      : b1_(beta1), b2_(beta2), eps_(eps), wd_(weight_decay) {}
  /// One update from the accumulated gradients; parameters without gradients are skipped.
  void step(const network::ParamList& params, double lr);
  std::int64_t steps() const { return t_; }

 private:
  double b1_, b2_, eps_, wd_;
  std::int64_t t_ = 0;
  std::map<const Tensor*, std::pair<std::vector<Scalar>, std::vector<Scalar>>> moments_;
};

/// shadow <- decay * shadow + (1 - decay) * params.
void ema_update(const network::ParamList& shadow, const network::ParamList& params, double decay);

/// Global L2 norm of all gradients.
double grad_norm(const network::ParamList& params);
void clip_grads(const network::ParamList& params, double max_norm);

// ---------------------------------------------------------------------------
// Data and training loop

/// One training example: normalized 2-channel range image and its prompt.
struct Example {
  std::vector<Scalar> x0;
  std::string prompt;
};

struct Batch {
  int height = 0;
  int width = 0;
  std::vector<Scalar> x0;  // [B, 2, H, W]
  /// Empty for an unconditional model; otherwise one prompt per sample.
  std::vector<std::string> prompts;

  int size() const { return height * width > 0 ? static_cast<int>(x0.size() / (2 * height * width)) : 0; }
};

Batch make_batch(const std::vector<Example>& data, const std::vector<std::size_t>& indices,
                 int height, int width, bool conditional);

struct LossReport {
  std::int64_t step = 0;
  double loss_denoise = 0;
  double loss_guidance = 0;
  double loss_align = 0;
  double lambda = 0;
  double lr = 0;
  double total = 0;
  bool gn_active = false;
};

/// Fixed evaluation inputs: timesteps and noise per sample.
struct Probe {
  Batch batch;
  std::vector<int> t;
  std::vector<Scalar> eps;
};

/// One classifier-free-guidance dropout decision per sample.
std::vector<bool> cfg_dropout_draws(std::size_t n, double rate, std::mt19937_64& rng);

Probe make_probe(const Batch& batch, int diffusion_steps, std::uint64_t seed);

class Trainer {
 public:
  Trainer(const network::UNetConfig& net, const TrainConfig& cfg);

  const TrainConfig& config() const { return cfg_; }
  const schedule::NoiseSchedule& noise_schedule() const { return sched_; }
  std::int64_t step() const { return step_; }
  bool gn_frozen() const { return step_ >= cfg_.gn_active_steps; }

  /// One SCRG step. Throws std::runtime_error on a non-finite loss.
  LossReport train_step(const Batch& batch);

  /// Weighted denoise loss of the live DN on fixed inputs (no gradients, conditional text).
  double probe_loss(const Probe& probe) const;

  network::DenoiseNet& dn() { return *dn_; }
  network::DenoiseNet& ema() { return *ema_; }
  network::GuidanceNet* gn() { return gn_.get(); }

  network::Checkpoint checkpoint();
  void restore(const network::Checkpoint& ckpt);

  /// The text encoder used for prompts and the CFG null embedding.
  const textenc::TextEncoder& text_encoder() const { return encoder_; }

 private:
  network::TextBatch encode_prompts(const std::vector<std::string>& prompts, bool dropout);

  network::UNetConfig net_cfg_;
  TrainConfig cfg_;
  schedule::NoiseSchedule sched_;
  std::unique_ptr<network::DenoiseNet> dn_, ema_;
  std::unique_ptr<network::GuidanceNet> gn_;
  AdamW opt_dn_, opt_gn_;
  std::int64_t step_ = 0;
  std::mt19937_64 rng_;
  textenc::HashTextEncoder encoder_;
};

/// CSV header and row for the training log.
std::string log_header();
std::string log_row(const LossReport& r);

}  // namespace t2ldm::training
