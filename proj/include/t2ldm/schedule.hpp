#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace t2ldm::schedule {

/// Cumulative signal table alpha_bar[0..T] with alpha_bar[0] == 1.
class NoiseSchedule {
 public:
  explicit NoiseSchedule(std::vector<double> alpha_bar);

  int steps() const { return static_cast<int>(alpha_bar_.size()) - 1; }
  double alpha_bar(int t) const { return alpha_bar_.at(static_cast<std::size_t>(t)); }
  /// Per-step alpha_t = alpha_bar_t / alpha_bar_{t-1}; t >= 1.
  double alpha(int t) const;
  /// sqrt(1 - alpha_bar_t).
  double sigma(int t) const;
  /// Posterior standard deviation; zero at t == 1.
  double posterior_sigma(int t) const;
  double snr(int t) const;

  const std::vector<double>& table() const { return alpha_bar_; }

 private:
  std::vector<double> alpha_bar_;
};

/// Cosine schedule with offset s = 0.008 and per-step beta clipped at 0.999.
NoiseSchedule cosine_schedule(int steps, double offset = 0.008, double max_beta = 0.999);

struct DiffusionSample {
  std::vector<float> x0;
  std::vector<float> eps;
  int t = 0;
  std::vector<float> x_t;
  std::vector<float> v;
};

DiffusionSample make_sample(std::span<const float> x0, std::span<const float> eps, int t,
                            const NoiseSchedule& schedule);

/// Writes x_t and v for a single element-range; used by batched training.
void forward_noise(std::span<const float> x0, std::span<const float> eps, double alpha_bar,
                   std::span<float> x_t, std::span<float> v);

struct Recovered {
  std::vector<float> x0;
  std::vector<float> eps;
};

Recovered recover_from_v(std::span<const float> x_t, std::span<const float> v, int t,
                         const NoiseSchedule& schedule);

/// min(SNR_t, gamma) / (SNR_t + 1), the min-SNR weight for a v target.
double min_snr_weight(int t, const NoiseSchedule& schedule, double gamma);

/// One ancestral step from x_t to x_{t-1} given a v prediction.
std::vector<float> ddpm_step(std::span<const float> x_t, std::span<const float> v_hat, int t,
                             std::span<const float> noise, const NoiseSchedule& schedule);

struct SampleShape {
  int batch = 1;
  int channels = 2;
  int height = 0;
  int width = 0;

  std::size_t numel() const {
    return static_cast<std::size_t>(batch) * channels * height * width;
  }
};

/// Denoiser callback: (x_t [B,C,H,W], t, conditional?) -> v_hat of the same size.
using VModel = std::function<std::vector<float>(const std::vector<float>& x_t, int t,
                                                bool conditional)>;

struct SamplerOptions {
  bool has_condition = false;
  double cfg_scale = 1.0;
  /// Multiplier on the injected posterior noise (0 gives the posterior-mean path).
  double noise_scale = 1.0;
  std::uint64_t seed = 0;
  /// Called after every step with (t, x_{t-1}); optional.
  std::function<void(int, const std::vector<float>&)> on_step;
};

/// Classifier-free guidance combination v_u + scale * (v_c - v_u).
std::vector<float> guide(const std::vector<float>& v_uncond, const std::vector<float>& v_cond,
                         double scale);

/// Ancestral sampling from standard normal x_T down to t = 1. Output clamped to [-1, 1].
std::vector<float> sample_loop(const VModel& model, const SampleShape& shape,
                               const NoiseSchedule& schedule, const SamplerOptions& options);

}  // namespace t2ldm::schedule
