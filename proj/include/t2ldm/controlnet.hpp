#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "t2ldm/network.hpp"
#include "t2ldm/rangemap.hpp"
#include "t2ldm/schedule.hpp"
#include "t2ldm/training.hpp"

namespace t2ldm::controlnet {

using network::Scalar;
using network::Tensor;

/// Channel-major condition grid [c, H, W] plus a per-pixel validity mask.
struct ConditionImage {
  rangemap::SensorConfig config;
  int channels = 0;
  std::vector<float> values;
  std::vector<std::uint8_t> valid;  // H x W
};

/// 1x1 projection with all-zero weights and bias.
network::Conv make_zero_projection(int channels);
Tensor zero_project(const Tensor& x, const network::Conv& proj);
/// Sets a square 1x1 projection to the identity map.
void set_identity(network::Conv& proj);

struct ControlConfig {
  int condition_channels = 2;
  /// Also feed x_t into the control encoder, through a trainable copy of the DN stem.
  bool feed_xt = false;
  std::uint64_t seed = 0;
};

/// Control encoder E_c attached to a frozen DN. Holds a reference to the DN.
class ControlState {
 public:
  /// E_c starts as a copy of the DN encoder; the condition stem is fresh.
  ControlState(network::DenoiseNet& dn, const ControlConfig& cfg);

  const ControlConfig& config() const { return cfg_; }
  network::DenoiseNet& dn() const { return dn_; }

  /// v prediction with control features added to every skip and the middle.
  /// x_t [N, 2, H, W], condition [N, c, H, W]; throws std::invalid_argument on a mismatch.
  Tensor controlled_forward(const Tensor& x_t, const std::vector<int>& t, const Tensor& condition,
                            const network::TextBatch* text = nullptr) const;

  /// E_c, stems and zero projections. The DN is not included.
  network::ParamList parameters();

  network::Conv cond_stem, xt_stem;
  network::Encoder encoder;
  std::vector<network::Conv> zero;  // one per skip, then the middle

 private:
  network::DenoiseNet& dn_;
  ControlConfig cfg_;
};

/// Farthest point sampling seeded at the point of largest norm. Returns `keep` indices in
/// selection order. Throws on an empty cloud or keep outside [1, N].
std::vector<std::size_t> farthest_point_sample(const rangemap::PointCloud& cloud, std::size_t keep);

/// ceil(N / rate) points by FPS. rate 1 returns the cloud unchanged.
rangemap::PointCloud downsample_fps(const rangemap::PointCloud& cloud, int rate);

/// FPS subset projected and normalized into a 2-channel range image with holes.
ConditionImage make_sparse_condition(const rangemap::PointCloud& cloud, int rate,
                                     const rangemap::SensorConfig& config);

/// One channel of label / class_count, nearest return wins; invalid pixels are 0.
ConditionImage make_semantic_condition(const rangemap::PointCloud& cloud, int class_count,
                                       const rangemap::SensorConfig& config);

/// Stacks conditions into a [N, c, H, W] tensor.
Tensor condition_tensor(const std::vector<ConditionImage>& conds);

struct ControlExample {
  std::vector<Scalar> x0;  // [2, H, W] target
  ConditionImage condition;
};

/// Trains E_c against the denoising loss while the DN stays frozen.
class ControlTrainer {
 public:
  ControlTrainer(network::DenoiseNet& dn, const ControlConfig& ccfg,
                 const training::TrainConfig& tcfg);

  /// One step on a batch of examples; returns the weighted denoise loss.
  double train_step(const std::vector<ControlExample>& batch);

  ControlState& state() { return state_; }
  std::int64_t step() const { return step_; }

  /// Control parameters under the "control." namespace.
  network::Checkpoint checkpoint();

 private:
  ControlState state_;
  training::TrainConfig tcfg_;
  schedule::NoiseSchedule sched_;
  training::AdamW opt_;
  std::int64_t step_ = 0;
  std::mt19937_64 rng_;
};

/// Sampling model for schedule::sample_loop driven by a fixed condition; ignores CFG.
schedule::VModel control_model(const ControlState& state, const Tensor& condition,
                               const schedule::SampleShape& shape);

}  // namespace t2ldm::controlnet
