#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "t2ldm/rangemap.hpp"
#include "t2ldm/tensor.hpp"
#include "t2ldm/textenc.hpp"

namespace t2ldm::network {

using nn::Scalar;
using nn::Shape;
using nn::Tensor;
using Rng = std::mt19937_64;

enum class AttentionKind { linear, vanilla };

struct UNetConfig {
  int in_channels = 2;
  int out_channels = 2;
  int base_channels = 64;
  std::vector<int> channel_mult{1, 2, 4, 4};
  /// Down-sampling factors (rows, cols) between consecutive stages.
  std::vector<std::pair<int, int>> strides{{1, 2}, {2, 2}, {2, 2}};
  std::vector<AttentionKind> attention{AttentionKind::linear, AttentionKind::linear,
                                       AttentionKind::linear, AttentionKind::vanilla};
  std::vector<int> heads{2, 4, 8, 8};
  int norm_groups = 32;
  int time_sinusoid_dim = 384;
  /// Width of the time MLP output; 0 selects 4 * base_channels.
  int temb_dim = 0;
  bool dpe = true;
  int dpe_terms = 4;
  bool rope = false;
  int text_dim = textenc::kTextWidth;
  /// FoV and depth range used for per-pixel angles; the grid size follows the input.
  rangemap::SensorConfig sensor;

  int stages() const { return static_cast<int>(channel_mult.size()); }
  int channels(int stage) const { return base_channels * channel_mult.at(static_cast<std::size_t>(stage)); }
  int time_width() const { return temb_dim > 0 ? temb_dim : 4 * base_channels; }
  /// Product of all strides (rows, cols); inputs must be divisible by it.
  std::pair<int, int> total_stride() const;
  /// Throws std::invalid_argument on inconsistent lists or sizes.
  void validate() const;

  /// Small model used for desk-scale training: 8 x 128 sensor, base 16.
  static UNetConfig desk();
};

nlohmann::json to_json(const UNetConfig& c);
UNetConfig unet_config_from_json(const nlohmann::json& j);

/// Interleaved [sin, cos] pairs at frequencies 10000^(-i / (dim / 2)).
std::vector<Scalar> time_embedding(double t, int dim = 384);

/// Padded text features [N, n_max, text_dim] plus the true token count of each sample.
struct TextBatch {
  Tensor tokens;
  std::vector<int> lengths;
};

TextBatch make_text_batch(const std::vector<textenc::TextEmbedding>& rows);

using ParamList = std::vector<std::pair<std::string, Tensor*>>;

// ---------------------------------------------------------------------------
// Layers

struct Conv {
  Tensor w, b;
  int sh = 1, sw = 1;
  Conv() = default;
  Conv(int cin, int cout, int k, Rng& rng, bool zero = false);
  Tensor operator()(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix);
};

struct Linear {
  Tensor w, b;
  Linear() = default;
  Linear(int in, int out, Rng& rng, bool zero = false);
  Tensor operator()(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix);
};

struct Norm {
  Tensor gamma, beta;
  int groups = 1;
  Norm() = default;
  Norm(int channels, int max_groups);
  Tensor operator()(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix);
};

/// Residual block: GN, Swish, conv, + mlp(temb) + gate * proj(DPE), GN, Swish, zero conv, + skip.
struct ResBlock {
  Norm n1, n2;
  Conv c1, c2;
  bool has_temb = false;
  Linear temb_proj;
  bool has_dpe = false;
  Conv dpe_proj;
  Tensor dpe_gate;  // one element, starts at 0
  bool has_skip = false;
  Conv skip;

  ResBlock() = default;
  ResBlock(int cin, int cout, int temb_dim, int dpe_channels, int groups, Rng& rng);
  /// temb [N, temb_dim] and dpe [1, 4K, H, W] may be empty tensors.
  Tensor operator()(const Tensor& x, const Tensor& temb, const Tensor& dpe) const;
  void collect(ParamList& out, const std::string& prefix);
};

/// Context for an attention block: text tokens, a feature grid, or neither (self).
struct AttnContext {
  const TextBatch* text = nullptr;
  const Tensor* feature = nullptr;
};

/// GroupNorm, Q/K/V projections, attention, out-projection + residual, FFN + residual.
struct AttnBlock {
  AttentionKind kind = AttentionKind::linear;
  int heads = 1;
  bool rope = false;
  Norm norm;
  Conv q, k, v, out, ff1, ff2;
  bool text_capable = false;
  Linear k_text, v_text;
  int feature_channels = 0;
  Norm ctx_norm;
  Conv k_feat, v_feat;
  /// When set, softmax weights of the last call are stored in last_weights.
  bool record_weights = false;
  mutable std::vector<Scalar> last_weights;

  AttnBlock() = default;
  AttnBlock(int channels, int heads, AttentionKind kind, bool text_capable, int feature_channels,
            bool rope, int groups, Rng& rng, int text_dim = textenc::kTextWidth);
  Tensor operator()(const Tensor& x, const AttnContext& ctx = {}) const;
  void collect(ParamList& out, const std::string& prefix);
};

// ---------------------------------------------------------------------------
// Networks

/// Encoder stage outputs plus the middle output, all before any down-sampling.
using FeaturePyramid = std::vector<Tensor>;

/// Per-resolution DPE grids [1, 4K, h, w], memoized.
class DpeProvider {
 public:
  DpeProvider(rangemap::SensorConfig sensor, int terms) : sensor_(sensor), terms_(terms) {}
  Tensor get(int height, int width) const;
  int channels() const { return 4 * terms_; }

 private:
  rangemap::SensorConfig sensor_;
  int terms_;
  mutable std::mutex mu_;
  mutable std::map<std::pair<int, int>, Tensor> cache_;
};

/// Encoder stages and middle, starting from stem features.
struct Encoder {
  std::vector<ResBlock> rb;
  std::vector<AttnBlock> ab;
  ResBlock mid1, mid2;
  AttnBlock mid_ab;

  /// feature_fusion: every attention block cross-attends to the matching pyramid entry.
  Encoder(const UNetConfig& cfg, bool temb, bool feature_fusion, Rng& rng);
  Encoder() = default;

  struct Output {
    std::vector<Tensor> skips;
    Tensor middle;
  };
  Output operator()(const UNetConfig& cfg, const Tensor& stem, const Tensor& temb,
                    const TextBatch* text, const FeaturePyramid* fusion,
                    const DpeProvider* dpe) const;
  void collect(ParamList& out, const std::string& prefix);
};

struct Decoder {
  std::vector<ResBlock> rb;  // index = stage
  std::vector<AttnBlock> ab;
  Norm out_norm;
  Conv out_conv;

  Decoder(const UNetConfig& cfg, bool temb, Rng& rng);
  Decoder() = default;

  Tensor operator()(const UNetConfig& cfg, const Tensor& middle, const std::vector<Tensor>& skips,
                    const Tensor& temb, const TextBatch* text, const DpeProvider* dpe) const;
  void collect(ParamList& out, const std::string& prefix);
};

struct DnOutput {
  Tensor v;
  FeaturePyramid pyramid;
};

/// Denoising network.
class DenoiseNet {
 public:
  DenoiseNet(const UNetConfig& cfg, std::uint64_t seed);

  const UNetConfig& config() const { return cfg_; }

  /// x_t [N, 2, H, W]; one timestep per sample; text may be null (self-context).
  DnOutput forward(const Tensor& x_t, const std::vector<int>& t, const TextBatch* text) const;

  Tensor time_features(const std::vector<int>& t) const;
  Tensor stem(const Tensor& x_t) const { return conv_in(x_t); }
  Encoder::Output encode(const Tensor& stem, const Tensor& temb, const TextBatch* text) const;
  Tensor decode(const Encoder::Output& enc, const Tensor& temb, const TextBatch* text) const;

  ParamList parameters();
  const DpeProvider* dpe() const { return cfg_.dpe ? dpe_.get() : nullptr; }

  Linear t1, t2;
  Conv conv_in;
  Encoder encoder;
  Decoder decoder;

 private:
  void check_input(const Tensor& x, std::size_t n_t) const;
  UNetConfig cfg_;
  std::unique_ptr<DpeProvider> dpe_;
};

struct GnOutput {
  Tensor x0_recon;
  FeaturePyramid pyramid;
};

/// Guidance network: DN layout without timestep input; encoder stages fuse DN features.
class GuidanceNet {
 public:
  GuidanceNet(const UNetConfig& cfg, std::uint64_t seed);

  const UNetConfig& config() const { return cfg_; }
  GnOutput forward(const Tensor& x0, const FeaturePyramid& dn_pyramid) const;
  ParamList parameters();

  Conv conv_in;
  Encoder encoder;
  Decoder decoder;

 private:
  UNetConfig cfg_;
  std::unique_ptr<DpeProvider> dpe_;
};

/// Shapes of the pyramid a config yields for an H x W input: {channels, h, w} per entry.
std::vector<std::array<int, 3>> pyramid_shapes(const UNetConfig& cfg, int height, int width);

// ---------------------------------------------------------------------------
// Parameter utilities

std::size_t parameter_count(const ParamList& params);
/// Adds N(0, stddev) noise to every parameter, including zero-initialized ones.
void perturb_parameters(const ParamList& params, double stddev, std::uint64_t seed);
void zero_grads(const ParamList& params);
/// Marks parameters trainable or frozen; frozen ones get no gradient buffers.
void set_requires_grad(const ParamList& params, bool value);
/// FNV-1a over the raw bytes of all parameter values, in list order.
std::uint64_t parameter_hash(const ParamList& params);
void copy_parameters(const ParamList& from, const ParamList& to);

// ---------------------------------------------------------------------------
// Checkpoints: u64 LE manifest length, JSON manifest, float32 LE payload.

inline constexpr const char* kCheckpointVersion = "t2ldm-ckpt-1";

struct Checkpoint {
  nlohmann::json config;
  std::int64_t step = 0;
  std::map<std::string, std::pair<Shape, std::vector<float>>> tensors;

  void put(const std::string& name, const Tensor& t);
  void put_all(const std::string& ns, const ParamList& params);
  bool has(const std::string& name) const { return tensors.count(name) > 0; }
  /// Copies stored values into matching parameters; throws on missing names or shape mismatch.
  void load_into(const std::string& ns, const ParamList& params) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace t2ldm::network
