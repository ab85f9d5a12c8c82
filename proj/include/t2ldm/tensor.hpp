#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace t2ldm::nn {

// The library is built twice: float for training and sampling, double for
// finite-difference gradient checks. A binary links exactly one of the two.
#ifdef T2LDM_DOUBLE
using Scalar = double;
#else
using Scalar = float;
#endif

using Shape = std::vector<int>;

std::size_t numel_of(const Shape& s);
std::string shape_str(const Shape& s);

struct Node {
  Shape shape;
  std::vector<Scalar> data;
  std::vector<Scalar> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<Scalar>& ensure_grad();
};

/// Reference-counted handle to a node of the reverse-mode tape.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, Scalar value, bool requires_grad = false);
  static Tensor from(const Shape& shape, std::vector<Scalar> values, bool requires_grad = false);

  const Shape& shape() const { return n_->shape; }
  int dim(int i) const { return n_->shape.at(static_cast<std::size_t>(i)); }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  std::size_t numel() const { return n_->data.size(); }

  Scalar* data() { return n_->data.data(); }
  const Scalar* data() const { return n_->data.data(); }
  std::vector<Scalar>& values() { return n_->data; }
  const std::vector<Scalar>& values() const { return n_->data; }

  bool requires_grad() const { return n_ && n_->requires_grad; }
  bool has_grad() const { return n_ && !n_->grad.empty(); }
  std::vector<Scalar>& grad() { return n_->ensure_grad(); }
  void zero_grad() { n_->grad.clear(); }

  Scalar item() const;
  /// Backpropagates from a single-element tensor.
  void backward();

  Node* node() const { return n_.get(); }
  const std::shared_ptr<Node>& ptr() const { return n_; }
  explicit operator bool() const { return static_cast<bool>(n_); }

 private:
  std::shared_ptr<Node> n_;
};

bool grad_enabled();

/// Disables tape recording in its scope.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Builds an op result. The backward closure is kept only when some parent needs gradients.
Tensor make_result(const Shape& shape, std::vector<Scalar> data, std::vector<Tensor> parents,
                   std::function<void(Node&)> backward);

// ---------------------------------------------------------------------------
// Elementwise and structural ops

Tensor detach(const Tensor& x);
Tensor reshape(const Tensor& x, const Shape& shape);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, Scalar s);
/// x * alpha where alpha holds one element.
Tensor mul_scalar(const Tensor& x, const Tensor& alpha);
Tensor silu(const Tensor& x);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
/// [N, C, H, W] + [N, C] broadcast over space.
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);
/// [N, ...] + [1, ...] broadcast over the batch.
Tensor add_batch_broadcast(const Tensor& x, const Tensor& y);
/// Concatenate along dimension 1.
Tensor concat_channels(const Tensor& a, const Tensor& b);
/// Swap the last two dimensions of a rank-3 tensor.
Tensor transpose_last2(const Tensor& x);

// ---------------------------------------------------------------------------
// Layers

/// x [M, in] * W^T + b, W [out, in]. Bias may be empty.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

/// Convolution with cyclic horizontal and zero vertical padding (kernel / 2 each side).
/// x [N, Cin, H, W], w [Cout, Cin, kh, kw] with odd kh, kw; bias may be empty.
Tensor circular_conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride_h = 1,
                       int stride_w = 1);

Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta,
                  Scalar eps = 1e-5);

Tensor avg_pool(const Tensor& x, int sh, int sw);
/// Bilinear upsampling by integer factors, half-pixel aligned; wraps horizontally, clamps vertically.
Tensor upsample_bilinear(const Tensor& x, int sh, int sw);

// ---------------------------------------------------------------------------
// Attention cores. Features are [N, C, L]; heads split C.

/// Softmax attention: per head, P = softmax(Q^T K / sqrt(d)) over keys, out = V P^T.
/// key_lengths (optional, one per sample) masks trailing keys. When weights is non-null it
/// receives P for every (sample, head) as [N, heads, Lq, Lk].
Tensor softmax_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                         const std::vector<int>& key_lengths = {},
                         std::vector<Scalar>* weights = nullptr);

/// Linear attention: per head, A = softmax_L(K) V^T, out = A^T Q / sqrt(d).
Tensor linear_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads);

/// Rotary embedding over [N, C, H*W]: within each head the first half of channel pairs
/// rotates with the row index and the second half with the column index.
Tensor rope(const Tensor& x, int heads, int height, int width);

// ---------------------------------------------------------------------------
// Losses (scalar outputs of shape {1})

/// mean over samples n of weight[n] * mean_elements Huber(pred - target).
Tensor huber_loss(const Tensor& pred, const std::vector<Scalar>& target,
                  const std::vector<Scalar>& sample_weight, Scalar delta = 1.0);
Tensor mse_loss(const Tensor& pred, const std::vector<Scalar>& target);
/// mean over (n, h, w) of 1 - cos(a[n, :, h, w], b[n, :, h, w]).
Tensor cosine_align_loss(const Tensor& a, const Tensor& b);

}  // namespace t2ldm::nn
