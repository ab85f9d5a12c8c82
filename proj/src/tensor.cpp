#include "t2ldm/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace t2ldm::nn {

namespace {

thread_local bool g_grad_enabled = true;
std::atomic<std::uint64_t> g_next_id{1};

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

}  // namespace

std::size_t numel_of(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    if (d < 0) throw std::invalid_argument("negative dimension");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

std::vector<Scalar>& Node::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), Scalar(0));
  return grad;
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return full(shape, Scalar(0), requires_grad);
}

Tensor Tensor::full(const Shape& shape, Scalar value, bool requires_grad) {
  return from(shape, std::vector<Scalar>(numel_of(shape), value), requires_grad);
}

Tensor Tensor::from(const Shape& shape, std::vector<Scalar> values, bool requires_grad) {
  if (values.size() != numel_of(shape)) {
    throw std::invalid_argument("Tensor::from: " + std::to_string(values.size()) +
                                " values for shape " + shape_str(shape));
  }
  auto n = std::make_shared<Node>();
  n->shape = shape;
  n->data = std::move(values);
  n->requires_grad = requires_grad;
  n->id = g_next_id++;
  return Tensor(std::move(n));
}

Scalar Tensor::item() const {
  if (numel() != 1) throw std::logic_error("item() on tensor with " + std::to_string(numel()));
  return n_->data[0];
}

void Tensor::backward() {
  if (numel() != 1) throw std::logic_error("backward() needs a single-element tensor");
  if (!n_->requires_grad) return;
  // Reverse creation order is a valid topological order for a tape.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{n_.get()};
  while (!stack.empty()) {
    Node* cur = stack.back();
    stack.pop_back();
    if (!seen.insert(cur).second) continue;
    order.push_back(cur);
    for (const auto& p : cur->parents) {
      if (p->requires_grad) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(), [](Node* a, Node* b) { return a->id > b->id; });
  n_->ensure_grad()[0] += Scalar(1);
  for (Node* cur : order) {
    if (!cur->backward) continue;
    if (!cur->grad.empty()) cur->backward(*cur);
    // Interior gradients are dead once propagated; only leaves keep theirs.
    std::vector<Scalar>().swap(cur->grad);
  }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor make_result(const Shape& shape, std::vector<Scalar> data, std::vector<Tensor> parents,
                   std::function<void(Node&)> backward) {
  Tensor out = Tensor::from(shape, std::move(data));
  if (!g_grad_enabled) return out;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return out;
  Node* n = out.node();
  n->requires_grad = true;
  for (auto& p : parents) {
    if (p) n->parents.push_back(p.ptr());
  }
  n->backward = std::move(backward);
  return out;
}

// ---------------------------------------------------------------------------

Tensor detach(const Tensor& x) { return Tensor::from(x.shape(), x.values()); }

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (numel_of(shape) != x.numel()) {
    throw std::invalid_argument("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  auto px = x.ptr();
  return make_result(shape, x.values(), {x}, [px](Node& self) {
    auto& g = px->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<Scalar> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto pa = a.ptr(), pb = b.ptr();
  return make_result(a.shape(), std::move(out), {a, b}, [pa, pb](Node& self) {
    for (auto* p : {pa.get(), pb.get()}) {
      if (!p->requires_grad) continue;
      auto& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, Scalar(-1))); }

Tensor scale(const Tensor& x, Scalar s) {
  std::vector<Scalar> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * s;
  auto px = x.ptr();
  return make_result(x.shape(), std::move(out), {x}, [px, s](Node& self) {
    auto& g = px->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

Tensor mul_scalar(const Tensor& x, const Tensor& alpha) {
  if (alpha.numel() != 1) throw std::invalid_argument("mul_scalar: alpha must have one element");
  const Scalar a = alpha.item();
  std::vector<Scalar> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * a;
  auto px = x.ptr(), pa = alpha.ptr();
  return make_result(x.shape(), std::move(out), {x, alpha}, [px, pa, a](Node& self) {
    if (px->requires_grad) {
      auto& g = px->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += a * self.grad[i];
    }
    if (pa->requires_grad) {
      Scalar s = 0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) s += self.grad[i] * px->data[i];
      pa->ensure_grad()[0] += s;
    }
  });
}

Tensor silu(const Tensor& x) {
  std::vector<Scalar> out(x.numel());
  const Scalar* xd = x.data();
  const bool keep = grad_enabled() && x.requires_grad();
  std::vector<Scalar> sig(keep ? out.size() : 0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const Scalar s = Scalar(1) / (Scalar(1) + std::exp(-xd[i]));
    out[i] = xd[i] * s;
    if (keep) sig[i] = s;
  }
  auto px = x.ptr();
  return make_result(x.shape(), std::move(out), {x}, [px, sig = std::move(sig)](Node& self) {
    auto& g = px->ensure_grad();
    const Scalar* xd = px->data.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const Scalar s = sig[i];
      g[i] += self.grad[i] * s * (Scalar(1) + xd[i] * (Scalar(1) - s));
    }
  });
}

Tensor sum_all(const Tensor& x) {
  double s = 0;
  for (Scalar v : x.values()) s += v;
  auto px = x.ptr();
  return make_result({1}, {static_cast<Scalar>(s)}, {x}, [px](Node& self) {
    auto& g = px->ensure_grad();
    for (auto& gi : g) gi += self.grad[0];
  });
}

Tensor mean_all(const Tensor& x) {
  return scale(sum_all(x), Scalar(1) / static_cast<Scalar>(x.numel()));
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  if (x.rank() != 4 || bias.rank() != 2 || bias.dim(0) != x.dim(0) || bias.dim(1) != x.dim(1)) {
    throw std::invalid_argument("add_channel_bias: " + shape_str(x.shape()) + " + " +
                                shape_str(bias.shape()));
  }
  const std::size_t nc = static_cast<std::size_t>(x.dim(0)) * x.dim(1);
  const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  std::vector<Scalar> out(x.values());
  for (std::size_t i = 0; i < nc; ++i) {
    const Scalar b = bias.data()[i];
    for (std::size_t j = 0; j < hw; ++j) out[i * hw + j] += b;
  }
  auto px = x.ptr(), pb = bias.ptr();
  return make_result(x.shape(), std::move(out), {x, bias}, [px, pb, nc, hw](Node& self) {
    if (px->requires_grad) {
      auto& g = px->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->ensure_grad();
      for (std::size_t i = 0; i < nc; ++i) {
        Scalar s = 0;
        for (std::size_t j = 0; j < hw; ++j) s += self.grad[i * hw + j];
        g[i] += s;
      }
    }
  });
}

Tensor add_batch_broadcast(const Tensor& x, const Tensor& y) {
  if (y.rank() != x.rank() || y.dim(0) != 1 ||
      !std::equal(x.shape().begin() + 1, x.shape().end(), y.shape().begin() + 1)) {
    throw std::invalid_argument("add_batch_broadcast: " + shape_str(x.shape()) + " + " +
                                shape_str(y.shape()));
  }
  const std::size_t per = y.numel();
  const std::size_t n = static_cast<std::size_t>(x.dim(0));
  std::vector<Scalar> out(x.values());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t i = 0; i < per; ++i) out[b * per + i] += y.data()[i];
  }
  auto px = x.ptr(), py = y.ptr();
  return make_result(x.shape(), std::move(out), {x, y}, [px, py, per, n](Node& self) {
    if (px->requires_grad) {
      auto& g = px->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (py->requires_grad) {
      auto& g = py->ensure_grad();
      for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t i = 0; i < per; ++i) g[i] += self.grad[b * per + i];
      }
    }
  });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || a.rank() != b.rank() || a.dim(0) != b.dim(0) ||
      !std::equal(a.shape().begin() + 2, a.shape().end(), b.shape().begin() + 2)) {
    throw std::invalid_argument("concat_channels: " + shape_str(a.shape()) + " ++ " +
                                shape_str(b.shape()));
  }
  const std::size_t n = static_cast<std::size_t>(a.dim(0));
  const std::size_t sa = a.numel() / n, sb = b.numel() / n;
  Shape shape = a.shape();
  shape[1] += b.dim(1);
  std::vector<Scalar> out(a.numel() + b.numel());
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.data() + i * sa, sa, out.begin() + static_cast<std::ptrdiff_t>(i * (sa + sb)));
    std::copy_n(b.data() + i * sb, sb,
                out.begin() + static_cast<std::ptrdiff_t>(i * (sa + sb) + sa));
  }
  auto pa = a.ptr(), pb = b.ptr();
  return make_result(shape, std::move(out), {a, b}, [pa, pb, n, sa, sb](Node& self) {
    for (std::size_t i = 0; i < n; ++i) {
      if (pa->requires_grad) {
        auto& g = pa->ensure_grad();
        for (std::size_t j = 0; j < sa; ++j) g[i * sa + j] += self.grad[i * (sa + sb) + j];
      }
      if (pb->requires_grad) {
        auto& g = pb->ensure_grad();
        for (std::size_t j = 0; j < sb; ++j) g[i * sb + j] += self.grad[i * (sa + sb) + sa + j];
      }
    }
  });
}

Tensor transpose_last2(const Tensor& x) {
  if (x.rank() != 3) throw std::invalid_argument("transpose_last2 expects rank 3");
  const int n = x.dim(0), r = x.dim(1), c = x.dim(2);
  std::vector<Scalar> out(x.numel());
  for (int b = 0; b < n; ++b) {
    const Scalar* src = x.data() + static_cast<std::size_t>(b) * r * c;
    Scalar* dst = out.data() + static_cast<std::size_t>(b) * r * c;
    for (int i = 0; i < r; ++i) {
      for (int j = 0; j < c; ++j) dst[static_cast<std::size_t>(j) * r + i] = src[i * c + j];
    }
  }
  auto px = x.ptr();
  return make_result({n, c, r}, std::move(out), {x}, [px, n, r, c](Node& self) {
    auto& g = px->ensure_grad();
    for (int b = 0; b < n; ++b) {
      const std::size_t off = static_cast<std::size_t>(b) * r * c;
      for (int i = 0; i < r; ++i) {
        for (int j = 0; j < c; ++j) g[off + i * c + j] += self.grad[off + j * r + i];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Losses

Tensor huber_loss(const Tensor& pred, const std::vector<Scalar>& target,
                  const std::vector<Scalar>& sample_weight, Scalar delta) {
  if (pred.numel() != target.size()) throw std::invalid_argument("huber_loss: size mismatch");
  const std::size_t n = pred.rank() > 0 ? static_cast<std::size_t>(pred.dim(0)) : 1;
  if (!sample_weight.empty() && sample_weight.size() != n) {
    throw std::invalid_argument("huber_loss: one weight per sample required");
  }
  const std::size_t per = pred.numel() / n;
  const Scalar norm = Scalar(1) / static_cast<Scalar>(pred.numel());
  double total = 0;
  for (std::size_t b = 0; b < n; ++b) {
    const Scalar w = sample_weight.empty() ? Scalar(1) : sample_weight[b];
    double s = 0;
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
      const Scalar r = std::abs(pred.data()[i] - target[i]);
      s += r <= delta ? Scalar(0.5) * r * r : delta * (r - Scalar(0.5) * delta);
    }
    total += w * s;
  }
  auto pp = pred.ptr();
  return make_result({1}, {static_cast<Scalar>(total * norm)}, {pred},
                     [pp, target, sample_weight, delta, n, per, norm](Node& self) {
                       auto& g = pp->ensure_grad();
                       const Scalar go = self.grad[0] * norm;
                       for (std::size_t b = 0; b < n; ++b) {
                         const Scalar w = sample_weight.empty() ? Scalar(1) : sample_weight[b];
                         for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
                           const Scalar r = pp->data[i] - target[i];
                           const Scalar d = std::abs(r) <= delta ? r : (r > 0 ? delta : -delta);
                           g[i] += go * w * d;
                         }
                       }
                     });
}

Tensor mse_loss(const Tensor& pred, const std::vector<Scalar>& target) {
  if (pred.numel() != target.size()) throw std::invalid_argument("mse_loss: size mismatch");
  double s = 0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double r = pred.data()[i] - target[i];
    s += r * r;
  }
  const Scalar norm = Scalar(1) / static_cast<Scalar>(target.size());
  auto pp = pred.ptr();
  return make_result({1}, {static_cast<Scalar>(s * norm)}, {pred}, [pp, target, norm](Node& self) {
    auto& g = pp->ensure_grad();
    const Scalar go = self.grad[0] * norm * Scalar(2);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += go * (pp->data[i] - target[i]);
  });
}

Tensor cosine_align_loss(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "cosine_align_loss");
  if (a.rank() != 4) throw std::invalid_argument("cosine_align_loss expects [N, C, H, W]");
  const int n = a.dim(0), c = a.dim(1);
  const std::size_t hw = static_cast<std::size_t>(a.dim(2)) * a.dim(3);
  constexpr Scalar eps = Scalar(1e-8);
  const std::size_t positions = static_cast<std::size_t>(n) * hw;
  // Per position: dot, |a|, |b| (clamped).
  std::vector<Scalar> dot(positions), na(positions), nb(positions);
  double total = 0;
  for (int s = 0; s < n; ++s) {
    const Scalar* ap = a.data() + static_cast<std::size_t>(s) * c * hw;
    const Scalar* bp = b.data() + static_cast<std::size_t>(s) * c * hw;
    for (std::size_t p = 0; p < hw; ++p) {
      Scalar d = 0, sa = 0, sb = 0;
      for (int ch = 0; ch < c; ++ch) {
        const Scalar x = ap[ch * hw + p], y = bp[ch * hw + p];
        d += x * y;
        sa += x * x;
        sb += y * y;
      }
      const std::size_t k = s * hw + p;
      dot[k] = d;
      na[k] = std::max(std::sqrt(sa), eps);
      nb[k] = std::max(std::sqrt(sb), eps);
      total += Scalar(1) - d / (na[k] * nb[k]);
    }
  }
  const Scalar norm = Scalar(1) / static_cast<Scalar>(positions);
  auto pa = a.ptr(), pb = b.ptr();
  return make_result(
      {1}, {static_cast<Scalar>(total * norm)}, {a, b},
      [pa, pb, n, c, hw, dot, na, nb, norm](Node& self) {
        const Scalar go = -self.grad[0] * norm;
        for (int s = 0; s < n; ++s) {
          const std::size_t base = static_cast<std::size_t>(s) * c * hw;
          for (std::size_t p = 0; p < hw; ++p) {
            const std::size_t k = s * hw + p;
            const Scalar inv = Scalar(1) / (na[k] * nb[k]);
            const Scalar cosv = dot[k] * inv;
            for (int ch = 0; ch < c; ++ch) {
              const std::size_t i = base + ch * hw + p;
              const Scalar x = pa->data[i], y = pb->data[i];
              if (pa->requires_grad) {
                pa->ensure_grad()[i] += go * (y * inv - cosv * x / (na[k] * na[k]));
              }
              if (pb->requires_grad) {
                pb->ensure_grad()[i] += go * (x * inv - cosv * y / (nb[k] * nb[k]));
              }
            }
          }
        }
      });
}

}  // namespace t2ldm::nn
