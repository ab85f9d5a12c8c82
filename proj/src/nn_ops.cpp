#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "t2ldm/tensor.hpp"

namespace t2ldm::nn {

namespace {

using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<Mat>;
using CMapM = Eigen::Map<const Mat>;

struct ConvGeom {
  int n, cin, h, w, cout, kh, kw, sh, sw, ho, wo;
  int ph() const { return kh / 2; }
  int pw() const { return kw / 2; }
  int k() const { return cin * kh * kw; }
  int l() const { return ho * wo; }
  bool pointwise() const { return kh == 1 && kw == 1 && sh == 1 && sw == 1; }
};

// Column index table for each kernel column j: wrapped input column per output column.
std::vector<int> wrap_table(const ConvGeom& g) {
  std::vector<int> t(static_cast<std::size_t>(g.kw) * g.wo);
  for (int j = 0; j < g.kw; ++j) {
    for (int o = 0; o < g.wo; ++o) {
      int c = (o * g.sw + j - g.pw()) % g.w;
      if (c < 0) c += g.w;
      t[static_cast<std::size_t>(j) * g.wo + o] = c;
    }
  }
  return t;
}

// Grow-only per-thread buffers; avoids reallocating and zero-filling im2col columns.
Scalar* scratch(int slot, std::size_t n) {
  thread_local std::vector<Scalar> bufs[2];
  auto& b = bufs[slot];
  if (b.size() < n) b.resize(n);
  return b.data();
}

void im2col(const Scalar* x, const ConvGeom& g, const std::vector<int>& wt, Scalar* cols) {
  const int l = g.l();
  for (int c = 0; c < g.cin; ++c) {
    const Scalar* xc = x + static_cast<std::size_t>(c) * g.h * g.w;
    for (int i = 0; i < g.kh; ++i) {
      for (int j = 0; j < g.kw; ++j) {
        Scalar* row = cols + (static_cast<std::size_t>(c * g.kh + i) * g.kw + j) * l;
        const int* wj = wt.data() + static_cast<std::size_t>(j) * g.wo;
        for (int oh = 0; oh < g.ho; ++oh) {
          const int ih = oh * g.sh + i - g.ph();
          Scalar* dst = row + static_cast<std::size_t>(oh) * g.wo;
          if (ih < 0 || ih >= g.h) {
            std::fill_n(dst, g.wo, Scalar(0));
            continue;
          }
          const Scalar* src = xc + static_cast<std::size_t>(ih) * g.w;
          for (int ow = 0; ow < g.wo; ++ow) dst[ow] = src[wj[ow]];
        }
      }
    }
  }
}

void col2im_add(const Scalar* cols, const ConvGeom& g, const std::vector<int>& wt, Scalar* dx) {
  const int l = g.l();
  for (int c = 0; c < g.cin; ++c) {
    Scalar* xc = dx + static_cast<std::size_t>(c) * g.h * g.w;
    for (int i = 0; i < g.kh; ++i) {
      for (int j = 0; j < g.kw; ++j) {
        const Scalar* row = cols + (static_cast<std::size_t>(c * g.kh + i) * g.kw + j) * l;
        const int* wj = wt.data() + static_cast<std::size_t>(j) * g.wo;
        for (int oh = 0; oh < g.ho; ++oh) {
          const int ih = oh * g.sh + i - g.ph();
          if (ih < 0 || ih >= g.h) continue;
          const Scalar* src = row + static_cast<std::size_t>(oh) * g.wo;
          Scalar* dst = xc + static_cast<std::size_t>(ih) * g.w;
          for (int ow = 0; ow < g.wo; ++ow) dst[wj[ow]] += src[ow];
        }
      }
    }
  }
}

void softmax_rows(Scalar* m, int rows, int cols, int valid) {
  for (int r = 0; r < rows; ++r) {
    Scalar* row = m + static_cast<std::size_t>(r) * cols;
    Scalar mx = row[0];
    for (int c = 1; c < valid; ++c) mx = std::max(mx, row[c]);
    Scalar s = 0;
    for (int c = 0; c < valid; ++c) {
      row[c] = std::exp(row[c] - mx);
      s += row[c];
    }
    const Scalar inv = Scalar(1) / s;
    for (int c = 0; c < valid; ++c) row[c] *= inv;
    for (int c = valid; c < cols; ++c) row[c] = 0;
  }
}

// d(softmax) for each row: p * (dp - sum(dp * p)); overwrites dp.
void softmax_rows_backward(const Scalar* p, Scalar* dp, int rows, int cols) {
  for (int r = 0; r < rows; ++r) {
    const Scalar* pr = p + static_cast<std::size_t>(r) * cols;
    Scalar* dr = dp + static_cast<std::size_t>(r) * cols;
    Scalar s = 0;
    for (int c = 0; c < cols; ++c) s += pr[c] * dr[c];
    for (int c = 0; c < cols; ++c) dr[c] = pr[c] * (dr[c] - s);
  }
}

void check_attention_inputs(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                            const char* op) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3) {
    throw std::invalid_argument(std::string(op) + ": expects [N, C, L] inputs");
  }
  if (k.shape() != v.shape() || q.dim(0) != k.dim(0) || q.dim(1) != k.dim(1)) {
    throw std::invalid_argument(std::string(op) + ": q " + shape_str(q.shape()) + " k " +
                                shape_str(k.shape()) + " v " + shape_str(v.shape()));
  }
  if (heads < 1 || q.dim(1) % heads != 0) {
    throw std::invalid_argument(std::string(op) + ": channels not divisible by heads");
  }
  if (k.dim(2) < 1) throw std::invalid_argument(std::string(op) + ": empty context");
}

}  // namespace

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1)) {
    throw std::invalid_argument("linear: x " + shape_str(x.shape()) + " w " +
                                shape_str(w.shape()));
  }
  const int m = x.dim(0), in = x.dim(1), out = w.dim(0);
  if (b && (b.numel() != static_cast<std::size_t>(out))) {
    throw std::invalid_argument("linear: bias size mismatch");
  }
  std::vector<Scalar> y(static_cast<std::size_t>(m) * out);
  MapM ym(y.data(), m, out);
  ym.noalias() = CMapM(x.data(), m, in) * CMapM(w.data(), out, in).transpose();
  if (b) {
    for (int i = 0; i < m; ++i) {
      for (int o = 0; o < out; ++o) ym(i, o) += b.data()[o];
    }
  }
  auto px = x.ptr(), pw = w.ptr();
  auto pb = b ? b.ptr() : nullptr;
  std::vector<Tensor> parents{x, w};
  if (b) parents.push_back(b);
  return make_result({m, out}, std::move(y), parents, [px, pw, pb, m, in, out](Node& self) {
    CMapM gy(self.grad.data(), m, out);
    if (px->requires_grad) {
      MapM(px->ensure_grad().data(), m, in).noalias() += gy * CMapM(pw->data.data(), out, in);
    }
    if (pw->requires_grad) {
      MapM(pw->ensure_grad().data(), out, in).noalias() +=
          gy.transpose() * CMapM(px->data.data(), m, in);
    }
    if (pb && pb->requires_grad) {
      auto& g = pb->ensure_grad();
      for (int i = 0; i < m; ++i) {
        for (int o = 0; o < out; ++o) g[o] += gy(i, o);
      }
    }
  });
}

Tensor circular_conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride_h,
                       int stride_w) {
  if (x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(1)) {
    throw std::invalid_argument("circular_conv2d: x " + shape_str(x.shape()) + " w " +
                                shape_str(w.shape()));
  }
  if (w.dim(2) % 2 == 0 || w.dim(3) % 2 == 0) {
    throw std::invalid_argument("circular_conv2d: kernel must be odd-sized");
  }
  if (stride_h < 1 || stride_w < 1) throw std::invalid_argument("circular_conv2d: bad stride");
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3),
             stride_h, stride_w, 0, 0};
  g.ho = (g.h + 2 * g.ph() - g.kh) / g.sh + 1;
  g.wo = (g.w + 2 * g.pw() - g.kw) / g.sw + 1;
  if (b && b.numel() != static_cast<std::size_t>(g.cout)) {
    throw std::invalid_argument("circular_conv2d: bias size mismatch");
  }
  const auto wt = wrap_table(g);
  const int k = g.k(), l = g.l();
  std::vector<Scalar> y(static_cast<std::size_t>(g.n) * g.cout * l);
  Scalar* cols = g.pointwise() ? nullptr : scratch(0, static_cast<std::size_t>(k) * l);
  CMapM wm(w.data(), g.cout, k);
  for (int s = 0; s < g.n; ++s) {
    const Scalar* xs = x.data() + static_cast<std::size_t>(s) * g.cin * g.h * g.w;
    const Scalar* cp = xs;
    if (!g.pointwise()) {
      im2col(xs, g, wt, cols);
      cp = cols;
    }
    MapM ys(y.data() + static_cast<std::size_t>(s) * g.cout * l, g.cout, l);
    ys.noalias() = wm * CMapM(cp, k, l);
    if (b) {
      for (int o = 0; o < g.cout; ++o) ys.row(o).array() += b.data()[o];
    }
  }
  auto px = x.ptr(), pw = w.ptr();
  auto pb = b ? b.ptr() : nullptr;
  std::vector<Tensor> parents{x, w};
  if (b) parents.push_back(b);
  return make_result({g.n, g.cout, g.ho, g.wo}, std::move(y), parents,
                     [px, pw, pb, g, wt](Node& self) {
                       const int k = g.k(), l = g.l();
                       CMapM wm(pw->data.data(), g.cout, k);
                       const auto kl = static_cast<std::size_t>(k) * l;
                       Scalar* cols = g.pointwise() ? nullptr : scratch(0, kl);
                       Scalar* dcols = px->requires_grad && !g.pointwise() ? scratch(1, kl) : nullptr;
                       for (int s = 0; s < g.n; ++s) {
                         CMapM gy(self.grad.data() + static_cast<std::size_t>(s) * g.cout * l,
                                  g.cout, l);
                         const std::size_t xoff = static_cast<std::size_t>(s) * g.cin * g.h * g.w;
                         if (pw->requires_grad) {
                           const Scalar* cp = px->data.data() + xoff;
                           if (!g.pointwise()) {
                             im2col(cp, g, wt, cols);
                             cp = cols;
                           }
                           MapM(pw->ensure_grad().data(), g.cout, k).noalias() +=
                               gy * CMapM(cp, k, l).transpose();
                         }
                         if (pb && pb->requires_grad) {
                           auto& gb = pb->ensure_grad();
                           for (int o = 0; o < g.cout; ++o) gb[o] += gy.row(o).sum();
                         }
                         if (px->requires_grad) {
                           Scalar* dx = px->ensure_grad().data() + xoff;
                           if (g.pointwise()) {
                             MapM(dx, k, l).noalias() += wm.transpose() * gy;
                           } else {
                             MapM(dcols, k, l).noalias() = wm.transpose() * gy;
                             col2im_add(dcols, g, wt, dx);
                           }
                         }
                       }
                     });
}

Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta,
                  Scalar eps) {
  if (x.rank() < 2) throw std::invalid_argument("group_norm: rank >= 2 required");
  const int n = x.dim(0), c = x.dim(1);
  if (groups < 1 || c % groups != 0) {
    throw std::invalid_argument("group_norm: " + std::to_string(c) +
                                " channels not divisible into " + std::to_string(groups));
  }
  if (gamma.numel() != static_cast<std::size_t>(c) || beta.numel() != static_cast<std::size_t>(c)) {
    throw std::invalid_argument("group_norm: affine size mismatch");
  }
  const std::size_t sp = x.numel() / (static_cast<std::size_t>(n) * c);
  const int cg = c / groups;
  const std::size_t gsize = static_cast<std::size_t>(cg) * sp;
  std::vector<Scalar> mean(static_cast<std::size_t>(n) * groups), rstd(mean.size());
  std::vector<Scalar> y(x.numel());
  for (int s = 0; s < n; ++s) {
    for (int gi = 0; gi < groups; ++gi) {
      const std::size_t off = (static_cast<std::size_t>(s) * c + gi * cg) * sp;
      const Scalar* xp = x.data() + off;
      double m = 0;
      for (std::size_t i = 0; i < gsize; ++i) m += xp[i];
      m /= static_cast<double>(gsize);
      double v = 0;
      for (std::size_t i = 0; i < gsize; ++i) v += (xp[i] - m) * (xp[i] - m);
      v /= static_cast<double>(gsize);
      const Scalar r = static_cast<Scalar>(1.0 / std::sqrt(v + eps));
      mean[s * groups + gi] = static_cast<Scalar>(m);
      rstd[s * groups + gi] = r;
      for (int ch = 0; ch < cg; ++ch) {
        const int cc = gi * cg + ch;
        const Scalar ga = gamma.data()[cc], be = beta.data()[cc];
        for (std::size_t i = 0; i < sp; ++i) {
          const std::size_t idx = off + ch * sp + i;
          y[idx] = (x.data()[idx] - static_cast<Scalar>(m)) * r * ga + be;
        }
      }
    }
  }
  auto px = x.ptr(), pg = gamma.ptr(), pb = beta.ptr();
  return make_result(x.shape(), std::move(y), {x, gamma, beta},
                     [px, pg, pb, n, c, groups, cg, sp, gsize, mean, rstd](Node& self) {
                       for (int s = 0; s < n; ++s) {
                         for (int gi = 0; gi < groups; ++gi) {
                           const std::size_t off = (static_cast<std::size_t>(s) * c + gi * cg) * sp;
                           const Scalar m = mean[s * groups + gi], r = rstd[s * groups + gi];
                           Scalar sum_d = 0, sum_dx = 0;
                           for (int ch = 0; ch < cg; ++ch) {
                             const int cc = gi * cg + ch;
                             const Scalar ga = pg->data[cc];
                             Scalar dgam = 0, dbet = 0;
                             for (std::size_t i = 0; i < sp; ++i) {
                               const std::size_t idx = off + ch * sp + i;
                               const Scalar xh = (px->data[idx] - m) * r;
                               const Scalar gy = self.grad[idx];
                               dgam += gy * xh;
                               dbet += gy;
                               sum_d += gy * ga;
                               sum_dx += gy * ga * xh;
                             }
                             if (pg->requires_grad) pg->ensure_grad()[cc] += dgam;
                             if (pb->requires_grad) pb->ensure_grad()[cc] += dbet;
                           }
                           if (!px->requires_grad) continue;
                           auto& gx = px->ensure_grad();
                           const Scalar inv = Scalar(1) / static_cast<Scalar>(gsize);
                           for (int ch = 0; ch < cg; ++ch) {
                             const Scalar ga = pg->data[gi * cg + ch];
                             for (std::size_t i = 0; i < sp; ++i) {
                               const std::size_t idx = off + ch * sp + i;
                               const Scalar xh = (px->data[idx] - m) * r;
                               gx[idx] += r * (self.grad[idx] * ga - inv * sum_d - xh * inv * sum_dx);
                             }
                           }
                         }
                       }
                     });
}

Tensor avg_pool(const Tensor& x, int sh, int sw) {
  if (x.rank() != 4) throw std::invalid_argument("avg_pool expects [N, C, H, W]");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (sh < 1 || sw < 1 || h % sh != 0 || w % sw != 0) {
    throw std::invalid_argument("avg_pool: " + shape_str(x.shape()) + " not divisible by (" +
                                std::to_string(sh) + "," + std::to_string(sw) + ")");
  }
  const int ho = h / sh, wo = w / sw;
  const Scalar inv = Scalar(1) / static_cast<Scalar>(sh * sw);
  std::vector<Scalar> y(static_cast<std::size_t>(n) * c * ho * wo, Scalar(0));
  for (std::size_t p = 0; p < static_cast<std::size_t>(n) * c; ++p) {
    const Scalar* xp = x.data() + p * h * w;
    Scalar* yp = y.data() + p * ho * wo;
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) yp[(i / sh) * wo + j / sw] += xp[i * w + j] * inv;
    }
  }
  auto px = x.ptr();
  return make_result({n, c, ho, wo}, std::move(y), {x},
                     [px, n, c, h, w, sh, sw, ho, wo, inv](Node& self) {
                       auto& g = px->ensure_grad();
                       for (std::size_t p = 0; p < static_cast<std::size_t>(n) * c; ++p) {
                         const Scalar* gy = self.grad.data() + p * ho * wo;
                         Scalar* gx = g.data() + p * h * w;
                         for (int i = 0; i < h; ++i) {
                           for (int j = 0; j < w; ++j) gx[i * w + j] += gy[(i / sh) * wo + j / sw] * inv;
                         }
                       }
                     });
}

Tensor upsample_bilinear(const Tensor& x, int sh, int sw) {
  if (x.rank() != 4) throw std::invalid_argument("upsample_bilinear expects [N, C, H, W]");
  if (sh < 1 || sw < 1) throw std::invalid_argument("upsample_bilinear: bad factor");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int ho = h * sh, wo = w * sw;
  struct Tap {
    int i0, i1;
    Scalar f;
  };
  std::vector<Tap> rows(static_cast<std::size_t>(ho)), cols(static_cast<std::size_t>(wo));
  for (int o = 0; o < ho; ++o) {
    Scalar s = (static_cast<Scalar>(o) + Scalar(0.5)) / static_cast<Scalar>(sh) - Scalar(0.5);
    s = std::clamp(s, Scalar(0), static_cast<Scalar>(h - 1));
    const int i0 = static_cast<int>(std::floor(s));
    rows[o] = {i0, std::min(i0 + 1, h - 1), s - static_cast<Scalar>(i0)};
  }
  for (int o = 0; o < wo; ++o) {
    const Scalar s = (static_cast<Scalar>(o) + Scalar(0.5)) / static_cast<Scalar>(sw) - Scalar(0.5);
    const int f = static_cast<int>(std::floor(s));
    cols[o] = {((f % w) + w) % w, ((f + 1) % w + w) % w, s - static_cast<Scalar>(f)};
  }
  std::vector<Scalar> y(static_cast<std::size_t>(n) * c * ho * wo);
  for (std::size_t p = 0; p < static_cast<std::size_t>(n) * c; ++p) {
    const Scalar* xp = x.data() + p * h * w;
    Scalar* yp = y.data() + p * ho * wo;
    for (int i = 0; i < ho; ++i) {
      const Tap& r = rows[i];
      for (int j = 0; j < wo; ++j) {
        const Tap& cc = cols[j];
        const Scalar top = xp[r.i0 * w + cc.i0] * (1 - cc.f) + xp[r.i0 * w + cc.i1] * cc.f;
        const Scalar bot = xp[r.i1 * w + cc.i0] * (1 - cc.f) + xp[r.i1 * w + cc.i1] * cc.f;
        yp[i * wo + j] = top * (1 - r.f) + bot * r.f;
      }
    }
  }
  auto px = x.ptr();
  return make_result({n, c, ho, wo}, std::move(y), {x},
                     [px, n, c, h, w, ho, wo, rows, cols](Node& self) {
                       auto& g = px->ensure_grad();
                       for (std::size_t p = 0; p < static_cast<std::size_t>(n) * c; ++p) {
                         const Scalar* gy = self.grad.data() + p * ho * wo;
                         Scalar* gx = g.data() + p * h * w;
                         for (int i = 0; i < ho; ++i) {
                           const Tap& r = rows[i];
                           for (int j = 0; j < wo; ++j) {
                             const Tap& cc = cols[j];
                             const Scalar v = gy[i * wo + j];
                             gx[r.i0 * w + cc.i0] += v * (1 - r.f) * (1 - cc.f);
                             gx[r.i0 * w + cc.i1] += v * (1 - r.f) * cc.f;
                             gx[r.i1 * w + cc.i0] += v * r.f * (1 - cc.f);
                             gx[r.i1 * w + cc.i1] += v * r.f * cc.f;
                           }
                         }
                       }
                     });
}

Tensor softmax_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                         const std::vector<int>& key_lengths, std::vector<Scalar>* weights) {
  check_attention_inputs(q, k, v, heads, "softmax_attention");
  const int n = q.dim(0), c = q.dim(1), lq = q.dim(2), lk = k.dim(2);
  const int d = c / heads;
  if (!key_lengths.empty() && key_lengths.size() != static_cast<std::size_t>(n)) {
    throw std::invalid_argument("softmax_attention: one key length per sample required");
  }
  std::vector<int> valid(static_cast<std::size_t>(n), lk);
  for (std::size_t i = 0; i < key_lengths.size(); ++i) {
    if (key_lengths[i] < 1 || key_lengths[i] > lk) {
      throw std::invalid_argument("softmax_attention: key length out of range");
    }
    valid[i] = key_lengths[i];
  }
  const Scalar sc = Scalar(1) / std::sqrt(static_cast<Scalar>(d));
  const std::size_t psize = static_cast<std::size_t>(lq) * lk;
  std::vector<Scalar> probs(static_cast<std::size_t>(n) * heads * psize);
  std::vector<Scalar> y(q.numel());
  for (int s = 0; s < n; ++s) {
    for (int hh = 0; hh < heads; ++hh) {
      const std::size_t qoff = (static_cast<std::size_t>(s) * c + hh * d) * lq;
      const std::size_t koff = (static_cast<std::size_t>(s) * c + hh * d) * lk;
      MapM p(probs.data() + (static_cast<std::size_t>(s) * heads + hh) * psize, lq, lk);
      p.noalias() = sc * CMapM(q.data() + qoff, d, lq).transpose() * CMapM(k.data() + koff, d, lk);
      softmax_rows(p.data(), lq, lk, valid[s]);
      MapM(y.data() + qoff, d, lq).noalias() = CMapM(v.data() + koff, d, lk) * p.transpose();
    }
  }
  if (weights) *weights = probs;
  auto pq = q.ptr(), pk = k.ptr(), pv = v.ptr();
  return make_result(q.shape(), std::move(y), {q, k, v},
                     [pq, pk, pv, n, c, lq, lk, d, heads, sc, psize, probs](Node& self) {
                       std::vector<Scalar> dp(psize);
                       for (int s = 0; s < n; ++s) {
                         for (int hh = 0; hh < heads; ++hh) {
                           const std::size_t qoff = (static_cast<std::size_t>(s) * c + hh * d) * lq;
                           const std::size_t koff = (static_cast<std::size_t>(s) * c + hh * d) * lk;
                           CMapM p(probs.data() + (static_cast<std::size_t>(s) * heads + hh) * psize,
                                   lq, lk);
                           CMapM go(self.grad.data() + qoff, d, lq);
                           if (pv->requires_grad) {
                             MapM(pv->ensure_grad().data() + koff, d, lk).noalias() += go * p;
                           }
                           if (!pq->requires_grad && !pk->requires_grad) continue;
                           MapM dpm(dp.data(), lq, lk);
                           dpm.noalias() = go.transpose() * CMapM(pv->data.data() + koff, d, lk);
                           softmax_rows_backward(p.data(), dp.data(), lq, lk);
                           if (pq->requires_grad) {
                             MapM(pq->ensure_grad().data() + qoff, d, lq).noalias() +=
                                 sc * CMapM(pk->data.data() + koff, d, lk) * dpm.transpose();
                           }
                           if (pk->requires_grad) {
                             MapM(pk->ensure_grad().data() + koff, d, lk).noalias() +=
                                 sc * CMapM(pq->data.data() + qoff, d, lq) * dpm;
                           }
                         }
                       }
                     });
}

Tensor linear_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads) {
  check_attention_inputs(q, k, v, heads, "linear_attention");
  const int n = q.dim(0), c = q.dim(1), lq = q.dim(2), lk = k.dim(2);
  const int d = c / heads;
  const Scalar sc = Scalar(1) / std::sqrt(static_cast<Scalar>(d));
  std::vector<Scalar> kp(k.values());  // softmax over positions, per channel row
  std::vector<Scalar> ctx(static_cast<std::size_t>(n) * heads * d * d);
  std::vector<Scalar> y(q.numel());
  for (int s = 0; s < n; ++s) {
    for (int hh = 0; hh < heads; ++hh) {
      const std::size_t qoff = (static_cast<std::size_t>(s) * c + hh * d) * lq;
      const std::size_t koff = (static_cast<std::size_t>(s) * c + hh * d) * lk;
      softmax_rows(kp.data() + koff, d, lk, lk);
      MapM a(ctx.data() + (static_cast<std::size_t>(s) * heads + hh) * d * d, d, d);
      a.noalias() = CMapM(kp.data() + koff, d, lk) * CMapM(v.data() + koff, d, lk).transpose();
      MapM(y.data() + qoff, d, lq).noalias() = sc * a.transpose() * CMapM(q.data() + qoff, d, lq);
    }
  }
  auto pq = q.ptr(), pk = k.ptr(), pv = v.ptr();
  return make_result(q.shape(), std::move(y), {q, k, v},
                     [pq, pk, pv, n, c, lq, lk, d, heads, sc, kp, ctx](Node& self) {
                       Mat da(d, d);
                       std::vector<Scalar> dkp(static_cast<std::size_t>(d) * lk);
                       for (int s = 0; s < n; ++s) {
                         for (int hh = 0; hh < heads; ++hh) {
                           const std::size_t qoff = (static_cast<std::size_t>(s) * c + hh * d) * lq;
                           const std::size_t koff = (static_cast<std::size_t>(s) * c + hh * d) * lk;
                           CMapM a(ctx.data() + (static_cast<std::size_t>(s) * heads + hh) * d * d,
                                   d, d);
                           CMapM go(self.grad.data() + qoff, d, lq);
                           CMapM qm(pq->data.data() + qoff, d, lq);
                           CMapM kpm(kp.data() + koff, d, lk);
                           if (pq->requires_grad) {
                             MapM(pq->ensure_grad().data() + qoff, d, lq).noalias() += sc * a * go;
                           }
                           if (!pk->requires_grad && !pv->requires_grad) continue;
                           da.noalias() = sc * qm * go.transpose();
                           if (pv->requires_grad) {
                             MapM(pv->ensure_grad().data() + koff, d, lk).noalias() +=
                                 da.transpose() * kpm;
                           }
                           if (pk->requires_grad) {
                             MapM dk(dkp.data(), d, lk);
                             dk.noalias() = da * CMapM(pv->data.data() + koff, d, lk);
                             softmax_rows_backward(kpm.data(), dkp.data(), d, lk);
                             MapM(pk->ensure_grad().data() + koff, d, lk) += dk;
                           }
                         }
                       }
                     });
}

Tensor rope(const Tensor& x, int heads, int height, int width) {
  if (x.rank() != 3 || x.dim(2) != height * width) {
    throw std::invalid_argument("rope: expects [N, C, H*W]");
  }
  const int n = x.dim(0), c = x.dim(1), l = x.dim(2);
  if (heads < 1 || c % heads != 0 || (c / heads) % 4 != 0) {
    throw std::invalid_argument("rope: head width must be a multiple of 4");
  }
  const int d = c / heads;
  const int pairs = d / 2, half = pairs / 2;
  // angle[p * l + pos] for pair p within a head.
  std::vector<Scalar> cs(static_cast<std::size_t>(pairs) * l), sn(cs.size());
  for (int p = 0; p < pairs; ++p) {
    const int idx = p < half ? p : p - half;
    const double freq = std::pow(10000.0, -static_cast<double>(idx) / half);
    for (int pos = 0; pos < l; ++pos) {
      const double coord = p < half ? pos / width : pos % width;
      cs[static_cast<std::size_t>(p) * l + pos] = static_cast<Scalar>(std::cos(coord * freq));
      sn[static_cast<std::size_t>(p) * l + pos] = static_cast<Scalar>(std::sin(coord * freq));
    }
  }
  auto rotate = [=](const Scalar* in, Scalar* out, Scalar sign) {
    for (int s = 0; s < n; ++s) {
      for (int hh = 0; hh < heads; ++hh) {
        for (int p = 0; p < pairs; ++p) {
          const std::size_t a = (static_cast<std::size_t>(s) * c + hh * d + 2 * p) * l;
          const std::size_t b = a + l;
          for (int pos = 0; pos < l; ++pos) {
            const Scalar co = cs[static_cast<std::size_t>(p) * l + pos];
            const Scalar si = sign * sn[static_cast<std::size_t>(p) * l + pos];
            const Scalar x0 = in[a + pos], x1 = in[b + pos];
            out[a + pos] += x0 * co - x1 * si;
            out[b + pos] += x0 * si + x1 * co;
          }
        }
      }
    }
  };
  std::vector<Scalar> y(x.numel(), Scalar(0));
  rotate(x.data(), y.data(), Scalar(1));
  auto px = x.ptr();
  return make_result(x.shape(), std::move(y), {x}, [px, rotate](Node& self) {
    rotate(self.grad.data(), px->ensure_grad().data(), Scalar(-1));
  });
}

}  // namespace t2ldm::nn
