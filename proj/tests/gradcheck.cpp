// Finite-difference check of the full training loss on a micro-model, in double precision.
// Prints one line per checked parameter and exits 0 when every relative error is within tolerance.
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>
#include <vector>

#include "t2ldm/network.hpp"
#include "t2ldm/schedule.hpp"
#include "t2ldm/training.hpp"

using namespace t2ldm;
using network::Scalar;
using network::Tensor;

namespace {

constexpr int kH = 4, kW = 8, kN = 2, kTextDim = 2;
constexpr double kStep = 1e-6;
constexpr double kTolerance = 1e-3;
constexpr int kChecked = 16;

network::UNetConfig micro_net() {
  network::UNetConfig c;
  c.base_channels = 1;
  c.channel_mult = {1, 1};
  c.strides = {{1, 2}};
  c.attention = {network::AttentionKind::linear, network::AttentionKind::vanilla};
  c.heads = {1, 1};
  c.norm_groups = 1;
  c.time_sinusoid_dim = 2;
  c.temb_dim = 1;
  c.dpe_terms = 1;
  c.text_dim = kTextDim;
  c.sensor.height = kH;
  c.sensor.width = kW;
  return c;
}

struct Problem {
  std::vector<int> t;
  std::vector<Scalar> x0, xt, v, weight;
  network::TextBatch text;
  double lambda = 0.1;
};

Problem make_problem(const schedule::NoiseSchedule& sched) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_real_distribution<double> u(-0.9, 0.9);
  Problem p;
  p.t = {9, 40};
  const std::size_t per = 2 * kH * kW;
  p.x0.resize(kN * per);
  p.xt.resize(p.x0.size());
  p.v.resize(p.x0.size());
  for (auto& x : p.x0) x = u(rng);
  for (int i = 0; i < kN; ++i) {
    const double ab = sched.alpha_bar(p.t[i]);
    const double sa = std::sqrt(ab), sg = std::sqrt(1 - ab);
    for (std::size_t j = i * per; j < (i + 1) * per; ++j) {
      const double e = nd(rng);
      p.xt[j] = sa * p.x0[j] + sg * e;
      p.v[j] = sa * e - sg * p.x0[j];
    }
    p.weight.push_back(schedule::min_snr_weight(p.t[i], sched, 5.0));
  }
  // Two tokens for the first sample, one (padded) for the second.
  std::vector<Scalar> tok(kN * 2 * kTextDim, 0.0);
  for (int i = 0; i < 3 * kTextDim; ++i) tok[i] = u(rng);
  p.text.tokens = Tensor::from({kN, 2, kTextDim}, tok);
  p.text.lengths = {2, 1};
  return p;
}

// Denoise + guidance + lambda * alignment, as in an active-guidance training step.
Tensor total_loss(const network::DenoiseNet& dn, const network::GuidanceNet& gn, const Problem& p) {
  const auto out = dn.forward(Tensor::from({kN, 2, kH, kW}, p.xt), p.t, &p.text);
  const auto g = gn.forward(Tensor::from({kN, 2, kH, kW}, p.x0), out.pyramid);
  Tensor loss = training::loss_denoise(out.v, p.v, p.weight, 1.0);
  loss = nn::add(loss, training::loss_guidance(g.x0_recon, p.x0));
  return nn::add(loss, nn::scale(training::loss_align(g.pyramid, out.pyramid), p.lambda));
}

}  // namespace

int main() {
  const auto cfg = micro_net();
  cfg.validate();
  const auto sched = schedule::cosine_schedule(64);
  network::DenoiseNet dn(cfg, 3);
  network::GuidanceNet gn(cfg, 4);
  auto params = dn.parameters();
  const std::size_t dn_count = network::parameter_count(params);
  for (const auto& [name, ptr] : gn.parameters()) params.emplace_back("gn." + name, ptr);
  const std::size_t gn_count = network::parameter_count(params) - dn_count;
  // Open the zero-initialized paths so every parameter reaches the loss.
  network::perturb_parameters(params, 0.3, 5);
  std::printf("parameters dn %zu gn %zu\n", dn_count, gn_count);

  const auto prob = make_problem(sched);
  network::zero_grads(params);
  total_loss(dn, gn, prob).backward();

  std::vector<std::pair<std::size_t, std::size_t>> flat;
  for (std::size_t k = 0; k < params.size(); ++k) {
    for (std::size_t i = 0; i < params[k].second->numel(); ++i) flat.emplace_back(k, i);
  }
  std::mt19937_64 rng(19);
  std::shuffle(flat.begin(), flat.end(), rng);

  // Parameters the loss does not reach (e.g. unused self-attention in a fused block) are skipped.
  int failures = 0, checked = 0, skipped = 0;
  for (std::size_t c = 0; c < flat.size() && checked < kChecked; ++c) {
    const auto [k, i] = flat[c];
    Tensor& w = *params[k].second;
    const double analytic = w.has_grad() ? w.grad()[i] : 0.0;
    const Scalar orig = w.values()[i];
    double f[2];
    {
      nn::NoGradGuard guard;
      w.values()[i] = orig + kStep;
      f[0] = total_loss(dn, gn, prob).item();
      w.values()[i] = orig - kStep;
      f[1] = total_loss(dn, gn, prob).item();
    }
    w.values()[i] = orig;
    const double numeric = (f[0] - f[1]) / (2 * kStep);
    if (std::abs(analytic) < 1e-12 && std::abs(numeric) < 1e-12) {
      ++skipped;
      continue;
    }
    ++checked;
    const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    const bool ok = rel <= kTolerance;
    failures += ok ? 0 : 1;
    std::printf("%-40s[%zu] analytic %+.9e numeric %+.9e rel %.2e %s\n", params[k].first.c_str(), i,
                analytic, numeric, rel, ok ? "ok" : "FAIL");
  }
  const bool pass = failures == 0 && checked == kChecked && dn_count <= 500 && gn_count <= 500;
  std::printf("gradcheck %s: %d/%d within %.0e (%d unreached skipped), dn %zu gn %zu parameters\n",
              pass ? "PASS" : "FAIL", checked - failures, checked, kTolerance, skipped, dn_count, gn_count);
  return pass ? 0 : 1;
}
