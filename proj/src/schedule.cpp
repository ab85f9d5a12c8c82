#include "t2ldm/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

namespace t2ldm::schedule {

NoiseSchedule::NoiseSchedule(std::vector<double> alpha_bar) : alpha_bar_(std::move(alpha_bar)) {
  if (alpha_bar_.size() < 2) throw std::invalid_argument("NoiseSchedule: need T >= 1");
  if (alpha_bar_[0] != 1.0) throw std::invalid_argument("NoiseSchedule: alpha_bar[0] must be 1");
  for (std::size_t t = 1; t < alpha_bar_.size(); ++t) {
    if (!(alpha_bar_[t] > 0.0) || !(alpha_bar_[t] < alpha_bar_[t - 1])) {
      throw std::invalid_argument("NoiseSchedule: alpha_bar must decrease strictly and stay > 0");
    }
  }
}

double NoiseSchedule::alpha(int t) const { return alpha_bar(t) / alpha_bar(t - 1); }

double NoiseSchedule::sigma(int t) const { return std::sqrt(1.0 - alpha_bar(t)); }

double NoiseSchedule::posterior_sigma(int t) const {
  const double var = (1.0 - alpha_bar(t - 1)) / (1.0 - alpha_bar(t)) * (1.0 - alpha(t));
  return std::sqrt(std::max(var, 0.0));
}

double NoiseSchedule::snr(int t) const { return alpha_bar(t) / (1.0 - alpha_bar(t)); }

NoiseSchedule cosine_schedule(int steps, double offset, double max_beta) {
  if (steps <= 0) throw std::invalid_argument("cosine_schedule: T must be positive");
  auto f = [&](double t) {
    const double c = std::cos((t / steps + offset) / (1.0 + offset) * std::numbers::pi / 2.0);
    return c * c;
  };
  const double f0 = f(0.0);
  std::vector<double> ab(static_cast<std::size_t>(steps) + 1);
  ab[0] = 1.0;
  double prev_raw = 1.0;
  for (int t = 1; t <= steps; ++t) {
    const double raw = f(t) / f0;
    const double beta = std::min(1.0 - raw / prev_raw, max_beta);
    ab[static_cast<std::size_t>(t)] = ab[static_cast<std::size_t>(t) - 1] * (1.0 - beta);
    prev_raw = raw;
  }
  return NoiseSchedule(std::move(ab));
}

void forward_noise(std::span<const float> x0, std::span<const float> eps, double alpha_bar,
                   std::span<float> x_t, std::span<float> v) {
  const double a = std::sqrt(alpha_bar);
  const double s = std::sqrt(1.0 - alpha_bar);
  for (std::size_t i = 0; i < x0.size(); ++i) {
    x_t[i] = static_cast<float>(a * x0[i] + s * eps[i]);
    v[i] = static_cast<float>(a * eps[i] - s * x0[i]);
  }
}

DiffusionSample make_sample(std::span<const float> x0, std::span<const float> eps, int t,
                            const NoiseSchedule& schedule) {
  if (x0.size() != eps.size()) throw std::invalid_argument("make_sample: shape mismatch");
  if (t < 1 || t > schedule.steps()) throw std::invalid_argument("make_sample: t out of range");
  DiffusionSample s;
  s.x0.assign(x0.begin(), x0.end());
  s.eps.assign(eps.begin(), eps.end());
  s.t = t;
  s.x_t.resize(x0.size());
  s.v.resize(x0.size());
  forward_noise(x0, eps, schedule.alpha_bar(t), s.x_t, s.v);
  return s;
}

Recovered recover_from_v(std::span<const float> x_t, std::span<const float> v, int t,
                         const NoiseSchedule& schedule) {
  if (x_t.size() != v.size()) throw std::invalid_argument("recover_from_v: shape mismatch");
  const double a = std::sqrt(schedule.alpha_bar(t));
  const double s = schedule.sigma(t);
  Recovered r;
  r.x0.resize(x_t.size());
  r.eps.resize(x_t.size());
  for (std::size_t i = 0; i < x_t.size(); ++i) {
    r.x0[i] = static_cast<float>(a * x_t[i] - s * v[i]);
    r.eps[i] = static_cast<float>(s * x_t[i] + a * v[i]);
  }
  return r;
}

double min_snr_weight(int t, const NoiseSchedule& schedule, double gamma) {
  if (!(gamma > 0.0)) throw std::invalid_argument("min_snr_weight: gamma must be positive");
  if (t < 1 || t > schedule.steps()) {
    throw std::invalid_argument("min_snr_weight: t must lie in [1, T]");
  }
  const double snr = schedule.snr(t);
  return std::min(snr, gamma) / (snr + 1.0);
}

std::vector<float> ddpm_step(std::span<const float> x_t, std::span<const float> v_hat, int t,
                             std::span<const float> noise, const NoiseSchedule& schedule) {
  if (t < 1 || t > schedule.steps()) throw std::invalid_argument("ddpm_step: t out of range");
  if (v_hat.size() != x_t.size() || noise.size() != x_t.size()) {
    throw std::invalid_argument("ddpm_step: shape mismatch");
  }
  const double ab = schedule.alpha_bar(t);
  const double a = schedule.alpha(t);
  const double s = schedule.sigma(t);
  const double sa = std::sqrt(ab);
  const double coef = (1.0 - a) / s;
  const double inv_sqrt_a = 1.0 / std::sqrt(a);
  const double post = schedule.posterior_sigma(t);
  std::vector<float> out(x_t.size());
  for (std::size_t i = 0; i < x_t.size(); ++i) {
    const double eps_hat = s * x_t[i] + sa * v_hat[i];
    out[i] = static_cast<float>(inv_sqrt_a * (x_t[i] - coef * eps_hat) + post * noise[i]);
  }
  return out;
}

std::vector<float> guide(const std::vector<float>& v_uncond, const std::vector<float>& v_cond,
                         double scale) {
  std::vector<float> out(v_cond.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<float>(v_uncond[i] + scale * (double(v_cond[i]) - v_uncond[i]));
  }
  return out;
}

std::vector<float> sample_loop(const VModel& model, const SampleShape& shape,
                               const NoiseSchedule& schedule, const SamplerOptions& options) {
  const std::size_t n = shape.numel();
  if (n == 0) throw std::invalid_argument("sample_loop: empty shape");
  std::mt19937_64 rng(options.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto draw = [&](std::vector<float>& buf) {
    for (auto& x : buf) x = static_cast<float>(normal(rng));
  };

  std::vector<float> x(n);
  draw(x);
  std::vector<float> noise(n, 0.f);

  auto checked = [&](std::vector<float> v, int t) {
    if (v.size() != n) {
      std::ostringstream msg;
      msg << "sample_loop: model returned " << v.size() << " values at t=" << t << ", expected "
          << n;
      throw std::runtime_error(msg.str());
    }
    return v;
  };

  for (int t = schedule.steps(); t >= 1; --t) {
    std::vector<float> v;
    if (!options.has_condition) {
      v = checked(model(x, t, false), t);
    } else if (options.cfg_scale == 1.0) {
      v = checked(model(x, t, true), t);
    } else if (options.cfg_scale == 0.0) {
      v = checked(model(x, t, false), t);
    } else {
      const auto vc = checked(model(x, t, true), t);
      const auto vu = checked(model(x, t, false), t);
      v = guide(vu, vc, options.cfg_scale);
    }
    if (t > 1 && options.noise_scale != 0.0) {
      draw(noise);
      if (options.noise_scale != 1.0) {
        for (auto& e : noise) e = static_cast<float>(e * options.noise_scale);
      }
    } else {
      std::fill(noise.begin(), noise.end(), 0.f);
    }
    x = ddpm_step(x, v, t, noise, schedule);
    if (options.on_step) options.on_step(t, x);
  }
  for (auto& e : x) e = std::clamp(e, -1.f, 1.f);
  return x;
}

}  // namespace t2ldm::schedule
