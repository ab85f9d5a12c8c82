#include "t2ldm/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace t2ldm::training {

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("TrainConfig: " + m); };
  if (total_steps < 0) fail("total_steps must be >= 0");
  if (gn_active_steps < 0) fail("gn_active_steps must be >= 0");
  if (lambda_values.empty()) fail("lambda_values must be nonempty");
  for (double l : lambda_values) {
    if (!(l >= 0)) fail("lambda values must be >= 0");
  }
  if (lambda_interval < 1) fail("lambda_interval must be >= 1");
  if (!(snr_gamma > 0)) fail("snr_gamma must be > 0");
  if (!(cfg_dropout >= 0 && cfg_dropout < 1)) fail("cfg_dropout must lie in [0, 1)");
  if (!(ema_decay >= 0 && ema_decay <= 1)) fail("ema_decay must lie in [0, 1]");
  if (ema_update_every < 1) fail("ema_update_every must be >= 1");
  if (!(lr > 0 && lr < 1)) fail("lr must lie in (0, 1)");
  if (!(lr_final_ratio >= 0 && lr_final_ratio <= 1)) fail("lr_final_ratio must lie in [0, 1]");
  if (warmup_steps < 0) fail("warmup_steps must be >= 0");
  if (!(weight_decay >= 0 && weight_decay < 1)) fail("weight_decay must lie in [0, 1)");
  if (!(adam_beta1 >= 0 && adam_beta1 < 1) || !(adam_beta2 >= 0 && adam_beta2 < 1)) {
    fail("Adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0)) fail("adam_eps must be > 0");
  if (!(grad_clip >= 0)) fail("grad_clip must be >= 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (diffusion_steps < 2) fail("diffusion_steps must be >= 2");
  if (!(huber_delta > 0)) fail("huber_delta must be > 0");
}

TrainConfig TrainConfig::scaled(double ratio) const {
  if (!(ratio > 0)) throw std::invalid_argument("TrainConfig::scaled: ratio must be > 0");
  TrainConfig c = *this;
  auto s = [ratio](std::int64_t v) {
    return std::max<std::int64_t>(1, static_cast<std::int64_t>(std::llround(v * ratio)));
  };
  c.total_steps = s(total_steps);
  c.gn_active_steps = s(gn_active_steps);
  c.lambda_interval = s(lambda_interval);
  c.warmup_steps = warmup_steps > 0 ? s(warmup_steps) : 0;
  return c;
}

TrainConfig TrainConfig::desk() {
  TrainConfig c = TrainConfig{}.scaled(1.0 / 200.0);  // 2000 total steps
  c.gn_active_steps = 1000;
  c.lambda_interval = 250;
  c.lr = 1e-3;
  c.lr_final_ratio = 0.1;
  c.warmup_steps = 50;
  c.ema_decay = 0.995;
  c.grad_clip = 1.0;
  c.batch_size = 1;
  c.diffusion_steps = 64;
  return c;
}

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return {};
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw std::invalid_argument("not a boolean: '" + v + "'");
}

using Setter = std::function<void(TrainConfig&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> m = {
      {"total_steps", [](TrainConfig& c, const std::string& v) { c.total_steps = std::stoll(v); }},
      {"gn_active_steps", [](TrainConfig& c, const std::string& v) { c.gn_active_steps = std::stoll(v); }},
      {"lambda_values",
       [](TrainConfig& c, const std::string& v) {
         c.lambda_values.clear();
         std::stringstream ss(v);
         for (std::string item; std::getline(ss, item, ',');) {
           if (!trim(item).empty()) c.lambda_values.push_back(std::stod(item));
         }
       }},
      {"lambda_interval", [](TrainConfig& c, const std::string& v) { c.lambda_interval = std::stoll(v); }},
      {"snr_gamma", [](TrainConfig& c, const std::string& v) { c.snr_gamma = std::stod(v); }},
      {"cfg_dropout", [](TrainConfig& c, const std::string& v) { c.cfg_dropout = std::stod(v); }},
      {"ema_decay", [](TrainConfig& c, const std::string& v) { c.ema_decay = std::stod(v); }},
      {"ema_update_every", [](TrainConfig& c, const std::string& v) { c.ema_update_every = std::stoi(v); }},
      {"lr", [](TrainConfig& c, const std::string& v) { c.lr = std::stod(v); }},
      {"lr_final_ratio", [](TrainConfig& c, const std::string& v) { c.lr_final_ratio = std::stod(v); }},
      {"warmup_steps", [](TrainConfig& c, const std::string& v) { c.warmup_steps = std::stoll(v); }},
      {"weight_decay", [](TrainConfig& c, const std::string& v) { c.weight_decay = std::stod(v); }},
      {"adam_beta1", [](TrainConfig& c, const std::string& v) { c.adam_beta1 = std::stod(v); }},
      {"adam_beta2", [](TrainConfig& c, const std::string& v) { c.adam_beta2 = std::stod(v); }},
      {"adam_eps", [](TrainConfig& c, const std::string& v) { c.adam_eps = std::stod(v); }},
      {"grad_clip", [](TrainConfig& c, const std::string& v) { c.grad_clip = std::stod(v); }},
      {"batch_size", [](TrainConfig& c, const std::string& v) { c.batch_size = std::stoi(v); }},
      {"diffusion_steps", [](TrainConfig& c, const std::string& v) { c.diffusion_steps = std::stoi(v); }},
      {"huber_delta", [](TrainConfig& c, const std::string& v) { c.huber_delta = std::stod(v); }},
      {"scrg", [](TrainConfig& c, const std::string& v) { c.scrg = parse_bool(v); }},
      {"scrg_after_freeze", [](TrainConfig& c, const std::string& v) { c.scrg_after_freeze = parse_bool(v); }},
      {"seed", [](TrainConfig& c, const std::string& v) { c.seed = std::stoull(v); }},
  };
  return m;
}

}  // namespace

void apply_config_text(const std::string& text, TrainConfig& cfg) {
  std::istringstream is(text);
  int lineno = 0;
  for (std::string line; std::getline(is, line);) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    auto it = setters().find(key);
    if (it == setters().end()) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
    try {
      it->second(cfg, value);
    } catch (const std::invalid_argument&) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": bad value for '" +
                                  key + "'");
    } catch (const std::out_of_range&) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": value out of range for '" +
                                  key + "'");
    }
  }
}

void apply_config_file(const std::filesystem::path& path, TrainConfig& cfg) {
  std::ifstream is(path);
  if (!is) throw std::invalid_argument("cannot open config file " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  apply_config_text(ss.str(), cfg);
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"total_steps", c.total_steps},
          {"gn_active_steps", c.gn_active_steps},
          {"lambda_values", c.lambda_values},
          {"lambda_interval", c.lambda_interval},
          {"snr_gamma", c.snr_gamma},
          {"cfg_dropout", c.cfg_dropout},
          {"ema_decay", c.ema_decay},
          {"ema_update_every", c.ema_update_every},
          {"lr", c.lr},
          {"lr_final_ratio", c.lr_final_ratio},
          {"warmup_steps", c.warmup_steps},
          {"weight_decay", c.weight_decay},
          {"adam_beta1", c.adam_beta1},
          {"adam_beta2", c.adam_beta2},
          {"adam_eps", c.adam_eps},
          {"grad_clip", c.grad_clip},
          {"batch_size", c.batch_size},
          {"diffusion_steps", c.diffusion_steps},
          {"huber_delta", c.huber_delta},
          {"scrg", c.scrg},
          {"scrg_after_freeze", c.scrg_after_freeze},
          {"seed", c.seed}};
}

std::string to_config_text(const TrainConfig& cfg) {
  std::ostringstream os;
  os << std::setprecision(17);
  const auto j = to_json(cfg);
  for (const auto& [key, value] : j.items()) {
    os << key << " = ";
    if (value.is_array()) {
      for (std::size_t i = 0; i < value.size(); ++i) os << (i ? "," : "") << value[i].get<double>();
    } else if (value.is_boolean()) {
      os << (value.get<bool>() ? "true" : "false");
    } else if (value.is_number_float()) {
      os << value.get<double>();
    } else {
      os << value.dump();
    }
    os << '\n';
  }
  return os.str();
}

double lambda_of_step(std::int64_t step, const TrainConfig& cfg) {
  if (step < 0) throw std::invalid_argument("lambda_of_step: step must be >= 0");
  const auto idx = std::min<std::int64_t>(step / cfg.lambda_interval,
                                          static_cast<std::int64_t>(cfg.lambda_values.size()) - 1);
  return cfg.lambda_values[static_cast<std::size_t>(idx)];
}

double lr_at(std::int64_t step, const TrainConfig& cfg) {
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps) {
    return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
  }
  const double span = static_cast<double>(std::max<std::int64_t>(1, cfg.total_steps - cfg.warmup_steps));
  const double p = std::clamp(static_cast<double>(step - cfg.warmup_steps) / span, 0.0, 1.0);
  const double lo = cfg.lr * cfg.lr_final_ratio;
  return lo + 0.5 * (cfg.lr - lo) * (1.0 + std::cos(std::numbers::pi * p));
}

// ---------------------------------------------------------------------------

Tensor loss_denoise(const Tensor& v_hat, const std::vector<Scalar>& v,
                    const std::vector<Scalar>& sample_weight, double delta) {
  return nn::huber_loss(v_hat, v, sample_weight, static_cast<Scalar>(delta));
}

Tensor loss_guidance(const Tensor& x0_recon, const std::vector<Scalar>& x0) {
  return nn::mse_loss(x0_recon, x0);
}

Tensor loss_align(const network::FeaturePyramid& f_recon, const network::FeaturePyramid& f_noise) {
  if (f_recon.size() != f_noise.size() || f_recon.empty()) {
    throw std::invalid_argument("loss_align: pyramids differ in length");
  }
  Tensor total;
  for (std::size_t i = 0; i < f_recon.size(); ++i) {
    if (f_recon[i].shape() != f_noise[i].shape()) {
      throw std::invalid_argument("loss_align: scale mismatch at entry " + std::to_string(i));
    }
    const Tensor l = nn::cosine_align_loss(f_recon[i], f_noise[i]);
    total = total ? nn::add(total, l) : l;
  }
  return nn::scale(total, Scalar(1) / static_cast<Scalar>(f_recon.size()));
}

void AdamW::step(const network::ParamList& params, double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (const auto& [name, p] : params) {
    if (!p->has_grad()) continue;
    auto& [m, v] = moments_[p];
    if (m.empty()) {
      m.assign(p->numel(), Scalar(0));
      v.assign(p->numel(), Scalar(0));
    }
    auto& g = p->grad();
    auto& x = p->values();
    // Decoupled decay on weight matrices and kernels only.
    const double decay = p->rank() >= 2 ? lr * wd_ : 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      m[i] = static_cast<Scalar>(b1_ * m[i] + (1 - b1_) * g[i]);
      v[i] = static_cast<Scalar>(b2_ * v[i] + (1 - b2_) * g[i] * g[i]);
      const double mh = m[i] / c1, vh = v[i] / c2;
      x[i] = static_cast<Scalar>(x[i] - decay * x[i] - lr * mh / (std::sqrt(vh) + eps_));
    }
  }
}

void ema_update(const network::ParamList& shadow, const network::ParamList& params, double decay) {
  if (shadow.size() != params.size()) throw std::invalid_argument("ema_update: list size mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& s = shadow[i].second->values();
    const auto& p = params[i].second->values();
    if (s.size() != p.size()) throw std::invalid_argument("ema_update: shape mismatch");
    if (decay == 0.0) {
      s = p;
      continue;
    }
    if (decay == 1.0) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      s[j] = static_cast<Scalar>(decay * s[j] + (1.0 - decay) * p[j]);
    }
  }
}

double grad_norm(const network::ParamList& params) {
  double s = 0;
  for (const auto& [name, p] : params) {
    if (!p->has_grad()) continue;
    for (Scalar g : p->grad()) s += static_cast<double>(g) * g;
  }
  return std::sqrt(s);
}

void clip_grads(const network::ParamList& params, double max_norm) {
  if (max_norm <= 0) return;
  const double n = grad_norm(params);
  if (!(n > max_norm)) return;
  const auto f = static_cast<Scalar>(max_norm / n);
  for (const auto& [name, p] : params) {
    if (!p->has_grad()) continue;
    for (auto& g : p->grad()) g *= f;
  }
}

// ---------------------------------------------------------------------------

Batch make_batch(const std::vector<Example>& data, const std::vector<std::size_t>& indices,
                 int height, int width, bool conditional) {
  Batch b;
  b.height = height;
  b.width = width;
  const std::size_t per = 2ULL * height * width;
  for (std::size_t i : indices) {
    const auto& e = data.at(i);
    if (e.x0.size() != per) throw std::invalid_argument("make_batch: example size mismatch");
    b.x0.insert(b.x0.end(), e.x0.begin(), e.x0.end());
    if (conditional) b.prompts.push_back(e.prompt);
  }
  return b;
}

Probe make_probe(const Batch& batch, int diffusion_steps, std::uint64_t seed) {
  Probe p;
  p.batch = batch;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> td(1, diffusion_steps);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (int i = 0; i < batch.size(); ++i) p.t.push_back(td(rng));
  p.eps.resize(batch.x0.size());
  for (auto& e : p.eps) e = static_cast<Scalar>(nd(rng));
  return p;
}

Trainer::Trainer(const network::UNetConfig& net, const TrainConfig& cfg)
    : net_cfg_(net),
      cfg_(cfg),
      sched_(schedule::cosine_schedule((cfg.validate(), cfg.diffusion_steps))),
      opt_dn_(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay),
      opt_gn_(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay),
      rng_(cfg.seed) {
  dn_ = std::make_unique<network::DenoiseNet>(net_cfg_, cfg_.seed * 3 + 1);
  ema_ = std::make_unique<network::DenoiseNet>(net_cfg_, cfg_.seed * 3 + 1);
  if (cfg_.scrg) gn_ = std::make_unique<network::GuidanceNet>(net_cfg_, cfg_.seed * 3 + 2);
}

std::vector<bool> cfg_dropout_draws(std::size_t n, double rate, std::mt19937_64& rng) {
  std::bernoulli_distribution drop(rate);
  std::vector<bool> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = drop(rng);
  return out;
}

network::TextBatch Trainer::encode_prompts(const std::vector<std::string>& prompts, bool dropout) {
  // Always draw so the RNG stream does not depend on the dropout flag.
  const auto drop = cfg_dropout_draws(prompts.size(), cfg_.cfg_dropout, rng_);
  std::vector<textenc::TextEmbedding> rows;
  rows.reserve(prompts.size());
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    rows.push_back(dropout && drop[i] ? encoder_.null_embedding() : encoder_.encode(prompts[i]));
  }
  return network::make_text_batch(rows);
}

LossReport Trainer::train_step(const Batch& batch) {
  const int n = batch.size();
  if (n < 1) throw std::invalid_argument("train_step: empty batch");
  if (!batch.prompts.empty() && batch.prompts.size() != static_cast<std::size_t>(n)) {
    throw std::invalid_argument("train_step: one prompt per sample required");
  }
  const std::size_t per = 2ULL * batch.height * batch.width;

  std::optional<network::TextBatch> text;
  if (!batch.prompts.empty()) text = encode_prompts(batch.prompts, true);

  std::uniform_int_distribution<int> td(1, sched_.steps());
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<int> t(static_cast<std::size_t>(n));
  std::vector<Scalar> eps(batch.x0.size()), xt(batch.x0.size()), v(batch.x0.size());
  std::vector<Scalar> weight(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) t[i] = td(rng_);
  for (auto& e : eps) e = static_cast<Scalar>(nd(rng_));
  for (int i = 0; i < n; ++i) {
    const double ab = sched_.alpha_bar(t[i]);
    const double sa = std::sqrt(ab), sg = std::sqrt(1.0 - ab);
    for (std::size_t j = i * per; j < (i + 1) * per; ++j) {
      xt[j] = static_cast<Scalar>(sa * batch.x0[j] + sg * eps[j]);
      v[j] = static_cast<Scalar>(sa * eps[j] - sg * batch.x0[j]);
    }
    weight[i] = static_cast<Scalar>(schedule::min_snr_weight(t[i], sched_, cfg_.snr_gamma));
  }

  const auto dn_params = dn_->parameters();
  network::zero_grads(dn_params);
  network::ParamList gn_params;
  if (gn_) {
    gn_params = gn_->parameters();
    network::zero_grads(gn_params);
  }

  LossReport r;
  r.step = step_;
  r.lambda = cfg_.scrg ? lambda_of_step(step_, cfg_) : 0.0;
  r.lr = lr_at(step_, cfg_);
  r.gn_active = gn_ && !gn_frozen();

  const Tensor x_t = Tensor::from({n, 2, batch.height, batch.width}, xt);
  const auto out = dn_->forward(x_t, t, text ? &*text : nullptr);
  Tensor total = loss_denoise(out.v, v, weight, cfg_.huber_delta);
  r.loss_denoise = total.item();

  if (gn_) {
    const Tensor x0 = Tensor::from({n, 2, batch.height, batch.width}, batch.x0);
    if (r.gn_active) {
      const auto g = gn_->forward(x0, out.pyramid);
      const Tensor lg = loss_guidance(g.x0_recon, batch.x0);
      const Tensor la = loss_align(g.pyramid, out.pyramid);
      r.loss_guidance = lg.item();
      r.loss_align = la.item();
      total = nn::add(total, nn::add(lg, nn::scale(la, static_cast<Scalar>(r.lambda))));
    } else if (cfg_.scrg_after_freeze) {
      network::FeaturePyramid recon;
      {
        // Frozen teacher: no tape through the guidance network.
        nn::NoGradGuard guard;
        recon = gn_->forward(x0, out.pyramid).pyramid;
      }
      const Tensor la = loss_align(recon, out.pyramid);
      r.loss_align = la.item();
      total = nn::add(total, nn::scale(la, static_cast<Scalar>(r.lambda)));
    } else {
      r.lambda = 0.0;
    }
  }
  r.total = total.item();
  if (!std::isfinite(r.total)) {
    throw std::runtime_error("non-finite loss at step " + std::to_string(step_) +
                             " (denoise " + std::to_string(r.loss_denoise) + ", guidance " +
                             std::to_string(r.loss_guidance) + ", align " +
                             std::to_string(r.loss_align) + ")");
  }
  total.backward();

  clip_grads(dn_params, cfg_.grad_clip);
  opt_dn_.step(dn_params, r.lr);
  if (r.gn_active) {
    clip_grads(gn_params, cfg_.grad_clip);
    opt_gn_.step(gn_params, r.lr);
  }
  ++step_;
  if (step_ % cfg_.ema_update_every == 0) {
    ema_update(ema_->parameters(), dn_params, cfg_.ema_decay);
  }
  return r;
}

double Trainer::probe_loss(const Probe& probe) const {
  nn::NoGradGuard guard;
  const auto& b = probe.batch;
  const int n = b.size();
  const std::size_t per = 2ULL * b.height * b.width;
  std::vector<Scalar> xt(b.x0.size()), v(b.x0.size()), weight(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const double ab = sched_.alpha_bar(probe.t[i]);
    const double sa = std::sqrt(ab), sg = std::sqrt(1.0 - ab);
    for (std::size_t j = i * per; j < (i + 1) * per; ++j) {
      xt[j] = static_cast<Scalar>(sa * b.x0[j] + sg * probe.eps[j]);
      v[j] = static_cast<Scalar>(sa * probe.eps[j] - sg * b.x0[j]);
    }
    weight[i] = static_cast<Scalar>(schedule::min_snr_weight(probe.t[i], sched_, cfg_.snr_gamma));
  }
  std::optional<network::TextBatch> text;
  if (!b.prompts.empty()) {
    std::vector<textenc::TextEmbedding> rows;
    for (const auto& p : b.prompts) rows.push_back(encoder_.encode(p));
    text = network::make_text_batch(rows);
  }
  const Tensor x_t = Tensor::from({n, 2, b.height, b.width}, xt);
  const auto out = dn_->forward(x_t, probe.t, text ? &*text : nullptr);
  return loss_denoise(out.v, v, weight, cfg_.huber_delta).item();
}

network::Checkpoint Trainer::checkpoint() {
  network::Checkpoint c;
  c.config = {{"unet", network::to_json(net_cfg_)}, {"train", to_json(cfg_)}};
  c.step = step_;
  c.put_all("dn.", dn_->parameters());
  c.put_all("ema.", ema_->parameters());
  if (gn_) c.put_all("gn.", gn_->parameters());
  return c;
}

void Trainer::restore(const network::Checkpoint& ckpt) {
  ckpt.load_into("dn.", dn_->parameters());
  ckpt.load_into("ema.", ema_->parameters());
  if (gn_ && ckpt.has("gn.conv_in.w")) ckpt.load_into("gn.", gn_->parameters());
  step_ = ckpt.step;
}

std::string log_header() { return "step,loss_denoise,loss_guidance,loss_align,lambda,lr"; }

std::string log_row(const LossReport& r) {
  std::ostringstream os;
  os << std::setprecision(8) << r.step << ',' << r.loss_denoise << ',' << r.loss_guidance << ','
     << r.loss_align << ',' << r.lambda << ',' << r.lr;
  return os.str();
}

}  // namespace t2ldm::training
