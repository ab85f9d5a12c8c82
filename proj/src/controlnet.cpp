#include "t2ldm/controlnet.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace t2ldm::controlnet {

network::Conv make_zero_projection(int channels) {
  network::Rng unused(0);
  return network::Conv(channels, channels, 1, unused, true);
}

Tensor zero_project(const Tensor& x, const network::Conv& proj) { return proj(x); }

void set_identity(network::Conv& proj) {
  const int c = proj.w.dim(0);
  if (proj.w.dim(1) != c || proj.w.dim(2) != 1 || proj.w.dim(3) != 1) {
    throw std::invalid_argument("set_identity: projection must be square 1x1");
  }
  auto& w = proj.w.values();
  std::fill(w.begin(), w.end(), Scalar(0));
  for (int i = 0; i < c; ++i) w[static_cast<std::size_t>(i) * c + i] = Scalar(1);
  std::fill(proj.b.values().begin(), proj.b.values().end(), Scalar(0));
}

ControlState::ControlState(network::DenoiseNet& dn, const ControlConfig& cfg) : dn_(dn), cfg_(cfg) {
  if (cfg.condition_channels < 1) {
    throw std::invalid_argument("ControlState: condition_channels must be >= 1");
  }
  const auto& nc = dn.config();
  network::Rng rng(cfg.seed);
  cond_stem = network::Conv(cfg.condition_channels, nc.base_channels, 3, rng);
  if (cfg.feed_xt) {
    xt_stem = network::Conv(nc.in_channels, nc.base_channels, 3, rng);
    xt_stem.w.values() = dn.conv_in.w.values();
    xt_stem.b.values() = dn.conv_in.b.values();
  }
  encoder = network::Encoder(nc, true, false, rng);
  network::ParamList src, dst;
  dn.encoder.collect(src, "encoder");
  encoder.collect(dst, "encoder");
  network::copy_parameters(src, dst);
  for (int s = 0; s < nc.stages(); ++s) zero.push_back(make_zero_projection(nc.channels(s)));
  zero.push_back(make_zero_projection(nc.channels(nc.stages() - 1)));
}

Tensor ControlState::controlled_forward(const Tensor& x_t, const std::vector<int>& t,
                                        const Tensor& condition,
                                        const network::TextBatch* text) const {
  if (condition.rank() != 4 || x_t.rank() != 4 || condition.dim(0) != x_t.dim(0) ||
      condition.dim(1) != cfg_.condition_channels || condition.dim(2) != x_t.dim(2) ||
      condition.dim(3) != x_t.dim(3)) {
    throw std::invalid_argument("controlled_forward: condition " + nn::shape_str(condition.shape()) +
                                " does not match x_t " + nn::shape_str(x_t.shape()) + " with " +
                                std::to_string(cfg_.condition_channels) + " channels");
  }
  const auto& nc = dn_.config();
  const Tensor temb = dn_.time_features(t);
  auto enc = dn_.encode(dn_.stem(x_t), temb, text);
  Tensor h = cond_stem(condition);
  if (cfg_.feed_xt) h = nn::add(h, xt_stem(x_t));
  const auto ctl = encoder(nc, h, temb, text, nullptr, dn_.dpe());
  for (std::size_t i = 0; i < enc.skips.size(); ++i) {
    enc.skips[i] = nn::add(enc.skips[i], zero_project(nn::add(ctl.skips[i], enc.skips[i]), zero[i]));
  }
  enc.middle =
      nn::add(enc.middle, zero_project(nn::add(ctl.middle, enc.middle), zero[enc.skips.size()]));
  return dn_.decode(enc, temb, text);
}

network::ParamList ControlState::parameters() {
  network::ParamList p;
  cond_stem.collect(p, "cond_stem");
  if (cfg_.feed_xt) xt_stem.collect(p, "xt_stem");
  encoder.collect(p, "encoder");
  for (std::size_t i = 0; i < zero.size(); ++i) zero[i].collect(p, "zero" + std::to_string(i));
  return p;
}

// ---------------------------------------------------------------------------

std::vector<std::size_t> farthest_point_sample(const rangemap::PointCloud& cloud, std::size_t keep) {
  const std::size_t n = cloud.size();
  if (n == 0) throw std::invalid_argument("farthest_point_sample: empty cloud");
  if (keep < 1 || keep > n) {
    throw std::invalid_argument("farthest_point_sample: keep must lie in [1, " + std::to_string(n) + "]");
  }
  const auto& p = cloud.points;
  auto sq = [&](std::size_t a, std::size_t b) {
    const double dx = p[a].x - p[b].x, dy = p[a].y - p[b].y, dz = p[a].z - p[b].z;
    return dx * dx + dy * dy + dz * dz;
  };
  std::size_t first = 0;
  double best = -1;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = static_cast<double>(p[i].x) * p[i].x + static_cast<double>(p[i].y) * p[i].y +
                     static_cast<double>(p[i].z) * p[i].z;
    if (r > best) {
      best = r;
      first = i;
    }
  }
  std::vector<std::size_t> out{first};
  std::vector<double> dist(n, std::numeric_limits<double>::infinity());
  std::size_t last = first;
  while (out.size() < keep) {
    std::size_t arg = 0;
    double far = -1;
    for (std::size_t i = 0; i < n; ++i) {
      dist[i] = std::min(dist[i], sq(i, last));
      if (dist[i] > far) {
        far = dist[i];
        arg = i;
      }
    }
    out.push_back(arg);
    last = arg;
  }
  return out;
}

rangemap::PointCloud downsample_fps(const rangemap::PointCloud& cloud, int rate) {
  if (rate < 1) throw std::invalid_argument("downsample_fps: rate must be >= 1");
  if (cloud.empty()) throw std::invalid_argument("downsample_fps: empty cloud");
  if (rate == 1) return cloud;
  const std::size_t keep = (cloud.size() + static_cast<std::size_t>(rate) - 1) / rate;
  rangemap::PointCloud out;
  for (std::size_t i : farthest_point_sample(cloud, keep)) {
    out.points.push_back(cloud.points[i]);
    if (cloud.has_labels()) out.labels.push_back(cloud.labels[i]);
  }
  return out;
}

ConditionImage make_sparse_condition(const rangemap::PointCloud& cloud, int rate,
                                     const rangemap::SensorConfig& config) {
  const auto img = rangemap::project(downsample_fps(cloud, rate), config);
  ConditionImage c;
  c.config = config;
  c.channels = 2;
  c.values = rangemap::normalize(img).values;
  c.valid = img.valid;
  return c;
}

ConditionImage make_semantic_condition(const rangemap::PointCloud& cloud, int class_count,
                                       const rangemap::SensorConfig& config) {
  if (class_count < 1) throw std::invalid_argument("make_semantic_condition: class_count must be >= 1");
  if (!cloud.empty() && cloud.labels.size() != cloud.size()) {
    throw std::invalid_argument("make_semantic_condition: cloud needs one label per point");
  }
  for (int l : cloud.labels) {
    if (l < 0 || l >= class_count) {
      throw std::invalid_argument("make_semantic_condition: label " + std::to_string(l) +
                                  " outside [0, " + std::to_string(class_count) + ")");
    }
  }
  ConditionImage c;
  c.config = config;
  c.channels = 1;
  const std::size_t plane = static_cast<std::size_t>(config.height) * config.width;
  c.values.assign(plane, 0.f);
  c.valid.assign(plane, 0);
  if (cloud.empty()) return c;
  const auto pr = rangemap::project_indexed(cloud, config);
  for (std::size_t i = 0; i < plane; ++i) {
    const int src = pr.source_index[i];
    if (src < 0) continue;
    c.values[i] = static_cast<float>(cloud.labels[static_cast<std::size_t>(src)]) /
                  static_cast<float>(class_count);
    c.valid[i] = 1;
  }
  return c;
}

Tensor condition_tensor(const std::vector<ConditionImage>& conds) {
  if (conds.empty()) throw std::invalid_argument("condition_tensor: no conditions");
  const auto& c0 = conds.front();
  std::vector<Scalar> v;
  for (const auto& c : conds) {
    if (c.channels != c0.channels || c.config.height != c0.config.height ||
        c.config.width != c0.config.width) {
      throw std::invalid_argument("condition_tensor: conditions differ in shape");
    }
    v.insert(v.end(), c.values.begin(), c.values.end());
  }
  return Tensor::from({static_cast<int>(conds.size()), c0.channels, c0.config.height, c0.config.width},
                      std::move(v));
}

// ---------------------------------------------------------------------------

ControlTrainer::ControlTrainer(network::DenoiseNet& dn, const ControlConfig& ccfg,
                               const training::TrainConfig& tcfg)
    : state_(dn, ccfg),
      tcfg_(tcfg),
      sched_(schedule::cosine_schedule((tcfg.validate(), tcfg.diffusion_steps))),
      opt_(tcfg.adam_beta1, tcfg.adam_beta2, tcfg.adam_eps, tcfg.weight_decay),
      rng_(tcfg.seed) {
  network::set_requires_grad(dn.parameters(), false);
}

double ControlTrainer::train_step(const std::vector<ControlExample>& batch) {
  if (batch.empty()) throw std::invalid_argument("ControlTrainer: empty batch");
  const auto& sensor = batch.front().condition.config;
  const int n = static_cast<int>(batch.size()), h = sensor.height, w = sensor.width;
  const std::size_t per = 2ULL * h * w;
  std::vector<ConditionImage> conds;
  std::vector<Scalar> x0;
  for (const auto& e : batch) {
    if (e.x0.size() != per) throw std::invalid_argument("ControlTrainer: target size mismatch");
    x0.insert(x0.end(), e.x0.begin(), e.x0.end());
    conds.push_back(e.condition);
  }
  std::uniform_int_distribution<int> td(1, sched_.steps());
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<int> t(static_cast<std::size_t>(n));
  std::vector<Scalar> xt(x0.size()), v(x0.size()), weight(static_cast<std::size_t>(n));
  for (auto& ti : t) ti = td(rng_);
  for (int i = 0; i < n; ++i) {
    const double ab = sched_.alpha_bar(t[i]);
    const double sa = std::sqrt(ab), sg = std::sqrt(1.0 - ab);
    for (std::size_t j = i * per; j < (i + 1) * per; ++j) {
      const double e = nd(rng_);
      xt[j] = static_cast<Scalar>(sa * x0[j] + sg * e);
      v[j] = static_cast<Scalar>(sa * e - sg * x0[j]);
    }
    weight[i] = static_cast<Scalar>(schedule::min_snr_weight(t[i], sched_, tcfg_.snr_gamma));
  }
  const auto params = state_.parameters();
  network::zero_grads(params);
  const Tensor vh = state_.controlled_forward(Tensor::from({n, 2, h, w}, xt), t,
                                              condition_tensor(conds));
  Tensor loss = training::loss_denoise(vh, v, weight, tcfg_.huber_delta);
  const double value = loss.item();
  if (!std::isfinite(value)) {
    throw std::runtime_error("non-finite control loss at step " + std::to_string(step_));
  }
  loss.backward();
  training::clip_grads(params, tcfg_.grad_clip);
  opt_.step(params, training::lr_at(step_, tcfg_));
  ++step_;
  return value;
}

network::Checkpoint ControlTrainer::checkpoint() {
  network::Checkpoint c;
  c.config = {{"unet", network::to_json(state_.dn().config())},
              {"train", training::to_json(tcfg_)},
              {"control",
               {{"condition_channels", state_.config().condition_channels},
                {"feed_xt", state_.config().feed_xt}}}};
  c.step = step_;
  c.put_all("control.", state_.parameters());
  return c;
}

schedule::VModel control_model(const ControlState& state, const Tensor& condition,
                               const schedule::SampleShape& shape) {
  if (condition.dim(0) != shape.batch) {
    throw std::invalid_argument("control_model: condition batch does not match the sample batch");
  }
  return [&state, condition, shape](const std::vector<float>& x, int t, bool) {
    nn::NoGradGuard guard;
    const Tensor xt = Tensor::from({shape.batch, shape.channels, shape.height, shape.width},
                                   std::vector<Scalar>(x.begin(), x.end()));
    const Tensor v = state.controlled_forward(xt, std::vector<int>(shape.batch, t), condition);
    return std::vector<float>(v.values().begin(), v.values().end());
  };
}

}  // namespace t2ldm::controlnet
