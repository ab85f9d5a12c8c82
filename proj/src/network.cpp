#include "t2ldm/network.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "t2ldm/dpe.hpp"

namespace t2ldm::network {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes little-endian");

namespace {

Tensor uniform_param(const Shape& shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<Scalar> v(nn::numel_of(shape));
  for (auto& x : v) x = static_cast<Scalar>(dist(rng));
  return Tensor::from(shape, std::move(v), true);
}

Tensor to_seq(const Tensor& x) {
  return nn::reshape(x, {x.dim(0), x.dim(1), x.dim(2) * x.dim(3)});
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

std::pair<int, int> UNetConfig::total_stride() const {
  int r = 1, c = 1;
  for (const auto& [sh, sw] : strides) {
    r *= sh;
    c *= sw;
  }
  return {r, c};
}

void UNetConfig::validate() const {
  const auto s = channel_mult.size();
  if (s == 0) throw std::invalid_argument("UNetConfig: no stages");
  if (attention.size() != s || heads.size() != s || strides.size() + 1 != s) {
    throw std::invalid_argument("UNetConfig: per-stage lists disagree in length");
  }
  if (base_channels < 1 || in_channels < 1 || out_channels < 1) {
    throw std::invalid_argument("UNetConfig: channel counts must be positive");
  }
  for (std::size_t i = 0; i < s; ++i) {
    if (channel_mult[i] < 1) throw std::invalid_argument("UNetConfig: bad channel multiplier");
    if (heads[i] < 1 || channels(static_cast<int>(i)) % heads[i] != 0) {
      throw std::invalid_argument("UNetConfig: stage " + std::to_string(i) +
                                  " channels not divisible by heads");
    }
  }
  for (const auto& [sh, sw] : strides) {
    if (sh < 1 || sw < 1) throw std::invalid_argument("UNetConfig: strides must be >= 1");
  }
  if (time_sinusoid_dim < 2 || time_sinusoid_dim % 2 != 0) {
    throw std::invalid_argument("UNetConfig: time sinusoid width must be even");
  }
  if (dpe && dpe_terms < 1) throw std::invalid_argument("UNetConfig: dpe_terms must be >= 1");
  if (norm_groups < 1) throw std::invalid_argument("UNetConfig: norm_groups must be >= 1");
  sensor.validate();
}

UNetConfig UNetConfig::desk() {
  UNetConfig c;
  c.base_channels = 16;
  c.heads = {2, 2, 4, 4};
  c.norm_groups = 8;
  c.sensor.height = 8;
  c.sensor.width = 128;
  return c;
}

nlohmann::json to_json(const UNetConfig& c) {
  nlohmann::json strides = nlohmann::json::array();
  for (const auto& [a, b] : c.strides) strides.push_back({a, b});
  nlohmann::json att = nlohmann::json::array();
  for (auto k : c.attention) att.push_back(k == AttentionKind::linear ? "linear" : "vanilla");
  return {{"in_channels", c.in_channels},
          {"out_channels", c.out_channels},
          {"base_channels", c.base_channels},
          {"channel_mult", c.channel_mult},
          {"strides", strides},
          {"attention", att},
          {"heads", c.heads},
          {"norm_groups", c.norm_groups},
          {"time_sinusoid_dim", c.time_sinusoid_dim},
          {"temb_dim", c.temb_dim},
          {"dpe", c.dpe},
          {"dpe_terms", c.dpe_terms},
          {"rope", c.rope},
          {"text_dim", c.text_dim},
          {"sensor",
           {{"height", c.sensor.height},
            {"width", c.sensor.width},
            {"fov_up", c.sensor.fov_up},
            {"fov_down", c.sensor.fov_down},
            {"depth_min", c.sensor.depth_min},
            {"depth_max", c.sensor.depth_max}}}};
}

UNetConfig unet_config_from_json(const nlohmann::json& j) {
  UNetConfig c;
  c.in_channels = j.at("in_channels").get<int>();
  c.out_channels = j.at("out_channels").get<int>();
  c.base_channels = j.at("base_channels").get<int>();
  c.channel_mult = j.at("channel_mult").get<std::vector<int>>();
  c.strides.clear();
  for (const auto& s : j.at("strides")) c.strides.emplace_back(s.at(0).get<int>(), s.at(1).get<int>());
  c.attention.clear();
  for (const auto& a : j.at("attention")) {
    const auto s = a.get<std::string>();
    if (s == "linear") {
      c.attention.push_back(AttentionKind::linear);
    } else if (s == "vanilla") {
      c.attention.push_back(AttentionKind::vanilla);
    } else {
      throw std::invalid_argument("unknown attention kind '" + s + "'");
    }
  }
  c.heads = j.at("heads").get<std::vector<int>>();
  c.norm_groups = j.at("norm_groups").get<int>();
  c.time_sinusoid_dim = j.at("time_sinusoid_dim").get<int>();
  c.temb_dim = j.at("temb_dim").get<int>();
  c.dpe = j.at("dpe").get<bool>();
  c.dpe_terms = j.at("dpe_terms").get<int>();
  c.rope = j.at("rope").get<bool>();
  c.text_dim = j.at("text_dim").get<int>();
  const auto& s = j.at("sensor");
  c.sensor.height = s.at("height").get<int>();
  c.sensor.width = s.at("width").get<int>();
  c.sensor.fov_up = s.at("fov_up").get<double>();
  c.sensor.fov_down = s.at("fov_down").get<double>();
  c.sensor.depth_min = s.at("depth_min").get<double>();
  c.sensor.depth_max = s.at("depth_max").get<double>();
  c.validate();
  return c;
}

std::vector<Scalar> time_embedding(double t, int dim) {
  if (dim < 2 || dim % 2 != 0) throw std::invalid_argument("time_embedding: dim must be even");
  const int half = dim / 2;
  std::vector<Scalar> e(static_cast<std::size_t>(dim));
  for (int i = 0; i < half; ++i) {
    const double f = std::pow(10000.0, -static_cast<double>(i) / half);
    e[2 * i] = static_cast<Scalar>(std::sin(t * f));
    e[2 * i + 1] = static_cast<Scalar>(std::cos(t * f));
  }
  return e;
}

TextBatch make_text_batch(const std::vector<textenc::TextEmbedding>& rows) {
  if (rows.empty()) throw std::invalid_argument("make_text_batch: empty batch");
  int nmax = 0;
  for (const auto& r : rows) {
    if (r.tokens < 1) throw std::invalid_argument("make_text_batch: embedding without tokens");
    nmax = std::max(nmax, r.tokens);
  }
  const int n = static_cast<int>(rows.size());
  const std::size_t stride = static_cast<std::size_t>(nmax) * textenc::kTextWidth;
  std::vector<Scalar> v(static_cast<std::size_t>(n) * stride, Scalar(0));
  TextBatch b;
  for (int i = 0; i < n; ++i) {
    std::copy(rows[i].values.begin(), rows[i].values.end(), v.begin() + static_cast<std::ptrdiff_t>(i * stride));
    b.lengths.push_back(rows[i].tokens);
  }
  b.tokens = Tensor::from({n, nmax, textenc::kTextWidth}, std::move(v));
  return b;
}

// ---------------------------------------------------------------------------
// Layers

Conv::Conv(int cin, int cout, int k, Rng& rng, bool zero) {
  const double bound = zero ? 0.0 : 1.0 / std::sqrt(static_cast<double>(cin * k * k));
  w = zero ? Tensor::zeros({cout, cin, k, k}, true) : uniform_param({cout, cin, k, k}, bound, rng);
  b = Tensor::zeros({cout}, true);
}

Tensor Conv::operator()(const Tensor& x) const { return nn::circular_conv2d(x, w, b, sh, sw); }

void Conv::collect(ParamList& out, const std::string& prefix) {
  out.emplace_back(prefix + ".w", &w);
  out.emplace_back(prefix + ".b", &b);
}

Linear::Linear(int in, int out, Rng& rng, bool zero) {
  w = zero ? Tensor::zeros({out, in}, true)
           : uniform_param({out, in}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  b = Tensor::zeros({out}, true);
}

Tensor Linear::operator()(const Tensor& x) const { return nn::linear(x, w, b); }

void Linear::collect(ParamList& out, const std::string& prefix) {
  out.emplace_back(prefix + ".w", &w);
  out.emplace_back(prefix + ".b", &b);
}

Norm::Norm(int channels, int max_groups)
    : gamma(Tensor::full({channels}, Scalar(1), true)),
      beta(Tensor::zeros({channels}, true)),
      groups(std::gcd(channels, max_groups)) {}

Tensor Norm::operator()(const Tensor& x) const { return nn::group_norm(x, groups, gamma, beta); }

void Norm::collect(ParamList& out, const std::string& prefix) {
  out.emplace_back(prefix + ".gamma", &gamma);
  out.emplace_back(prefix + ".beta", &beta);
}

ResBlock::ResBlock(int cin, int cout, int temb_dim, int dpe_channels, int groups, Rng& rng)
    : n1(cin, groups), n2(cout, groups), c1(cin, cout, 3, rng), c2(cout, cout, 3, rng, true) {
  if (temb_dim > 0) {
    has_temb = true;
    temb_proj = Linear(temb_dim, cout, rng);
  }
  if (dpe_channels > 0) {
    has_dpe = true;
    dpe_proj = Conv(dpe_channels, cout, 1, rng);
    dpe_gate = Tensor::zeros({1}, true);
  }
  if (cin != cout) {
    has_skip = true;
    skip = Conv(cin, cout, 1, rng);
  }
}

Tensor ResBlock::operator()(const Tensor& x, const Tensor& temb, const Tensor& dpe) const {
  Tensor h = c1(nn::silu(n1(x)));
  if (has_temb && temb) h = nn::add_channel_bias(h, temb_proj(nn::silu(temb)));
  if (has_dpe && dpe) h = nn::add_batch_broadcast(h, nn::mul_scalar(dpe_proj(dpe), dpe_gate));
  h = c2(nn::silu(n2(h)));
  return nn::add(has_skip ? skip(x) : x, h);
}

void ResBlock::collect(ParamList& out, const std::string& prefix) {
  n1.collect(out, prefix + ".n1");
  c1.collect(out, prefix + ".c1");
  if (has_temb) temb_proj.collect(out, prefix + ".temb");
  if (has_dpe) {
    dpe_proj.collect(out, prefix + ".dpe");
    out.emplace_back(prefix + ".dpe_gate", &dpe_gate);
  }
  n2.collect(out, prefix + ".n2");
  c2.collect(out, prefix + ".c2");
  if (has_skip) skip.collect(out, prefix + ".skip");
}

AttnBlock::AttnBlock(int channels, int heads_, AttentionKind kind_, bool text_capable_,
                     int feature_channels_, bool rope_, int groups, Rng& rng, int text_dim)
    : kind(kind_),
      heads(heads_),
      rope(rope_),
      norm(channels, groups),
      q(channels, channels, 1, rng),
      k(channels, channels, 1, rng),
      v(channels, channels, 1, rng),
      out(channels, channels, 1, rng),
      ff1(channels, 2 * channels, 1, rng),
      ff2(2 * channels, channels, 1, rng),
      text_capable(text_capable_),
      feature_channels(feature_channels_) {
  if (text_capable) {
    k_text = Linear(text_dim, channels, rng);
    v_text = Linear(text_dim, channels, rng);
  }
  if (feature_channels > 0) {
    ctx_norm = Norm(feature_channels, groups);
    k_feat = Conv(feature_channels, channels, 1, rng);
    v_feat = Conv(feature_channels, channels, 1, rng);
  }
}

Tensor AttnBlock::operator()(const Tensor& x, const AttnContext& ctx) const {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Tensor xn = norm(x);
  Tensor qs = to_seq(q(xn));
  Tensor ks, vs;
  std::vector<int> lengths;
  bool self = false;
  if (text_capable && ctx.text) {
    const Tensor& tok = ctx.text->tokens;
    if (tok.dim(0) != n) throw std::invalid_argument("AttnBlock: text batch size mismatch");
    const int nt = tok.dim(1);
    const Tensor flat = nn::reshape(tok, {n * nt, tok.dim(2)});
    ks = nn::transpose_last2(nn::reshape(k_text(flat), {n, nt, c}));
    vs = nn::transpose_last2(nn::reshape(v_text(flat), {n, nt, c}));
    lengths = ctx.text->lengths;
  } else if (feature_channels > 0 && ctx.feature) {
    const Tensor& f = *ctx.feature;
    if (f.rank() != 4 || f.dim(0) != n || f.dim(1) != feature_channels) {
      throw std::invalid_argument("AttnBlock: context feature " + nn::shape_str(f.shape()) +
                                  " does not match block");
    }
    const Tensor fn = ctx_norm(f);
    ks = to_seq(k_feat(fn));
    vs = to_seq(v_feat(fn));
  } else {
    ks = to_seq(k(xn));
    vs = to_seq(v(xn));
    self = true;
  }
  Tensor a;
  if (kind == AttentionKind::linear) {
    a = nn::linear_attention(qs, ks, vs, heads);
  } else {
    if (rope && self) {
      qs = nn::rope(qs, heads, h, w);
      ks = nn::rope(ks, heads, h, w);
    }
    a = nn::softmax_attention(qs, ks, vs, heads, lengths,
                              record_weights ? &last_weights : nullptr);
  }
  const Tensor o = nn::add(x, out(nn::reshape(a, {n, c, h, w})));
  return nn::add(o, ff2(nn::silu(ff1(o))));
}

void AttnBlock::collect(ParamList& o, const std::string& prefix) {
  norm.collect(o, prefix + ".norm");
  q.collect(o, prefix + ".q");
  k.collect(o, prefix + ".k");
  v.collect(o, prefix + ".v");
  if (text_capable) {
    k_text.collect(o, prefix + ".k_text");
    v_text.collect(o, prefix + ".v_text");
  }
  if (feature_channels > 0) {
    ctx_norm.collect(o, prefix + ".ctx_norm");
    k_feat.collect(o, prefix + ".k_feat");
    v_feat.collect(o, prefix + ".v_feat");
  }
  out.collect(o, prefix + ".out");
  ff1.collect(o, prefix + ".ff1");
  ff2.collect(o, prefix + ".ff2");
}

// ---------------------------------------------------------------------------
// Encoder / decoder

Tensor DpeProvider::get(int height, int width) const {
  std::lock_guard<std::mutex> lock(mu_);
  auto it = cache_.find({height, width});
  if (it != cache_.end()) return it->second;
  const auto grid = dpe::dpe_features(dpe::pixel_angle_grid(sensor_.resized(height, width)), terms_);
  std::vector<Scalar> v(grid.values.begin(), grid.values.end());
  Tensor t = Tensor::from({1, grid.channels, height, width}, std::move(v));
  cache_.emplace(std::make_pair(height, width), t);
  return t;
}

namespace {

Tensor dpe_for(const DpeProvider* dpe, const Tensor& h) {
  return dpe ? dpe->get(h.dim(2), h.dim(3)) : Tensor();
}

}  // namespace

Encoder::Encoder(const UNetConfig& cfg, bool temb, bool fusion, Rng& rng) {
  const int tw = temb ? cfg.time_width() : 0;
  const int dc = cfg.dpe ? 4 * cfg.dpe_terms : 0;
  int cin = cfg.base_channels;
  for (int s = 0; s < cfg.stages(); ++s) {
    const int cout = cfg.channels(s);
    const auto kind = cfg.attention[static_cast<std::size_t>(s)];
    rb.emplace_back(cin, cout, tw, dc, cfg.norm_groups, rng);
    ab.emplace_back(cout, cfg.heads[static_cast<std::size_t>(s)], kind,
                    !fusion && kind == AttentionKind::vanilla, fusion ? cout : 0,
                    cfg.rope && kind == AttentionKind::vanilla, cfg.norm_groups, rng, cfg.text_dim);
    cin = cout;
  }
  mid1 = ResBlock(cin, cin, tw, dc, cfg.norm_groups, rng);
  mid_ab = AttnBlock(cin, cfg.heads.back(), AttentionKind::vanilla, !fusion, fusion ? cin : 0,
                     cfg.rope, cfg.norm_groups, rng, cfg.text_dim);
  mid2 = ResBlock(cin, cin, tw, dc, cfg.norm_groups, rng);
}

Encoder::Output Encoder::operator()(const UNetConfig& cfg, const Tensor& stem, const Tensor& temb,
                                    const TextBatch* text, const FeaturePyramid* fusion,
                                    const DpeProvider* dpe) const {
  const int stages = cfg.stages();
  if (fusion && fusion->size() != static_cast<std::size_t>(stages) + 1) {
    throw std::invalid_argument("Encoder: fusion pyramid has " + std::to_string(fusion->size()) +
                                " entries, expected " + std::to_string(stages + 1));
  }
  auto check_scale = [&](const Tensor& h, std::size_t i) {
    if (fusion && (*fusion)[i].shape() != h.shape()) {
      throw std::invalid_argument("Encoder: pyramid scale mismatch at entry " + std::to_string(i) +
                                  ": " + nn::shape_str((*fusion)[i].shape()) + " vs " +
                                  nn::shape_str(h.shape()));
    }
  };
  Output out;
  Tensor h = stem;
  for (int s = 0; s < stages; ++s) {
    const auto si = static_cast<std::size_t>(s);
    h = rb[si](h, temb, dpe_for(dpe, h));
    check_scale(h, si);
    h = ab[si](h, {text, fusion ? &(*fusion)[si] : nullptr});
    out.skips.push_back(h);
    if (s + 1 < stages) h = nn::avg_pool(h, cfg.strides[si].first, cfg.strides[si].second);
  }
  h = mid1(h, temb, dpe_for(dpe, h));
  check_scale(h, static_cast<std::size_t>(stages));
  h = mid_ab(h, {text, fusion ? &(*fusion)[static_cast<std::size_t>(stages)] : nullptr});
  out.middle = mid2(h, temb, dpe_for(dpe, h));
  return out;
}

void Encoder::collect(ParamList& out, const std::string& prefix) {
  for (std::size_t s = 0; s < rb.size(); ++s) {
    rb[s].collect(out, prefix + ".enc" + std::to_string(s) + ".rb");
    ab[s].collect(out, prefix + ".enc" + std::to_string(s) + ".ab");
  }
  mid1.collect(out, prefix + ".mid.rb1");
  mid_ab.collect(out, prefix + ".mid.ab");
  mid2.collect(out, prefix + ".mid.rb2");
}

Decoder::Decoder(const UNetConfig& cfg, bool temb, Rng& rng) {
  const int tw = temb ? cfg.time_width() : 0;
  const int dc = cfg.dpe ? 4 * cfg.dpe_terms : 0;
  const int stages = cfg.stages();
  rb.resize(static_cast<std::size_t>(stages));
  ab.resize(static_cast<std::size_t>(stages));
  for (int s = stages - 1; s >= 0; --s) {
    const int below = s == stages - 1 ? cfg.channels(stages - 1) : cfg.channels(s + 1);
    const int cout = cfg.channels(s);
    const auto kind = cfg.attention[static_cast<std::size_t>(s)];
    rb[static_cast<std::size_t>(s)] = ResBlock(below + cout, cout, tw, dc, cfg.norm_groups, rng);
    ab[static_cast<std::size_t>(s)] =
        AttnBlock(cout, cfg.heads[static_cast<std::size_t>(s)], kind,
                  temb && kind == AttentionKind::vanilla, 0,
                  cfg.rope && kind == AttentionKind::vanilla, cfg.norm_groups, rng, cfg.text_dim);
  }
  out_norm = Norm(cfg.base_channels, cfg.norm_groups);
  out_conv = Conv(cfg.base_channels, cfg.out_channels, 3, rng, true);
}

Tensor Decoder::operator()(const UNetConfig& cfg, const Tensor& middle,
                           const std::vector<Tensor>& skips, const Tensor& temb,
                           const TextBatch* text, const DpeProvider* dpe) const {
  const int stages = cfg.stages();
  if (skips.size() != static_cast<std::size_t>(stages)) {
    throw std::invalid_argument("Decoder: wrong number of skips");
  }
  const Scalar skip_scale = static_cast<Scalar>(1.0 / std::sqrt(2.0));
  Tensor h = middle;
  for (int s = stages - 1; s >= 0; --s) {
    const auto si = static_cast<std::size_t>(s);
    h = nn::scale(nn::concat_channels(h, skips[si]), skip_scale);
    h = rb[si](h, temb, dpe_for(dpe, h));
    h = ab[si](h, {text, nullptr});
    if (s > 0) h = nn::upsample_bilinear(h, cfg.strides[si - 1].first, cfg.strides[si - 1].second);
  }
  return out_conv(nn::silu(out_norm(h)));
}

void Decoder::collect(ParamList& out, const std::string& prefix) {
  for (std::size_t s = rb.size(); s-- > 0;) {
    rb[s].collect(out, prefix + ".dec" + std::to_string(s) + ".rb");
    ab[s].collect(out, prefix + ".dec" + std::to_string(s) + ".ab");
  }
  out_norm.collect(out, prefix + ".out_norm");
  out_conv.collect(out, prefix + ".out_conv");
}

// ---------------------------------------------------------------------------
// Networks

DenoiseNet::DenoiseNet(const UNetConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  t1 = Linear(cfg_.time_sinusoid_dim, cfg_.time_width(), rng);
  t2 = Linear(cfg_.time_width(), cfg_.time_width(), rng);
  conv_in = Conv(cfg_.in_channels, cfg_.base_channels, 3, rng);
  encoder = Encoder(cfg_, true, false, rng);
  decoder = Decoder(cfg_, true, rng);
  if (cfg_.dpe) dpe_ = std::make_unique<DpeProvider>(cfg_.sensor, cfg_.dpe_terms);
}

void DenoiseNet::check_input(const Tensor& x, std::size_t n_t) const {
  const auto [sr, sc] = cfg_.total_stride();
  if (x.rank() != 4 || x.dim(1) != cfg_.in_channels || x.dim(2) % sr != 0 || x.dim(3) % sc != 0) {
    throw std::invalid_argument("DenoiseNet: input " + nn::shape_str(x.shape()) +
                                " incompatible with config");
  }
  if (n_t != static_cast<std::size_t>(x.dim(0))) {
    throw std::invalid_argument("DenoiseNet: one timestep per sample required");
  }
}

Tensor DenoiseNet::time_features(const std::vector<int>& t) const {
  const int d = cfg_.time_sinusoid_dim;
  std::vector<Scalar> e;
  e.reserve(t.size() * static_cast<std::size_t>(d));
  for (int ti : t) {
    const auto row = time_embedding(ti, d);
    e.insert(e.end(), row.begin(), row.end());
  }
  const Tensor emb = Tensor::from({static_cast<int>(t.size()), d}, std::move(e));
  return t2(nn::silu(t1(emb)));
}

Encoder::Output DenoiseNet::encode(const Tensor& stem, const Tensor& temb,
                                   const TextBatch* text) const {
  return encoder(cfg_, stem, temb, text, nullptr, dpe());
}

Tensor DenoiseNet::decode(const Encoder::Output& enc, const Tensor& temb,
                          const TextBatch* text) const {
  return decoder(cfg_, enc.middle, enc.skips, temb, text, dpe());
}

DnOutput DenoiseNet::forward(const Tensor& x_t, const std::vector<int>& t,
                             const TextBatch* text) const {
  check_input(x_t, t.size());
  const Tensor temb = time_features(t);
  const auto enc = encode(conv_in(x_t), temb, text);
  DnOutput out;
  out.v = decode(enc, temb, text);
  out.pyramid = enc.skips;
  out.pyramid.push_back(enc.middle);
  return out;
}

ParamList DenoiseNet::parameters() {
  ParamList p;
  t1.collect(p, "time.l1");
  t2.collect(p, "time.l2");
  conv_in.collect(p, "conv_in");
  encoder.collect(p, "encoder");
  decoder.collect(p, "decoder");
  return p;
}

GuidanceNet::GuidanceNet(const UNetConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  conv_in = Conv(cfg_.in_channels, cfg_.base_channels, 3, rng);
  encoder = Encoder(cfg_, false, true, rng);
  decoder = Decoder(cfg_, false, rng);
  if (cfg_.dpe) dpe_ = std::make_unique<DpeProvider>(cfg_.sensor, cfg_.dpe_terms);
}

GnOutput GuidanceNet::forward(const Tensor& x0, const FeaturePyramid& dn_pyramid) const {
  const DpeProvider* d = cfg_.dpe ? dpe_.get() : nullptr;
  const auto enc = encoder(cfg_, conv_in(x0), Tensor(), nullptr, &dn_pyramid, d);
  GnOutput out;
  out.x0_recon = decoder(cfg_, enc.middle, enc.skips, Tensor(), nullptr, d);
  out.pyramid = enc.skips;
  out.pyramid.push_back(enc.middle);
  return out;
}

ParamList GuidanceNet::parameters() {
  ParamList p;
  conv_in.collect(p, "conv_in");
  encoder.collect(p, "encoder");
  decoder.collect(p, "decoder");
  return p;
}

std::vector<std::array<int, 3>> pyramid_shapes(const UNetConfig& cfg, int height, int width) {
  std::vector<std::array<int, 3>> out;
  int h = height, w = width;
  for (int s = 0; s < cfg.stages(); ++s) {
    out.push_back({cfg.channels(s), h, w});
    if (s + 1 < cfg.stages()) {
      h /= cfg.strides[static_cast<std::size_t>(s)].first;
      w /= cfg.strides[static_cast<std::size_t>(s)].second;
    }
  }
  out.push_back({cfg.channels(cfg.stages() - 1), h, w});
  return out;
}

// ---------------------------------------------------------------------------
// Parameter utilities

std::size_t parameter_count(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& [name, t] : params) n += t->numel();
  return n;
}

void perturb_parameters(const ParamList& params, double stddev, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> dist(0.0, stddev);
  for (const auto& [name, t] : params) {
    for (auto& v : t->values()) v += static_cast<Scalar>(dist(rng));
  }
}

void zero_grads(const ParamList& params) {
  for (const auto& [name, t] : params) t->zero_grad();
}

void set_requires_grad(const ParamList& params, bool value) {
  for (const auto& [name, t] : params) {
    t->node()->requires_grad = value;
    if (!value) t->zero_grad();
  }
}

std::uint64_t parameter_hash(const ParamList& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, t] : params) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(t->data());
    for (std::size_t i = 0; i < t->numel() * sizeof(Scalar); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

void copy_parameters(const ParamList& from, const ParamList& to) {
  if (from.size() != to.size()) throw std::invalid_argument("copy_parameters: list size mismatch");
  for (std::size_t i = 0; i < from.size(); ++i) {
    if (from[i].second->shape() != to[i].second->shape()) {
      throw std::invalid_argument("copy_parameters: shape mismatch at " + from[i].first);
    }
    to[i].second->values() = from[i].second->values();
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

void Checkpoint::put(const std::string& name, const Tensor& t) {
  tensors[name] = {t.shape(), std::vector<float>(t.values().begin(), t.values().end())};
}

void Checkpoint::put_all(const std::string& ns, const ParamList& params) {
  for (const auto& [name, t] : params) put(ns + name, *t);
}

void Checkpoint::load_into(const std::string& ns, const ParamList& params) const {
  for (const auto& [name, t] : params) {
    auto it = tensors.find(ns + name);
    if (it == tensors.end()) throw std::runtime_error("checkpoint lacks tensor " + ns + name);
    if (it->second.first != t->shape()) {
      throw std::runtime_error("checkpoint tensor " + ns + name + " has shape " +
                               nn::shape_str(it->second.first) + ", expected " +
                               nn::shape_str(t->shape()));
    }
    t->values().assign(it->second.second.begin(), it->second.second.end());
  }
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  nlohmann::json entries = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, st] : ckpt.tensors) {
    entries.push_back({{"name", name},
                       {"shape", st.first},
                       {"offset", offset},
                       {"count", st.second.size()}});
    offset += st.second.size() * sizeof(float);
  }
  const nlohmann::json manifest = {{"version", kCheckpointVersion},
                                   {"config", ckpt.config},
                                   {"step", ckpt.step},
                                   {"tensors", entries}};
  const std::string text = manifest.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  const std::uint64_t len = text.size();
  os.write(reinterpret_cast<const char*>(&len), sizeof(len));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, st] : ckpt.tensors) {
    os.write(reinterpret_cast<const char*>(st.second.data()),
             static_cast<std::streamsize>(st.second.size() * sizeof(float)));
  }
  if (!os) throw std::runtime_error("short write to " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::uint64_t len = 0;
  is.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!is || len > (1ULL << 30)) throw std::runtime_error("malformed checkpoint header");
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  if (!is) throw std::runtime_error("truncated checkpoint manifest");
  const auto manifest = nlohmann::json::parse(text);
  if (manifest.value("version", std::string{}) != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version");
  }
  Checkpoint c;
  c.config = manifest.at("config");
  c.step = manifest.value("step", std::int64_t{0});
  const auto payload_start = is.tellg();
  for (const auto& e : manifest.at("tensors")) {
    const auto count = e.at("count").get<std::size_t>();
    std::vector<float> v(count);
    is.seekg(payload_start + static_cast<std::streamoff>(e.at("offset").get<std::uint64_t>()));
    is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(count * sizeof(float)));
    if (!is) throw std::runtime_error("truncated checkpoint payload");
    const Shape shape = e.at("shape").get<Shape>();
    if (nn::numel_of(shape) != count) throw std::runtime_error("checkpoint shape/count mismatch");
    c.tensors[e.at("name").get<std::string>()] = {shape, std::move(v)};
  }
  return c;
}

}  // namespace t2ldm::network
