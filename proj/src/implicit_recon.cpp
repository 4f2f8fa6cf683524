#include "volcap/implicit_recon.hpp"

#include "volcap/marching_cubes.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <ostream>

namespace volcap {

std::string to_string(PsdfMode mode) {
  switch (mode) {
    case PsdfMode::truncated: return "truncated";
    case PsdfMode::untruncated: return "untruncated";
    case PsdfMode::none: return "none";
  }
  return "truncated";
}

PsdfMode parse_psdf_mode(const std::string& s) {
  if (s == "truncated") return PsdfMode::truncated;
  if (s == "untruncated") return PsdfMode::untruncated;
  if (s == "none") return PsdfMode::none;
  throw ConfigError("unknown psdf mode '" + s + "' (expected truncated, untruncated or none)");
}

std::string to_string(ColorAggregation mode) { return mode == ColorAggregation::attention ? "attention" : "mean"; }

ColorAggregation parse_color_aggregation(const std::string& s) {
  if (s == "attention") return ColorAggregation::attention;
  if (s == "mean") return ColorAggregation::mean;
  throw ConfigError("unknown color aggregation '" + s + "' (expected attention or mean)");
}

std::optional<double> truncated_psdf(const Vec3& q, const DepthFrame& depth, double delta_p, bool truncate) {
  const auto proj = project(q, depth.intrinsics, depth.pose);
  if (!proj) return std::nullopt;
  const auto d = sample_depth_bilinear(depth, proj->pixel);
  if (!d) return std::nullopt;
  const double raw = proj->depth - *d;
  return truncate ? std::clamp(raw, -delta_p, delta_p) : raw;
}

// ---------------------------------------------------------------------------
// Configuration

void ImplicitConfig::validate() const {
  if (!(delta_p > 0)) throw ConfigError("delta_p must be positive");
  if (!(depth_scale > 0)) throw ConfigError("depth_scale must be positive");
  if (encoder_channels.empty() || encoder_channels.size() != encoder_strides.size())
    throw ConfigError("encoder needs one stride per layer");
  if (color_encoder_channels.size() != encoder_strides.size())
    throw ConfigError("color encoder must have as many layers as the geometry encoder");
  for (int s : encoder_strides)
    if (s != 1 && s != 2) throw ConfigError("encoder strides must be 1 or 2");
  for (int c : encoder_channels)
    if (c <= 0) throw ConfigError("encoder channels must be positive");
  for (int c : color_encoder_channels)
    if (c <= 0) throw ConfigError("color encoder channels must be positive");
  if (hidden.empty()) throw ConfigError("decoder needs at least one hidden layer");
  for (int h : hidden)
    if (h <= 0) throw ConfigError("hidden widths must be positive");
  if (aggregation_layer < 1 || aggregation_layer > static_cast<int>(hidden.size()))
    throw ConfigError("aggregation layer must lie within the hidden layers");
  if (attention_heads <= 0 || attention_dim % attention_heads != 0)
    throw ConfigError("attention dimension must be divisible by the head count");
  if (attention_layers < 0 || score_hidden <= 0) throw ConfigError("invalid attention sizes");
}

int ImplicitConfig::stride() const {
  int s = 1;
  for (int v : encoder_strides) s *= v;
  return s;
}

int ImplicitConfig::geo_token_dim() const { return encoder_channels.back() + 2 + (depth_encoding ? 1 : 0); }

int ImplicitConfig::color_token_dim() const {
  return encoder_channels.back() + color_encoder_channels.back() + 3 + 2 + (depth_encoding ? 1 : 0);
}

nlohmann::json ImplicitConfig::to_json() const {
  return {{"delta_p", delta_p},
          {"psdf_mode", to_string(psdf_mode)},
          {"depth_encoding", depth_encoding},
          {"depth_reference", depth_reference},
          {"depth_scale", depth_scale},
          {"encoder_channels", encoder_channels},
          {"encoder_strides", encoder_strides},
          {"color_encoder_channels", color_encoder_channels},
          {"hidden", hidden},
          {"aggregation_layer", aggregation_layer},
          {"skip", skip},
          {"color_enabled", color_enabled},
          {"color_aggregation", to_string(color_aggregation)},
          {"attention_dim", attention_dim},
          {"attention_heads", attention_heads},
          {"attention_layers", attention_layers},
          {"score_hidden", score_hidden}};
}

ImplicitConfig ImplicitConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("implicit config must be an object");
  ImplicitConfig c;
  try {
    c.delta_p = j.value("delta_p", c.delta_p);
    c.psdf_mode = parse_psdf_mode(j.value("psdf_mode", to_string(c.psdf_mode)));
    c.depth_encoding = j.value("depth_encoding", c.depth_encoding);
    c.depth_reference = j.value("depth_reference", c.depth_reference);
    c.depth_scale = j.value("depth_scale", c.depth_scale);
    c.encoder_channels = j.value("encoder_channels", c.encoder_channels);
    c.encoder_strides = j.value("encoder_strides", c.encoder_strides);
    c.color_encoder_channels = j.value("color_encoder_channels", c.color_encoder_channels);
    c.hidden = j.value("hidden", c.hidden);
    c.aggregation_layer = j.value("aggregation_layer", c.aggregation_layer);
    c.skip = j.value("skip", c.skip);
    c.color_enabled = j.value("color_enabled", c.color_enabled);
    c.color_aggregation = parse_color_aggregation(j.value("color_aggregation", to_string(c.color_aggregation)));
    c.attention_dim = j.value("attention_dim", c.attention_dim);
    c.attention_heads = j.value("attention_heads", c.attention_heads);
    c.attention_layers = j.value("attention_layers", c.attention_layers);
    c.score_hidden = j.value("score_hidden", c.score_hidden);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("implicit config: ") + e.what());
  }
  c.validate();
  return c;
}

ImplicitConfig ImplicitConfig::toy() {
  ImplicitConfig c;
  c.encoder_channels = {8, 8, 8, 8};
  c.encoder_strides = {2, 1, 2, 1};
  c.color_encoder_channels = {8, 8, 8, 8};
  c.hidden = {32, 32, 32, 32};
  c.aggregation_layer = 2;
  c.attention_dim = 16;
  c.score_hidden = 16;
  return c;
}

// ---------------------------------------------------------------------------
// Model

ImplicitModel::ImplicitModel(const ImplicitConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  build();
  std::mt19937_64 rng(derive_seed(seed, "implicit/init"));
  geo_encoder_.init(rng);
  geo_trunk_.init(rng);
  geo_head_.init(rng);
  if (config_.color_enabled) {
    color_encoder_.init(rng);
    if (config_.color_aggregation == ColorAggregation::attention) color_attention_.init(rng);
    else color_trunk_.init(rng);
    color_head_.init(rng);
  }
}

void ImplicitModel::build() {
  const auto& h = config_.hidden;
  const auto a = static_cast<std::size_t>(config_.aggregation_layer);
  const std::vector<int> trunk_hidden(h.begin(), h.begin() + static_cast<std::ptrdiff_t>(a - 1));
  const std::vector<int> head_hidden(h.begin() + static_cast<std::ptrdiff_t>(a), h.end());
  const int agg = h[a - 1];
  geo_encoder_ = nn::ConvEncoder(2, config_.encoder_channels, config_.encoder_strides);
  geo_trunk_ = nn::Mlp(config_.geo_token_dim(), trunk_hidden, agg, config_.skip, true);
  geo_head_ = nn::Mlp(agg, head_hidden, 1, config_.skip, false);
  if (config_.color_enabled) {
    color_encoder_ = nn::ConvEncoder(5, config_.color_encoder_channels, config_.encoder_strides);
    if (config_.color_aggregation == ColorAggregation::attention) {
      color_attention_ = nn::AttentionAggregator(config_.color_token_dim(), config_.attention_dim,
                                                 config_.attention_heads, config_.attention_layers, config_.score_hidden);
      color_head_ = nn::Mlp(config_.attention_dim, head_hidden, 3, config_.skip, false);
    } else {
      color_trunk_ = nn::Mlp(config_.color_token_dim(), trunk_hidden, agg, config_.skip, true);
      color_head_ = nn::Mlp(agg, head_hidden, 3, config_.skip, false);
    }
  }
}

nn::ParamList ImplicitModel::geo_params() {
  nn::ParamList out;
  geo_encoder_.collect(out, "geo.encoder");
  geo_trunk_.collect(out, "geo.trunk");
  geo_head_.collect(out, "geo.head");
  return out;
}

nn::ParamList ImplicitModel::color_params() {
  nn::ParamList out;
  if (!config_.color_enabled) return out;
  color_encoder_.collect(out, "color.encoder");
  if (config_.color_aggregation == ColorAggregation::attention) color_attention_.collect(out, "color.attention");
  else color_trunk_.collect(out, "color.trunk");
  color_head_.collect(out, "color.head");
  return out;
}

nn::ParamList ImplicitModel::params() {
  nn::ParamList out = geo_params();
  nn::ParamList c = color_params();
  out.insert(out.end(), c.begin(), c.end());
  return out;
}

void ImplicitModel::save(const std::filesystem::path& path) {
  nn::save_params(path, params(), {{"kind", "volcap-implicit-model"}, {"config", config_.to_json()}});
}

ImplicitModel ImplicitModel::load(const std::filesystem::path& path) {
  const nlohmann::json meta = nn::read_weights_metadata(path);
  if (!meta.contains("config")) throw IoError(path.string() + ": weights carry no model config");
  ImplicitModel m(ImplicitConfig::from_json(meta.at("config")));
  nn::load_params(path, m.params());
  return m;
}

nn::Tensor3 ImplicitModel::geo_input(const DepthFrame& depth) const {
  const int w = depth.depth.width(), h = depth.depth.height();
  nn::Tensor3 t(h, w, 2);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!depth.valid(x, y)) continue;
      const Eigen::Index r = static_cast<Eigen::Index>(y) * w + x;
      t.data(r, 0) = (depth.depth(x, y) - config_.depth_reference) / config_.depth_scale;
      t.data(r, 1) = 1.0;
    }
  return t;
}

nn::Tensor3 ImplicitModel::color_input(const ColorFrame& color, const DepthFrame& depth) const {
  const int w = depth.depth.width(), h = depth.depth.height();
  if (color.color.width() != w || color.color.height() != h) throw ConfigError("color and depth resolutions differ");
  nn::Tensor3 t(h, w, 5);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const Eigen::Index r = static_cast<Eigen::Index>(y) * w + x;
      const Vec3f& c = color.color(x, y);
      t.data(r, 0) = c.x();
      t.data(r, 1) = c.y();
      t.data(r, 2) = c.z();
      if (!depth.valid(x, y)) continue;
      t.data(r, 3) = (depth.depth(x, y) - config_.depth_reference) / config_.depth_scale;
      t.data(r, 4) = 1.0;
    }
  return t;
}

std::vector<EncodedView> ImplicitModel::encode_views(std::span<const DepthFrame> depths,
                                                     std::span<const ColorFrame> colors) const {
  if (!colors.empty() && colors.size() != depths.size()) throw ConfigError("color and depth view counts differ");
  const int stride = config_.stride();
  std::vector<EncodedView> out(depths.size());
  for (std::size_t v = 0; v < depths.size(); ++v) {
    const DepthFrame& d = depths[v];
    if (d.depth.width() % stride != 0 || d.depth.height() % stride != 0)
      throw ConfigError("input resolution " + std::to_string(d.depth.width()) + "x" +
                        std::to_string(d.depth.height()) + " is not divisible by the encoder stride " +
                        std::to_string(stride));
    out[v].depth = d;
    out[v].geo_features = geo_encoder_.forward(geo_input(d));
    if (!colors.empty()) {
      out[v].color = colors[v];
      out[v].has_color = true;
      if (config_.color_enabled) out[v].color_features = color_encoder_.forward(color_input(colors[v], d));
    }
  }
  return out;
}

ImplicitModel::ViewTap ImplicitModel::make_tap(const Vec3& q, const EncodedView& view) const {
  ViewTap t;
  const DepthFrame& d = view.depth;
  const auto proj = project(q, d.intrinsics, d.pose);
  if (!proj) return t;
  const Vec2& px = proj->pixel;
  if (px.x() < 0 || px.y() < 0 || px.x() > d.depth.width() - 1 || px.y() > d.depth.height() - 1) return t;
  const auto depth = sample_depth_bilinear(d, px);
  if (!depth) return t;
  t.valid = true;
  const double raw = proj->depth - *depth;
  switch (config_.psdf_mode) {
    case PsdfMode::truncated: t.psdf = std::clamp(raw, -config_.delta_p, config_.delta_p) / config_.delta_p; break;
    case PsdfMode::untruncated: t.psdf = raw / config_.delta_p; break;
    case PsdfMode::none: t.psdf = 0; break;
  }
  t.z = (proj->depth - config_.depth_reference) / config_.depth_scale;
  t.tap = nn::bilinear_tap(view.geo_features, config_.stride(), px.x(), px.y());
  if (view.has_color) t.rgb = sample_color_bilinear(view.color, px);
  return t;
}

void ImplicitModel::geo_token(const ViewTap& t, const EncodedView& view, Eigen::Ref<nn::RowVec, 0, Eigen::InnerStride<>> row) const {
  row.setZero();
  if (!t.valid) return;
  const int c = view.geo_features.channels;
  row.head(c) = nn::sample(view.geo_features, t.tap);
  int k = c;
  row(k++) = t.psdf;
  if (config_.depth_encoding) row(k++) = t.z;
  row(k) = 1.0;
}

void ImplicitModel::color_token(const ViewTap& t, const EncodedView& view, Eigen::Ref<nn::RowVec, 0, Eigen::InnerStride<>> row) const {
  row.setZero();
  if (!t.valid) return;
  const int cg = view.geo_features.channels, cc = view.color_features.channels;
  row.head(cg) = nn::sample(view.geo_features, t.tap);
  row.segment(cg, cc) = nn::sample(view.color_features, t.tap);
  int k = cg + cc;
  row(k++) = t.rgb.x();
  row(k++) = t.rgb.y();
  row(k++) = t.rgb.z();
  row(k++) = t.psdf;
  if (config_.depth_encoding) row(k++) = t.z;
  row(k) = 1.0;
}

namespace {

constexpr int kQueryChunk = 256;

// Per point: canonical order of its view tokens and which of them take part
// in the mean (the valid ones, or all when none is valid).
struct PointViews {
  std::vector<int> order;
  std::vector<char> used;
  int count = 0;
};

PointViews arrange(const nn::Mat& tokens, Eigen::Index first_row, int views, int valid_col) {
  PointViews pv;
  const nn::Mat block = tokens.middleRows(first_row, views);
  pv.order = nn::canonical_row_order(block);
  pv.used.assign(static_cast<std::size_t>(views), 0);
  for (int r = 0; r < views; ++r)
    if (block(r, valid_col) > 0) {
      pv.used[static_cast<std::size_t>(r)] = 1;
      ++pv.count;
    }
  if (pv.count == 0) {
    std::fill(pv.used.begin(), pv.used.end(), 1);
    pv.count = views;
  }
  return pv;
}

// Rows of `tokens` reordered so each point's views appear in canonical order.
nn::Mat reorder_rows(const nn::Mat& tokens, const std::vector<PointViews>& pvs, int views) {
  nn::Mat out(tokens.rows(), tokens.cols());
  for (std::size_t p = 0; p < pvs.size(); ++p)
    for (int r = 0; r < views; ++r)
      out.row(static_cast<Eigen::Index>(p) * views + r) =
          tokens.row(static_cast<Eigen::Index>(p) * views + pvs[p].order[static_cast<std::size_t>(r)]);
  return out;
}

nn::Mat mean_rows(const nn::Mat& h, const std::vector<PointViews>& pvs, int views) {
  nn::Mat agg = nn::Mat::Zero(static_cast<Eigen::Index>(pvs.size()), h.cols());
  for (std::size_t p = 0; p < pvs.size(); ++p) {
    for (int r = 0; r < views; ++r) {
      const int src = pvs[p].order[static_cast<std::size_t>(r)];
      if (pvs[p].used[static_cast<std::size_t>(src)]) agg.row(static_cast<Eigen::Index>(p)) += h.row(static_cast<Eigen::Index>(p) * views + r);
    }
    agg.row(static_cast<Eigen::Index>(p)) /= pvs[p].count;
  }
  return agg;
}

// Gradient of mean_rows: returns dL/dh in the reordered row layout.
nn::Mat mean_rows_backward(const nn::Mat& dagg, const std::vector<PointViews>& pvs, int views) {
  nn::Mat dh = nn::Mat::Zero(dagg.rows() * views, dagg.cols());
  for (std::size_t p = 0; p < pvs.size(); ++p)
    for (int r = 0; r < views; ++r) {
      const int src = pvs[p].order[static_cast<std::size_t>(r)];
      if (pvs[p].used[static_cast<std::size_t>(src)])
        dh.row(static_cast<Eigen::Index>(p) * views + r) = dagg.row(static_cast<Eigen::Index>(p)) / pvs[p].count;
    }
  return dh;
}

}  // namespace

Eigen::VectorXd ImplicitModel::geo_logits(const std::vector<EncodedView>& views, std::span<const Vec3> points) const {
  if (views.empty()) throw ConfigError("geometry query needs at least one view");
  const int nv = static_cast<int>(views.size());
  const int dim = config_.geo_token_dim();
  const auto n = static_cast<Eigen::Index>(points.size());
  Eigen::VectorXd out(n);
  const Eigen::Index chunks = (n + kQueryChunk - 1) / kQueryChunk;
#pragma omp parallel for schedule(dynamic, 1) num_threads(thread_count())
  for (Eigen::Index ci = 0; ci < chunks; ++ci) {
    const Eigen::Index begin = ci * kQueryChunk, end = std::min(n, begin + kQueryChunk);
    const Eigen::Index m = end - begin;
    nn::Mat tokens(m * nv, dim);
    for (Eigen::Index p = 0; p < m; ++p)
      for (int v = 0; v < nv; ++v) {
        const ViewTap t = make_tap(points[static_cast<std::size_t>(begin + p)], views[static_cast<std::size_t>(v)]);
        geo_token(t, views[static_cast<std::size_t>(v)], tokens.row(p * nv + v));
      }
    std::vector<PointViews> pvs(static_cast<std::size_t>(m));
    for (Eigen::Index p = 0; p < m; ++p) pvs[static_cast<std::size_t>(p)] = arrange(tokens, p * nv, nv, dim - 1);
    const nn::Mat h = geo_trunk_.forward(reorder_rows(tokens, pvs, nv));
    const nn::Mat logits = geo_head_.forward(mean_rows(h, pvs, nv));
    out.segment(begin, m) = logits.col(0);
  }
  return out;
}

std::vector<double> ImplicitModel::geo_occupancy(const std::vector<EncodedView>& views,
                                                 std::span<const Vec3> points) const {
  const Eigen::VectorXd l = geo_logits(views, points);
  std::vector<double> out(static_cast<std::size_t>(l.size()));
  for (Eigen::Index i = 0; i < l.size(); ++i) out[static_cast<std::size_t>(i)] = nn::sigmoid(l(i));
  return out;
}

std::vector<Vec3f> ImplicitModel::color_query(const std::vector<EncodedView>& views, std::span<const Vec3> points) const {
  if (!config_.color_enabled) throw ConfigError("model has no color network");
  if (views.empty()) throw ConfigError("color query needs at least one view");
  for (const EncodedView& v : views)
    if (!v.has_color) throw ConfigError("color query needs color frames");
  const int nv = static_cast<int>(views.size());
  const int dim = config_.color_token_dim();
  const auto n = static_cast<Eigen::Index>(points.size());
  std::vector<Vec3f> out(points.size());
  const Eigen::Index chunks = (n + kQueryChunk - 1) / kQueryChunk;
#pragma omp parallel for schedule(dynamic, 1) num_threads(thread_count())
  for (Eigen::Index ci = 0; ci < chunks; ++ci) {
    const Eigen::Index begin = ci * kQueryChunk, end = std::min(n, begin + kQueryChunk);
    const Eigen::Index m = end - begin;
    nn::Mat tokens(m * nv, dim);
    std::vector<char> valid(static_cast<std::size_t>(m * nv));
    for (Eigen::Index p = 0; p < m; ++p)
      for (int v = 0; v < nv; ++v) {
        const ViewTap t = make_tap(points[static_cast<std::size_t>(begin + p)], views[static_cast<std::size_t>(v)]);
        color_token(t, views[static_cast<std::size_t>(v)], tokens.row(p * nv + v));
        valid[static_cast<std::size_t>(p * nv + v)] = t.valid ? 1 : 0;
      }
    nn::Mat fused;
    if (config_.color_aggregation == ColorAggregation::attention) {
      fused.resize(m, config_.attention_dim);
      for (Eigen::Index p = 0; p < m; ++p) {
        const std::vector<char> vv(valid.begin() + p * nv, valid.begin() + (p + 1) * nv);
        fused.row(p) = color_attention_.forward(tokens.middleRows(p * nv, nv), vv);
      }
    } else {
      std::vector<PointViews> pvs(static_cast<std::size_t>(m));
      for (Eigen::Index p = 0; p < m; ++p) pvs[static_cast<std::size_t>(p)] = arrange(tokens, p * nv, nv, dim - 1);
      fused = mean_rows(color_trunk_.forward(reorder_rows(tokens, pvs, nv)), pvs, nv);
    }
    const nn::Mat pre = color_head_.forward(fused);
    for (Eigen::Index p = 0; p < m; ++p)
      out[static_cast<std::size_t>(begin + p)] = Vec3f(static_cast<float>(nn::sigmoid(pre(p, 0))),
                                                       static_cast<float>(nn::sigmoid(pre(p, 1))),
                                                       static_cast<float>(nn::sigmoid(pre(p, 2))));
  }
  return out;
}

double ImplicitModel::geo_loss(std::span<const DepthFrame> depths, std::span<const Vec3> points,
                               std::span<const double> targets, bool backward) {
  if (depths.empty()) throw ConfigError("geometry loss needs at least one view");
  if (points.size() != targets.size() || points.empty()) throw ConfigError("points and targets must match");
  const int nv = static_cast<int>(depths.size());
  const int dim = config_.geo_token_dim();
  const int stride = config_.stride();
  std::vector<EncodedView> views(depths.size());
  std::vector<nn::ConvEncoder::Cache> enc(depths.size());
  for (std::size_t v = 0; v < depths.size(); ++v) {
    if (depths[v].depth.width() % stride != 0 || depths[v].depth.height() % stride != 0)
      throw ConfigError("input resolution is not divisible by the encoder stride");
    views[v].depth = depths[v];
    views[v].geo_features = geo_encoder_.forward(geo_input(depths[v]), &enc[v]);
  }
  const auto m = static_cast<Eigen::Index>(points.size());
  nn::Mat tokens(m * nv, dim);
  std::vector<ViewTap> taps(static_cast<std::size_t>(m * nv));
  for (Eigen::Index p = 0; p < m; ++p)
    for (int v = 0; v < nv; ++v) {
      ViewTap& t = taps[static_cast<std::size_t>(p * nv + v)];
      t = make_tap(points[static_cast<std::size_t>(p)], views[static_cast<std::size_t>(v)]);
      geo_token(t, views[static_cast<std::size_t>(v)], tokens.row(p * nv + v));
    }
  std::vector<PointViews> pvs(static_cast<std::size_t>(m));
  for (Eigen::Index p = 0; p < m; ++p) pvs[static_cast<std::size_t>(p)] = arrange(tokens, p * nv, nv, dim - 1);
  nn::Mlp::Cache trunk_cache, head_cache;
  const nn::Mat h = geo_trunk_.forward(reorder_rows(tokens, pvs, nv), &trunk_cache);
  const nn::Mat logits = geo_head_.forward(mean_rows(h, pvs, nv), &head_cache);

  double loss = 0;
  nn::Mat dlogits(m, 1);
  for (Eigen::Index p = 0; p < m; ++p) {
    const double s = nn::sigmoid(logits(p, 0));
    const double e = s - targets[static_cast<std::size_t>(p)];
    loss += e * e;
    dlogits(p, 0) = 2.0 * e * s * (1 - s) / static_cast<double>(m);
  }
  loss /= static_cast<double>(m);
  if (!backward) return loss;

  const nn::Mat dagg = geo_head_.backward(head_cache, dlogits);
  const nn::Mat dtok = geo_trunk_.backward(trunk_cache, mean_rows_backward(dagg, pvs, nv));
  std::vector<nn::Tensor3> grad_maps;
  for (const EncodedView& v : views)
    grad_maps.emplace_back(v.geo_features.height, v.geo_features.width, v.geo_features.channels);
  for (Eigen::Index p = 0; p < m; ++p)
    for (int r = 0; r < nv; ++r) {
      const int v = pvs[static_cast<std::size_t>(p)].order[static_cast<std::size_t>(r)];
      const ViewTap& t = taps[static_cast<std::size_t>(p * nv + v)];
      if (!t.valid) continue;
      const int c = views[static_cast<std::size_t>(v)].geo_features.channels;
      nn::sample_backward(grad_maps[static_cast<std::size_t>(v)], t.tap, dtok.row(p * nv + r).head(c));
    }
  for (std::size_t v = 0; v < views.size(); ++v) geo_encoder_.backward(enc[v], grad_maps[v]);
  return loss;
}

double ImplicitModel::color_loss(std::span<const DepthFrame> depths, std::span<const ColorFrame> colors,
                                 std::span<const Vec3> points, std::span<const Vec3f> targets, bool backward) {
  if (!config_.color_enabled) throw ConfigError("model has no color network");
  if (depths.empty() || colors.size() != depths.size()) throw ConfigError("color loss needs matching color and depth views");
  if (points.size() != targets.size() || points.empty()) throw ConfigError("points and targets must match");
  const int nv = static_cast<int>(depths.size());
  const int dim = config_.color_token_dim();
  const int stride = config_.stride();
  std::vector<EncodedView> views(depths.size());
  std::vector<nn::ConvEncoder::Cache> enc(depths.size());
  for (std::size_t v = 0; v < depths.size(); ++v) {
    if (depths[v].depth.width() % stride != 0 || depths[v].depth.height() % stride != 0)
      throw ConfigError("input resolution is not divisible by the encoder stride");
    views[v].depth = depths[v];
    views[v].color = colors[v];
    views[v].has_color = true;
    // Geometry features enter the color network as fixed inputs.
    views[v].geo_features = geo_encoder_.forward(geo_input(depths[v]));
    views[v].color_features = color_encoder_.forward(color_input(colors[v], depths[v]), &enc[v]);
  }
  const auto m = static_cast<Eigen::Index>(points.size());
  nn::Mat tokens(m * nv, dim);
  std::vector<ViewTap> taps(static_cast<std::size_t>(m * nv));
  std::vector<char> valid(static_cast<std::size_t>(m * nv));
  for (Eigen::Index p = 0; p < m; ++p)
    for (int v = 0; v < nv; ++v) {
      ViewTap& t = taps[static_cast<std::size_t>(p * nv + v)];
      t = make_tap(points[static_cast<std::size_t>(p)], views[static_cast<std::size_t>(v)]);
      color_token(t, views[static_cast<std::size_t>(v)], tokens.row(p * nv + v));
      valid[static_cast<std::size_t>(p * nv + v)] = t.valid ? 1 : 0;
    }

  const bool attention = config_.color_aggregation == ColorAggregation::attention;
  std::vector<nn::AttentionAggregator::Cache> att(attention ? static_cast<std::size_t>(m) : 0);
  std::vector<PointViews> pvs;
  nn::Mlp::Cache trunk_cache, head_cache;
  nn::Mat fused;
  if (attention) {
    fused.resize(m, config_.attention_dim);
    for (Eigen::Index p = 0; p < m; ++p) {
      const std::vector<char> vv(valid.begin() + p * nv, valid.begin() + (p + 1) * nv);
      fused.row(p) = color_attention_.forward(tokens.middleRows(p * nv, nv), vv, &att[static_cast<std::size_t>(p)]);
    }
  } else {
    pvs.resize(static_cast<std::size_t>(m));
    for (Eigen::Index p = 0; p < m; ++p) pvs[static_cast<std::size_t>(p)] = arrange(tokens, p * nv, nv, dim - 1);
    fused = mean_rows(color_trunk_.forward(reorder_rows(tokens, pvs, nv), &trunk_cache), pvs, nv);
  }
  const nn::Mat pre = color_head_.forward(fused, &head_cache);

  double loss = 0;
  nn::Mat dpre(m, 3);
  const double norm = 3.0 * static_cast<double>(m);
  for (Eigen::Index p = 0; p < m; ++p)
    for (int c = 0; c < 3; ++c) {
      const double s = nn::sigmoid(pre(p, c));
      const double e = s - targets[static_cast<std::size_t>(p)][c];
      loss += std::abs(e);
      dpre(p, c) = (e > 0 ? 1.0 : (e < 0 ? -1.0 : 0.0)) * s * (1 - s) / norm;
    }
  loss /= norm;
  if (!backward) return loss;

  const nn::Mat dfused = color_head_.backward(head_cache, dpre);
  std::vector<nn::Tensor3> grad_maps;
  for (const EncodedView& v : views)
    grad_maps.emplace_back(v.color_features.height, v.color_features.width, v.color_features.channels);
  auto scatter = [&](Eigen::Index p, int v, const nn::RowVec& dtoken) {
    const ViewTap& t = taps[static_cast<std::size_t>(p * nv + v)];
    if (!t.valid) return;
    const EncodedView& ev = views[static_cast<std::size_t>(v)];
    nn::sample_backward(grad_maps[static_cast<std::size_t>(v)], t.tap,
                        dtoken.segment(ev.geo_features.channels, ev.color_features.channels));
  };
  if (attention) {
    for (Eigen::Index p = 0; p < m; ++p) {
      const nn::Mat dt = color_attention_.backward(att[static_cast<std::size_t>(p)], dfused.row(p));
      for (int v = 0; v < nv; ++v) scatter(p, v, dt.row(v));
    }
  } else {
    const nn::Mat dtok = color_trunk_.backward(trunk_cache, mean_rows_backward(dfused, pvs, nv));
    for (Eigen::Index p = 0; p < m; ++p)
      for (int r = 0; r < nv; ++r) scatter(p, pvs[static_cast<std::size_t>(p)].order[static_cast<std::size_t>(r)], dtok.row(p * nv + r));
  }
  for (std::size_t v = 0; v < views.size(); ++v) color_encoder_.backward(enc[v], grad_maps[v]);
  return loss;
}

// ---------------------------------------------------------------------------
// Occupancy fields and extraction

void NetworkOccupancy::evaluate(std::span<const Vec3> points, std::span<double> occupancy) const {
  const std::vector<double> occ = model_.geo_occupancy(views_, points);
  std::copy(occ.begin(), occ.end(), occupancy.begin());
}

void AnalyticOccupancy::evaluate(std::span<const Vec3> points, std::span<double> occupancy) const {
  const auto n = static_cast<std::int64_t>(points.size());
#pragma omp parallel for schedule(static) num_threads(thread_count())
  for (std::int64_t i = 0; i < n; ++i)
    occupancy[static_cast<std::size_t>(i)] = nn::sigmoid(-sdf_(points[static_cast<std::size_t>(i)]) / tau_);
}

void ExtractionParams::validate() const {
  if (!((bounds_max - bounds_min).minCoeff() > 0)) throw ConfigError("extraction bounds are empty");
  if (coarse_resolution < 1) throw ConfigError("coarse resolution must be positive");
  if (levels < 0 || levels > 6) throw ConfigError("octree levels must lie in [0, 6]");
  if (!(beta >= 0 && beta < 0.5)) throw ConfigError("refinement band must lie in [0, 0.5)");
  if (!(carve_margin >= 0)) throw ConfigError("carve margin must be non-negative");
  if (hull_dilation < 0) throw ConfigError("hull dilation must be non-negative");
}

CandidateFilter::CandidateFilter(std::span<const DepthFrame> frames, double margin, int dilation) : margin_(margin) {
  for (const DepthFrame& f : frames) {
    View v{f.intrinsics, f.pose, Image<float>(f.depth.width(), f.depth.height(), 0.0f)};
    const int w = f.depth.width(), h = f.depth.height();
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        float best = 0;
        for (int dy = -dilation; dy <= dilation; ++dy)
          for (int dx = -dilation; dx <= dilation; ++dx)
            if (f.valid(x + dx, y + dy)) {
              const float d = f.depth(x + dx, y + dy);
              if (best == 0 || d < best) best = d;
            }
        v.min_depth(x, y) = best;
      }
    views_.push_back(std::move(v));
  }
}

bool CandidateFilter::keep(const Vec3& p) const {
  bool seen = false;
  for (const View& v : views_) {
    const auto proj = project(p, v.intrinsics, v.pose);
    if (!proj) continue;
    const int x = static_cast<int>(std::floor(proj->pixel.x() + 0.5)), y = static_cast<int>(std::floor(proj->pixel.y() + 0.5));
    if (!v.min_depth.contains(x, y)) continue;
    seen = true;
    const float d = v.min_depth(x, y);
    if (d == 0) return false;                       // outside the silhouette
    if (proj->depth < d - margin_) return false;    // in observed free space
  }
  return seen;
}

namespace {

struct OccupancyLattice {
  LatticeGeometry lattice;
  int n = 0;  // cells per axis
  std::vector<float> occ;
  std::vector<std::uint8_t> state;  // 0 unknown, 1 evaluated or carved, 2 queued

  OccupancyLattice(const ExtractionParams& p) {
    n = p.final_resolution();
    const double extent = (p.bounds_max - p.bounds_min).maxCoeff();
    lattice = LatticeGeometry{p.bounds_min, extent / n, Vec3i::Constant(n + 1)};
    occ.assign(lattice.point_count(), 0.0f);
    state.assign(lattice.point_count(), 0);
  }
  std::size_t index(int i, int j, int k) const { return lattice.index(i, j, k); }
  Vec3i coords(std::size_t idx) const {
    const auto m = static_cast<std::size_t>(n + 1);
    return Vec3i(static_cast<int>(idx % m), static_cast<int>((idx / m) % m), static_cast<int>(idx / (m * m)));
  }
};

// Filters and evaluates the given lattice points, storing occupancies.
void evaluate_points(OccupancyLattice& lat, const std::vector<std::size_t>& indices, const OccupancyField& field,
                     const CandidateFilter* filter, ExtractionStats& stats) {
  const auto n = static_cast<std::int64_t>(indices.size());
  std::vector<char> keep(indices.size(), 1);
  std::vector<Vec3> pts(indices.size());
#pragma omp parallel for schedule(static) num_threads(thread_count())
  for (std::int64_t i = 0; i < n; ++i) {
    const Vec3i c = lat.coords(indices[static_cast<std::size_t>(i)]);
    pts[static_cast<std::size_t>(i)] = lat.lattice.point(c.x(), c.y(), c.z());
    if (filter) keep[static_cast<std::size_t>(i)] = filter->keep(pts[static_cast<std::size_t>(i)]) ? 1 : 0;
  }
  std::vector<Vec3> query;
  std::vector<std::size_t> where;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    lat.state[indices[i]] = 1;
    if (keep[i]) {
      query.push_back(pts[i]);
      where.push_back(indices[i]);
    } else {
      lat.occ[indices[i]] = 0.0f;
      ++stats.carved;
    }
  }
  std::vector<double> out(query.size());
  if (!query.empty()) field.evaluate(query, out);
  for (std::size_t i = 0; i < where.size(); ++i) lat.occ[where[i]] = static_cast<float>(out[i]);
  stats.evaluations += query.size();
}

bool needs_refinement(const OccupancyLattice& lat, const Vec3i& c, int s, double beta) {
  bool inside = false, outside = false;
  for (int q = 0; q < 8; ++q) {
    const double v = lat.occ[lat.index(c.x() + s * (q & 1), c.y() + s * ((q >> 1) & 1), c.z() + s * ((q >> 2) & 1))];
    if (std::abs(v - 0.5) < beta) return true;
    (v > 0.5 ? inside : outside) = true;
  }
  return inside && outside;
}

TriangleMesh polygonize(const OccupancyLattice& lat, const std::vector<Vec3i>* cells) {
  // Marching cubes treats values below the iso level as inside, so run it on
  // 1 - occupancy to keep faces pointing out of the occupied region.
  auto value = [&lat](int i, int j, int k) { return 1.0 - static_cast<double>(lat.occ[lat.index(i, j, k)]); };
  auto mc = make_marching_cubes(lat.lattice, value, 0.5);
  if (cells) {
    for (const Vec3i& c : *cells) mc.add_cell(c.x(), c.y(), c.z());
  } else {
    mc.add_all_cells();
  }
  TriangleMesh mesh = mc.finish();
  compute_vertex_normals(mesh);
  return mesh;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

TriangleMesh extract_surface(const OccupancyField& field, std::span<const DepthFrame> frames,
                             const ExtractionParams& params, ExtractionStats* stats_out) {
  params.validate();
  const auto t0 = std::chrono::steady_clock::now();
  ExtractionStats stats;
  std::optional<CandidateFilter> filter;
  if (params.filter) filter.emplace(frames, params.carve_margin, params.hull_dilation);
  OccupancyLattice lat(params);
  const int step0 = 1 << params.levels;
  const int nc = params.coarse_resolution;

  std::vector<std::size_t> pts;
  pts.reserve(static_cast<std::size_t>(nc + 1) * (nc + 1) * (nc + 1));
  for (int k = 0; k <= nc; ++k)
    for (int j = 0; j <= nc; ++j)
      for (int i = 0; i <= nc; ++i) pts.push_back(lat.index(i * step0, j * step0, k * step0));
  evaluate_points(lat, pts, field, filter ? &*filter : nullptr, stats);

  std::vector<Vec3i> cells;
  cells.reserve(static_cast<std::size_t>(nc) * nc * nc);
  for (int k = 0; k < nc; ++k)
    for (int j = 0; j < nc; ++j)
      for (int i = 0; i < nc; ++i) cells.emplace_back(i * step0, j * step0, k * step0);

  for (int s = step0; s > 1; s /= 2) {
    std::vector<Vec3i> refine;
    for (const Vec3i& c : cells)
      if (needs_refinement(lat, c, s, params.beta)) refine.push_back(c);
    stats.refined_cells += refine.size();
    const int h = s / 2;
    pts.clear();
    for (const Vec3i& c : refine)
      for (int dk = 0; dk <= 2; ++dk)
        for (int dj = 0; dj <= 2; ++dj)
          for (int di = 0; di <= 2; ++di) {
            const std::size_t idx = lat.index(c.x() + di * h, c.y() + dj * h, c.z() + dk * h);
            if (lat.state[idx] == 0) {
              lat.state[idx] = 2;
              pts.push_back(idx);
            }
          }
    evaluate_points(lat, pts, field, filter ? &*filter : nullptr, stats);
    cells.clear();
    for (const Vec3i& c : refine)
      for (int q = 0; q < 8; ++q) cells.emplace_back(c.x() + h * (q & 1), c.y() + h * ((q >> 1) & 1), c.z() + h * ((q >> 2) & 1));
  }
  // Polygonize in lattice order (same vertex order as the dense path).
  std::vector<char> marked(lat.occ.size(), 0);
  for (const Vec3i& c : cells) marked[lat.index(c.x(), c.y(), c.z())] = 1;
  cells.clear();
  for (std::size_t idx = 0; idx < marked.size(); ++idx)
    if (marked[idx]) cells.push_back(lat.coords(idx));
  TriangleMesh mesh = polygonize(lat, &cells);
  stats.seconds = seconds_since(t0);
  if (stats_out) *stats_out = stats;
  return mesh;
}

TriangleMesh extract_surface_dense(const OccupancyField& field, std::span<const DepthFrame> frames,
                                   const ExtractionParams& params, ExtractionStats* stats_out) {
  params.validate();
  const auto t0 = std::chrono::steady_clock::now();
  ExtractionStats stats;
  std::optional<CandidateFilter> filter;
  if (params.filter) filter.emplace(frames, params.carve_margin, params.hull_dilation);
  OccupancyLattice lat(params);
  const int m = lat.n + 1;
  std::vector<std::size_t> slab;
  for (int k = 0; k < m; ++k) {
    slab.clear();
    for (int j = 0; j < m; ++j)
      for (int i = 0; i < m; ++i) slab.push_back(lat.index(i, j, k));
    evaluate_points(lat, slab, field, filter ? &*filter : nullptr, stats);
  }
  TriangleMesh mesh = polygonize(lat, nullptr);
  stats.seconds = seconds_since(t0);
  if (stats_out) *stats_out = stats;
  return mesh;
}

// ---------------------------------------------------------------------------
// Training

void TrainConfig::validate() const {
  if (steps < 0) throw ConfigError("training steps must be non-negative");
  if (batch <= 0) throw ConfigError("batch size must be positive");
  if (!(learning_rate > 0)) throw ConfigError("learning rate must be positive");
  if (uniform_fraction < 0 || near_fraction < 0 || uniform_fraction + near_fraction > 1)
    throw ConfigError("sampling fractions must be non-negative and sum to at most 1");
  if (!(near_sigma > 0)) throw ConfigError("near-surface sigma must be positive");
  if (surface_pool <= 0) throw ConfigError("surface pool must be positive");
  if (!train_geometry && !train_color) throw ConfigError("nothing to train");
  if (log_every <= 0) throw ConfigError("log interval must be positive");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"steps", steps},
          {"batch", batch},
          {"learning_rate", learning_rate},
          {"seed", seed},
          {"uniform_fraction", uniform_fraction},
          {"near_fraction", near_fraction},
          {"near_sigma", near_sigma},
          {"surface_pool", surface_pool},
          {"train_geometry", train_geometry},
          {"train_color", train_color},
          {"log_every", log_every}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("training config must be an object");
  TrainConfig c;
  try {
    c.steps = j.value("steps", c.steps);
    c.batch = j.value("batch", c.batch);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.seed = j.value("seed", c.seed);
    c.uniform_fraction = j.value("uniform_fraction", c.uniform_fraction);
    c.near_fraction = j.value("near_fraction", c.near_fraction);
    c.near_sigma = j.value("near_sigma", c.near_sigma);
    c.surface_pool = j.value("surface_pool", c.surface_pool);
    c.train_geometry = j.value("train_geometry", c.train_geometry);
    c.train_color = j.value("train_color", c.train_color);
    c.log_every = j.value("log_every", c.log_every);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("training config: ") + e.what());
  }
  c.validate();
  return c;
}

TrainingItem make_training_item(std::shared_ptr<const AnalyticScene> scene, int t, const std::vector<Camera>& cameras) {
  TrainingItem item;
  item.t = t;
  for (auto& f : render_scene_views(*scene, t, cameras, NoiseParams::none(), 0)) {
    item.depths.push_back(std::move(f.depth));
    item.colors.push_back(std::move(f.color));
  }
  item.scene = std::move(scene);
  return item;
}

namespace {

struct SurfacePool {
  std::vector<Vec3> points;
  std::discrete_distribution<std::size_t> curvature;
  std::discrete_distribution<std::size_t> color_gradient;
};

SurfacePool build_pool(const TrainingItem& item, int n, std::uint64_t seed) {
  SurfacePool pool;
  pool.points = item.scene->sample_surface_points(item.t, static_cast<std::size_t>(n), seed);
  const double h = 0.005;
  std::vector<double> wc(pool.points.size()), wg(pool.points.size());
  for (std::size_t i = 0; i < pool.points.size(); ++i) {
    const Vec3& p = pool.points[i];
    double lap = -6 * item.scene->sdf(item.t, p);
    double grad = 0;
    for (int a = 0; a < 3; ++a) {
      Vec3 e = Vec3::Zero();
      e[a] = h;
      lap += item.scene->sdf(item.t, p + e) + item.scene->sdf(item.t, p - e);
      grad += (item.scene->color(item.t, p + e) - item.scene->color(item.t, p - e)).cast<double>().norm();
    }
    wc[i] = std::abs(lap) / (h * h);
    wg[i] = grad;
  }
  // A floor keeps flat or uniformly colored regions in the draw.
  auto floor_weights = [](std::vector<double>& w) {
    double mean = 0;
    for (double v : w) mean += v;
    mean /= std::max<std::size_t>(1, w.size());
    for (double& v : w) v += 0.1 * mean + 1e-12;
  };
  floor_weights(wc);
  floor_weights(wg);
  pool.curvature = std::discrete_distribution<std::size_t>(wc.begin(), wc.end());
  pool.color_gradient = std::discrete_distribution<std::size_t>(wg.begin(), wg.end());
  return pool;
}

Vec3 uniform_in_bounds(const AnalyticScene& s, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const double r = 1.05 * s.bounds_radius;
  return s.bounds_center + r * Vec3(u(rng), u(rng), u(rng));
}

Vec3 gaussian_offset(double sigma, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, sigma);
  return Vec3(g(rng), g(rng), g(rng));
}

}  // namespace

TrainReport train_toy(ImplicitModel& model, const std::vector<TrainingItem>& items, const TrainConfig& config,
                      std::ostream* curve) {
  config.validate();
  TrainReport report;
  if (config.steps == 0) return report;
  if (items.empty()) throw ConfigError("training needs at least one item");
  if (config.train_color && !model.config().color_enabled) throw ConfigError("model has no color network");
  for (const TrainingItem& it : items) {
    if (!it.scene || it.depths.empty()) throw ConfigError("training item without scene or views");
    if (config.train_color && it.colors.size() != it.depths.size()) throw ConfigError("training item lacks colors");
  }

  std::vector<SurfacePool> pools;
  for (std::size_t i = 0; i < items.size(); ++i)
    pools.push_back(build_pool(items[i], config.surface_pool, derive_seed(config.seed, "train/pool/" + std::to_string(i))));

  nn::ParamList params;
  if (config.train_geometry) params = model.geo_params();
  if (config.train_color) {
    nn::ParamList c = model.color_params();
    params.insert(params.end(), c.begin(), c.end());
  }
  nn::Adam adam(params, nn::AdamParams{config.learning_rate});
  std::mt19937_64 rng(derive_seed(config.seed, "train/batches"));

  const int n_uniform = static_cast<int>(std::lround(config.uniform_fraction * config.batch));
  const int n_near = static_cast<int>(std::lround(config.near_fraction * config.batch));
  const int n_adaptive = std::max(0, config.batch - n_uniform - n_near);
  std::deque<double> recent;
  double window_geo = 0, window_color = 0;
  int window = 0;

  for (int step = 0; step < config.steps; ++step) {
    const std::size_t which = static_cast<std::size_t>(step) % items.size();
    const TrainingItem& item = items[which];
    SurfacePool& pool = pools[which];
    const AnalyticScene& scene = *item.scene;
    adam.zero_grad();
    double lg = 0, lc = 0;

    if (config.train_geometry) {
      std::vector<Vec3> pts;
      pts.reserve(static_cast<std::size_t>(config.batch));
      std::uniform_int_distribution<std::size_t> pick(0, pool.points.size() - 1);
      for (int i = 0; i < n_uniform; ++i) pts.push_back(uniform_in_bounds(scene, rng));
      for (int i = 0; i < n_near; ++i) pts.push_back(pool.points[pick(rng)] + gaussian_offset(config.near_sigma, rng));
      for (int i = 0; i < n_adaptive; ++i)
        pts.push_back(pool.points[pool.curvature(rng)] + gaussian_offset(0.5 * config.near_sigma, rng));
      std::vector<double> targets(pts.size());
      for (std::size_t i = 0; i < pts.size(); ++i) targets[i] = scene.sdf(item.t, pts[i]) < 0 ? 1.0 : 0.0;
      lg = model.geo_loss(item.depths, pts, targets, true);
    }
    if (config.train_color) {
      std::vector<Vec3> pts;
      std::vector<Vec3f> targets;
      std::uniform_int_distribution<std::size_t> pick(0, pool.points.size() - 1);
      for (int i = 0; i < config.batch; ++i) {
        const std::size_t k = i % 2 == 0 ? pick(rng) : pool.color_gradient(rng);
        const Vec3 p = pool.points[k] + gaussian_offset(0.002, rng);
        pts.push_back(p);
        targets.push_back(scene.color(item.t, pool.points[k]));
      }
      lc = model.color_loss(item.depths, item.colors, pts, targets, true);
    }

    const double total = lg + lc;
    if (!std::isfinite(total)) {
      throw TrainingDiverged("non-finite training loss at step " + std::to_string(step),
                             std::vector<double>(recent.begin(), recent.end()));
    }
    recent.push_back(total);
    if (recent.size() > 10) recent.pop_front();
    adam.step();
    if (!nn::all_finite(params))
      throw TrainingDiverged("non-finite weights after step " + std::to_string(step),
                             std::vector<double>(recent.begin(), recent.end()));

    window_geo += lg;
    window_color += lc;
    ++window;
    if (window == config.log_every || step + 1 == config.steps) {
      report.geo_loss.push_back(window_geo / window);
      report.color_loss.push_back(window_color / window);
      if (curve) {
        nlohmann::json line = {{"step", step + 1}, {"geo_loss", window_geo / window}, {"color_loss", window_color / window}};
        *curve << line.dump() << '\n';
      }
      window_geo = window_color = 0;
      window = 0;
    }
  }
  report.steps = config.steps;
  return report;
}

LabeledPoints sample_labeled_points(const AnalyticScene& scene, int t, std::size_t n, std::uint64_t seed,
                                    double near_fraction, double near_sigma) {
  LabeledPoints out;
  std::mt19937_64 rng(derive_seed(seed, "labeled_points"));
  const auto n_near = static_cast<std::size_t>(std::lround(near_fraction * static_cast<double>(n)));
  const std::vector<Vec3> surface = scene.sample_surface_points(t, n_near, derive_seed(seed, "labeled_points/surface"));
  for (const Vec3& p : surface) out.points.push_back(p + gaussian_offset(near_sigma, rng));
  while (out.points.size() < n) out.points.push_back(uniform_in_bounds(scene, rng));
  for (const Vec3& p : out.points) out.occupancy.push_back(scene.sdf(t, p) < 0 ? 1.0 : 0.0);
  return out;
}

}  // namespace volcap
