#include "volcap/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

namespace volcap::nn {

Linear::Linear(int in, int out) {
  if (in <= 0 || out <= 0) throw ConfigError("linear layer dimensions must be positive");
  weight_.resize(out, in);
  bias_.resize(out, 1);
}

void Linear::init(std::mt19937_64& rng, double gain) {
  const double bound = gain * std::sqrt(6.0 / static_cast<double>(in()));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (Eigen::Index i = 0; i < weight_.value.size(); ++i) weight_.value.data()[i] = u(rng);
  bias_.value.setZero();
}

Mat Linear::forward(const Mat& x) const {
  Mat y = x * weight_.value.transpose();
  y.rowwise() += bias_.value.col(0).transpose();
  return y;
}

Mat Linear::backward(const Mat& x, const Mat& dy) {
  weight_.grad.noalias() += dy.transpose() * x;
  bias_.grad.col(0) += dy.colwise().sum().transpose();
  return dy * weight_.value;
}

void Linear::collect(ParamList& out, const std::string& prefix) {
  out.push_back({prefix + ".weight", &weight_});
  out.push_back({prefix + ".bias", &bias_});
}

Mlp::Mlp(int in, const std::vector<int>& hidden, int out, bool skip, bool activate_output)
    : in_(in), skip_(skip), activate_output_(activate_output) {
  int prev = in;
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    const int width = prev + (i > 0 && skip ? in : 0);
    layers_.emplace_back(width, hidden[i]);
    prev = hidden[i];
  }
  layers_.emplace_back(prev + (!hidden.empty() && skip ? in : 0), out);
}

void Mlp::init(std::mt19937_64& rng) {
  for (std::size_t i = 0; i < layers_.size(); ++i)
    layers_[i].init(rng, i + 1 == layers_.size() && !activate_output_ ? 0.5 : 1.0);
}

Mat Mlp::forward(const Mat& x, Cache* cache) const {
  if (x.cols() != in_) throw ConfigError("MLP input width mismatch");
  if (cache) {
    cache->inputs.clear();
    cache->pre.clear();
  }
  Mat h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    Mat input;
    if (i > 0 && skip_) {
      input.resize(x.rows(), h.cols() + x.cols());
      input << h, x;
    } else {
      input = h;
    }
    Mat pre = layers_[i].forward(input);
    const bool act = i + 1 < layers_.size() || activate_output_;
    h = act ? leaky_relu(pre) : pre;
    if (cache) {
      cache->inputs.push_back(std::move(input));
      cache->pre.push_back(std::move(pre));
    }
  }
  return h;
}

Mat Mlp::backward(const Cache& cache, const Mat& dy) {
  Mat dh = dy;
  Mat dx = Mat::Zero(dy.rows(), in_);
  for (std::size_t ii = layers_.size(); ii-- > 0;) {
    const bool act = ii + 1 < layers_.size() || activate_output_;
    const Mat dpre = act ? leaky_relu_backward(cache.pre[ii], dh) : dh;
    const Mat din = layers_[ii].backward(cache.inputs[ii], dpre);
    if (ii == 0) {
      dx += din;
    } else if (skip_) {
      const Eigen::Index hw = din.cols() - in_;
      dh = din.leftCols(hw);
      dx += din.rightCols(in_);
    } else {
      dh = din;
    }
  }
  return dx;
}

void Mlp::collect(ParamList& out, const std::string& prefix) {
  for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].collect(out, prefix + "." + std::to_string(i));
}

Conv2d::Conv2d(int in_channels, int out_channels, int kernel, int stride)
    : in_channels_(in_channels), kernel_(kernel), stride_(stride), linear_(in_channels * kernel * kernel, out_channels) {
  if (kernel <= 0 || kernel % 2 == 0) throw ConfigError("convolution kernel must be odd");
  if (stride <= 0) throw ConfigError("convolution stride must be positive");
}

Mat Conv2d::im2col(const Tensor3& x, int oh, int ow) const {
  const int pad = kernel_ / 2;
  const int c = in_channels_;
  Mat cols = Mat::Zero(static_cast<Eigen::Index>(oh) * ow, static_cast<Eigen::Index>(c) * kernel_ * kernel_);
  for (int oy = 0; oy < oh; ++oy)
    for (int ox = 0; ox < ow; ++ox) {
      const Eigen::Index row = static_cast<Eigen::Index>(oy) * ow + ox;
      for (int ky = 0; ky < kernel_; ++ky) {
        const int iy = oy * stride_ - pad + ky;
        if (iy < 0 || iy >= x.height) continue;
        for (int kx = 0; kx < kernel_; ++kx) {
          const int ix = ox * stride_ - pad + kx;
          if (ix < 0 || ix >= x.width) continue;
          cols.block(row, static_cast<Eigen::Index>(ky * kernel_ + kx) * c, 1, c) =
              x.data.row(static_cast<Eigen::Index>(iy) * x.width + ix);
        }
      }
    }
  return cols;
}

Tensor3 Conv2d::forward(const Tensor3& x, Cache* cache) const {
  if (x.channels != in_channels_) throw ConfigError("convolution input channel mismatch");
  const int oh = output_size(x.height), ow = output_size(x.width);
  if (oh <= 0 || ow <= 0) throw ConfigError("convolution input too small");
  Mat cols = im2col(x, oh, ow);
  Tensor3 y;
  y.height = oh;
  y.width = ow;
  y.channels = out_channels();
  y.data = linear_.forward(cols);
  if (cache) {
    cache->columns = std::move(cols);
    cache->in_h = x.height;
    cache->in_w = x.width;
  }
  return y;
}

Tensor3 Conv2d::backward(const Cache& cache, const Tensor3& dy) {
  const Mat dcols = linear_.backward(cache.columns, dy.data);
  Tensor3 dx(cache.in_h, cache.in_w, in_channels_);
  const int pad = kernel_ / 2;
  const int c = in_channels_;
  for (int oy = 0; oy < dy.height; ++oy)
    for (int ox = 0; ox < dy.width; ++ox) {
      const Eigen::Index row = static_cast<Eigen::Index>(oy) * dy.width + ox;
      for (int ky = 0; ky < kernel_; ++ky) {
        const int iy = oy * stride_ - pad + ky;
        if (iy < 0 || iy >= dx.height) continue;
        for (int kx = 0; kx < kernel_; ++kx) {
          const int ix = ox * stride_ - pad + kx;
          if (ix < 0 || ix >= dx.width) continue;
          dx.data.row(static_cast<Eigen::Index>(iy) * dx.width + ix) +=
              dcols.block(row, static_cast<Eigen::Index>(ky * kernel_ + kx) * c, 1, c);
        }
      }
    }
  return dx;
}

ConvEncoder::ConvEncoder(int in_channels, const std::vector<int>& channels, const std::vector<int>& strides, int kernel)
    : in_channels_(in_channels) {
  if (channels.size() != strides.size() || channels.empty())
    throw ConfigError("encoder needs one stride per layer and at least one layer");
  int prev = in_channels;
  for (std::size_t i = 0; i < channels.size(); ++i) {
    if (strides[i] != 1 && strides[i] != 2) throw ConfigError("encoder strides must be 1 or 2");
    layers_.emplace_back(prev, channels[i], kernel, strides[i]);
    prev = channels[i];
  }
}

int ConvEncoder::total_stride() const {
  int s = 1;
  for (const Conv2d& c : layers_) s *= c.stride();
  return s;
}

void ConvEncoder::init(std::mt19937_64& rng) {
  for (Conv2d& c : layers_) c.init(rng);
}

Tensor3 ConvEncoder::forward(const Tensor3& x, Cache* cache) const {
  if (cache) {
    cache->conv.assign(layers_.size(), {});
    cache->pre.assign(layers_.size(), {});
  }
  Tensor3 h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    Tensor3 y = layers_[i].forward(h, cache ? &cache->conv[i] : nullptr);
    if (cache) cache->pre[i] = y.data;
    if (i + 1 < layers_.size()) y.data = leaky_relu(y.data);
    h = std::move(y);
  }
  return h;
}

void ConvEncoder::backward(const Cache& cache, const Tensor3& dy) {
  Tensor3 dh = dy;
  for (std::size_t ii = layers_.size(); ii-- > 0;) {
    if (ii + 1 < layers_.size()) dh.data = leaky_relu_backward(cache.pre[ii], dh.data);
    dh = layers_[ii].backward(cache.conv[ii], dh);
  }
}

void ConvEncoder::collect(ParamList& out, const std::string& prefix) {
  for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].collect(out, prefix + ".conv" + std::to_string(i));
}

BilinearTap bilinear_tap(const Tensor3& map, int stride, double px, double py) {
  BilinearTap tap;
  const double fx = std::clamp((px + 0.5) / stride - 0.5, 0.0, static_cast<double>(map.width - 1));
  const double fy = std::clamp((py + 0.5) / stride - 0.5, 0.0, static_cast<double>(map.height - 1));
  const int x0 = static_cast<int>(std::floor(fx)), y0 = static_cast<int>(std::floor(fy));
  const int x1 = std::min(x0 + 1, map.width - 1), y1 = std::min(y0 + 1, map.height - 1);
  const double tx = fx - x0, ty = fy - y0;
  tap.index[0] = y0 * map.width + x0;
  tap.index[1] = y0 * map.width + x1;
  tap.index[2] = y1 * map.width + x0;
  tap.index[3] = y1 * map.width + x1;
  tap.weight[0] = (1 - tx) * (1 - ty);
  tap.weight[1] = tx * (1 - ty);
  tap.weight[2] = (1 - tx) * ty;
  tap.weight[3] = tx * ty;
  return tap;
}

RowVec sample(const Tensor3& map, const BilinearTap& tap) {
  RowVec out = RowVec::Zero(map.channels);
  for (int i = 0; i < 4; ++i) out += tap.weight[i] * map.data.row(tap.index[i]);
  return out;
}

void sample_backward(Tensor3& grad_map, const BilinearTap& tap, const RowVec& dy) {
  for (int i = 0; i < 4; ++i) grad_map.data.row(tap.index[i]) += tap.weight[i] * dy;
}

SelfAttention::SelfAttention(int dim, int heads)
    : dim_(dim), heads_(heads), wq_(dim, dim), wk_(dim, dim), wv_(dim, dim), wo_(dim, dim) {
  if (heads <= 0 || dim % heads != 0) throw ConfigError("attention dimension must be divisible by the head count");
}

void SelfAttention::init(std::mt19937_64& rng) {
  wq_.init(rng, 0.5);
  wk_.init(rng, 0.5);
  wv_.init(rng, 0.5);
  wo_.init(rng, 0.5);
}

Mat SelfAttention::forward(const Mat& x, const std::vector<char>& key_mask, Cache* cache) const {
  const Eigen::Index n = x.rows();
  const int dh = dim_ / heads_;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Mat q = wq_.forward(x), k = wk_.forward(x), v = wv_.forward(x);
  Mat concat(n, dim_);
  std::vector<Mat> attn(static_cast<std::size_t>(heads_));
  for (int h = 0; h < heads_; ++h) {
    Mat s = q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose() * scale;
    for (Eigen::Index i = 0; i < n; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < n; ++j)
        if (key_mask[static_cast<std::size_t>(j)]) mx = std::max(mx, s(i, j));
      double sum = 0;
      for (Eigen::Index j = 0; j < n; ++j) {
        s(i, j) = key_mask[static_cast<std::size_t>(j)] ? std::exp(s(i, j) - mx) : 0.0;
        sum += s(i, j);
      }
      s.row(i) /= sum;
    }
    concat.middleCols(h * dh, dh) = s * v.middleCols(h * dh, dh);
    attn[static_cast<std::size_t>(h)] = std::move(s);
  }
  Mat y = x + wo_.forward(concat);
  if (cache) {
    cache->x = x;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->concat = std::move(concat);
    cache->attn = std::move(attn);
  }
  return y;
}

Mat SelfAttention::backward(const Cache& c, const Mat& dy) {
  const int dh = dim_ / heads_;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const Mat dconcat = wo_.backward(c.concat, dy);
  Mat dq = Mat::Zero(c.q.rows(), dim_), dk = dq, dv = dq;
  for (int h = 0; h < heads_; ++h) {
    const Mat& a = c.attn[static_cast<std::size_t>(h)];
    const Mat dout = dconcat.middleCols(h * dh, dh);
    const Mat da = dout * c.v.middleCols(h * dh, dh).transpose();
    dv.middleCols(h * dh, dh) = a.transpose() * dout;
    Mat ds = a.cwiseProduct(da);
    const Eigen::VectorXd rowdot = ds.rowwise().sum();
    ds -= a.cwiseProduct(rowdot.replicate(1, a.cols()));
    ds *= scale;
    dq.middleCols(h * dh, dh) = ds * c.k.middleCols(h * dh, dh);
    dk.middleCols(h * dh, dh) = ds.transpose() * c.q.middleCols(h * dh, dh);
  }
  Mat dx = dy;
  dx += wq_.backward(c.x, dq);
  dx += wk_.backward(c.x, dk);
  dx += wv_.backward(c.x, dv);
  return dx;
}

void SelfAttention::collect(ParamList& out, const std::string& prefix) {
  wq_.collect(out, prefix + ".q");
  wk_.collect(out, prefix + ".k");
  wv_.collect(out, prefix + ".v");
  wo_.collect(out, prefix + ".o");
}

std::vector<int> canonical_row_order(const Mat& rows) {
  std::vector<int> order(static_cast<std::size_t>(rows.rows()));
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    for (Eigen::Index c = 0; c < rows.cols(); ++c) {
      if (rows(a, c) < rows(b, c)) return true;
      if (rows(b, c) < rows(a, c)) return false;
    }
    return false;
  });
  return order;
}

AttentionAggregator::AttentionAggregator(int token_dim, int model_dim, int heads, int layers, int score_hidden)
    : model_dim_(model_dim), embed_(token_dim, model_dim), score1_(model_dim, score_hidden), score2_(score_hidden, 1) {
  for (int i = 0; i < layers; ++i) layers_.emplace_back(model_dim, heads);
}

void AttentionAggregator::init(std::mt19937_64& rng) {
  embed_.init(rng);
  for (SelfAttention& l : layers_) l.init(rng);
  score1_.init(rng);
  score2_.init(rng, 0.5);
}

RowVec AttentionAggregator::forward(const Mat& tokens, const std::vector<char>& valid, Cache* cache) const {
  const Eigen::Index n = tokens.rows();
  if (n == 0) throw ConfigError("attention aggregation needs at least one token");
  const std::vector<int> order = canonical_row_order(tokens);
  Mat input(n, tokens.cols());
  std::vector<char> mask(static_cast<std::size_t>(n));
  bool any = false;
  for (Eigen::Index i = 0; i < n; ++i) {
    input.row(i) = tokens.row(order[static_cast<std::size_t>(i)]);
    mask[static_cast<std::size_t>(i)] = valid[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
    any |= mask[static_cast<std::size_t>(i)] != 0;
  }
  if (!any) std::fill(mask.begin(), mask.end(), 1);

  const Mat embed_pre = embed_.forward(input);
  Mat x = leaky_relu(embed_pre);
  std::vector<SelfAttention::Cache> caches(layers_.size());
  for (std::size_t l = 0; l < layers_.size(); ++l) x = layers_[l].forward(x, mask, cache ? &caches[l] : nullptr);

  const Mat sh_pre = score1_.forward(x);
  const Mat s = score2_.forward(leaky_relu(sh_pre));
  double mx = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < n; ++i)
    if (mask[static_cast<std::size_t>(i)]) mx = std::max(mx, s(i, 0));
  Mat alpha = Mat::Zero(n, 1);
  double sum = 0;
  for (Eigen::Index i = 0; i < n; ++i)
    if (mask[static_cast<std::size_t>(i)]) sum += alpha(i, 0) = std::exp(s(i, 0) - mx);
  alpha /= sum;
  RowVec out = RowVec::Zero(model_dim_);
  for (Eigen::Index i = 0; i < n; ++i)
    if (mask[static_cast<std::size_t>(i)]) out += alpha(i, 0) * x.row(i);

  if (cache) {
    cache->order = order;
    cache->mask = std::move(mask);
    cache->embed_pre = embed_pre;
    cache->layers = std::move(caches);
    cache->tokens = std::move(x);
    cache->score_hidden_pre = sh_pre;
    cache->alpha = std::move(alpha);
    cache->input = std::move(input);
  }
  return out;
}

Mat AttentionAggregator::backward(const Cache& c, const RowVec& dy) {
  const Eigen::Index n = c.tokens.rows();
  Mat dx = Mat::Zero(n, model_dim_);
  Mat ds = Mat::Zero(n, 1);
  double weighted = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!c.mask[static_cast<std::size_t>(i)]) continue;
    dx.row(i) = c.alpha(i, 0) * dy;
    ds(i, 0) = c.tokens.row(i).dot(dy);
    weighted += c.alpha(i, 0) * ds(i, 0);
  }
  for (Eigen::Index i = 0; i < n; ++i) ds(i, 0) = c.mask[static_cast<std::size_t>(i)] ? c.alpha(i, 0) * (ds(i, 0) - weighted) : 0.0;
  const Mat dh = score2_.backward(leaky_relu(c.score_hidden_pre), ds);
  dx += score1_.backward(c.tokens, leaky_relu_backward(c.score_hidden_pre, dh));
  for (std::size_t l = layers_.size(); l-- > 0;) dx = layers_[l].backward(c.layers[l], dx);
  const Mat din = embed_.backward(c.input, leaky_relu_backward(c.embed_pre, dx));
  Mat out(n, din.cols());
  for (Eigen::Index i = 0; i < n; ++i) out.row(c.order[static_cast<std::size_t>(i)]) = din.row(i);
  return out;
}

void AttentionAggregator::collect(ParamList& out, const std::string& prefix) {
  embed_.collect(out, prefix + ".embed");
  for (std::size_t l = 0; l < layers_.size(); ++l) layers_[l].collect(out, prefix + ".attn" + std::to_string(l));
  score1_.collect(out, prefix + ".score1");
  score2_.collect(out, prefix + ".score2");
}

Adam::Adam(const ParamList& params, AdamParams hp) : params_(params), hp_(hp) {
  for (const NamedParam& p : params_) {
    m_.push_back(Mat::Zero(p.param->value.rows(), p.param->value.cols()));
    v_.push_back(Mat::Zero(p.param->value.rows(), p.param->value.cols()));
  }
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(hp_.beta1, t_), c2 = 1.0 - std::pow(hp_.beta2, t_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Param& p = *params_[i].param;
    m_[i] = hp_.beta1 * m_[i] + (1 - hp_.beta1) * p.grad;
    v_[i] = hp_.beta2 * v_[i] + (1 - hp_.beta2) * p.grad.cwiseAbs2();
    p.value.array() -= hp_.learning_rate * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + hp_.epsilon);
  }
}

void Adam::zero_grad() { nn::zero_grad(params_); }

void zero_grad(const ParamList& params) {
  for (const NamedParam& p : params) p.param->grad.setZero();
}

bool all_finite(const ParamList& params) {
  for (const NamedParam& p : params)
    if (!p.param->value.allFinite()) return false;
  return true;
}

std::size_t parameter_count(const ParamList& params) {
  std::size_t n = 0;
  for (const NamedParam& p : params) n += static_cast<std::size_t>(p.param->value.size());
  return n;
}

namespace {
constexpr char kMagic[8] = {'V', 'C', 'N', 'N', '0', '0', '0', '1'};

nlohmann::json read_manifest(std::ifstream& is, const std::filesystem::path& path) {
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0) throw IoError(path.string() + ": not a weights file");
  std::uint64_t len = 0;
  is.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!is || len > (1u << 30)) throw IoError(path.string() + ": corrupt manifest length");
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  if (!is) throw IoError(path.string() + ": truncated manifest");
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": bad manifest: " + e.what());
  }
}
}  // namespace

void save_params(const std::filesystem::path& path, const ParamList& params, const nlohmann::json& metadata) {
  nlohmann::json manifest;
  manifest["format"] = "float32-le, row-major";
  manifest["metadata"] = metadata;
  manifest["tensors"] = nlohmann::json::array();
  for (const NamedParam& p : params)
    manifest["tensors"].push_back({{"name", p.name}, {"shape", {p.param->value.rows(), p.param->value.cols()}}});
  const std::string text = manifest.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string());
  os.write(kMagic, 8);
  const std::uint64_t len = text.size();
  os.write(reinterpret_cast<const char*>(&len), sizeof(len));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const NamedParam& p : params) {
    const Mat& m = p.param->value;
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        const float f = static_cast<float>(m(r, c));
        os.write(reinterpret_cast<const char*>(&f), sizeof(f));
      }
  }
  if (!os) throw IoError("write failed: " + path.string());
}

nlohmann::json read_weights_metadata(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_manifest(is, path).value("metadata", nlohmann::json::object());
}

nlohmann::json load_params(const std::filesystem::path& path, const ParamList& params) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  const nlohmann::json manifest = read_manifest(is, path);
  const auto& tensors = manifest.at("tensors");
  if (tensors.size() != params.size()) throw IoError(path.string() + ": tensor count does not match the model");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& t = tensors[i];
    Mat& m = params[i].param->value;
    if (t.at("name").get<std::string>() != params[i].name || t.at("shape")[0].get<Eigen::Index>() != m.rows() ||
        t.at("shape")[1].get<Eigen::Index>() != m.cols())
      throw IoError(path.string() + ": tensor " + params[i].name + " does not match the model");
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        float f = 0;
        is.read(reinterpret_cast<char*>(&f), sizeof(f));
        m(r, c) = f;
      }
    if (!is) throw IoError(path.string() + ": truncated tensor data");
  }
  return manifest.value("metadata", nlohmann::json::object());
}

}  // namespace volcap::nn
