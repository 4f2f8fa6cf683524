#pragma once

#include "volcap/common.hpp"

#include <Eigen/Dense>

#include "json.hpp"

#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace volcap::nn {

using Mat = Eigen::MatrixXd;
using RowVec = Eigen::RowVectorXd;

/// Trainable tensor with its gradient accumulator.
struct Param {
  Mat value;
  Mat grad;

  void resize(Eigen::Index rows, Eigen::Index cols) {
    value = Mat::Zero(rows, cols);
    grad = Mat::Zero(rows, cols);
  }
};

struct NamedParam {
  std::string name;
  Param* param = nullptr;
};
using ParamList = std::vector<NamedParam>;

inline constexpr double kLeakySlope = 0.01;

inline Mat leaky_relu(const Mat& x) { return x.unaryExpr([](double v) { return v > 0 ? v : kLeakySlope * v; }); }
/// dy scaled by the activation derivative at the pre-activation x.
inline Mat leaky_relu_backward(const Mat& x, const Mat& dy) {
  return dy.binaryExpr(x, [](double g, double v) { return v > 0 ? g : kLeakySlope * g; });
}
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// y = x W^T + b on row-major batches (one sample per row).
class Linear {
 public:
  Linear() = default;
  Linear(int in, int out);

  int in() const { return static_cast<int>(weight_.value.cols()); }
  int out() const { return static_cast<int>(weight_.value.rows()); }

  /// Uniform fan-in initialization (He-style bound sqrt(6 / fan_in)).
  void init(std::mt19937_64& rng, double gain = 1.0);
  Mat forward(const Mat& x) const;
  /// Accumulates parameter gradients and returns dL/dx.
  Mat backward(const Mat& x, const Mat& dy);
  void collect(ParamList& out, const std::string& prefix);

  Param& weight() { return weight_; }
  Param& bias() { return bias_; }
  const Param& weight() const { return weight_; }
  const Param& bias() const { return bias_; }

 private:
  Param weight_;  // out x in
  Param bias_;    // out x 1
};

/// Fully connected net with leaky ReLU hidden layers. With skip enabled the
/// network input is concatenated to the input of every hidden layer after the
/// first and of the output layer.
class Mlp {
 public:
  struct Cache {
    std::vector<Mat> inputs;  // input of each linear layer
    std::vector<Mat> pre;     // pre-activation of each linear layer
  };

  Mlp() = default;
  Mlp(int in, const std::vector<int>& hidden, int out, bool skip, bool activate_output);

  int in() const { return in_; }
  int out() const { return layers_.empty() ? in_ : layers_.back().out(); }
  void init(std::mt19937_64& rng);
  Mat forward(const Mat& x, Cache* cache = nullptr) const;
  Mat backward(const Cache& cache, const Mat& dy);
  void collect(ParamList& out, const std::string& prefix);

 private:
  int in_ = 0;
  bool skip_ = false;
  bool activate_output_ = false;
  std::vector<Linear> layers_;
};

/// Channels-last image tensor: data(y * width + x, c).
struct Tensor3 {
  int height = 0, width = 0, channels = 0;
  Mat data;

  Tensor3() = default;
  Tensor3(int h, int w, int c) : height(h), width(w), channels(c), data(Mat::Zero(static_cast<Eigen::Index>(h) * w, c)) {}
};

/// k x k convolution with zero padding k/2 and the given stride.
class Conv2d {
 public:
  struct Cache {
    Mat columns;
    int in_h = 0, in_w = 0;
  };

  Conv2d() = default;
  Conv2d(int in_channels, int out_channels, int kernel, int stride);

  int stride() const { return stride_; }
  int out_channels() const { return linear_.out(); }
  int output_size(int input) const { return (input + 2 * (kernel_ / 2) - kernel_) / stride_ + 1; }

  void init(std::mt19937_64& rng) { linear_.init(rng); }
  Tensor3 forward(const Tensor3& x, Cache* cache = nullptr) const;
  Tensor3 backward(const Cache& cache, const Tensor3& dy);
  void collect(ParamList& out, const std::string& prefix) { linear_.collect(out, prefix); }

 private:
  Mat im2col(const Tensor3& x, int oh, int ow) const;

  int in_channels_ = 0, kernel_ = 3, stride_ = 1;
  Linear linear_;  // (in_channels * k * k) -> out_channels
};

/// Stack of convolutions with leaky ReLU between layers (none after the last).
class ConvEncoder {
 public:
  struct Cache {
    std::vector<Conv2d::Cache> conv;
    std::vector<Mat> pre;
  };

  ConvEncoder() = default;
  /// strides[i] is 1 or 2; total stride is their product.
  ConvEncoder(int in_channels, const std::vector<int>& channels, const std::vector<int>& strides, int kernel = 3);

  int in_channels() const { return in_channels_; }
  int out_channels() const { return layers_.empty() ? in_channels_ : layers_.back().out_channels(); }
  int total_stride() const;
  void init(std::mt19937_64& rng);
  Tensor3 forward(const Tensor3& x, Cache* cache = nullptr) const;
  void backward(const Cache& cache, const Tensor3& dy);
  void collect(ParamList& out, const std::string& prefix);

 private:
  int in_channels_ = 0;
  std::vector<Conv2d> layers_;
};

/// Bilinear lookup on a feature map for an input-image pixel position; the
/// feature grid is aligned so that feature pixel centers sit at
/// stride * (i + 0.5) - 0.5 in input pixels. Coordinates clamp to the border.
struct BilinearTap {
  int index[4] = {0, 0, 0, 0};
  double weight[4] = {0, 0, 0, 0};
};
BilinearTap bilinear_tap(const Tensor3& map, int stride, double px, double py);
RowVec sample(const Tensor3& map, const BilinearTap& tap);
void sample_backward(Tensor3& grad_map, const BilinearTap& tap, const RowVec& dy);

/// Multi-head self-attention with a residual connection over one token
/// sequence (rows). Masked tokens are ignored as keys.
class SelfAttention {
 public:
  struct Cache {
    Mat x, q, k, v, concat;
    std::vector<Mat> attn;  // per head, rows x rows
  };

  SelfAttention() = default;
  SelfAttention(int dim, int heads);

  void init(std::mt19937_64& rng);
  Mat forward(const Mat& x, const std::vector<char>& key_mask, Cache* cache = nullptr) const;
  Mat backward(const Cache& cache, const Mat& dy);
  void collect(ParamList& out, const std::string& prefix);

 private:
  int dim_ = 0, heads_ = 1;
  Linear wq_, wk_, wv_, wo_;
};

/// Token embedding, stacked self-attention and softmax-weighted pooling with
/// a two-layer scoring head. Tokens are canonically ordered before any
/// reduction, which makes the result exactly invariant to their order.
class AttentionAggregator {
 public:
  struct Cache {
    std::vector<int> order;
    std::vector<char> mask;
    Mat embed_pre;
    std::vector<SelfAttention::Cache> layers;
    Mat tokens;  // after attention
    Mat score_hidden_pre;
    Mat alpha;   // rows x 1
    Mat input;   // ordered input tokens
  };

  AttentionAggregator() = default;
  AttentionAggregator(int token_dim, int model_dim, int heads, int layers, int score_hidden);

  int output_dim() const { return model_dim_; }
  void init(std::mt19937_64& rng);
  /// tokens: one row per view; valid: per-row flag (all rows are used when none is set).
  RowVec forward(const Mat& tokens, const std::vector<char>& valid, Cache* cache = nullptr) const;
  /// Returns dL/dtokens in the caller's row order.
  Mat backward(const Cache& cache, const RowVec& dy);
  void collect(ParamList& out, const std::string& prefix);

 private:
  int model_dim_ = 0;
  Linear embed_;
  std::vector<SelfAttention> layers_;
  Linear score1_, score2_;
};

/// Row order that sorts rows lexicographically (stable for ties).
std::vector<int> canonical_row_order(const Mat& rows);

struct AdamParams {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Adam {
 public:
  Adam(const ParamList& params, AdamParams hp = {});
  void step();
  void zero_grad();
  int steps() const { return t_; }

 private:
  ParamList params_;
  AdamParams hp_;
  std::vector<Mat> m_, v_;
  int t_ = 0;
};

void zero_grad(const ParamList& params);
bool all_finite(const ParamList& params);
std::size_t parameter_count(const ParamList& params);

/// Weights file: magic "VCNN0001", uint64 manifest length, JSON manifest
/// (tensor names, shapes and order, plus caller metadata), then float32
/// little-endian tensors in manifest order, each row-major.
void save_params(const std::filesystem::path& path, const ParamList& params, const nlohmann::json& metadata);
/// Loads into already-shaped parameters; names and shapes must match.
nlohmann::json load_params(const std::filesystem::path& path, const ParamList& params);
nlohmann::json read_weights_metadata(const std::filesystem::path& path);

}  // namespace volcap::nn
