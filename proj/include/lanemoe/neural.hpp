#pragma once

#include <cmath>
#include <concepts>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "lanemoe/errors.hpp"

namespace lanemoe {

/// Row-major batch of real values; one sample per row.
using Tensor2 = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ParamVector = Eigen::VectorXd;

inline void require_finite(const Tensor2& t, const char* what) {
  if (!t.allFinite()) throw NonFinite(std::string("non-finite values in ") + what);
}

/// Activations cached by a forward pass; consumed by backward().
struct ForwardCache {
  std::vector<Tensor2> activations;  // input, then the output of every layer
  bool empty() const { return activations.empty(); }
};

/// Anything that can serve as a policy backbone: a differentiable map from a
/// batch of inputs to a batch of outputs over a flat parameter vector.
template <typename Net>
concept Backbone = requires(const Net& net, Net& mut, const Tensor2& x, ForwardCache* cache, const ParamVector& p) {
  { net.forward(x, cache) } -> std::convertible_to<Tensor2>;
  { net.backward(*cache, x) } -> std::convertible_to<ParamVector>;
  { net.parameters() } -> std::convertible_to<const ParamVector&>;
  { mut.set_parameters(p) };
  { net.input_size() } -> std::convertible_to<int>;
  { net.output_size() } -> std::convertible_to<int>;
};

/// Fully connected network: tanh hidden layers, linear output layer.
/// Parameters live in one flat vector, laid out per layer as the row-major
/// weight matrix (out x in) followed by the bias.
class MlpNet {
 public:
  MlpNet() = default;

  explicit MlpNet(std::vector<int> sizes) : sizes_(std::move(sizes)) {
    if (sizes_.size() < 2) throw ShapeMismatch("an MLP needs at least input and output sizes");
    std::size_t count = 0;
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
      if (sizes_[l] <= 0 || sizes_[l + 1] <= 0) throw ShapeMismatch("layer sizes must be positive");
      offsets_.push_back(count);
      count += static_cast<std::size_t>(sizes_[l] * sizes_[l + 1] + sizes_[l + 1]);
    }
    params_ = ParamVector::Zero(static_cast<Eigen::Index>(count));
  }

  /// Orthogonal initialisation with the given gains; biases start at zero.
  static MlpNet orthogonal(std::vector<int> sizes, std::mt19937_64& rng, double hidden_gain, double output_gain) {
    MlpNet net(std::move(sizes));
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t l = 0; l < net.layer_count(); ++l) {
      const int rows = net.sizes_[l + 1];
      const int cols = net.sizes_[l];
      const bool tall = rows >= cols;
      Eigen::MatrixXd g(tall ? rows : cols, tall ? cols : rows);
      for (Eigen::Index r = 0; r < g.rows(); ++r) {
        for (Eigen::Index c = 0; c < g.cols(); ++c) g(r, c) = normal(rng);
      }
      Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
      Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(g.rows(), g.cols());
      const Eigen::MatrixXd r = qr.matrixQR().topRows(g.cols()).triangularView<Eigen::Upper>();
      for (Eigen::Index c = 0; c < g.cols(); ++c) {
        if (r(c, c) < 0.0) q.col(c) *= -1.0;
      }
      const double gain = l + 1 == net.layer_count() ? output_gain : hidden_gain;
      Eigen::MatrixXd w = tall ? q : Eigen::MatrixXd(q.transpose());
      net.weight(l) = gain * w;
    }
    return net;
  }

  const std::vector<int>& sizes() const { return sizes_; }
  std::size_t layer_count() const { return offsets_.size(); }
  int input_size() const { return sizes_.front(); }
  int output_size() const { return sizes_.back(); }
  std::size_t parameter_count() const { return static_cast<std::size_t>(params_.size()); }

  const ParamVector& parameters() const { return params_; }
  void set_parameters(const ParamVector& p) {
    if (p.size() != params_.size()) throw ShapeMismatch("parameter vector has the wrong length");
    params_ = p;
  }

  Eigen::Map<Tensor2> weight(std::size_t l) {
    return {params_.data() + offsets_[l], sizes_[l + 1], sizes_[l]};
  }
  Eigen::Map<const Tensor2> weight(std::size_t l) const {
    return {params_.data() + offsets_[l], sizes_[l + 1], sizes_[l]};
  }
  Eigen::Map<Eigen::RowVectorXd> bias(std::size_t l) {
    return {params_.data() + offsets_[l] + sizes_[l + 1] * sizes_[l], sizes_[l + 1]};
  }
  Eigen::Map<const Eigen::RowVectorXd> bias(std::size_t l) const {
    return {params_.data() + offsets_[l] + sizes_[l + 1] * sizes_[l], sizes_[l + 1]};
  }

  Tensor2 forward(const Tensor2& input, ForwardCache* cache = nullptr) const {
    if (input.cols() != input_size()) {
      throw ShapeMismatch("input has " + std::to_string(input.cols()) + " columns, network expects " +
                          std::to_string(input_size()));
    }
    require_finite(input, "network input");
    if (cache) {
      cache->activations.clear();
      cache->activations.reserve(layer_count() + 1);
      cache->activations.push_back(input);
    }
    Tensor2 a = input;
    for (std::size_t l = 0; l < layer_count(); ++l) {
      Tensor2 z = a * weight(l).transpose();
      z.rowwise() += bias(l);
      if (l + 1 < layer_count()) z = z.array().tanh().matrix();
      a = std::move(z);
      if (cache) cache->activations.push_back(a);
    }
    require_finite(a, "network output");
    return a;
  }

  /// Parameter gradient of sum(output_grad .* output) for the cached batch.
  ParamVector backward(const ForwardCache& cache, const Tensor2& output_grad) const {
    if (cache.activations.size() != layer_count() + 1) throw MissingCache("backward() called without a forward cache");
    const Tensor2& out = cache.activations.back();
    if (output_grad.rows() != out.rows() || output_grad.cols() != out.cols()) {
      throw ShapeMismatch("output gradient shape does not match the cached output");
    }
    ParamVector grad = ParamVector::Zero(params_.size());
    Tensor2 delta = output_grad;  // gradient w.r.t. the pre-activation of layer l
    for (std::size_t l = layer_count(); l-- > 0;) {
      const Tensor2& a_in = cache.activations[l];
      Eigen::Map<Tensor2> gw(grad.data() + offsets_[l], sizes_[l + 1], sizes_[l]);
      Eigen::Map<Eigen::RowVectorXd> gb(grad.data() + offsets_[l] + sizes_[l + 1] * sizes_[l], sizes_[l + 1]);
      gw.noalias() = delta.transpose() * a_in;
      gb = delta.colwise().sum();
      if (l > 0) {
        Tensor2 da = delta * weight(l);
        delta = (da.array() * (1.0 - a_in.array().square())).matrix();
      }
    }
    if (!grad.allFinite()) throw NonFinite("non-finite gradient");
    return grad;
  }

 private:
  std::vector<int> sizes_;
  std::vector<std::size_t> offsets_;
  ParamVector params_;
};

static_assert(Backbone<MlpNet>);

struct AdamState {
  ParamVector m;
  ParamVector v;
  long step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  explicit AdamState(std::size_t n = 0) : m(ParamVector::Zero(static_cast<Eigen::Index>(n))), v(m) {}
};

/// Clips the gradient to a global norm of max_grad_norm, then applies one
/// Adam update in place. Returns the gradient norm before clipping.
inline double adam_step(ParamVector& params, ParamVector grads, AdamState& state, double lr, double max_grad_norm) {
  if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeMismatch("adam_step: parameter, gradient and moment shapes differ");
  }
  if (!grads.allFinite()) throw NonFinite("non-finite gradient passed to adam_step");
  const double norm = grads.norm();
  if (max_grad_norm > 0.0 && norm > max_grad_norm) grads *= max_grad_norm / norm;
  ++state.step;
  state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads;
  state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads.cwiseProduct(grads);
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  params.array() -= lr * (state.m.array() / bc1) / ((state.v.array() / bc2).sqrt() + state.eps);
  return norm;
}

// --- serialization ---------------------------------------------------------

inline nlohmann::json to_json_vector(const ParamVector& v) {
  return nlohmann::json(std::vector<double>(v.data(), v.data() + v.size()));
}

inline ParamVector from_json_vector(const nlohmann::json& j) {
  const auto vals = j.get<std::vector<double>>();
  return Eigen::Map<const ParamVector>(vals.data(), static_cast<Eigen::Index>(vals.size()));
}

inline nlohmann::json net_to_json(const MlpNet& net) {
  return {{"layer_sizes", net.sizes()}, {"activation", "tanh"}, {"parameters", to_json_vector(net.parameters())}};
}

inline MlpNet net_from_json(const nlohmann::json& j) {
  MlpNet net(j.at("layer_sizes").get<std::vector<int>>());
  net.set_parameters(from_json_vector(j.at("parameters")));
  return net;
}

inline nlohmann::json adam_to_json(const AdamState& s) {
  return {{"step", s.step},   {"beta1", s.beta1}, {"beta2", s.beta2},
          {"eps", s.eps},     {"m", to_json_vector(s.m)}, {"v", to_json_vector(s.v)}};
}

inline AdamState adam_from_json(const nlohmann::json& j) {
  AdamState s;
  s.step = j.at("step").get<long>();
  s.beta1 = j.at("beta1").get<double>();
  s.beta2 = j.at("beta2").get<double>();
  s.eps = j.at("eps").get<double>();
  s.m = from_json_vector(j.at("m"));
  s.v = from_json_vector(j.at("v"));
  return s;
}

}  // namespace lanemoe
