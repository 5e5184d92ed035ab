#pragma once

// Minimal differentiable kernel for the encoder-decoder models: a parameter
// store with gradient slots, LSTM cell, dense layer, softplus, embeddings,
// inverted variational dropout masks, the training losses with analytic
// gradients, L2 penalty, global-norm clipping and Adam.
//
// Gradients are accumulated into a GradBuffer (one matrix per parameter,
// same order as the store) so that per-sequence gradients can be computed
// independently and reduced in a fixed order.

#include "uqseq/core.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace uqseq::seqnet {

using GradBuffer = std::vector<Matrix>;

inline constexpr int kCheckpointVersion = 1;

struct ParamEntry {
  std::string name;
  Matrix value;
  bool trainable = true;
};

class ParameterStore {
 public:
  std::size_t add(const std::string& name, Index rows, Index cols) {
    if (by_name_.contains(name)) fail(ErrorCode::InvalidArgument, "duplicate parameter name " + name);
    by_name_.emplace(name, entries_.size());
    entries_.push_back({name, Matrix::Zero(rows, cols), true});
    grads_.push_back(Matrix::Zero(rows, cols));
    return entries_.size() - 1;
  }

  std::size_t index(std::string_view name) const {
    const auto it = by_name_.find(std::string(name));
    if (it == by_name_.end()) fail(ErrorCode::InvalidArgument, "unknown parameter " + std::string(name));
    return it->second;
  }

  bool contains(std::string_view name) const { return by_name_.contains(std::string(name)); }
  std::size_t size() const { return entries_.size(); }

  const std::string& name(std::size_t i) const { return entries_[i].name; }
  Matrix& value(std::size_t i) { return entries_[i].value; }
  const Matrix& value(std::size_t i) const { return entries_[i].value; }
  Matrix& grad(std::size_t i) { return grads_[i]; }
  const Matrix& grad(std::size_t i) const { return grads_[i]; }
  bool trainable(std::size_t i) const { return entries_[i].trainable; }
  void set_trainable(std::size_t i, bool on) { entries_[i].trainable = on; }

  void set_all_trainable(bool on) {
    for (auto& e : entries_) e.trainable = on;
  }

  void zero_grad() {
    for (auto& g : grads_) g.setZero();
  }

  GradBuffer make_grad_buffer() const {
    GradBuffer b;
    b.reserve(entries_.size());
    for (const auto& e : entries_) b.push_back(Matrix::Zero(e.value.rows(), e.value.cols()));
    return b;
  }

  /// Adds a buffer into the gradient slots.
  void accumulate(const GradBuffer& b, double weight = 1.0) {
    for (std::size_t i = 0; i < grads_.size(); ++i) grads_[i] += weight * b[i];
  }

  std::vector<Matrix> snapshot() const {
    std::vector<Matrix> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.value);
    return out;
  }

  void restore(const std::vector<Matrix>& values) {
    if (values.size() != entries_.size()) fail(ErrorCode::ShapeMismatch, "snapshot size differs");
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      require_same_shape(values[i], entries_[i].value, "snapshot entry " + entries_[i].name);
      entries_[i].value = values[i];
    }
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += static_cast<std::size_t>(e.value.size());
    return n;
  }

  /// Versioned checkpoint: {version, step, names, shapes, values (row-major)}.
  nlohmann::json to_json() const {
    nlohmann::json j;
    j["version"] = kCheckpointVersion;
    j["step"] = step;
    j["names"] = nlohmann::json::array();
    j["shapes"] = nlohmann::json::array();
    j["values"] = nlohmann::json::array();
    for (const auto& e : entries_) {
      j["names"].push_back(e.name);
      j["shapes"].push_back({e.value.rows(), e.value.cols()});
      std::vector<double> flat;
      flat.reserve(static_cast<std::size_t>(e.value.size()));
      for (Index r = 0; r < e.value.rows(); ++r) {
        for (Index c = 0; c < e.value.cols(); ++c) flat.push_back(e.value(r, c));
      }
      j["values"].push_back(std::move(flat));
    }
    return j;
  }

  static ParameterStore from_json(const nlohmann::json& j) {
    if (j.at("version").get<int>() != kCheckpointVersion) {
      fail(ErrorCode::ConfigMismatch, "unsupported checkpoint version");
    }
    ParameterStore s;
    s.step = j.value("step", std::int64_t{0});
    const auto& names = j.at("names");
    const auto& shapes = j.at("shapes");
    const auto& values = j.at("values");
    if (names.size() != shapes.size() || names.size() != values.size()) {
      fail(ErrorCode::ShapeMismatch, "checkpoint arrays differ in length");
    }
    for (std::size_t i = 0; i < names.size(); ++i) {
      const Index rows = shapes[i].at(0).get<Index>();
      const Index cols = shapes[i].at(1).get<Index>();
      const auto idx = s.add(names[i].get<std::string>(), rows, cols);
      const auto flat = values[i].get<std::vector<double>>();
      if (static_cast<Index>(flat.size()) != rows * cols) fail(ErrorCode::ShapeMismatch, "value count differs");
      for (Index r = 0; r < rows; ++r) {
        for (Index c = 0; c < cols; ++c) s.value(idx)(r, c) = flat[static_cast<std::size_t>(r * cols + c)];
      }
    }
    return s;
  }

  /// Copies values by name from another store with identical layout.
  void load_values(const ParameterStore& other) {
    if (other.size() != size()) fail(ErrorCode::ConfigMismatch, "parameter count differs");
    for (std::size_t i = 0; i < size(); ++i) {
      const auto j = other.index(name(i));
      require_same_shape(other.value(j), value(i), "parameter " + name(i));
      value(i) = other.value(j);
    }
    step = other.step;
  }

  std::int64_t step = 0;

 private:
  std::vector<ParamEntry> entries_;
  GradBuffer grads_;
  std::unordered_map<std::string, std::size_t> by_name_;
};

inline bool bitwise_equal(const Matrix& a, const Matrix& b) {
  if (!same_shape(a, b)) return false;
  for (Index i = 0; i < a.size(); ++i) {
    if (std::bit_cast<std::uint64_t>(a.data()[i]) != std::bit_cast<std::uint64_t>(b.data()[i])) return false;
  }
  return true;
}

/// Uniform initialization in +-1/sqrt(fan_in).
inline void init_uniform(Matrix& m, Index fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<Index>(fan_in, 1)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (Index c = 0; c < m.cols(); ++c) {
    for (Index r = 0; r < m.rows(); ++r) m(r, c) = dist(rng);
  }
}

// ---------------------------------------------------------------- activations

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

/// d softplus / dx
inline double softplus_grad(double x) { return sigmoid(x); }

inline Vector softplus(const Vector& x) { return x.unaryExpr([](double v) { return softplus(v); }); }

// ---------------------------------------------------------------- dense

struct DenseLayer {
  std::size_t weight = 0;
  std::size_t bias = 0;
  Index input = 0;
  Index output = 0;

  static DenseLayer create(ParameterStore& store, const std::string& prefix, Index input, Index output,
                           std::mt19937_64& rng) {
    DenseLayer l{store.add(prefix + "/W", output, input), store.add(prefix + "/b", output, 1), input, output};
    init_uniform(store.value(l.weight), input, rng);
    return l;
  }
};

/// Affine map W x + b.
inline Vector dense_forward(const ParameterStore& store, const DenseLayer& layer, const Vector& x) {
  if (x.size() != layer.input) fail(ErrorCode::ShapeMismatch, "dense input size");
  return store.value(layer.weight) * x + store.value(layer.bias).col(0);
}

/// Accumulates dW, db and returns dx.
inline Vector dense_backward(const ParameterStore& store, const DenseLayer& layer, const Vector& x, const Vector& dy,
                             GradBuffer& grads) {
  grads[layer.weight].noalias() += dy * x.transpose();
  grads[layer.bias].col(0) += dy;
  return store.value(layer.weight).transpose() * dy;
}

// ---------------------------------------------------------------- embedding

struct Embedding {
  std::size_t table = 0;
  Index cardinality = 0;
  Index dim = 0;

  static Embedding create(ParameterStore& store, const std::string& name, Index cardinality, Index dim,
                          std::mt19937_64& rng) {
    Embedding e{store.add(name, cardinality, dim), cardinality, dim};
    init_uniform(store.value(e.table), dim, rng);
    return e;
  }
};

inline void check_index(const Embedding& e, Index index) {
  if (index < 0 || index >= e.cardinality) {
    fail(ErrorCode::IndexOutOfRange,
         "embedding index " + std::to_string(index) + " outside [0, " + std::to_string(e.cardinality) + ")");
  }
}

inline Vector embedding_lookup(const ParameterStore& store, const Embedding& e, Index index) {
  check_index(e, index);
  return store.value(e.table).row(index).transpose();
}

inline void embedding_backward(const Embedding& e, Index index, const Vector& dout, GradBuffer& grads) {
  check_index(e, index);
  grads[e.table].row(index) += dout.transpose();
}

// ---------------------------------------------------------------- dropout

struct DropoutRates {
  double input = 0.0;
  double state = 0.0;
  double output = 0.0;

  bool active() const { return input > 0.0 || state > 0.0 || output > 0.0; }
};

/// Inverted dropout mask: Bernoulli(1 - rate) keeps, scaled by 1 / (1 - rate).
inline Vector sample_dropout_mask(Index n, double rate, std::mt19937_64& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) fail(ErrorCode::RateOutOfRange, "dropout rate must be in [0, 1)");
  Vector m = Vector::Ones(n);
  if (rate == 0.0) return m;
  std::bernoulli_distribution keep(1.0 - rate);
  const double scale = 1.0 / (1.0 - rate);
  for (Index i = 0; i < n; ++i) m[i] = keep(rng) ? scale : 0.0;
  return m;
}

/// Masks of one LSTM layer for one sequence, reused at every time step.
struct LstmMask {
  Vector input;
  Vector state;
  Vector output;
};

inline LstmMask sample_variational_masks(Index input, Index hidden, const DropoutRates& rates, std::mt19937_64& rng) {
  LstmMask m;
  m.input = sample_dropout_mask(input, rates.input, rng);
  m.state = sample_dropout_mask(hidden, rates.state, rng);
  m.output = sample_dropout_mask(hidden, rates.output, rng);
  return m;
}

inline LstmMask sample_variational_masks(Index input, Index hidden, const DropoutRates& rates, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sample_variational_masks(input, hidden, rates, rng);
}

// ---------------------------------------------------------------- LSTM

struct LstmState {
  Vector h;
  Vector c;

  static LstmState zeros(Index hidden) { return {Vector::Zero(hidden), Vector::Zero(hidden)}; }
};

/// Standard non-peephole LSTM. Weight rows are gate blocks [i; f; g; o],
/// columns are [input | recurrent].
struct LstmLayer {
  std::size_t weight = 0;
  std::size_t bias = 0;
  Index input = 0;
  Index hidden = 0;

  static LstmLayer create(ParameterStore& store, const std::string& prefix, Index input, Index hidden,
                          std::mt19937_64& rng, double forget_bias = 1.0) {
    LstmLayer l{store.add(prefix + "/W", 4 * hidden, input + hidden), store.add(prefix + "/b", 4 * hidden, 1), input,
                hidden};
    init_uniform(store.value(l.weight), input + hidden, rng);
    store.value(l.bias).block(hidden, 0, hidden, 1).setConstant(forget_bias);
    return l;
  }
};

struct LstmStepCache {
  Vector xh;  // [masked x; masked h_prev]
  Vector c_prev;
  Vector i, f, g, o;
  Vector c;
  Vector tanh_c;
};

inline LstmState lstm_cell_forward(const ParameterStore& store, const LstmLayer& layer, const Vector& x,
                                   const LstmState& prev, const LstmMask* mask = nullptr,
                                   LstmStepCache* cache = nullptr) {
  const Index H = layer.hidden;
  if (x.size() != layer.input || prev.h.size() != H || prev.c.size() != H) {
    fail(ErrorCode::ShapeMismatch, "lstm input or state size");
  }
  Vector xh(layer.input + H);
  if (mask) {
    xh.head(layer.input) = x.cwiseProduct(mask->input);
    xh.tail(H) = prev.h.cwiseProduct(mask->state);
  } else {
    xh.head(layer.input) = x;
    xh.tail(H) = prev.h;
  }
  Vector a = store.value(layer.bias).col(0);
  a.noalias() += store.value(layer.weight) * xh;
  Vector i = a.segment(0, H).unaryExpr([](double v) { return sigmoid(v); });
  Vector f = a.segment(H, H).unaryExpr([](double v) { return sigmoid(v); });
  Vector g = a.segment(2 * H, H).array().tanh();
  Vector o = a.segment(3 * H, H).unaryExpr([](double v) { return sigmoid(v); });
  LstmState next;
  next.c = f.cwiseProduct(prev.c) + i.cwiseProduct(g);
  Vector tanh_c = next.c.array().tanh();
  next.h = o.cwiseProduct(tanh_c);
  if (cache) {
    cache->xh = std::move(xh);
    cache->c_prev = prev.c;
    cache->i = std::move(i);
    cache->f = std::move(f);
    cache->g = std::move(g);
    cache->o = std::move(o);
    cache->c = next.c;
    cache->tanh_c = std::move(tanh_c);
  }
  return next;
}

struct LstmStepGrads {
  Vector dx;
  Vector dh_prev;
  Vector dc_prev;
};

/// Backward through one step given dL/dh and dL/dc of the step's output state.
inline LstmStepGrads lstm_cell_backward(const ParameterStore& store, const LstmLayer& layer, const LstmStepCache& k,
                                        const Vector& dh, const Vector& dc, GradBuffer& grads,
                                        const LstmMask* mask = nullptr) {
  const Index H = layer.hidden;
  const Vector dc_total = dc + dh.cwiseProduct(k.o).cwiseProduct((1.0 - k.tanh_c.array().square()).matrix());
  Vector da(4 * H);
  da.segment(0, H) = dc_total.array() * k.g.array() * k.i.array() * (1.0 - k.i.array());
  da.segment(H, H) = dc_total.array() * k.c_prev.array() * k.f.array() * (1.0 - k.f.array());
  da.segment(2 * H, H) = dc_total.array() * k.i.array() * (1.0 - k.g.array().square());
  da.segment(3 * H, H) = dh.array() * k.tanh_c.array() * k.o.array() * (1.0 - k.o.array());
  grads[layer.weight].noalias() += da * k.xh.transpose();
  grads[layer.bias].col(0) += da;
  const Vector dxh = store.value(layer.weight).transpose() * da;
  LstmStepGrads out;
  out.dx = dxh.head(layer.input);
  out.dh_prev = dxh.tail(H);
  if (mask) {
    out.dx.array() *= mask->input.array();
    out.dh_prev.array() *= mask->state.array();
  }
  out.dc_prev = dc_total.cwiseProduct(k.f);
  return out;
}

// ---------------------------------------------------------------- losses

struct LossGrad {
  double value = 0.0;
  Matrix d_yhat;
};

/// Squared Frobenius norm sum((yhat - y)^2).
inline LossGrad loss_frobenius(const Matrix& yhat, const Matrix& y) {
  require_same_shape(yhat, y, "loss_frobenius");
  const Matrix diff = yhat - y;
  return {diff.squaredNorm(), 2.0 * diff};
}

inline ResidualTarget residual_target(const Matrix& yhat, const Matrix& y) {
  require_same_shape(yhat, y, "residual_target");
  ResidualTarget r;
  r.delta = yhat - y;
  r.z = r.delta.cwiseAbs();
  return r;
}

// sign with sign(0) = 0: the subgradient of |delta| at 0 is taken as 0.
inline double sign0(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

struct JointLoss {
  double value = 0.0;
  double base = 0.0;
  double meta = 0.0;
  Matrix d_yhat;
  Matrix d_zhat;
};

inline void require_beta(double beta) {
  if (!(beta >= 0.0 && beta <= 1.0)) fail(ErrorCode::BetaOutOfRange, "beta must be in [0, 1]");
}

/// beta * |yhat - y|_F^2 + (1 - beta) * |zhat - |yhat - y||_F^2.
inline JointLoss loss_joint(const Matrix& yhat, const Matrix& y, const Matrix& zhat, double beta) {
  require_beta(beta);
  require_same_shape(yhat, y, "loss_joint");
  require_same_shape(zhat, y, "loss_joint meta");
  JointLoss out;
  const Matrix delta = yhat - y;
  const Matrix meta_err = zhat - delta.cwiseAbs();
  out.base = delta.squaredNorm();
  out.meta = meta_err.squaredNorm();
  out.value = beta * out.base + (1.0 - beta) * out.meta;
  out.d_zhat = (2.0 * (1.0 - beta)) * meta_err;
  out.d_yhat = (2.0 * beta) * delta -
               (2.0 * (1.0 - beta)) * meta_err.cwiseProduct(delta.unaryExpr([](double v) { return sign0(v); }));
  return out;
}

struct AsymmetricLoss {
  double value = 0.0;
  Matrix d_zl;
  Matrix d_zu;
  Matrix d_delta;
};

/// |zl - max(delta, 0)|_F^2 + |zu - max(-delta, 0)|_F^2.
inline AsymmetricLoss loss_asymmetric(const Matrix& zl, const Matrix& zu, const Matrix& delta) {
  require_same_shape(zl, delta, "loss_asymmetric lower");
  require_same_shape(zu, delta, "loss_asymmetric upper");
  const Matrix lower_err = zl - delta.cwiseMax(0.0);
  const Matrix upper_err = zu - (-delta).cwiseMax(0.0);
  AsymmetricLoss out;
  out.value = lower_err.squaredNorm() + upper_err.squaredNorm();
  out.d_zl = 2.0 * lower_err;
  out.d_zu = 2.0 * upper_err;
  out.d_delta = Matrix(delta.rows(), delta.cols());
  for (Index i = 0; i < delta.size(); ++i) {
    const double d = delta.data()[i];
    out.d_delta.data()[i] = d > 0.0 ? -2.0 * lower_err.data()[i] : (d < 0.0 ? 2.0 * upper_err.data()[i] : 0.0);
  }
  return out;
}

struct JointAsymmetricLoss {
  double value = 0.0;
  double base = 0.0;
  double meta = 0.0;
  Matrix d_yhat;
  Matrix d_zl;
  Matrix d_zu;
};

/// beta * |yhat - y|_F^2 + (1 - beta) * asymmetric meta loss on delta = yhat - y.
inline JointAsymmetricLoss loss_joint_asymmetric(const Matrix& yhat, const Matrix& y, const Matrix& zl,
                                                 const Matrix& zu, double beta) {
  require_beta(beta);
  require_same_shape(yhat, y, "loss_joint_asymmetric");
  const Matrix delta = yhat - y;
  const auto meta = loss_asymmetric(zl, zu, delta);
  JointAsymmetricLoss out;
  out.base = delta.squaredNorm();
  out.meta = meta.value;
  out.value = beta * out.base + (1.0 - beta) * out.meta;
  out.d_yhat = (2.0 * beta) * delta + (1.0 - beta) * meta.d_delta;
  out.d_zl = (1.0 - beta) * meta.d_zl;
  out.d_zu = (1.0 - beta) * meta.d_zu;
  return out;
}

struct NllLoss {
  double value = 0.0;
  Matrix d_yhat;
  Matrix d_log_var;
};

/// sum((yhat - y)^2 / sigma^2 + log sigma^2) with sigma^2 = exp(log_var).
inline NllLoss loss_gaussian_nll(const Matrix& yhat, const Matrix& y, const Matrix& log_var) {
  require_same_shape(yhat, y, "loss_gaussian_nll");
  require_same_shape(log_var, y, "loss_gaussian_nll log_var");
  const Matrix delta = yhat - y;
  const Matrix inv_var = (-log_var.array()).exp().matrix();
  NllLoss out;
  out.value = (delta.array().square() * inv_var.array()).sum() + log_var.sum();
  out.d_yhat = 2.0 * delta.cwiseProduct(inv_var);
  out.d_log_var = (1.0 - delta.array().square() * inv_var.array()).matrix();
  return out;
}

/// coefficient * sum of squares over trainable parameters; adds the gradient
/// 2 * coefficient * w into `grads` when given.
inline double l2_penalty(const ParameterStore& store, double coefficient, GradBuffer* grads = nullptr) {
  if (coefficient < 0.0) fail(ErrorCode::InvalidArgument, "L2 coefficient must be >= 0");
  if (coefficient == 0.0) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < store.size(); ++i) {
    if (!store.trainable(i)) continue;
    total += store.value(i).squaredNorm();
    if (grads) (*grads)[i] += (2.0 * coefficient) * store.value(i);
  }
  return coefficient * total;
}

/// Same penalty, gradient written straight into the store's slots.
inline double l2_penalty_into_store(ParameterStore& store, double coefficient) {
  if (coefficient < 0.0) fail(ErrorCode::InvalidArgument, "L2 coefficient must be >= 0");
  double total = 0.0;
  for (std::size_t i = 0; i < store.size(); ++i) {
    if (!store.trainable(i) || coefficient == 0.0) continue;
    total += store.value(i).squaredNorm();
    store.grad(i) += (2.0 * coefficient) * store.value(i);
  }
  return coefficient * total;
}

// ---------------------------------------------------------------- optimizer

/// Rescales trainable gradients so their joint L2 norm is at most max_norm.
/// Returns the norm before clipping.
inline double clip_global_norm(ParameterStore& store, double max_norm) {
  double sq = 0.0;
  for (std::size_t i = 0; i < store.size(); ++i) {
    if (store.trainable(i)) sq += store.grad(i).squaredNorm();
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (std::size_t i = 0; i < store.size(); ++i) {
      if (store.trainable(i)) store.grad(i) *= f;
    }
  }
  return norm;
}

struct AdamConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  std::int64_t step = 0;

  AdamState(const ParameterStore& store, AdamConfig cfg) : config(cfg) {
    if (!(cfg.lr > 0.0)) fail(ErrorCode::InvalidArgument, "learning rate must be positive");
    for (std::size_t i = 0; i < store.size(); ++i) {
      m.push_back(Matrix::Zero(store.value(i).rows(), store.value(i).cols()));
      v.push_back(Matrix::Zero(store.value(i).rows(), store.value(i).cols()));
    }
  }
};

/// Bias-corrected Adam update of every trainable parameter; increments the
/// step counters and zeroes all gradients.
inline void adam_step(ParameterStore& store, AdamState& state) {
  if (state.m.size() != store.size()) fail(ErrorCode::ShapeMismatch, "optimizer state does not match store");
  ++state.step;
  ++store.step;
  const auto& c = state.config;
  const double corr1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double corr2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < store.size(); ++i) {
    if (!store.trainable(i)) continue;
    const Matrix& g = store.grad(i);
    state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * g;
    state.v[i] = c.beta2 * state.v[i] + (1.0 - c.beta2) * g.cwiseProduct(g);
    store.value(i).array() -=
        c.lr * (state.m[i].array() / corr1) / ((state.v[i].array() / corr2).sqrt() + c.epsilon);
  }
  store.zero_grad();
}

}  // namespace uqseq::seqnet
