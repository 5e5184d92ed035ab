#pragma once

// Encoder/decoder network with an optional meta decoder, the per-variant
// training recipes, prediction and model checkpoints.
//
// Network wiring per sequence:
//   encoder LSTM over embedded inputs x_1..x_N -> (h_N, c_N)
//   decoder LSTM initialized from (h_N, c_N), input at step t is the previous
//   output (zero at t = 0), dense head h_t -> yhat_t
//   meta LSTM initialized from a dense map of [h_N; c_N], input [yhat_t; h_t],
//   softplus head -> zhat_t (D rows, or 2D rows for lower/upper bands)
//   optional dense log-variance head h_t -> log sigma^2_t

#include "uqseq/core.hpp"
#include "uqseq/data.hpp"
#include "uqseq/parallel.hpp"
#include "uqseq/seqnet.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace uqseq {

// ---------------------------------------------------------------- variants

enum class Variant { jms, jma, wbms, bbms, jmv, doms, constant };

inline constexpr std::array<Variant, 7> kAllVariants{Variant::jms,  Variant::jma,  Variant::wbms,    Variant::bbms,
                                                      Variant::jmv, Variant::doms, Variant::constant};

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::jms: return "jms";
    case Variant::jma: return "jma";
    case Variant::wbms: return "wbms";
    case Variant::bbms: return "bbms";
    case Variant::jmv: return "jmv";
    case Variant::doms: return "doms";
    case Variant::constant: return "constant";
  }
  return "?";
}

inline Variant parse_variant(std::string_view name) {
  for (auto v : kAllVariants) {
    if (to_string(v) == name) return v;
  }
  fail(ErrorCode::UnknownVariant, "unknown variant '" + std::string(name) + "'");
}

inline bool has_meta_decoder(Variant v) { return v == Variant::jms || v == Variant::jma || v == Variant::wbms; }

// ---------------------------------------------------------------- configuration

/// Architecture and training hyperparameters. Defaults follow the published
/// settings; epoch caps, patience and clipping are practical controls.
struct ArchitectureConfig {
  std::vector<FeatureSpec> features;
  int output_dim = 1;
  int encoder_units = 32;
  int decoder_units = 32;
  int meta_units = 16;
  seqnet::DropoutRates dropout{0.25, 0.1, 0.25};
  int dropout_runs = 10;
  std::array<double, 3> betas{1.0, 0.5, 0.0};
  double lr_stage1 = 0.001;
  double lr_stage2 = 0.0002;
  double lr_phase = 0.0002;  // joint, meta-only and variance phases after stage 2
  int batch_size = 100;
  double l2 = 1e-4;
  double l2_dropout = 0.0;
  double clip_norm = 5.0;
  int max_epochs_stage = 100;
  int max_epochs_phase = 100;
  int patience_stage = 2;
  int patience_phase = 1;
  double min_rel_improvement = 1e-4;

  int input_dim() const { return total_input_dim(features); }

  void validate() const {
    auto positive = [](int v, const char* what) {
      if (v < 1) fail(ErrorCode::InvalidArgument, std::string(what) + " must be positive");
    };
    if (features.empty()) fail(ErrorCode::InvalidArgument, "at least one input feature is required");
    for (const auto& f : features) {
      if (f.is_categorical() && (f.cardinality < 1 || f.embed_dim < 1)) {
        fail(ErrorCode::InvalidArgument, "categorical feature '" + f.name + "' needs cardinality and embed_dim");
      }
    }
    positive(output_dim, "output_dim");
    positive(encoder_units, "encoder_units");
    positive(decoder_units, "decoder_units");
    positive(meta_units, "meta_units");
    positive(dropout_runs, "dropout_runs");
    positive(batch_size, "batch_size");
    positive(max_epochs_stage, "max_epochs_stage");
    positive(max_epochs_phase, "max_epochs_phase");
    if (encoder_units != decoder_units) {
      fail(ErrorCode::InvalidArgument, "decoder is initialized from the encoder state: unit counts must agree");
    }
    for (double b : betas) seqnet::require_beta(b);
    for (double r : {dropout.input, dropout.state, dropout.output}) {
      if (!(r >= 0.0 && r < 1.0)) fail(ErrorCode::RateOutOfRange, "dropout rate must be in [0, 1)");
    }
    if (!(lr_stage1 > 0 && lr_stage2 > 0 && lr_phase > 0)) fail(ErrorCode::InvalidArgument, "learning rates must be > 0");
    if (l2 < 0 || l2_dropout < 0) fail(ErrorCode::InvalidArgument, "L2 coefficients must be >= 0");
    if (patience_stage < 0 || patience_phase < 0) fail(ErrorCode::InvalidArgument, "patience must be >= 0");
  }
};

inline nlohmann::json to_json(const ArchitectureConfig& c) {
  auto features = nlohmann::json::array();
  for (const auto& f : c.features) features.push_back(to_json(f));
  return {{"features", features},
          {"output_dim", c.output_dim},
          {"encoder_units", c.encoder_units},
          {"decoder_units", c.decoder_units},
          {"meta_units", c.meta_units},
          {"dropout", {c.dropout.input, c.dropout.state, c.dropout.output}},
          {"dropout_runs", c.dropout_runs},
          {"betas", c.betas},
          {"lr_stage1", c.lr_stage1},
          {"lr_stage2", c.lr_stage2},
          {"lr_phase", c.lr_phase},
          {"batch_size", c.batch_size},
          {"l2", c.l2},
          {"l2_dropout", c.l2_dropout},
          {"clip_norm", c.clip_norm},
          {"max_epochs_stage", c.max_epochs_stage},
          {"max_epochs_phase", c.max_epochs_phase},
          {"patience_stage", c.patience_stage},
          {"patience_phase", c.patience_phase},
          {"min_rel_improvement", c.min_rel_improvement}};
}

/// Missing keys keep their defaults.
inline ArchitectureConfig architecture_from_json(const nlohmann::json& j, ArchitectureConfig c = {}) {
  if (j.contains("features")) {
    c.features.clear();
    for (const auto& f : j.at("features")) c.features.push_back(feature_from_json(f));
  }
  c.output_dim = j.value("output_dim", c.output_dim);
  c.encoder_units = j.value("encoder_units", c.encoder_units);
  c.decoder_units = j.value("decoder_units", c.decoder_units);
  c.meta_units = j.value("meta_units", c.meta_units);
  if (j.contains("dropout")) {
    const auto r = j.at("dropout").get<std::vector<double>>();
    if (r.size() != 3) fail(ErrorCode::InvalidArgument, "dropout needs three rates (input, state, output)");
    c.dropout = {r[0], r[1], r[2]};
  }
  c.dropout_runs = j.value("dropout_runs", c.dropout_runs);
  if (j.contains("betas")) c.betas = j.at("betas").get<std::array<double, 3>>();
  c.lr_stage1 = j.value("lr_stage1", c.lr_stage1);
  c.lr_stage2 = j.value("lr_stage2", c.lr_stage2);
  c.lr_phase = j.value("lr_phase", c.lr_phase);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.l2 = j.value("l2", c.l2);
  c.l2_dropout = j.value("l2_dropout", c.l2_dropout);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.max_epochs_stage = j.value("max_epochs_stage", c.max_epochs_stage);
  c.max_epochs_phase = j.value("max_epochs_phase", c.max_epochs_phase);
  c.patience_stage = j.value("patience_stage", c.patience_stage);
  c.patience_phase = j.value("patience_phase", c.patience_phase);
  c.min_rel_improvement = j.value("min_rel_improvement", c.min_rel_improvement);
  return c;
}

inline std::vector<FeatureSpec> real_features(std::size_t n) {
  std::vector<FeatureSpec> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(FeatureSpec::real("x" + std::to_string(i)));
  return out;
}

// ---------------------------------------------------------------- network

struct NetworkLayout {
  bool meta = false;
  bool asymmetric = false;    // meta head emits 2D rows
  bool log_variance = false;  // JMV head
  bool positive_output = false;  // softplus on the base head (residual network)
};

inline NetworkLayout layout_for(Variant v) {
  NetworkLayout l;
  l.meta = has_meta_decoder(v);
  l.asymmetric = v == Variant::jma;
  l.log_variance = v == Variant::jmv;
  return l;
}

/// Parameter handles into a ParameterStore.
struct Network {
  NetworkLayout layout;
  std::vector<FeatureSpec> features;
  std::vector<seqnet::Embedding> embeddings;  // one per feature; unused for real features
  Index output_dim = 0;
  seqnet::LstmLayer encoder;
  seqnet::LstmLayer decoder;
  seqnet::DenseLayer output;
  seqnet::DenseLayer context;  // meta only
  seqnet::LstmLayer meta;
  seqnet::DenseLayer meta_head;
  seqnet::DenseLayer log_var;  // JMV only
  std::vector<std::size_t> meta_parameters;
  std::vector<std::size_t> variance_parameters;

  Index meta_rows() const { return layout.asymmetric ? 2 * output_dim : output_dim; }

  static Network create(seqnet::ParameterStore& store, const ArchitectureConfig& cfg, NetworkLayout layout,
                        std::mt19937_64& rng) {
    cfg.validate();
    Network n;
    n.layout = layout;
    n.features = cfg.features;
    n.output_dim = cfg.output_dim;
    for (const auto& f : cfg.features) {
      n.embeddings.push_back(f.is_categorical()
                                 ? seqnet::Embedding::create(store, "embed/" + f.name, f.cardinality, f.embed_dim, rng)
                                 : seqnet::Embedding{});
    }
    const Index D = cfg.output_dim;
    n.encoder = seqnet::LstmLayer::create(store, "encoder", cfg.input_dim(), cfg.encoder_units, rng);
    n.decoder = seqnet::LstmLayer::create(store, "decoder", D, cfg.decoder_units, rng);
    n.output = seqnet::DenseLayer::create(store, "output", cfg.decoder_units, D, rng);
    if (layout.meta) {
      const auto first = store.size();
      n.context = seqnet::DenseLayer::create(store, "meta/context", 2 * cfg.encoder_units, 2 * cfg.meta_units, rng);
      n.meta = seqnet::LstmLayer::create(store, "meta/lstm", D + cfg.decoder_units, cfg.meta_units, rng);
      n.meta_head = seqnet::DenseLayer::create(store, "meta/head", cfg.meta_units, n.meta_rows(), rng);
      for (auto i = first; i < store.size(); ++i) n.meta_parameters.push_back(i);
    }
    if (layout.log_variance) {
      // Zero init: log sigma^2 = 0 until the variance phase frees it.
      n.log_var = seqnet::DenseLayer::create(store, "variance", cfg.decoder_units, D, rng);
      store.value(n.log_var.weight).setZero();
      n.variance_parameters = {n.log_var.weight, n.log_var.bias};
    }
    return n;
  }
};

enum class DecoderMode { teacher_forced, emulation };

struct DropoutMasks {
  seqnet::LstmMask encoder;
  seqnet::LstmMask decoder;
};

inline DropoutMasks sample_dropout_masks(const Network& net, const seqnet::DropoutRates& rates, std::mt19937_64& rng) {
  DropoutMasks m;
  m.encoder = seqnet::sample_variational_masks(net.encoder.input, net.encoder.hidden, rates, rng);
  m.decoder = seqnet::sample_variational_masks(net.decoder.input, net.decoder.hidden, rates, rng);
  return m;
}

struct ForwardOptions {
  DecoderMode mode = DecoderMode::teacher_forced;
  int observed_steps = 0;  // emulation only: leading steps that still see ground truth
  bool compute_meta = true;
  const DropoutMasks* masks = nullptr;
};

struct ForwardResult {
  Matrix yhat;                 // D x M
  Matrix meta;                 // D x M or 2D x M (softplus), empty without meta
  Matrix log_var;              // D x M, empty without variance head
  std::vector<seqnet::LstmState> decoder_states;

  Matrix z_lower() const { return meta.topRows(meta.rows() == 2 * yhat.rows() ? yhat.rows() : meta.rows()); }
  Matrix z_upper() const { return meta.bottomRows(meta.rows() == 2 * yhat.rows() ? yhat.rows() : meta.rows()); }
};

/// Everything the backward pass needs.
struct ForwardTrace {
  std::vector<Vector> encoder_inputs;
  std::vector<seqnet::LstmStepCache> encoder_steps;
  Vector context_input;  // [h_N (masked); c_N]
  std::vector<seqnet::LstmStepCache> decoder_steps;
  std::vector<Vector> decoder_head_inputs;  // h_t after the output mask
  std::vector<bool> fed_back;               // decoder input at t was yhat_{t-1}
  Matrix output_pre;
  std::vector<seqnet::LstmStepCache> meta_steps;
  std::vector<Vector> meta_hidden;
  Matrix meta_pre;
  bool meta_computed = false;
};

inline void check_sample(const Network& net, const SequenceSample& s) {
  if (s.inputs.cols() != static_cast<Index>(net.features.size())) {
    fail(ErrorCode::ConfigMismatch, "sample has " + std::to_string(s.inputs.cols()) + " feature columns, model expects " +
                                        std::to_string(net.features.size()));
  }
  if (s.targets.rows() != net.output_dim) {
    fail(ErrorCode::ConfigMismatch, "sample output dimension differs from the model");
  }
  if (s.inputs.rows() < 1 || s.targets.cols() < 1) fail(ErrorCode::ShapeMismatch, "empty sequence");
}

inline Index category_index(double value) { return static_cast<Index>(std::lround(value)); }

inline Vector embed_row(const seqnet::ParameterStore& store, const Network& net, const Matrix& inputs, Index t) {
  Vector x(net.encoder.input);
  Index at = 0;
  for (std::size_t f = 0; f < net.features.size(); ++f) {
    const auto fi = static_cast<Index>(f);
    if (net.features[f].is_categorical()) {
      const auto& e = net.embeddings[f];
      x.segment(at, e.dim) = seqnet::embedding_lookup(store, e, category_index(inputs(t, fi)));
      at += e.dim;
    } else {
      x[at++] = inputs(t, fi);
    }
  }
  return x;
}

inline ForwardResult forward_pass(const seqnet::ParameterStore& store, const Network& net, const SequenceSample& s,
                                  const ForwardOptions& opt = {}, ForwardTrace* trace = nullptr) {
  using namespace seqnet;
  check_sample(net, s);
  const Index N = s.inputs.rows();
  const Index M = s.targets.cols();
  const Index D = net.output_dim;
  const LstmMask* enc_mask = opt.masks ? &opt.masks->encoder : nullptr;
  const LstmMask* dec_mask = opt.masks ? &opt.masks->decoder : nullptr;
  if (trace) {
    trace->encoder_inputs.resize(static_cast<std::size_t>(N));
    trace->encoder_steps.resize(static_cast<std::size_t>(N));
    trace->decoder_steps.resize(static_cast<std::size_t>(M));
    trace->decoder_head_inputs.resize(static_cast<std::size_t>(M));
    trace->fed_back.assign(static_cast<std::size_t>(M), false);
    trace->output_pre.resize(D, M);
  }

  LstmState enc = LstmState::zeros(net.encoder.hidden);
  for (Index t = 0; t < N; ++t) {
    Vector x = embed_row(store, net, s.inputs, t);
    const auto ti = static_cast<std::size_t>(t);
    enc = lstm_cell_forward(store, net.encoder, x, enc, enc_mask, trace ? &trace->encoder_steps[ti] : nullptr);
    if (trace) trace->encoder_inputs[ti] = std::move(x);
  }
  LstmState init = enc;
  if (enc_mask) init.h = enc.h.cwiseProduct(enc_mask->output);

  ForwardResult r;
  r.yhat.resize(D, M);
  r.decoder_states.reserve(static_cast<std::size_t>(M));
  std::vector<Vector> head_inputs(static_cast<std::size_t>(M));
  if (net.layout.log_variance) r.log_var.resize(D, M);
  LstmState dec = init;
  for (Index t = 0; t < M; ++t) {
    const auto ti = static_cast<std::size_t>(t);
    Vector in = Vector::Zero(D);
    bool fed = false;
    if (t > 0) {
      fed = opt.mode == DecoderMode::emulation && (t - 1) >= opt.observed_steps;
      in = fed ? Vector(r.yhat.col(t - 1)) : Vector(s.targets.col(t - 1));
    }
    dec = lstm_cell_forward(store, net.decoder, in, dec, dec_mask, trace ? &trace->decoder_steps[ti] : nullptr);
    Vector h_out = dec_mask ? Vector(dec.h.cwiseProduct(dec_mask->output)) : dec.h;
    const Vector pre = dense_forward(store, net.output, h_out);
    r.yhat.col(t) = net.layout.positive_output ? softplus(pre) : pre;
    if (net.layout.log_variance) r.log_var.col(t) = dense_forward(store, net.log_var, h_out);
    if (trace) {
      trace->fed_back[ti] = fed;
      trace->output_pre.col(t) = pre;
    }
    head_inputs[ti] = std::move(h_out);
    r.decoder_states.push_back(dec);
  }

  if (net.layout.meta && opt.compute_meta) {
    const Index Hm = net.meta.hidden;
    Vector b(2 * init.h.size());
    b << init.h, init.c;
    const Vector ctx = dense_forward(store, net.context, b);
    LstmState m{ctx.head(Hm), ctx.tail(Hm)};
    r.meta.resize(net.meta_rows(), M);
    if (trace) {
      trace->context_input = b;
      trace->meta_steps.resize(static_cast<std::size_t>(M));
      trace->meta_hidden.resize(static_cast<std::size_t>(M));
      trace->meta_pre.resize(net.meta_rows(), M);
      trace->meta_computed = true;
    }
    for (Index t = 0; t < M; ++t) {
      const auto ti = static_cast<std::size_t>(t);
      Vector in(D + net.decoder.hidden);
      in << r.yhat.col(t), r.decoder_states[ti].h;
      m = lstm_cell_forward(store, net.meta, in, m, nullptr, trace ? &trace->meta_steps[ti] : nullptr);
      const Vector pre = dense_forward(store, net.meta_head, m.h);
      r.meta.col(t) = softplus(pre);
      if (trace) {
        trace->meta_hidden[ti] = m.h;
        trace->meta_pre.col(t) = pre;
      }
    }
  } else if (trace) {
    trace->meta_computed = false;
  }
  if (trace) trace->decoder_head_inputs = std::move(head_inputs);
  return r;
}

/// Loss gradients with respect to the forward outputs; empty matrices mean zero.
struct OutputGrads {
  Matrix d_yhat;
  Matrix d_meta;
  Matrix d_log_var;
};

inline void backward_pass(const seqnet::ParameterStore& store, const Network& net, const SequenceSample& s,
                          const ForwardTrace& trace, const OutputGrads& g, seqnet::GradBuffer& grads,
                          const DropoutMasks* masks = nullptr) {
  using namespace seqnet;
  const Index N = s.inputs.rows();
  const Index M = s.targets.cols();
  const Index D = net.output_dim;
  const Index H = net.decoder.hidden;
  const LstmMask* enc_mask = masks ? &masks->encoder : nullptr;
  const LstmMask* dec_mask = masks ? &masks->decoder : nullptr;

  Matrix dY = g.d_yhat.size() ? g.d_yhat : Matrix::Zero(D, M);
  std::vector<Vector> dh_meta(static_cast<std::size_t>(M), Vector::Zero(H));
  Vector d_init_h = Vector::Zero(net.encoder.hidden);
  Vector d_init_c = Vector::Zero(net.encoder.hidden);

  if (trace.meta_computed && g.d_meta.size()) {
    const Index Hm = net.meta.hidden;
    Vector dh = Vector::Zero(Hm);
    Vector dc = Vector::Zero(Hm);
    for (Index t = M - 1; t >= 0; --t) {
      const auto ti = static_cast<std::size_t>(t);
      const Vector dpre = g.d_meta.col(t).cwiseProduct(
          trace.meta_pre.col(t).unaryExpr([](double v) { return softplus_grad(v); }));
      dh += dense_backward(store, net.meta_head, trace.meta_hidden[ti], dpre, grads);
      const auto step = lstm_cell_backward(store, net.meta, trace.meta_steps[ti], dh, dc, grads);
      dY.col(t) += step.dx.head(D);
      dh_meta[ti] += step.dx.tail(H);
      dh = step.dh_prev;
      dc = step.dc_prev;
    }
    Vector dctx(2 * Hm);
    dctx << dh, dc;
    const Vector db = dense_backward(store, net.context, trace.context_input, dctx, grads);
    d_init_h += db.head(net.encoder.hidden);
    d_init_c += db.tail(net.encoder.hidden);
  }

  Vector dh = Vector::Zero(H);
  Vector dc = Vector::Zero(H);
  for (Index t = M - 1; t >= 0; --t) {
    const auto ti = static_cast<std::size_t>(t);
    Vector dpre = dY.col(t);
    if (net.layout.positive_output) {
      dpre.array() *= trace.output_pre.col(t).unaryExpr([](double v) { return softplus_grad(v); }).array();
    }
    Vector dh_out = dense_backward(store, net.output, trace.decoder_head_inputs[ti], dpre, grads);
    if (net.layout.log_variance && g.d_log_var.size()) {
      dh_out += dense_backward(store, net.log_var, trace.decoder_head_inputs[ti], g.d_log_var.col(t), grads);
    }
    if (dec_mask) dh_out.array() *= dec_mask->output.array();
    const Vector dh_total = dh + dh_out + dh_meta[ti];
    const auto step = lstm_cell_backward(store, net.decoder, trace.decoder_steps[ti], dh_total, dc, grads, dec_mask);
    if (trace.fed_back[ti]) dY.col(t - 1) += step.dx;
    dh = step.dh_prev;
    dc = step.dc_prev;
  }
  d_init_h += dh;
  d_init_c += dc;

  if (enc_mask) d_init_h.array() *= enc_mask->output.array();
  dh = d_init_h;
  dc = d_init_c;
  for (Index t = N - 1; t >= 0; --t) {
    const auto ti = static_cast<std::size_t>(t);
    const auto step = lstm_cell_backward(store, net.encoder, trace.encoder_steps[ti], dh, dc, grads, enc_mask);
    Index at = 0;
    for (std::size_t f = 0; f < net.features.size(); ++f) {
      if (net.features[f].is_categorical()) {
        const auto& e = net.embeddings[f];
        embedding_backward(e, category_index(s.inputs(t, static_cast<Index>(f))), step.dx.segment(at, e.dim), grads);
        at += e.dim;
      } else {
        ++at;
      }
    }
    dh = step.dh_prev;
    dc = step.dc_prev;
  }
}

// ---------------------------------------------------------------- objectives

enum class Objective { base, joint, joint_asymmetric, nll };

inline std::string to_string(Objective o) {
  switch (o) {
    case Objective::base: return "base";
    case Objective::joint: return "joint";
    case Objective::joint_asymmetric: return "joint_asymmetric";
    case Objective::nll: return "nll";
  }
  return "?";
}

struct SampleLoss {
  double value = 0.0;
  OutputGrads grads;
};

inline bool needs_meta(Objective o) { return o == Objective::joint || o == Objective::joint_asymmetric; }

inline SampleLoss evaluate_objective(Objective o, double beta, const ForwardResult& r, const Matrix& y) {
  SampleLoss out;
  switch (o) {
    case Objective::base: {
      auto l = seqnet::loss_frobenius(r.yhat, y);
      out.value = l.value;
      out.grads.d_yhat = std::move(l.d_yhat);
      break;
    }
    case Objective::joint: {
      auto l = seqnet::loss_joint(r.yhat, y, r.meta, beta);
      out.value = l.value;
      out.grads.d_yhat = std::move(l.d_yhat);
      out.grads.d_meta = std::move(l.d_zhat);
      break;
    }
    case Objective::joint_asymmetric: {
      const Index D = y.rows();
      auto l = seqnet::loss_joint_asymmetric(r.yhat, y, r.meta.topRows(D), r.meta.bottomRows(D), beta);
      out.value = l.value;
      out.grads.d_yhat = std::move(l.d_yhat);
      out.grads.d_meta.resize(2 * D, y.cols());
      out.grads.d_meta << l.d_zl, l.d_zu;
      break;
    }
    case Objective::nll: {
      auto l = seqnet::loss_gaussian_nll(r.yhat, y, r.log_var);
      out.value = l.value;
      out.grads.d_yhat = std::move(l.d_yhat);
      out.grads.d_log_var = std::move(l.d_log_var);
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------- training

/// Tracks a monitored loss; improvement needs a relative gain of min_rel.
class EarlyStopping {
 public:
  EarlyStopping(double baseline, int patience, double min_rel)
      : best_(baseline), patience_(patience), min_rel_(min_rel) {}

  /// Returns true when `loss` is a new best.
  bool update(double loss) {
    if (loss < best_ - min_rel_ * std::abs(best_)) {
      best_ = loss;
      bad_ = 0;
      return true;
    }
    ++bad_;
    return false;
  }

  bool should_stop() const { return bad_ > patience_; }
  double best() const { return best_; }

 private:
  double best_;
  int patience_;
  double min_rel_;
  int bad_ = 0;
};

struct EpochRecord {
  std::string phase;
  double beta = 1.0;
  int epoch = 0;
  double train_loss = 0.0;
  double monitor_loss = 0.0;
  bool improved = false;
};

inline nlohmann::json to_json(const EpochRecord& e) {
  return {{"phase", e.phase},           {"beta", e.beta},
          {"epoch", e.epoch},           {"train_loss", e.train_loss},
          {"monitor_loss", e.monitor_loss}, {"improved", e.improved}};
}

inline EpochRecord epoch_from_json(const nlohmann::json& j) {
  return {j.at("phase").get<std::string>(), j.at("beta").get<double>(), j.at("epoch").get<int>(),
          j.at("train_loss").get<double>(), j.at("monitor_loss").get<double>(), j.at("improved").get<bool>()};
}

struct PhaseSpec {
  std::string name;
  Objective objective = Objective::base;
  double beta = 1.0;
  DecoderMode mode = DecoderMode::teacher_forced;
  double lr = 0.001;
  int max_epochs = 100;
  int patience = 2;
  double l2 = 0.0;
  bool dropout = false;
  const std::vector<SequenceSample>* train = nullptr;
  const std::vector<SequenceSample>* monitor = nullptr;
};

struct PhaseResult {
  std::vector<EpochRecord> epochs;
  double baseline = 0.0;
  double best = 0.0;
};

/// Shared state of one training run: parameters, network, RNG and settings.
struct Trainer {
  seqnet::ParameterStore* store = nullptr;
  const Network* net = nullptr;
  const ArchitectureConfig* cfg = nullptr;
  std::mt19937_64 rng;
  std::ostream* progress = nullptr;

  ForwardOptions options_for(const PhaseSpec& p, const SequenceSample& s) const {
    ForwardOptions o;
    o.mode = p.mode;
    o.observed_steps = s.observed_steps;
    o.compute_meta = needs_meta(p.objective);
    return o;
  }

  /// Mean per-sequence objective without dropout.
  double monitor_loss(const PhaseSpec& p, const std::vector<SequenceSample>& data) const {
    std::vector<double> losses(data.size());
    parallel_for(data.size(), [&](std::size_t i) {
      const auto r = forward_pass(*store, *net, data[i], options_for(p, data[i]));
      losses[i] = evaluate_objective(p.objective, p.beta, r, data[i].targets).value;
    });
    return std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(data.size());
  }

  PhaseResult run(const PhaseSpec& p) {
    if (!p.train || p.train->empty()) fail(ErrorCode::EmptyTrainingSet, "phase '" + p.name + "' has no training data");
    if (!p.monitor || p.monitor->empty()) fail(ErrorCode::EmptyTrainingSet, "phase '" + p.name + "' has no monitor data");
    const auto& data = *p.train;
    const std::size_t B = static_cast<std::size_t>(cfg->batch_size);
    seqnet::AdamState adam(*store, {p.lr, 0.9, 0.999, 1e-8});
    store->zero_grad();

    PhaseResult result;
    result.baseline = monitor_loss(p, *p.monitor);
    EarlyStopping stopper(result.baseline, p.patience, cfg->min_rel_improvement);
    auto best = store->snapshot();
    if (progress) *progress << p.name << ": baseline monitor loss " << result.baseline << '\n';

    std::vector<seqnet::GradBuffer> buffers(std::min(B, data.size()));
    for (auto& b : buffers) b = store->make_grad_buffer();
    std::vector<double> losses(buffers.size());
    std::vector<std::uint64_t> mask_seeds(buffers.size());
    std::vector<std::size_t> order(data.size());

    for (int epoch = 1; epoch <= p.max_epochs; ++epoch) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::shuffle(order.begin(), order.end(), rng);
      double epoch_loss = 0.0;
      for (std::size_t start = 0; start < data.size(); start += B) {
        const std::size_t count = std::min(B, data.size() - start);
        for (std::size_t k = 0; k < count; ++k) mask_seeds[k] = rng();
        parallel_for(count, [&](std::size_t k) {
          const auto& s = data[order[start + k]];
          auto& buf = buffers[k];
          for (auto& m : buf) m.setZero();
          std::optional<DropoutMasks> masks;
          auto opt = options_for(p, s);
          if (p.dropout) {
            std::mt19937_64 mask_rng(mask_seeds[k]);
            masks = sample_dropout_masks(*net, cfg->dropout, mask_rng);
            opt.masks = &*masks;
          }
          ForwardTrace trace;
          const auto r = forward_pass(*store, *net, s, opt, &trace);
          const auto l = evaluate_objective(p.objective, p.beta, r, s.targets);
          losses[k] = l.value;
          backward_pass(*store, *net, s, trace, l.grads, buf, opt.masks);
        });
        // Fixed-order reduction keeps updates independent of the thread count.
        const double w = 1.0 / static_cast<double>(count);
        for (std::size_t k = 0; k < count; ++k) {
          store->accumulate(buffers[k], w);
          epoch_loss += losses[k];
        }
        seqnet::l2_penalty_into_store(*store, p.l2);
        seqnet::clip_global_norm(*store, cfg->clip_norm);
        seqnet::adam_step(*store, adam);
      }
      EpochRecord rec;
      rec.phase = p.name;
      rec.beta = p.beta;
      rec.epoch = epoch;
      rec.train_loss = epoch_loss / static_cast<double>(data.size());
      rec.monitor_loss = monitor_loss(p, *p.monitor);
      rec.improved = stopper.update(rec.monitor_loss);
      if (rec.improved) best = store->snapshot();
      if (progress) {
        *progress << p.name << ": epoch " << epoch << " train " << rec.train_loss << " monitor " << rec.monitor_loss
                  << (rec.improved ? " *" : "") << '\n';
      }
      result.epochs.push_back(rec);
      if (stopper.should_stop()) break;
    }
    store->restore(best);
    result.best = stopper.best();
    return result;
  }
};

// ---------------------------------------------------------------- trained model

/// A trained system: variant, parameters, configuration, statistics and log.
/// BBMS keeps its residual network in `residual_params`.
struct TrainedModel {
  Variant variant = Variant::constant;
  ArchitectureConfig arch;
  Standardization input_stats;
  Standardization output_stats;
  seqnet::ParameterStore params;
  seqnet::ParameterStore residual_params;
  Network network;
  Network residual_network;
  std::vector<EpochRecord> log;
  std::uint64_t seed = 0;

  bool has_network() const { return variant != Variant::constant; }
};

inline NetworkLayout residual_layout() {
  NetworkLayout l;
  l.positive_output = true;
  return l;
}

/// Fresh model with initialized parameters.
inline TrainedModel make_model(Variant variant, const ArchitectureConfig& arch, const SplitDataset& data,
                               std::uint64_t seed) {
  TrainedModel m;
  m.variant = variant;
  m.arch = arch;
  m.input_stats = data.input_stats;
  m.output_stats = data.output_stats;
  m.seed = seed;
  arch.validate();
  if (variant == Variant::constant) return m;
  std::mt19937_64 rng(seed);
  m.network = Network::create(m.params, arch, layout_for(variant), rng);
  if (variant == Variant::bbms) m.residual_network = Network::create(m.residual_params, arch, residual_layout(), rng);
  return m;
}

/// Teacher-forced stage on TRAIN with DEV early stopping.
inline PhaseResult train_stage1(Trainer& tr, const std::vector<SequenceSample>& train,
                                const std::vector<SequenceSample>& dev, Objective objective = Objective::base,
                                bool dropout = false, double l2 = -1.0) {
  const auto& c = *tr.cfg;
  PhaseSpec p;
  p.name = "stage1";
  p.objective = objective;
  p.beta = c.betas[0];
  p.mode = DecoderMode::teacher_forced;
  p.lr = c.lr_stage1;
  p.max_epochs = c.max_epochs_stage;
  p.patience = c.patience_stage;
  p.l2 = l2 < 0.0 ? c.l2 : l2;
  p.dropout = dropout;
  p.train = &train;
  p.monitor = &dev;
  return tr.run(p);
}

/// Emulation stage: the decoder consumes its own previous output after each
/// sample's observed prefix.
inline PhaseResult train_stage2(Trainer& tr, const std::vector<SequenceSample>& train,
                                const std::vector<SequenceSample>& dev, Objective objective = Objective::base,
                                bool dropout = false, double l2 = -1.0) {
  const auto& c = *tr.cfg;
  PhaseSpec p;
  p.name = "stage2";
  p.objective = objective;
  p.beta = c.betas[0];
  p.mode = DecoderMode::emulation;
  p.lr = c.lr_stage2;
  p.max_epochs = c.max_epochs_stage;
  p.patience = c.patience_stage;
  p.l2 = l2 < 0.0 ? c.l2 : l2;
  p.dropout = dropout;
  p.train = &train;
  p.monitor = &dev;
  return tr.run(p);
}

namespace detail {

inline void set_trainable(seqnet::ParameterStore& store, std::span<const std::size_t> ids, bool on) {
  for (auto i : ids) store.set_trainable(i, on);
}

inline void append(std::vector<EpochRecord>& log, const PhaseResult& r) {
  log.insert(log.end(), r.epochs.begin(), r.epochs.end());
}

inline PhaseSpec joint_phase(const ArchitectureConfig& c, std::string name, Objective o, double beta,
                             const std::vector<SequenceSample>& train, const std::vector<SequenceSample>& monitor) {
  PhaseSpec p;
  p.name = std::move(name);
  p.objective = o;
  p.beta = beta;
  p.mode = DecoderMode::emulation;
  p.lr = c.lr_phase;
  p.max_epochs = c.max_epochs_phase;
  p.patience = c.patience_phase;
  p.l2 = c.l2;
  p.train = &train;
  p.monitor = &monitor;
  return p;
}

/// Residual-magnitude samples |yhat - y| (standardized units) for a base network.
inline std::vector<SequenceSample> residual_samples(const seqnet::ParameterStore& store, const Network& net,
                                                    const std::vector<SequenceSample>& data) {
  std::vector<SequenceSample> out(data.size());
  parallel_for(data.size(), [&](std::size_t i) {
    ForwardOptions o;
    o.mode = DecoderMode::emulation;
    o.observed_steps = data[i].observed_steps;
    o.compute_meta = false;
    const auto r = forward_pass(store, net, data[i], o);
    out[i] = {data[i].inputs, (r.yhat - data[i].targets).cwiseAbs(), data[i].observed_steps};
  });
  return out;
}

}  // namespace detail

/// Runs the full schedule of a variant on standardized data.
inline TrainedModel train_variant(Variant variant, const SplitDataset& data, const ArchitectureConfig& arch,
                                  std::uint64_t seed, std::ostream* progress = nullptr) {
  TrainedModel m = make_model(variant, arch, data, seed);
  if (variant == Variant::constant) return m;
  if (data.train.empty()) fail(ErrorCode::EmptyTrainingSet, "training split is empty");
  if (data.dev.empty()) fail(ErrorCode::EmptyTrainingSet, "DEV split is empty");

  Trainer tr;
  tr.store = &m.params;
  tr.net = &m.network;
  tr.cfg = &m.arch;
  tr.rng.seed(seed ^ 0x9e3779b97f4a7c15ULL);
  tr.progress = progress;
  const auto& c = m.arch;
  auto& store = m.params;

  const bool dropout = variant == Variant::doms;
  const double l2 = dropout ? c.l2_dropout : c.l2;
  const Objective stage_objective = variant == Variant::jmv ? Objective::nll : Objective::base;

  // Stages 1-2 at beta = 1: meta and variance parameters stay frozen.
  store.set_all_trainable(true);
  detail::set_trainable(store, m.network.meta_parameters, false);
  detail::set_trainable(store, m.network.variance_parameters, false);
  detail::append(m.log, train_stage1(tr, data.train, data.dev, stage_objective, dropout, l2));
  detail::append(m.log, train_stage2(tr, data.train, data.dev, stage_objective, dropout, l2));

  switch (variant) {
    case Variant::jms:
    case Variant::jma: {
      const auto o = variant == Variant::jma ? Objective::joint_asymmetric : Objective::joint;
      store.set_all_trainable(true);
      detail::append(m.log, tr.run(detail::joint_phase(c, "joint", o, c.betas[1], data.train, data.dev)));
      detail::append(m.log, tr.run(detail::joint_phase(c, "meta", o, c.betas[2], data.dev, data.train)));
      break;
    }
    case Variant::wbms: {
      store.set_all_trainable(false);
      detail::set_trainable(store, m.network.meta_parameters, true);
      detail::append(m.log, tr.run(detail::joint_phase(c, "meta", Objective::joint, c.betas[2], data.dev, data.train)));
      break;
    }
    case Variant::jmv: {
      store.set_all_trainable(true);
      auto p = detail::joint_phase(c, "variance", Objective::nll, 1.0, data.train, data.dev);
      p.patience = c.patience_stage;
      detail::append(m.log, tr.run(p));
      break;
    }
    case Variant::bbms: {
      const auto z_dev = detail::residual_samples(store, m.network, data.dev);
      const auto z_train = detail::residual_samples(store, m.network, data.train);
      Trainer rt;
      rt.store = &m.residual_params;
      rt.net = &m.residual_network;
      rt.cfg = &m.arch;
      rt.rng = tr.rng;
      rt.progress = progress;
      auto s1 = train_stage1(rt, z_dev, z_train);
      auto s2 = train_stage2(rt, z_dev, z_train);
      for (auto* r : {&s1, &s2}) {
        for (auto& e : r->epochs) e.phase = "residual_" + e.phase;
        detail::append(m.log, *r);
      }
      break;
    }
    case Variant::doms:
    case Variant::constant: break;
  }
  store.set_all_trainable(true);
  return m;
}

// ---------------------------------------------------------------- prediction

struct PredictOptions {
  int runs = 1;
  std::uint64_t seed = 0;
  std::optional<int> observed_steps;  // overrides the sample's prefix (0 for drift)
};

/// Mean and population standard deviation over runs, computed relative to the
/// first run so identical runs give that run exactly and a zero deviation.
inline std::pair<Matrix, Matrix> run_statistics(std::span<const Matrix> runs) {
  if (runs.empty()) fail(ErrorCode::InvalidArgument, "no runs");
  const Matrix& ref = runs.front();
  const double R = static_cast<double>(runs.size());
  Matrix shift = Matrix::Zero(ref.rows(), ref.cols());
  for (const auto& r : runs) shift += r - ref;
  Matrix mean = ref + shift / R;
  Matrix var = Matrix::Zero(ref.rows(), ref.cols());
  for (const auto& r : runs) var.array() += (r - mean).array().square();
  return {std::move(mean), (var / R).cwiseSqrt()};
}

/// Prediction in output units for one standardized sample.
inline BoundedPrediction predict(const TrainedModel& model, const SequenceSample& sample,
                                 const PredictOptions& opt = {}) {
  if (opt.runs < 1) fail(ErrorCode::InvalidArgument, "runs must be >= 1");
  if (opt.runs > 1 && model.variant != Variant::doms) {
    fail(ErrorCode::RunsForNonDropoutVariant, "multiple runs only apply to the dropout variant");
  }
  const Index D = sample.targets.rows();
  const Index M = sample.targets.cols();
  if (D != model.arch.output_dim) fail(ErrorCode::ConfigMismatch, "sample output dimension differs from the model");
  const auto& stats = model.output_stats;

  if (model.variant == Variant::constant) {
    // Training mean (0 in standardized units) with unit bands in output units.
    const Matrix ones = Matrix::Ones(D, M);
    return BoundedPrediction::symmetric(restore_units(Matrix::Zero(D, M), stats), ones);
  }

  ForwardOptions fo;
  fo.mode = DecoderMode::emulation;
  fo.observed_steps = opt.observed_steps.value_or(sample.observed_steps);
  if (fo.observed_steps < 0 || fo.observed_steps > M) fail(ErrorCode::InvalidArgument, "observed_steps outside [0, M]");

  switch (model.variant) {
    case Variant::doms: {
      std::mt19937_64 rng(opt.seed);
      std::vector<Matrix> runs;
      for (int k = 0; k < opt.runs; ++k) {
        const auto masks = sample_dropout_masks(model.network, model.arch.dropout, rng);
        auto o = fo;
        o.masks = &masks;
        runs.push_back(forward_pass(model.params, model.network, sample, o).yhat);
      }
      auto [mean, sd] = run_statistics(runs);
      return BoundedPrediction::symmetric(restore_units(mean, stats), restore_band_units(sd, stats));
    }
    case Variant::jmv: {
      const auto r = forward_pass(model.params, model.network, sample, fo);
      const Matrix sigma = (0.5 * r.log_var.array()).exp().matrix();
      return BoundedPrediction::symmetric(restore_units(r.yhat, stats), restore_band_units(sigma, stats));
    }
    case Variant::bbms: {
      const auto r = forward_pass(model.params, model.network, sample, fo);
      SequenceSample zs{sample.inputs, (r.yhat - sample.targets).cwiseAbs(), fo.observed_steps};
      const auto z = forward_pass(model.residual_params, model.residual_network, zs, fo);
      return BoundedPrediction::symmetric(restore_units(r.yhat, stats), restore_band_units(z.yhat, stats));
    }
    case Variant::jma: {
      const auto r = forward_pass(model.params, model.network, sample, fo);
      return {restore_units(r.yhat, stats), restore_band_units(r.meta.topRows(D), stats),
              restore_band_units(r.meta.bottomRows(D), stats)};
    }
    default: {
      const auto r = forward_pass(model.params, model.network, sample, fo);
      return BoundedPrediction::symmetric(restore_units(r.yhat, stats), restore_band_units(r.meta, stats));
    }
  }
}

inline PredictOptions default_predict_options(const TrainedModel& model, std::uint64_t seed = 0) {
  PredictOptions o;
  o.seed = seed;
  if (model.variant == Variant::doms) o.runs = model.arch.dropout_runs;
  return o;
}

inline std::vector<BoundedPrediction> predict_all(const TrainedModel& model, std::span<const SequenceSample> samples,
                                                  const PredictOptions& opt = {}) {
  std::vector<BoundedPrediction> out(samples.size());
  parallel_for(samples.size(), [&](std::size_t i) {
    auto o = opt;
    o.seed = opt.seed + i;  // independent dropout stream per sequence
    out[i] = predict(model, samples[i], o);
  });
  return out;
}

/// Observations in output units.
inline std::vector<Matrix> observations(const TrainedModel& model, std::span<const SequenceSample> samples) {
  std::vector<Matrix> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(restore_units(s.targets, model.output_stats));
  return out;
}

/// Unit bands around an existing base prediction.
inline BoundedPrediction constant_band(const BoundedPrediction& p) {
  const Matrix ones = Matrix::Ones(p.rows(), p.cols());
  return BoundedPrediction::symmetric(p.yhat, ones);
}

// ---------------------------------------------------------------- orientation

struct OrientationResult {
  double accuracy = 0.0;
  std::size_t counted = 0;   // pairs with |delta| > floor and distinct bands
  std::size_t agreeing = 0;
  std::size_t ties = 0;      // pairs above the floor with z_lower == z_upper
  std::size_t filtered = 0;  // pairs at or below the floor
};

/// Fraction of (d, t) where the dominant band side matches the sign of the
/// base deviation delta = yhat - y: z_lower > z_upper iff delta > 0.
inline OrientationResult orientation_accuracy(std::span<const BoundedPrediction> preds, std::span<const Matrix> ys,
                                              double noise_floor = 0.0) {
  if (preds.size() != ys.size()) fail(ErrorCode::LengthMismatch, "one observation per prediction");
  OrientationResult r;
  for (std::size_t k = 0; k < preds.size(); ++k) {
    const auto& p = preds[k];
    if (p.is_symmetric()) fail(ErrorCode::SymmetricInput, "orientation needs asymmetric bands");
    require_valid(p, ys[k]);
    for (Index i = 0; i < p.yhat.size(); ++i) {
      const double delta = p.yhat.data()[i] - ys[k].data()[i];
      if (!(std::abs(delta) > noise_floor)) {
        ++r.filtered;
        continue;
      }
      const double zl = p.z_lower.data()[i];
      const double zu = p.z_upper.data()[i];
      if (zl == zu) {
        ++r.ties;
        continue;
      }
      ++r.counted;
      if ((zl > zu) == (delta > 0.0)) ++r.agreeing;
    }
  }
  r.accuracy = r.counted ? static_cast<double>(r.agreeing) / static_cast<double>(r.counted) : 0.0;
  return r;
}

// ---------------------------------------------------------------- checkpoints

inline nlohmann::json to_json(const TrainedModel& m) {
  auto log = nlohmann::json::array();
  for (const auto& e : m.log) log.push_back(to_json(e));
  nlohmann::json j{{"format", "uqseq-model"},
                   {"variant", to_string(m.variant)},
                   {"seed", m.seed},
                   {"architecture", to_json(m.arch)},
                   {"input_stats", to_json(m.input_stats)},
                   {"output_stats", to_json(m.output_stats)},
                   {"parameters", m.params.to_json()},
                   {"log", log}};
  if (m.variant == Variant::bbms) j["residual_parameters"] = m.residual_params.to_json();
  return j;
}

/// Rebuilds the network layout from the configuration and loads the stored
/// values into it, so layout drift is caught as ConfigMismatch.
inline TrainedModel model_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "uqseq-model") fail(ErrorCode::ConfigMismatch, "not a model checkpoint");
  SplitDataset stats;
  stats.input_stats = standardization_from_json(j.at("input_stats"));
  stats.output_stats = standardization_from_json(j.at("output_stats"));
  const auto variant = parse_variant(j.at("variant").get<std::string>());
  auto m = make_model(variant, architecture_from_json(j.at("architecture")), stats, j.at("seed").get<std::uint64_t>());
  if (m.has_network()) {
    m.params.load_values(seqnet::ParameterStore::from_json(j.at("parameters")));
    if (variant == Variant::bbms) {
      m.residual_params.load_values(seqnet::ParameterStore::from_json(j.at("residual_parameters")));
    }
  } else if (!j.at("parameters").at("names").empty()) {
    fail(ErrorCode::ConfigMismatch, "constant model carries parameters");
  }
  for (const auto& e : j.at("log")) m.log.push_back(epoch_from_json(e));
  return m;
}

inline void save_model(const TrainedModel& m, const std::string& path) {
  std::ofstream os(path);
  if (!os) fail(ErrorCode::Io, "cannot write " + path);
  os << to_json(m).dump() << '\n';
}

inline TrainedModel load_model(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail(ErrorCode::Io, "cannot open " + path);
  return model_from_json(nlohmann::json::parse(is));
}

}  // namespace uqseq
