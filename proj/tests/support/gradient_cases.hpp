#pragma once

// Central finite-difference checks of every analytic gradient, on small
// random configurations. Inputs that need gradients are stored as parameters
// so one checker covers both.

#include "uqseq/models.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>

namespace uqseq::checks {

using seqnet::GradBuffer;
using seqnet::ParameterStore;

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst;
};

// Gradients far below the floor are compared in absolute terms: at step 1e-5
// central differences carry about 1e-10 of round-off.
inline constexpr double kRelativeFloor = 1e-5;

inline double rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({kRelativeFloor, std::abs(analytic), std::abs(numeric)});
}

inline GradCheck finite_difference_check(ParameterStore& store, const std::function<double()>& loss,
                                         const GradBuffer& analytic, double h = 1e-5) {
  GradCheck out;
  for (std::size_t i = 0; i < store.size(); ++i) {
    if (!store.trainable(i)) continue;
    Matrix& v = store.value(i);
    for (Index k = 0; k < v.size(); ++k) {
      const double saved = v.data()[k];
      v.data()[k] = saved + h;
      const double up = loss();
      v.data()[k] = saved - h;
      const double down = loss();
      v.data()[k] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double e = rel_error(analytic[i].data()[k], numeric);
      ++out.checked;
      if (e > out.max_rel_error) {
        out.max_rel_error = e;
        out.worst = store.name(i) + "[" + std::to_string(k) + "]";
      }
    }
  }
  return out;
}

template <typename Dense>
inline void fill_normal(Dense& m, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  for (Index k = 0; k < m.size(); ++k) m.data()[k] = n(rng);
}

inline Index draw(std::mt19937_64& rng, Index lo, Index hi) {
  return std::uniform_int_distribution<Index>(lo, hi)(rng);
}

// Keeps |x| >= gap so kinks of |.| and max(., 0) stay out of the stencil.
inline void push_from_zero(Matrix& m, double gap) {
  for (Index k = 0; k < m.size(); ++k) {
    double& x = m.data()[k];
    if (std::abs(x) < gap) x = x < 0.0 ? x - gap : x + gap;
  }
}

/// Unrolled LSTM over T steps, optionally with variational masks; the loss
/// is linear in every h_t plus a quadratic term in the final cell state.
inline GradCheck lstm_case(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Index in = draw(rng, 1, 4), H = draw(rng, 1, 6), T = draw(rng, 1, 5);
  ParameterStore store;
  const auto layer = seqnet::LstmLayer::create(store, "lstm", in, H, rng);
  const auto xs = store.add("x", in, T);
  const auto h0 = store.add("h0", H, 1);
  const auto c0 = store.add("c0", H, 1);
  fill_normal(store.value(xs), rng);
  fill_normal(store.value(h0), rng, 0.5);
  fill_normal(store.value(c0), rng, 0.5);
  fill_normal(store.value(layer.bias), rng, 0.5);
  Matrix wh(H, T);
  fill_normal(wh, rng);
  Vector wc(H);
  fill_normal(wc, rng);
  const bool masked = seed % 2 == 1;
  seqnet::LstmMask mask = seqnet::sample_variational_masks(in, H, seqnet::DropoutRates{0.3, 0.3, 0.3}, rng);
  const seqnet::LstmMask* mp = masked ? &mask : nullptr;

  auto run = [&](std::vector<seqnet::LstmStepCache>* caches) {
    seqnet::LstmState s{store.value(h0).col(0), store.value(c0).col(0)};
    double loss = 0.0;
    for (Index t = 0; t < T; ++t) {
      s = seqnet::lstm_cell_forward(store, layer, store.value(xs).col(t), s, mp,
                                    caches ? &(*caches)[static_cast<std::size_t>(t)] : nullptr);
      loss += wh.col(t).dot(s.h);
    }
    return loss + 0.5 * s.c.dot(wc.cwiseProduct(s.c));
  };
  std::vector<seqnet::LstmStepCache> caches(static_cast<std::size_t>(T));
  run(&caches);
  auto grads = store.make_grad_buffer();
  Vector dh = Vector::Zero(H);
  Vector dc = wc.cwiseProduct(caches.back().c);
  for (Index t = T - 1; t >= 0; --t) {
    const auto step = seqnet::lstm_cell_backward(store, layer, caches[static_cast<std::size_t>(t)],
                                                 dh + wh.col(t), dc, grads, mp);
    grads[xs].col(t) += step.dx;
    dh = step.dh_prev;
    dc = step.dc_prev;
  }
  grads[h0].col(0) += dh;
  grads[c0].col(0) += dc;
  return finite_difference_check(store, [&] { return run(nullptr); }, grads);
}

/// Dense layer followed by a softplus head.
inline GradCheck dense_softplus_case(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Index in = draw(rng, 1, 8), out = draw(rng, 1, 8);
  ParameterStore store;
  const auto layer = seqnet::DenseLayer::create(store, "dense", in, out, rng);
  const auto x = store.add("x", in, 1);
  fill_normal(store.value(x), rng, 2.0);
  fill_normal(store.value(layer.bias), rng);
  Vector w(out);
  fill_normal(w, rng);
  auto loss = [&] { return w.dot(seqnet::softplus(seqnet::dense_forward(store, layer, store.value(x).col(0)))); };
  auto grads = store.make_grad_buffer();
  const Vector pre = seqnet::dense_forward(store, layer, store.value(x).col(0));
  const Vector dpre = w.cwiseProduct(pre.unaryExpr([](double v) { return seqnet::softplus_grad(v); }));
  grads[x].col(0) += seqnet::dense_backward(store, layer, store.value(x).col(0), dpre, grads);
  return finite_difference_check(store, loss, grads);
}

/// Embedding lookups with repeated indices under a quadratic loss.
inline GradCheck embedding_case(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Index card = draw(rng, 1, 8), dim = draw(rng, 1, 4), n = draw(rng, 1, 6);
  ParameterStore store;
  const auto e = seqnet::Embedding::create(store, "embed", card, dim, rng);
  std::vector<Index> idx(static_cast<std::size_t>(n));
  for (auto& i : idx) i = draw(rng, 0, card - 1);
  Vector w(dim);
  fill_normal(w, rng);
  auto loss = [&] {
    double s = 0.0;
    for (Index i : idx) s += std::pow(w.dot(seqnet::embedding_lookup(store, e, i)) + 0.3, 2);
    return s;
  };
  auto grads = store.make_grad_buffer();
  for (Index i : idx) {
    const double a = w.dot(seqnet::embedding_lookup(store, e, i)) + 0.3;
    seqnet::embedding_backward(e, i, 2.0 * a * w, grads);
  }
  return finite_difference_check(store, loss, grads);
}

/// Every loss with respect to every matrix argument it is differentiated in.
inline GradCheck losses_case(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Index D = draw(rng, 1, 3), M = draw(rng, 1, 6);
  const double beta = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  ParameterStore store;
  const auto yh = store.add("yhat", D, M);
  const auto zl = store.add("z_lower", D, M);
  const auto zu = store.add("z_upper", D, M);
  const auto lv = store.add("log_var", D, M);
  Matrix y(D, M);
  fill_normal(y, rng);
  Matrix delta(D, M);
  fill_normal(delta, rng);
  push_from_zero(delta, 0.05);
  store.value(yh) = y + delta;
  fill_normal(store.value(zl), rng);
  fill_normal(store.value(zu), rng);
  fill_normal(store.value(lv), rng, 0.5);
  const int which = static_cast<int>(seed % 5);

  auto loss = [&] {
    const auto& Y = store.value(yh);
    switch (which) {
      case 0: return seqnet::loss_frobenius(Y, y).value;
      case 1: return seqnet::loss_joint(Y, y, store.value(zl), beta).value;
      case 2: return seqnet::loss_asymmetric(store.value(zl), store.value(zu), Y - y).value;
      case 3: return seqnet::loss_joint_asymmetric(Y, y, store.value(zl), store.value(zu), beta).value;
      default: return seqnet::loss_gaussian_nll(Y, y, store.value(lv)).value;
    }
  };
  auto grads = store.make_grad_buffer();
  const auto& Y = store.value(yh);
  switch (which) {
    case 0: grads[yh] = seqnet::loss_frobenius(Y, y).d_yhat; break;
    case 1: {
      const auto l = seqnet::loss_joint(Y, y, store.value(zl), beta);
      grads[yh] = l.d_yhat;
      grads[zl] = l.d_zhat;
      break;
    }
    case 2: {
      const auto l = seqnet::loss_asymmetric(store.value(zl), store.value(zu), Y - y);
      grads[yh] = l.d_delta;
      grads[zl] = l.d_zl;
      grads[zu] = l.d_zu;
      break;
    }
    case 3: {
      const auto l = seqnet::loss_joint_asymmetric(Y, y, store.value(zl), store.value(zu), beta);
      grads[yh] = l.d_yhat;
      grads[zl] = l.d_zl;
      grads[zu] = l.d_zu;
      break;
    }
    default: {
      const auto l = seqnet::loss_gaussian_nll(Y, y, store.value(lv));
      grads[yh] = l.d_yhat;
      grads[lv] = l.d_log_var;
    }
  }
  return finite_difference_check(store, loss, grads);
}

/// L2 penalty over trainable entries only.
inline GradCheck l2_case(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParameterStore store;
  const Index n = draw(rng, 1, 4);
  for (Index i = 0; i < n; ++i) {
    const auto id = store.add("w" + std::to_string(i), draw(rng, 1, 4), draw(rng, 1, 4));
    fill_normal(store.value(id), rng);
  }
  const auto frozen = store.add("frozen", 2, 2);
  fill_normal(store.value(frozen), rng);
  store.set_trainable(frozen, false);
  const double coeff = std::uniform_real_distribution<double>(1e-4, 1.0)(rng);
  auto grads = store.make_grad_buffer();
  seqnet::l2_penalty(store, coeff, &grads);
  return finite_difference_check(store, [&] { return seqnet::l2_penalty(store, coeff); }, grads);
}

/// Full encoder/decoder/meta network of a random layout, with the objective
/// that layout trains on, through the model's own forward and backward pass.
inline GradCheck network_case(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ArchitectureConfig cfg;
  cfg.features = {FeatureSpec::real("a"), FeatureSpec::categorical("c", 4, 2), FeatureSpec::real("b")};
  cfg.output_dim = static_cast<int>(draw(rng, 1, 2));
  cfg.encoder_units = cfg.decoder_units = static_cast<int>(draw(rng, 2, 5));
  cfg.meta_units = static_cast<int>(draw(rng, 2, 4));
  const int kind = static_cast<int>(seed % 5);
  NetworkLayout layout;
  Objective objective = Objective::base;
  bool masked = false;
  switch (kind) {
    case 0: layout = layout_for(Variant::jms); objective = Objective::joint; break;
    case 1: layout = layout_for(Variant::jma); objective = Objective::joint_asymmetric; break;
    case 2: layout = layout_for(Variant::jmv); objective = Objective::nll; break;
    case 3: layout = residual_layout(); break;
    default: layout = layout_for(Variant::doms); masked = true;
  }
  ParameterStore store;
  const auto net = Network::create(store, cfg, layout, rng);
  if (layout.log_variance) fill_normal(store.value(net.log_var.weight), rng, 0.3);
  const Index N = draw(rng, 1, 4), M = draw(rng, 1, 4);
  SequenceSample s{Matrix(N, 3), Matrix(cfg.output_dim, M), 0};
  fill_normal(s.inputs, rng);
  for (Index t = 0; t < N; ++t) s.inputs(t, 1) = static_cast<double>(draw(rng, 0, 3));
  fill_normal(s.targets, rng);
  if (layout.positive_output) s.targets = s.targets.cwiseAbs();
  s.observed_steps = static_cast<int>(draw(rng, 0, M));
  DropoutMasks masks = sample_dropout_masks(net, {0.25, 0.1, 0.25}, rng);
  ForwardOptions opt;
  opt.mode = seed % 3 == 0 ? DecoderMode::teacher_forced : DecoderMode::emulation;
  opt.observed_steps = s.observed_steps;
  opt.masks = masked ? &masks : nullptr;
  const double beta = std::uniform_real_distribution<double>(0.0, 1.0)(rng);

  auto loss = [&] { return evaluate_objective(objective, beta, forward_pass(store, net, s, opt), s.targets).value; };
  ForwardTrace trace;
  const auto r = forward_pass(store, net, s, opt, &trace);
  const auto l = evaluate_objective(objective, beta, r, s.targets);
  auto grads = store.make_grad_buffer();
  backward_pass(store, net, s, trace, l.grads, grads, opt.masks);
  return finite_difference_check(store, loss, grads);
}

inline constexpr std::array<const char*, 6> kGradientCaseNames{"lstm",   "dense_softplus", "embedding",
                                                               "losses", "l2",             "network"};

inline GradCheck run_gradient_case(std::size_t kind, std::uint64_t seed) {
  switch (kind) {
    case 0: return lstm_case(seed);
    case 1: return dense_softplus_case(seed);
    case 2: return embedding_case(seed);
    case 3: return losses_case(seed);
    case 4: return l2_case(seed);
    default: return network_case(seed);
  }
}

}  // namespace uqseq::checks
