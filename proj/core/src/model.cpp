#include "iclprobe/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "iclprobe/errors.hpp"
#include "iclprobe/rng.hpp"

namespace iclprobe {

void ModelConfig::validate() const {
  if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_ff < 1 || vocab_size < 1 || max_seq < 1) {
    throw ConfigError("model dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by n_heads " + std::to_string(n_heads));
  }
  if (vocab_size != Vocabulary::kSize) {
    throw ConfigError("vocab_size must equal the character vocabulary size " + std::to_string(Vocabulary::kSize));
  }
  if (max_seq < kLongestPrompt) {
    throw ConfigError("max_seq " + std::to_string(max_seq) + " shorter than the longest prompt " +
                      std::to_string(kLongestPrompt));
  }
}

ParameterLayout::ParameterLayout(const ModelConfig& c) {
  auto add = [this](std::string name, int rows, int cols) {
    tensors_.push_back({std::move(name), total_, rows, cols});
    total_ += tensors_.back().size();
  };
  add("tok_emb", c.vocab_size, c.d_model);
  add("pos_emb", c.max_seq, c.d_model);
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    add(p + "norm1", 1, c.d_model);
    add(p + "attn.wq", c.d_model, c.d_model);
    add(p + "attn.wk", c.d_model, c.d_model);
    add(p + "attn.wv", c.d_model, c.d_model);
    add(p + "attn.wo", c.d_model, c.d_model);
    add(p + "norm2", 1, c.d_model);
    add(p + "mlp.w1", c.d_model, c.d_ff);
    add(p + "mlp.b1", 1, c.d_ff);
    add(p + "mlp.w2", c.d_ff, c.d_model);
    add(p + "mlp.b2", 1, c.d_model);
  }
  add("final_norm", 1, c.d_model);
  add("unembed", c.d_model, c.vocab_size);
}

const TensorInfo& ParameterLayout::find(const std::string& name) const {
  for (const auto& t : tensors_) {
    if (t.name == name) return t;
  }
  throw RangeError("no tensor named " + name);
}

template <typename M>
WeightViews<M> make_views(const ParameterLayout& layout, const ModelConfig& config,
                          std::conditional_t<std::is_const_v<M>, const typename M::Scalar*, typename M::Scalar*> data) {
  using Map = Eigen::Map<M>;
  const auto& ts = layout.tensors();
  std::size_t i = 0;
  auto next = [&]() {
    const auto& t = ts[i++];
    return Map(data + t.offset, t.rows, t.cols);
  };
  Map tok = next();
  Map pos = next();
  std::vector<typename WeightViews<M>::Layer> layers;
  layers.reserve(static_cast<std::size_t>(config.n_layers));
  for (int l = 0; l < config.n_layers; ++l) {
    Map n1 = next(), wq = next(), wk = next(), wv = next(), wo = next();
    Map n2 = next(), w1 = next(), b1 = next(), w2 = next(), b2 = next();
    layers.push_back({n1, wq, wk, wv, wo, n2, w1, b1, w2, b2});
  }
  Map fn = next();
  Map un = next();
  return WeightViews<M>{tok, pos, std::move(layers), fn, un};
}

template <typename T>
Model<T>::Model(const ModelConfig& config) : config_(config), layout_(config), params_(layout_.total_size(), T(0)) {
  config_.validate();
}

template <typename T>
Model<T> Model<T>::random(const ModelConfig& config, std::uint64_t seed) {
  Model<T> m(config);
  Rng rng(seed);
  const double std_base = 0.02;
  const double std_resid = 0.02 / std::sqrt(2.0 * config.n_layers);
  for (const auto& t : m.layout_.tensors()) {
    T* p = m.params_.data() + t.offset;
    const bool is_gain = t.name.ends_with("norm1") || t.name.ends_with("norm2") || t.name == "final_norm";
    const bool is_bias = t.name.ends_with(".b1") || t.name.ends_with(".b2");
    const bool is_resid = t.name.ends_with("attn.wo") || t.name.ends_with("mlp.w2");
    // a small readout keeps the initial prediction close to uniform
    const double std_t = t.name == "unembed" ? 0.002 : is_resid ? std_resid : std_base;
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (is_gain) {
        p[i] = T(1);
      } else if (is_bias) {
        p[i] = T(0);
      } else {
        p[i] = static_cast<T>(rng.normal() * std_t);
      }
    }
  }
  return m;
}

template <typename T>
WeightViews<const Matrix<T>> Model<T>::weights() const {
  return make_views<const Matrix<T>>(layout_, config_, params_.data());
}

template <typename T>
WeightViews<Matrix<T>> Model<T>::weights() {
  return make_views<Matrix<T>>(layout_, config_, params_.data());
}

namespace {

template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

// tanh-approximated GELU; keeps the tanh term for the backward pass.
template <typename T>
void gelu_forward(const Matrix<T>& x, Matrix<T>& tanh_term, Matrix<T>& out) {
  const auto xa = x.array();
  tanh_term = (T(kGeluC) * (xa + T(kGeluA) * xa.cube())).tanh().matrix();
  out = (T(0.5) * xa * (T(1) + tanh_term.array())).matrix();
}

template <typename T>
void gelu_backward(const Matrix<T>& x, const Matrix<T>& tanh_term, Matrix<T>& grad) {
  const auto xa = x.array();
  const auto t = tanh_term.array();
  grad.array() *= T(0.5) * (T(1) + t) +
                  T(0.5) * xa * (T(1) - t.square()) * T(kGeluC) * (T(1) + T(3 * kGeluA) * xa.square());
}

template <typename T, typename Gain>
void rms_norm(const Matrix<T>& x, const Gain& gain, Matrix<T>& out, Vec<T>& inv_rms) {
  const auto rows = x.rows();
  const T d = static_cast<T>(x.cols());
  out.resize(rows, x.cols());
  inv_rms.resize(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const T ms = x.row(r).squaredNorm() / d;
    const T inv = T(1) / std::sqrt(ms + T(kRmsEps));
    inv_rms(r) = inv;
    out.row(r) = (x.row(r) * inv).cwiseProduct(gain);
  }
}

// dx += d(rms_norm)/dx . dy, dgain += ...
template <typename T, typename Gain, typename GainGrad>
void rms_norm_backward(const Matrix<T>& x, const Vec<T>& inv_rms, const Gain& gain, const Matrix<T>& dy,
                       Matrix<T>& dx, GainGrad* dgain) {
  const T d = static_cast<T>(x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const T inv = inv_rms(r);
    if (dgain) dgain->noalias() += (dy.row(r).cwiseProduct(x.row(r)) * inv);
    const auto u = dy.row(r).cwiseProduct(gain);
    const T dot = u.dot(x.row(r));
    dx.row(r).noalias() += u * inv - x.row(r) * (inv * inv * inv * dot / d);
  }
}

template <typename T>
void apply_overrides(Matrix<T>& x, const PatchSet* patch, int layer, std::vector<int>* rows_out) {
  if (!patch) return;
  auto it = patch->entries.lower_bound(PatchAddress{layer, std::numeric_limits<int>::min()});
  for (; it != patch->entries.end() && it->first.layer == layer; ++it) {
    const int p = it->first.position;
    if (p < 0 || p >= x.rows()) {
      throw RangeError("patch position " + std::to_string(p) + " outside sequence of length " +
                       std::to_string(x.rows()));
    }
    if (static_cast<Eigen::Index>(it->second.size()) != x.cols()) {
      throw RangeError("patch vector length " + std::to_string(it->second.size()) + " != d_model " +
                       std::to_string(x.cols()));
    }
    for (Eigen::Index c = 0; c < x.cols(); ++c) x(p, c) = static_cast<T>(it->second[static_cast<std::size_t>(c)]);
    if (rows_out) rows_out->push_back(p);
  }
}

template <typename T>
void validate_patch(const PatchSet* patch, int n_layers, PatchSite site) {
  if (!patch) return;
  for (const auto& [addr, value] : patch->entries) {
    const int lo = site == PatchSite::block_output ? 0 : 1;
    if (addr.layer < lo || addr.layer > n_layers) {
      throw RangeError("patch layer " + std::to_string(addr.layer) + " outside [" + std::to_string(lo) + ", " +
                       std::to_string(n_layers) + "]");
    }
  }
}

template <typename T>
void final_readout(const Model<T>& model, const Matrix<T>& hidden, Matrix<T>& xf, Vec<T>& inv, Matrix<T>& logits) {
  const auto w = model.weights();
  rms_norm(hidden, w.final_norm, xf, inv);
  logits.noalias() = xf * w.unembed;
}

}  // namespace

namespace {

// Runs block l on x in place, recording intermediates into lt.
template <typename T>
void block_forward(const WeightViews<const Matrix<T>>& w, const ModelConfig& cfg, int l, Matrix<T>& x,
                   typename Tape<T>::LayerTape& lt, const ForwardOptions<T>& options,
                   std::vector<int>* patched_mid) {
  const auto& lw = w.layers[static_cast<std::size_t>(l)];
  const int seq = static_cast<int>(x.rows());
  const int hd = cfg.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  lt.x_in = x;
  rms_norm(lt.x_in, lw.norm1, lt.xn1, lt.inv_rms1);
  lt.q.noalias() = lt.xn1 * lw.wq;
  lt.k.noalias() = lt.xn1 * lw.wk;
  lt.v.noalias() = lt.xn1 * lw.wv;
  lt.ctx.resize(seq, cfg.d_model);
  lt.att.resize(static_cast<std::size_t>(cfg.n_heads));
  for (int h = 0; h < cfg.n_heads; ++h) {
    auto& a = lt.att[static_cast<std::size_t>(h)];
    a.noalias() = lt.q.middleCols(h * hd, hd) * lt.k.middleCols(h * hd, hd).transpose();
    for (int i = 0; i < seq; ++i) {
      auto row = a.row(i);
      const T mx = row.head(i + 1).maxCoeff();
      row.head(i + 1) = ((row.head(i + 1).array() - mx) * scale).exp().matrix();
      row.head(i + 1) /= row.head(i + 1).sum();
      row.tail(seq - i - 1).setZero();
    }
    if (options.attention_hook) options.attention_hook(l, h, a);
    lt.ctx.middleCols(h * hd, hd).noalias() = a * lt.v.middleCols(h * hd, hd);
  }
  lt.x_mid = lt.x_in;
  lt.x_mid.noalias() += lt.ctx * lw.wo;
  if (options.site == PatchSite::post_attention) apply_overrides(lt.x_mid, options.patch, l + 1, patched_mid);
  rms_norm(lt.x_mid, lw.norm2, lt.xn2, lt.inv_rms2);
  lt.h_pre.noalias() = lt.xn2 * lw.w1;
  lt.h_pre.rowwise() += lw.b1.row(0);
  gelu_forward(lt.h_pre, lt.h_tanh, lt.h_act);
  x = lt.x_mid;
  x.noalias() += lt.h_act * lw.w2;
  x.rowwise() += lw.b2.row(0);
}

}  // namespace

template <typename T>
Tape<T> forward_tape(const Model<T>& model, std::span<const TokenId> tokens, const ForwardOptions<T>& options) {
  const auto& cfg = model.config();
  const int seq = static_cast<int>(tokens.size());
  if (seq < 1) throw RangeError("forward needs at least one token");
  if (seq > cfg.max_seq) {
    throw RangeError("sequence length " + std::to_string(seq) + " exceeds max_seq " + std::to_string(cfg.max_seq));
  }
  validate_patch<T>(options.patch, cfg.n_layers, options.site);
  const auto w = model.weights();

  Tape<T> tape;
  tape.patched_output.resize(static_cast<std::size_t>(cfg.n_layers) + 1);
  tape.patched_mid.resize(static_cast<std::size_t>(cfg.n_layers) + 1);
  Matrix<T> x(seq, cfg.d_model);
  for (int t = 0; t < seq; ++t) {
    const TokenId id = tokens[static_cast<std::size_t>(t)];
    if (id < 0 || id >= cfg.vocab_size) throw RangeError("token id " + std::to_string(id) + " out of range");
    x.row(t) = w.tok_emb.row(id) + w.pos_emb.row(t);
  }
  if (options.site == PatchSite::block_output) apply_overrides(x, options.patch, 0, &tape.patched_output[0]);

  tape.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto ul = static_cast<std::size_t>(l);
    block_forward(w, cfg, l, x, tape.layers[ul], options, &tape.patched_mid[ul + 1]);
    if (options.site == PatchSite::block_output) apply_overrides(x, options.patch, l + 1, &tape.patched_output[ul + 1]);
  }
  tape.x_final = std::move(x);
  final_readout(model, tape.x_final, tape.xf, tape.inv_rms_f, tape.logits);
  return tape;
}

template <typename T>
Matrix<T> forward_from(const Model<T>& model, int layer, const Matrix<T>& hidden, const PatchSet* patch) {
  const auto& cfg = model.config();
  if (layer < 0 || layer > cfg.n_layers) throw RangeError("resume layer " + std::to_string(layer) + " out of range");
  if (hidden.cols() != cfg.d_model || hidden.rows() < 1) throw RangeError("resume state has the wrong shape");
  validate_patch<T>(patch, cfg.n_layers, PatchSite::block_output);
  if (patch) {
    for (const auto& [addr, v] : patch->entries) {
      if (addr.layer < layer) throw RangeError("patch below the resume layer");
    }
  }
  const auto w = model.weights();
  ForwardOptions<T> options;
  Matrix<T> x = hidden;
  apply_overrides(x, patch, layer, nullptr);
  typename Tape<T>::LayerTape scratch;
  for (int l = layer; l < cfg.n_layers; ++l) {
    block_forward(w, cfg, l, x, scratch, options, nullptr);
    apply_overrides(x, patch, l + 1, nullptr);
  }
  return readout(model, x);
}

template <typename T>
ActivationTrace<T> trace_from_tape(Tape<T>&& tape, std::span<const TokenId>, const Model<T>& model) {
  const int n_layers = model.config().n_layers;
  ActivationTrace<T> trace;
  trace.hidden.reserve(static_cast<std::size_t>(n_layers) + 1);
  for (auto& lt : tape.layers) trace.hidden.push_back(std::move(lt.x_in));
  trace.hidden.push_back(std::move(tape.x_final));
  trace.attn.reserve(static_cast<std::size_t>(n_layers));
  for (auto& lt : tape.layers) trace.attn.push_back(std::move(lt.att));
  trace.final_logits = std::move(tape.logits);
  return trace;
}

template <typename T>
ActivationTrace<T> forward(const Model<T>& model, std::span<const TokenId> tokens, const ForwardOptions<T>& options) {
  return trace_from_tape(forward_tape(model, tokens, options), tokens, model);
}

template <typename T>
void backward(const Model<T>& model, const Tape<T>& tape, std::span<const TokenId> tokens,
              const std::type_identity_t<Matrix<T>>& dlogits, std::type_identity_t<ParamVector<T>>* param_grads,
              std::type_identity_t<std::vector<std::vector<Matrix<T>>>>* attn_grads) {
  const auto& cfg = model.config();
  const int seq = static_cast<int>(tokens.size());
  const int hd = cfg.head_dim();
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  const auto w = model.weights();

  ParamVector<T> scratch;
  if (!param_grads) {
    scratch.assign(model.layout().total_size(), T(0));
    param_grads = &scratch;
  }
  auto g = make_views<Matrix<T>>(model.layout(), cfg, param_grads->data());
  if (attn_grads) {
    attn_grads->assign(static_cast<std::size_t>(cfg.n_layers), std::vector<Matrix<T>>(static_cast<std::size_t>(cfg.n_heads)));
  }

  g.unembed.noalias() += tape.xf.transpose() * dlogits;
  Matrix<T> dxf = dlogits * w.unembed.transpose();
  Matrix<T> dx = Matrix<T>::Zero(seq, cfg.d_model);
  auto dfinal = g.final_norm.row(0);
  rms_norm_backward(tape.x_final, tape.inv_rms_f, w.final_norm.row(0), dxf, dx, &dfinal);
  auto stop_rows = [](Matrix<T>& grad, const std::vector<std::vector<int>>& rows, int layer) {
    if (rows.empty()) return;
    for (int r : rows[static_cast<std::size_t>(layer)]) grad.row(r).setZero();
  };
  stop_rows(dx, tape.patched_output, cfg.n_layers);

  Matrix<T> dh, dxn, dctx, dq, dk, dv, dA, dS;
  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const auto& lt = tape.layers[static_cast<std::size_t>(l)];
    const auto& lw = w.layers[static_cast<std::size_t>(l)];
    auto& lg = g.layers[static_cast<std::size_t>(l)];

    // feed-forward sublayer
    lg.b2.row(0).noalias() += dx.colwise().sum();
    lg.w2.noalias() += lt.h_act.transpose() * dx;
    dh.noalias() = dx * lw.w2.transpose();
    gelu_backward(lt.h_pre, lt.h_tanh, dh);
    lg.b1.row(0).noalias() += dh.colwise().sum();
    lg.w1.noalias() += lt.xn2.transpose() * dh;
    dxn.noalias() = dh * lw.w1.transpose();
    Matrix<T> dx_mid = dx;
    auto dn2 = lg.norm2.row(0);
    rms_norm_backward(lt.x_mid, lt.inv_rms2, lw.norm2.row(0), dxn, dx_mid, &dn2);
    stop_rows(dx_mid, tape.patched_mid, l + 1);

    // attention sublayer
    lg.wo.noalias() += lt.ctx.transpose() * dx_mid;
    dctx.noalias() = dx_mid * lw.wo.transpose();
    dq.setZero(seq, cfg.d_model);
    dk.setZero(seq, cfg.d_model);
    dv.setZero(seq, cfg.d_model);
    for (int h = 0; h < cfg.n_heads; ++h) {
      const auto& a = lt.att[static_cast<std::size_t>(h)];
      const auto dctx_h = dctx.middleCols(h * hd, hd);
      dA.noalias() = dctx_h * lt.v.middleCols(h * hd, hd).transpose();
      for (int i = 0; i < seq; ++i) dA.row(i).tail(seq - i - 1).setZero();
      dv.middleCols(h * hd, hd).noalias() += a.transpose() * dctx_h;
      dS = a.cwiseProduct(dA);
      const Vec<T> rowdot = dS.rowwise().sum();
      dS.noalias() -= (a.array().colwise() * rowdot.array()).matrix();
      dS *= scale;
      dq.middleCols(h * hd, hd).noalias() += dS * lt.k.middleCols(h * hd, hd);
      dk.middleCols(h * hd, hd).noalias() += dS.transpose() * lt.q.middleCols(h * hd, hd);
      if (attn_grads) (*attn_grads)[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)] = dA;
    }
    lg.wq.noalias() += lt.xn1.transpose() * dq;
    lg.wk.noalias() += lt.xn1.transpose() * dk;
    lg.wv.noalias() += lt.xn1.transpose() * dv;
    dxn.noalias() = dq * lw.wq.transpose();
    dxn.noalias() += dk * lw.wk.transpose();
    dxn.noalias() += dv * lw.wv.transpose();
    dx = dx_mid;
    auto dn1 = lg.norm1.row(0);
    rms_norm_backward(lt.x_in, lt.inv_rms1, lw.norm1.row(0), dxn, dx, &dn1);
    stop_rows(dx, tape.patched_output, l);
  }

  for (int t = 0; t < seq; ++t) {
    g.tok_emb.row(tokens[static_cast<std::size_t>(t)]).noalias() += dx.row(t);
    g.pos_emb.row(t).noalias() += dx.row(t);
  }
}

template <typename T>
Matrix<T> readout(const Model<T>& model, const Matrix<T>& hidden) {
  Matrix<T> xf, logits;
  Vec<T> inv;
  final_readout(model, hidden, xf, inv, logits);
  return logits;
}

template <typename T>
Matrix<T> logit_lens(const Model<T>& model, const ActivationTrace<T>& trace, int layer) {
  if (layer < 0 || layer >= static_cast<int>(trace.hidden.size())) {
    throw RangeError("logit-lens layer " + std::to_string(layer) + " outside [0, " +
                     std::to_string(trace.hidden.size() - 1) + "]");
  }
  return readout(model, trace.hidden[static_cast<std::size_t>(layer)]);
}

template <typename T>
AttnGrads<T> attention_grads(const Model<T>& model, std::span<const TokenId> tokens, TokenId target, int target_pos) {
  if (target_pos < 0 || target_pos >= static_cast<int>(tokens.size())) {
    throw RangeError("target position " + std::to_string(target_pos) + " outside sequence");
  }
  if (target < 0 || target >= model.config().vocab_size) throw RangeError("target token out of range");
  const auto tape = forward_tape(model, tokens);
  const auto row = tape.logits.row(target_pos);
  const T mx = row.maxCoeff();
  const T lse = mx + std::log((row.array() - mx).exp().sum());
  AttnGrads<T> out;
  out.loss_value = lse - row(target);
  Matrix<T> dlogits = Matrix<T>::Zero(tape.logits.rows(), tape.logits.cols());
  dlogits.row(target_pos) = (row.array() - lse).exp().matrix();
  dlogits(target_pos, target) -= T(1);
  backward(model, tape, tokens, dlogits, nullptr, &out.grads);
  return out;
}

template <typename T>
TokenId argmax_row(const Matrix<T>& logits, int row) {
  if (row < 0 || row >= logits.rows()) throw RangeError("row " + std::to_string(row) + " outside logits");
  Eigen::Index best = 0;
  T best_v = logits(row, 0);
  for (Eigen::Index c = 1; c < logits.cols(); ++c) {
    if (logits(row, c) > best_v) {
      best_v = logits(row, c);
      best = c;
    }
  }
  return static_cast<TokenId>(best);
}

#define ICLPROBE_INSTANTIATE(T)                                                                                   \
  template class Model<T>;                                                                                        \
  template WeightViews<Matrix<T>> make_views<Matrix<T>>(const ParameterLayout&, const ModelConfig&, T*);          \
  template WeightViews<const Matrix<T>> make_views<const Matrix<T>>(const ParameterLayout&, const ModelConfig&,   \
                                                                    const T*);                                    \
  template Tape<T> forward_tape(const Model<T>&, std::span<const TokenId>, const ForwardOptions<T>&);             \
  template ActivationTrace<T> forward(const Model<T>&, std::span<const TokenId>, const ForwardOptions<T>&);       \
  template ActivationTrace<T> trace_from_tape(Tape<T>&&, std::span<const TokenId>, const Model<T>&);              \
  template void backward(const Model<T>&, const Tape<T>&, std::span<const TokenId>, const Matrix<T>&,             \
                         ParamVector<T>*, std::vector<std::vector<Matrix<T>>>*);                                  \
  template Matrix<T> readout(const Model<T>&, const Matrix<T>&);                                                  \
  template Matrix<T> forward_from(const Model<T>&, int, const Matrix<T>&, const PatchSet*);                       \
  template Matrix<T> logit_lens(const Model<T>&, const ActivationTrace<T>&, int);                                 \
  template AttnGrads<T> attention_grads(const Model<T>&, std::span<const TokenId>, TokenId, int);                 \
  template TokenId argmax_row(const Matrix<T>&, int);

ICLPROBE_INSTANTIATE(float)
ICLPROBE_INSTANTIATE(double)

}  // namespace iclprobe
