#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <type_traits>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "iclprobe/patch.hpp"
#include "iclprobe/tokenizer.hpp"

namespace iclprobe {

enum class Precision : std::int32_t { single = 0, double_ = 1 };

struct ModelConfig {
  int n_layers = 8;
  int n_heads = 4;
  int d_model = 128;
  int d_ff = 512;
  int vocab_size = Vocabulary::kSize;
  int max_seq = 256;
  Precision precision = Precision::single;

  int head_dim() const noexcept { return d_model / n_heads; }
  void validate() const;  // throws ConfigError
  bool operator==(const ModelConfig&) const = default;
};

// Longest prompt the task suite can emit: 16 demonstrations of "(x,y)->a, " or a
// 10-character string plus its markers, then the final query.
inline constexpr int kLongestPrompt = 16 * (10 + 2 + 1 + 2) + 10 + 2;

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Flat parameter and gradient storage. The fixed base alignment keeps vectorized kernels
// on the same code path from one allocation to the next, so results are bitwise repeatable.
template <typename T>
using ParamVector = std::vector<T, Eigen::aligned_allocator<T>>;

struct TensorInfo {
  std::string name;
  std::size_t offset = 0;
  int rows = 0;
  int cols = 0;
  std::size_t size() const noexcept { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
};

// Named tensors in a single flat buffer. The order is the checkpoint order.
class ParameterLayout {
 public:
  explicit ParameterLayout(const ModelConfig& config);
  const std::vector<TensorInfo>& tensors() const noexcept { return tensors_; }
  std::size_t total_size() const noexcept { return total_; }
  const TensorInfo& find(const std::string& name) const;

 private:
  std::vector<TensorInfo> tensors_;
  std::size_t total_ = 0;
};

// Typed views over a flat parameter (or gradient) buffer. M is Matrix<T> or const Matrix<T>.
template <typename M>
struct WeightViews {
  using Map = Eigen::Map<M>;
  struct Layer {
    Map norm1, wq, wk, wv, wo, norm2, w1, b1, w2, b2;
  };
  Map tok_emb;
  Map pos_emb;
  std::vector<Layer> layers;
  Map final_norm;
  Map unembed;
};

// Pre-norm decoder-only transformer: learned positional embeddings, RMS normalization,
// causal multi-head attention without biases, GELU feed-forward, untied unembedding.
template <typename T>
class Model {
 public:
  using Scalar = T;

  explicit Model(const ModelConfig& config);
  static Model random(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }
  const ParameterLayout& layout() const noexcept { return layout_; }
  ParamVector<T>& parameters() noexcept { return params_; }
  const ParamVector<T>& parameters() const noexcept { return params_; }

  WeightViews<const Matrix<T>> weights() const;
  WeightViews<Matrix<T>> weights();

  template <typename U>
  Model<U> cast() const {
    ModelConfig c = config_;
    c.precision = sizeof(U) == sizeof(float) ? Precision::single : Precision::double_;
    Model<U> out(c);
    for (std::size_t i = 0; i < params_.size(); ++i) out.parameters()[i] = static_cast<U>(params_[i]);
    return out;
  }

 private:
  ModelConfig config_;
  ParameterLayout layout_;
  ParamVector<T> params_;
};

template <typename M>
WeightViews<M> make_views(const ParameterLayout& layout, const ModelConfig& config,
                          std::conditional_t<std::is_const_v<M>, const typename M::Scalar*, typename M::Scalar*> data);

inline constexpr double kRmsEps = 1e-5;

// Residual states, attention probabilities and logits of one forward pass.
// hidden[l] is the residual stream after any patch at l has been applied.
template <typename T>
struct ActivationTrace {
  std::vector<Matrix<T>> hidden;             // [L+1] x [seq][d_model]
  std::vector<std::vector<Matrix<T>>> attn;  // [L][H] x [seq][seq]
  Matrix<T> final_logits;                    // [seq][vocab]

  int seq_len() const noexcept { return static_cast<int>(final_logits.rows()); }
  int n_layers() const noexcept { return static_cast<int>(attn.size()); }
};

template <typename T>
struct AttnGrads {
  std::vector<std::vector<Matrix<T>>> grads;  // [L][H] x [seq][seq], dLoss/dA
  T loss_value = 0;
};

// Called with the post-softmax probabilities of (layer, head) before they mix values;
// the hook may modify them. Used by finite-difference oracles.
template <typename T>
using AttentionHook = std::function<void(int layer, int head, Matrix<T>& probs)>;

template <typename T>
struct ForwardOptions {
  const PatchSet* patch = nullptr;
  PatchSite site = PatchSite::block_output;
  AttentionHook<T> attention_hook;
};

// Everything the backward pass needs. Produced by forward_tape.
template <typename T>
struct Tape {
  struct LayerTape {
    Matrix<T> x_in, xn1, q, k, v, ctx, x_mid, xn2, h_pre, h_tanh, h_act;
    Eigen::Matrix<T, Eigen::Dynamic, 1> inv_rms1, inv_rms2;
    std::vector<Matrix<T>> att;
  };
  std::vector<LayerTape> layers;
  Matrix<T> x_final;  // hidden[L]
  Matrix<T> xf;
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_rms_f;
  Matrix<T> logits;
  // Rows overwritten by a patch, per layer index [L+1]; gradients stop at them.
  std::vector<std::vector<int>> patched_output;
  std::vector<std::vector<int>> patched_mid;
};

template <typename T>
Tape<T> forward_tape(const Model<T>& model, std::span<const TokenId> tokens, const ForwardOptions<T>& options = {});

template <typename T>
ActivationTrace<T> forward(const Model<T>& model, std::span<const TokenId> tokens,
                           const ForwardOptions<T>& options = {});

template <typename T>
ActivationTrace<T> trace_from_tape(Tape<T>&& tape, std::span<const TokenId> tokens, const Model<T>& model);

// Final logits of a forward pass resumed at residual layer `layer` from a full [seq][d_model]
// state (typically hidden[layer] of a clean trace). Block-output patches at layers >= `layer`
// apply as in forward(); given the clean state, the result equals run_with_patch bit for bit.
template <typename T>
Matrix<T> forward_from(const Model<T>& model, int layer, const Matrix<T>& hidden, const PatchSet* patch);

// Reverse pass from dLoss/dlogits. Accumulates parameter gradients into param_grads (same
// layout as the parameters) when non-null, and writes dLoss/dA into attn_grads when non-null.
template <typename T>
void backward(const Model<T>& model, const Tape<T>& tape, std::span<const TokenId> tokens,
              const std::type_identity_t<Matrix<T>>& dlogits, std::type_identity_t<ParamVector<T>>* param_grads,
              std::type_identity_t<std::vector<std::vector<Matrix<T>>>>* attn_grads);

// Final normalization then unembedding applied to rows of a residual-state matrix.
template <typename T>
Matrix<T> readout(const Model<T>& model, const Matrix<T>& hidden);

template <typename T>
Matrix<T> logit_lens(const Model<T>& model, const ActivationTrace<T>& trace, int layer);

// Cross-entropy of `target` at `target_pos` and its exact gradient w.r.t. every
// post-softmax attention probability. Entries above the causal diagonal are zero.
template <typename T>
AttnGrads<T> attention_grads(const Model<T>& model, std::span<const TokenId> tokens, TokenId target, int target_pos);

// Index of the largest logit; ties resolve to the lowest token id.
template <typename T>
TokenId argmax_row(const Matrix<T>& logits, int row);

template <typename T>
TokenId greedy_answer(const ActivationTrace<T>& trace, int final_is_pos) {
  return argmax_row(trace.final_logits, final_is_pos);
}

}  // namespace iclprobe
