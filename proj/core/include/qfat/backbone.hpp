#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "qfat/rng.hpp"

namespace qfat {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

/// One named, trainable array. Rank-1 parameters are stored as a 1 x n row.
template <typename T>
struct Parameter {
  std::string name;
  std::vector<std::uint32_t> shape;
  Mat<T> value;
  Mat<T> grad;

  std::size_t size() const { return static_cast<std::size_t>(value.size()); }
};

/// Named parameters with gradient accumulators, iterated in insertion order.
template <typename T>
class ParameterStore {
 public:
  /// Registers a zero-initialized parameter and returns its index.
  std::size_t add(std::string name, std::vector<std::uint32_t> shape);

  Parameter<T>& operator[](std::size_t i) { return params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return params_[i]; }
  Parameter<T>& at(std::string_view name);
  const Parameter<T>& at(std::string_view name) const;
  bool contains(std::string_view name) const;

  std::size_t size() const { return params_.size(); }
  std::size_t total_elements() const;
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad();

  /// Same names and shapes, values converted to another scalar type.
  template <typename U>
  ParameterStore<U> cast() const {
    ParameterStore<U> out;
    for (const auto& p : params_) {
      const std::size_t i = out.add(p.name, p.shape);
      out[i].value = p.value.template cast<U>();
    }
    return out;
  }

 private:
  std::vector<Parameter<T>> params_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

struct DecoderConfig {
  int layers = 2;
  int heads = 2;
  int embed_dim = 32;
  int ff_mult = 4;
  double dropout = 0.1;

  void validate() const;
};

/// Token embeddings for `batch` sequences of `length` tokens, stored as
/// (batch * length) x embed_dim rows, sequence-major. Attention is always
/// causal; the optional loss mask is carried for the caller.
template <typename T>
struct SequenceBatch {
  Mat<T> tokens;
  int batch = 0;
  int length = 0;
  std::vector<std::uint8_t> loss_mask;  // batch * length, 1 = position contributes to the loss
};

/// Activations retained by a training-mode forward pass.
template <typename T>
struct DecoderTape {
  struct Layer {
    Mat<T> input, qkv, probs, heads_out, attn_mask, ln1_hat, ln1_out, ff_pre, ff_act, ff_mask, ln2_hat;
    Vec<T> ln1_rstd, ln2_rstd;
  };
  std::vector<Layer> layers;
  int batch = 0;
  int length = 0;

  bool empty() const { return layers.empty(); }
  void clear() { layers.clear(); }
};

/// Stack of post-norm causal transformer blocks:
/// x <- LN(x + Dropout(MHA(x))); x <- LN(x + Dropout(FF(x))) with a GELU
/// feed-forward of width ff_mult * embed_dim.
template <typename T>
class Decoder {
 public:
  Decoder() = default;
  Decoder(DecoderConfig cfg, ParameterStore<T>& store, std::string_view prefix = "decoder");

  const DecoderConfig& config() const { return cfg_; }

  /// Normal(0, 0.02) projections, zero biases, unit layer-norm gains.
  void init_weights(ParameterStore<T>& store, Rng& rng) const;

  /// With a tape the pass retains activations for backward. Dropout is applied
  /// only when `train_mode` is set, drawing from `rng`.
  Mat<T> forward(const ParameterStore<T>& store, const SequenceBatch<T>& batch, bool train_mode, Rng* rng,
                 DecoderTape<T>* tape) const;

  /// Accumulates parameter gradients into `store` and returns the gradient
  /// with respect to the input tokens. Throws if the tape is empty.
  Mat<T> backward(ParameterStore<T>& store, const DecoderTape<T>& tape, const Mat<T>& upstream) const;

 private:
  struct LayerIndex {
    std::size_t w_qkv, b_qkv, w_out, b_out, ln1_g, ln1_b, w_ff1, b_ff1, w_ff2, b_ff2, ln2_g, ln2_b;
  };
  DecoderConfig cfg_;
  std::vector<LayerIndex> layers_;
};

/// Linear layer helpers shared by the policy: Y = X W + b with W stored in x out.
template <typename T>
Mat<T> linear_forward(const Mat<T>& x, const Mat<T>& w, const Mat<T>& b);
template <typename T>
Mat<T> linear_backward(const Mat<T>& x, const Mat<T>& w, const Mat<T>& dy, Mat<T>& dw, Mat<T>& db);

}  // namespace qfat
