#include "qfat/backbone.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "qfat/error.hpp"

namespace qfat {
namespace {

constexpr double kLayerNormEps = 1e-5;

template <typename T>
void layer_norm_forward(const Mat<T>& x, const Mat<T>& gain, const Mat<T>& bias, Mat<T>& hat, Vec<T>& rstd,
                        Mat<T>& y) {
  const auto n = x.rows();
  const auto e = x.cols();
  hat.resize(n, e);
  rstd.resize(n);
  y.resize(n, e);
  for (Eigen::Index r = 0; r < n; ++r) {
    const T mean = x.row(r).mean();
    const T var = (x.row(r).array() - mean).square().mean();
    const T inv = T(1) / std::sqrt(var + T(kLayerNormEps));
    rstd[r] = inv;
    hat.row(r) = (x.row(r).array() - mean) * inv;
    y.row(r) = hat.row(r).array() * gain.row(0).array() + bias.row(0).array();
  }
}

template <typename T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const Mat<T>& hat, const Vec<T>& rstd, const Mat<T>& gain,
                           Mat<T>& dgain, Mat<T>& dbias) {
  dgain.row(0) += (dy.array() * hat.array()).colwise().sum().matrix();
  dbias.row(0) += dy.colwise().sum();
  Mat<T> dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const auto dhat = (dy.row(r).array() * gain.row(0).array()).eval();
    const T mean_dhat = dhat.mean();
    const T mean_dhat_hat = (dhat * hat.row(r).array()).mean();
    dx.row(r) = rstd[r] * (dhat - mean_dhat - hat.row(r).array() * mean_dhat_hat);
  }
  return dx;
}

template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(0.70710678118654752440)));
}

template <typename T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(0.70710678118654752440)));
  const T pdf = std::exp(T(-0.5) * x * x) * T(0.39894228040143267794);
  return cdf + x * pdf;
}

template <typename T>
Mat<T> dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, Rng& rng) {
  Mat<T> mask(rows, cols);
  const T keep_scale = T(1.0 / (1.0 - p));
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = rng.uniform() < p ? T(0) : keep_scale;
  return mask;
}

}  // namespace

template <typename T>
std::size_t ParameterStore<T>::add(std::string name, std::vector<std::uint32_t> shape) {
  require(!index_.contains(name), "parameter store: duplicate name '" + name + "'");
  require(shape.size() == 1 || shape.size() == 2, "parameter store: rank must be 1 or 2");
  Parameter<T> p;
  p.name = name;
  p.shape = std::move(shape);
  const auto rows = p.shape.size() == 1 ? Eigen::Index{1} : static_cast<Eigen::Index>(p.shape[0]);
  const auto cols = static_cast<Eigen::Index>(p.shape.back());
  p.value = Mat<T>::Zero(rows, cols);
  p.grad = Mat<T>::Zero(rows, cols);
  index_.emplace(std::move(name), params_.size());
  params_.push_back(std::move(p));
  return params_.size() - 1;
}

template <typename T>
Parameter<T>& ParameterStore<T>::at(std::string_view name) {
  const auto it = index_.find(name);
  require(it != index_.end(), "parameter store: no parameter named '" + std::string(name) + "'");
  return params_[it->second];
}

template <typename T>
const Parameter<T>& ParameterStore<T>::at(std::string_view name) const {
  const auto it = index_.find(name);
  require(it != index_.end(), "parameter store: no parameter named '" + std::string(name) + "'");
  return params_[it->second];
}

template <typename T>
bool ParameterStore<T>::contains(std::string_view name) const {
  return index_.find(name) != index_.end();
}

template <typename T>
std::size_t ParameterStore<T>::total_elements() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.size();
  return n;
}

template <typename T>
void ParameterStore<T>::zero_grad() {
  for (auto& p : params_) p.grad.setZero();
}

void DecoderConfig::validate() const {
  require(layers >= 0, "decoder: layers must be >= 0");
  require(heads >= 1, "decoder: heads must be >= 1");
  require(embed_dim >= 1 && embed_dim % heads == 0, "decoder: embed_dim must be divisible by heads");
  require(ff_mult >= 1, "decoder: ff_mult must be >= 1");
  require(dropout >= 0.0 && dropout < 1.0, "decoder: dropout must lie in [0, 1)");
}

template <typename T>
Mat<T> linear_forward(const Mat<T>& x, const Mat<T>& w, const Mat<T>& b) {
  Mat<T> y = x * w;
  y.rowwise() += b.row(0);
  return y;
}

template <typename T>
Mat<T> linear_backward(const Mat<T>& x, const Mat<T>& w, const Mat<T>& dy, Mat<T>& dw, Mat<T>& db) {
  dw.noalias() += x.transpose() * dy;
  db.row(0) += dy.colwise().sum();
  return dy * w.transpose();
}

template <typename T>
Decoder<T>::Decoder(DecoderConfig cfg, ParameterStore<T>& store, std::string_view prefix) : cfg_(cfg) {
  cfg_.validate();
  const auto e = static_cast<std::uint32_t>(cfg_.embed_dim);
  const auto f = static_cast<std::uint32_t>(cfg_.embed_dim * cfg_.ff_mult);
  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string p = std::string(prefix) + ".layer" + std::to_string(l) + ".";
    LayerIndex li{};
    li.w_qkv = store.add(p + "attn.w_qkv", {e, 3 * e});
    li.b_qkv = store.add(p + "attn.b_qkv", {3 * e});
    li.w_out = store.add(p + "attn.w_out", {e, e});
    li.b_out = store.add(p + "attn.b_out", {e});
    li.ln1_g = store.add(p + "ln1.gain", {e});
    li.ln1_b = store.add(p + "ln1.bias", {e});
    li.w_ff1 = store.add(p + "ff.w1", {e, f});
    li.b_ff1 = store.add(p + "ff.b1", {f});
    li.w_ff2 = store.add(p + "ff.w2", {f, e});
    li.b_ff2 = store.add(p + "ff.b2", {e});
    li.ln2_g = store.add(p + "ln2.gain", {e});
    li.ln2_b = store.add(p + "ln2.bias", {e});
    layers_.push_back(li);
  }
}

template <typename T>
void Decoder<T>::init_weights(ParameterStore<T>& store, Rng& rng) const {
  auto normal_init = [&](std::size_t idx) {
    auto& v = store[idx].value;
    for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = static_cast<T>(0.02 * rng.normal());
  };
  for (const auto& li : layers_) {
    normal_init(li.w_qkv);
    normal_init(li.w_out);
    normal_init(li.w_ff1);
    normal_init(li.w_ff2);
    for (auto idx : {li.b_qkv, li.b_out, li.b_ff1, li.b_ff2, li.ln1_b, li.ln2_b}) store[idx].value.setZero();
    store[li.ln1_g].value.setOnes();
    store[li.ln2_g].value.setOnes();
  }
}

template <typename T>
Mat<T> Decoder<T>::forward(const ParameterStore<T>& store, const SequenceBatch<T>& batch, bool train_mode,
                           Rng* rng, DecoderTape<T>* tape) const {
  const int e = cfg_.embed_dim;
  const int heads = cfg_.heads;
  const int dh = e / heads;
  const int len = batch.length;
  require(batch.batch >= 1 && len >= 1, "decoder: empty batch");
  require(batch.tokens.rows() == static_cast<Eigen::Index>(batch.batch) * len,
          "decoder: token rows must equal batch * length");
  require(batch.tokens.cols() == e, "decoder: token width must equal embed_dim");
  const bool use_dropout = train_mode && cfg_.dropout > 0.0;
  require(!use_dropout || rng != nullptr, "decoder: dropout in train mode needs a random source");

  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  const T neg_inf = -std::numeric_limits<T>::infinity();

  if (tape) {
    tape->layers.assign(layers_.size(), {});
    tape->batch = batch.batch;
    tape->length = len;
  }

  Mat<T> x = batch.tokens;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const LayerIndex& li = layers_[l];
    const Mat<T> qkv = linear_forward(x, store[li.w_qkv].value, store[li.b_qkv].value);

    Mat<T> probs(static_cast<Eigen::Index>(batch.batch) * heads * len, len);
    Mat<T> heads_out(x.rows(), e);
    for (int b = 0; b < batch.batch; ++b) {
      const Eigen::Index r0 = static_cast<Eigen::Index>(b) * len;
      for (int h = 0; h < heads; ++h) {
        const auto q = qkv.block(r0, h * dh, len, dh);
        const auto k = qkv.block(r0, e + h * dh, len, dh);
        const auto v = qkv.block(r0, 2 * e + h * dh, len, dh);
        Mat<T> s = (q * k.transpose()) * scale;
        for (int t = 0; t < len; ++t) {
          for (int u = t + 1; u < len; ++u) s(t, u) = neg_inf;
          const T hi = s.row(t).head(t + 1).maxCoeff();
          s.row(t) = (s.row(t).array() - hi).exp();
          s.row(t) /= s.row(t).sum();
        }
        heads_out.block(r0, h * dh, len, dh).noalias() = s * v;
        probs.block((static_cast<Eigen::Index>(b) * heads + h) * len, 0, len, len) = s;
      }
    }
    Mat<T> attn = linear_forward(heads_out, store[li.w_out].value, store[li.b_out].value);
    Mat<T> attn_mask;
    if (use_dropout) {
      attn_mask = dropout_mask<T>(attn.rows(), attn.cols(), cfg_.dropout, *rng);
      attn.array() *= attn_mask.array();
    }

    Mat<T> ln1_hat, ln1_out;
    Vec<T> ln1_rstd;
    layer_norm_forward<T>(x + attn, store[li.ln1_g].value, store[li.ln1_b].value, ln1_hat, ln1_rstd, ln1_out);

    const Mat<T> ff_pre = linear_forward(ln1_out, store[li.w_ff1].value, store[li.b_ff1].value);
    const Mat<T> ff_act = ff_pre.unaryExpr([](T v) { return gelu(v); });
    Mat<T> ff = linear_forward(ff_act, store[li.w_ff2].value, store[li.b_ff2].value);
    Mat<T> ff_mask;
    if (use_dropout) {
      ff_mask = dropout_mask<T>(ff.rows(), ff.cols(), cfg_.dropout, *rng);
      ff.array() *= ff_mask.array();
    }

    Mat<T> ln2_hat, out;
    Vec<T> ln2_rstd;
    layer_norm_forward<T>(ln1_out + ff, store[li.ln2_g].value, store[li.ln2_b].value, ln2_hat, ln2_rstd, out);

    if (tape) {
      auto& t = tape->layers[l];
      t.input = std::move(x);
      t.qkv = qkv;
      t.probs = std::move(probs);
      t.heads_out = std::move(heads_out);
      t.attn_mask = std::move(attn_mask);
      t.ln1_hat = std::move(ln1_hat);
      t.ln1_rstd = std::move(ln1_rstd);
      t.ln1_out = std::move(ln1_out);
      t.ff_pre = ff_pre;
      t.ff_act = ff_act;
      t.ff_mask = std::move(ff_mask);
      t.ln2_hat = std::move(ln2_hat);
      t.ln2_rstd = std::move(ln2_rstd);
    }
    x = std::move(out);
  }
  return x;
}

template <typename T>
Mat<T> Decoder<T>::backward(ParameterStore<T>& store, const DecoderTape<T>& tape, const Mat<T>& upstream) const {
  require(!tape.empty() || layers_.empty(), "decoder: backward called without a retained forward pass");
  require(tape.layers.size() == layers_.size(), "decoder: tape does not match this decoder");
  const int e = cfg_.embed_dim;
  const int heads = cfg_.heads;
  const int dh = e / heads;
  const int len = tape.length;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  Mat<T> dx = upstream;
  for (std::size_t l = layers_.size(); l-- > 0;) {
    const LayerIndex& li = layers_[l];
    const auto& t = tape.layers[l];
    require(dx.rows() == t.input.rows() && dx.cols() == e, "decoder: upstream gradient has the wrong shape");

    // Second residual block.
    Mat<T> dr2 = layer_norm_backward<T>(dx, t.ln2_hat, t.ln2_rstd, store[li.ln2_g].value, store[li.ln2_g].grad,
                                        store[li.ln2_b].grad);
    Mat<T> dff = dr2;
    if (t.ff_mask.size() != 0) dff.array() *= t.ff_mask.array();
    Mat<T> dff_act = linear_backward<T>(t.ff_act, store[li.w_ff2].value, dff, store[li.w_ff2].grad,
                                        store[li.b_ff2].grad);
    dff_act.array() *= t.ff_pre.unaryExpr([](T v) { return gelu_grad(v); }).array();
    Mat<T> dln1 = dr2 + linear_backward<T>(t.ln1_out, store[li.w_ff1].value, dff_act, store[li.w_ff1].grad,
                                           store[li.b_ff1].grad);

    // First residual block.
    Mat<T> dr1 = layer_norm_backward<T>(dln1, t.ln1_hat, t.ln1_rstd, store[li.ln1_g].value, store[li.ln1_g].grad,
                                        store[li.ln1_b].grad);
    Mat<T> dattn = dr1;
    if (t.attn_mask.size() != 0) dattn.array() *= t.attn_mask.array();
    const Mat<T> dheads = linear_backward<T>(t.heads_out, store[li.w_out].value, dattn, store[li.w_out].grad,
                                             store[li.b_out].grad);

    Mat<T> dqkv = Mat<T>::Zero(t.qkv.rows(), t.qkv.cols());
    for (int b = 0; b < tape.batch; ++b) {
      const Eigen::Index r0 = static_cast<Eigen::Index>(b) * len;
      for (int h = 0; h < heads; ++h) {
        const auto q = t.qkv.block(r0, h * dh, len, dh);
        const auto k = t.qkv.block(r0, e + h * dh, len, dh);
        const auto v = t.qkv.block(r0, 2 * e + h * dh, len, dh);
        const auto p = t.probs.block((static_cast<Eigen::Index>(b) * heads + h) * len, 0, len, len);
        const auto dout = dheads.block(r0, h * dh, len, dh);

        const Mat<T> dp = dout * v.transpose();
        dqkv.block(r0, 2 * e + h * dh, len, dh).noalias() += p.transpose() * dout;
        Mat<T> ds = p.array() * (dp.array().colwise() - (dp.array() * p.array()).rowwise().sum());
        ds *= scale;
        dqkv.block(r0, h * dh, len, dh).noalias() += ds * k;
        dqkv.block(r0, e + h * dh, len, dh).noalias() += ds.transpose() * q;
      }
    }
    dx = dr1 + linear_backward<T>(t.input, store[li.w_qkv].value, dqkv, store[li.w_qkv].grad,
                                  store[li.b_qkv].grad);
  }
  return dx;
}

template class ParameterStore<float>;
template class ParameterStore<double>;
template class Decoder<float>;
template class Decoder<double>;
template Mat<float> linear_forward(const Mat<float>&, const Mat<float>&, const Mat<float>&);
template Mat<double> linear_forward(const Mat<double>&, const Mat<double>&, const Mat<double>&);
template Mat<float> linear_backward(const Mat<float>&, const Mat<float>&, const Mat<float>&, Mat<float>&,
                                    Mat<float>&);
template Mat<double> linear_backward(const Mat<double>&, const Mat<double>&, const Mat<double>&, Mat<double>&,
                                     Mat<double>&);

}  // namespace qfat
