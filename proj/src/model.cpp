#include "spanlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace spanlab {

namespace {

using Eigen::Index;

template <class T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

constexpr double kLayerNormEps = 1e-12;

// ---------------------------------------------------------------- primitives

template <class T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(M_SQRT1_2)));
}

template <class T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(M_SQRT1_2)));
  const T pdf = std::exp(T(-0.5) * x * x) * T(0.5 * M_2_SQRTPI * M_SQRT1_2);
  return cdf + x * pdf;
}

template <class T>
Matrix<T> gelu(const Matrix<T>& x) {
  return x.unaryExpr([](T v) { return gelu(v); });
}

/// dy * gelu'(x)
template <class T>
Matrix<T> gelu_backward(const Matrix<T>& dy, const Matrix<T>& x) {
  return dy.cwiseProduct(x.unaryExpr([](T v) { return gelu_grad(v); }));
}

template <class T>
Matrix<T> affine(const Matrix<T>& x, const Matrix<T>& w, const Matrix<T>& b) {
  Matrix<T> y = x * w;
  y.rowwise() += b.row(0);
  return y;
}

template <class T>
struct LnCache {
  Matrix<T> xhat;
  Vec<T> rstd;
};

template <class T>
Matrix<T> layer_norm(const Matrix<T>& x, const Matrix<T>& g, const Matrix<T>& b, LnCache<T>* cache) {
  const Index n = x.rows();
  const Index d = x.cols();
  Matrix<T> xhat(n, d);
  Vec<T> rstd(n);
  for (Index r = 0; r < n; ++r) {
    const T mu = x.row(r).mean();
    const auto centered = (x.row(r).array() - mu).eval();
    const T var = centered.square().mean();
    rstd(r) = T(1) / std::sqrt(var + T(kLayerNormEps));
    xhat.row(r) = centered * rstd(r);
  }
  Matrix<T> y = xhat.array().rowwise() * g.row(0).array();
  y.rowwise() += b.row(0);
  if (cache != nullptr) {
    cache->xhat = std::move(xhat);
    cache->rstd = std::move(rstd);
  }
  return y;
}

template <class T>
Matrix<T> layer_norm_backward(const Matrix<T>& dy, const LnCache<T>& c, const Matrix<T>& g, Matrix<T>* dg,
                              Matrix<T>* db) {
  if (dg != nullptr) *dg += dy.cwiseProduct(c.xhat).colwise().sum();
  if (db != nullptr) *db += dy.colwise().sum();
  const Matrix<T> dxhat = dy.array().rowwise() * g.row(0).array();
  const Index d = dy.cols();
  Matrix<T> dx(dy.rows(), d);
  for (Index r = 0; r < dy.rows(); ++r) {
    const T m1 = dxhat.row(r).sum() / T(d);
    const T m2 = dxhat.row(r).dot(c.xhat.row(r)) / T(d);
    dx.row(r) = c.rstd(r) * (dxhat.row(r).array() - m1 - c.xhat.row(r).array() * m2);
  }
  return dx;
}

/// Inverted-dropout scale mask: 0 with probability p, else 1/(1-p).
template <class T>
Matrix<T> dropout_mask(Index rows, Index cols, double p, Rng& rng) {
  Matrix<T> m(rows, cols);
  std::bernoulli_distribution keep(1.0 - p);
  const T scale = T(1.0 / (1.0 - p));
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = keep(rng) ? scale : T(0);
  return m;
}

template <class T>
void softmax_rows(Matrix<T>& s) {
  for (Index r = 0; r < s.rows(); ++r) {
    const T mx = s.row(r).maxCoeff();
    s.row(r) = (s.row(r).array() - mx).exp();
    s.row(r) /= s.row(r).sum();
  }
}

/// Row-wise cross-entropy. Returns the per-row losses; `dlogits` receives
/// (softmax - onehot) * scale.
template <class T>
std::vector<double> cross_entropy_rows(const Matrix<T>& logits, const std::vector<int>& targets, T scale,
                                       Matrix<T>* dlogits) {
  std::vector<double> losses(static_cast<std::size_t>(logits.rows()));
  if (dlogits != nullptr) dlogits->resize(logits.rows(), logits.cols());
  for (Index r = 0; r < logits.rows(); ++r) {
    const T mx = logits.row(r).maxCoeff();
    const auto shifted = (logits.row(r).array() - mx).eval();
    const T sum = shifted.exp().sum();
    const T lse = std::log(sum);
    const int t = targets[static_cast<std::size_t>(r)];
    losses[static_cast<std::size_t>(r)] = static_cast<double>(lse - shifted(t));
    if (dlogits != nullptr) {
      dlogits->row(r) = (shifted - lse).exp() * scale;
      (*dlogits)(r, t) -= scale;
    }
  }
  return losses;
}

// ---------------------------------------------------------------- encoder

template <class T>
struct LayerCache {
  Matrix<T> x_in, q, k, v;
  std::vector<Matrix<T>> probs;
  std::vector<Matrix<T>> attn_keep;
  Matrix<T> ctx;
  Matrix<T> attn_keep_out;
  LnCache<T> ln1;
  Matrix<T> x1;
  Matrix<T> ff_pre, ff_act;
  Matrix<T> ff_keep;
  LnCache<T> ln2;
};

template <class T>
struct EncoderCache {
  std::vector<int> ids;
  LnCache<T> emb_ln;
  Matrix<T> emb_keep;
  std::vector<LayerCache<T>> layers;
};

template <class T>
bool dropout_active(const ModelConfig& cfg, const EvalOptions& opts) {
  return opts.train && cfg.dropout_rate > 0.0;
}

template <class T>
Matrix<T> encoder_forward(const ModelConfig& cfg, const ParamLayout& L, const ParamSet<T>& P,
                          std::span<const int> ids, const EvalOptions& opts, EncoderCache<T>* cache) {
  const auto n = static_cast<Index>(ids.size());
  const Index hd = cfg.hidden_dim;
  if (n > cfg.max_positions) {
    throw ValidationError("input length " + std::to_string(n) + " exceeds max_positions " +
                          std::to_string(cfg.max_positions));
  }
  for (int id : ids) {
    if (id < 0 || id >= cfg.vocab_size) {
      throw ValidationError("token id " + std::to_string(id) + " outside vocabulary of size " +
                            std::to_string(cfg.vocab_size));
    }
  }
  const bool drop = dropout_active<T>(cfg, opts);
  if (drop && opts.rng == nullptr) throw ValidationError("train-mode encode needs a dropout rng");
  const auto& t = P.tensors;

  Matrix<T> x(n, hd);
  for (Index i = 0; i < n; ++i) x.row(i) = t[L.tok_emb].row(ids[static_cast<std::size_t>(i)]) + t[L.pos_emb].row(i);
  LnCache<T> emb_ln;
  x = layer_norm(x, t[L.emb_ln_g], t[L.emb_ln_b], &emb_ln);
  Matrix<T> emb_keep;
  if (drop) {
    emb_keep = dropout_mask<T>(n, hd, cfg.dropout_rate, *opts.rng);
    x = x.cwiseProduct(emb_keep);
  }
  if (cache != nullptr) {
    cache->ids.assign(ids.begin(), ids.end());
    cache->emb_ln = std::move(emb_ln);
    cache->emb_keep = std::move(emb_keep);
    cache->layers.clear();
  }

  const int heads = cfg.num_heads;
  const Index dh = hd / heads;
  const T scale = T(1) / std::sqrt(T(dh));
  for (const LayerParams& lp : L.layers) {
    LayerCache<T> lc;
    lc.x_in = x;
    lc.q = affine(x, t[lp.wq], t[lp.bq]);
    lc.k = affine(x, t[lp.wk], t[lp.bk]);
    lc.v = affine(x, t[lp.wv], t[lp.bv]);
    lc.ctx.resize(n, hd);
    for (int h = 0; h < heads; ++h) {
      const Index c0 = h * dh;
      Matrix<T> s = (lc.q.middleCols(c0, dh) * lc.k.middleCols(c0, dh).transpose()) * scale;
      softmax_rows(s);
      if (drop) {
        Matrix<T> keep = dropout_mask<T>(n, n, cfg.dropout_rate, *opts.rng);
        lc.ctx.middleCols(c0, dh) = s.cwiseProduct(keep) * lc.v.middleCols(c0, dh);
        lc.attn_keep.push_back(std::move(keep));
      } else {
        lc.ctx.middleCols(c0, dh) = s * lc.v.middleCols(c0, dh);
      }
      lc.probs.push_back(std::move(s));
    }
    Matrix<T> attn = affine(lc.ctx, t[lp.wo], t[lp.bo]);
    if (drop) {
      lc.attn_keep_out = dropout_mask<T>(n, hd, cfg.dropout_rate, *opts.rng);
      attn = attn.cwiseProduct(lc.attn_keep_out);
    }
    lc.x1 = layer_norm<T>(x + attn, t[lp.ln1_g], t[lp.ln1_b], &lc.ln1);
    lc.ff_pre = affine(lc.x1, t[lp.ff1_w], t[lp.ff1_b]);
    lc.ff_act = gelu(lc.ff_pre);
    Matrix<T> ff = affine(lc.ff_act, t[lp.ff2_w], t[lp.ff2_b]);
    if (drop) {
      lc.ff_keep = dropout_mask<T>(n, hd, cfg.dropout_rate, *opts.rng);
      ff = ff.cwiseProduct(lc.ff_keep);
    }
    x = layer_norm<T>(lc.x1 + ff, t[lp.ln2_g], t[lp.ln2_b], &lc.ln2);
    if (cache != nullptr) cache->layers.push_back(std::move(lc));
  }
  return x;
}

template <class T>
void encoder_backward(const ModelConfig& cfg, const ParamLayout& L, const ParamSet<T>& P,
                      const EncoderCache<T>& cache, Matrix<T> dx, ParamSet<T>& G) {
  const auto& t = P.tensors;
  auto& g = G.tensors;
  const int heads = cfg.num_heads;
  const Index hd = cfg.hidden_dim;
  const Index dh = hd / heads;
  const T scale = T(1) / std::sqrt(T(dh));

  for (std::size_t li = L.layers.size(); li-- > 0;) {
    const LayerParams& lp = L.layers[li];
    const LayerCache<T>& lc = cache.layers[li];
    // x_out = LN2(x1 + drop(ff2(gelu(ff1(x1)))))
    Matrix<T> dr2 = layer_norm_backward(dx, lc.ln2, t[lp.ln2_g], &g[lp.ln2_g], &g[lp.ln2_b]);
    Matrix<T> dff = lc.ff_keep.size() ? Matrix<T>(dr2.cwiseProduct(lc.ff_keep)) : dr2;
    g[lp.ff2_w] += lc.ff_act.transpose() * dff;
    g[lp.ff2_b] += dff.colwise().sum();
    Matrix<T> dpre = gelu_backward<T>(dff * t[lp.ff2_w].transpose(), lc.ff_pre);
    g[lp.ff1_w] += lc.x1.transpose() * dpre;
    g[lp.ff1_b] += dpre.colwise().sum();
    Matrix<T> dx1 = dr2 + dpre * t[lp.ff1_w].transpose();

    // x1 = LN1(x_in + drop(attn(x_in)))
    Matrix<T> dr1 = layer_norm_backward(dx1, lc.ln1, t[lp.ln1_g], &g[lp.ln1_g], &g[lp.ln1_b]);
    Matrix<T> dattn = lc.attn_keep_out.size() ? Matrix<T>(dr1.cwiseProduct(lc.attn_keep_out)) : dr1;
    g[lp.wo] += lc.ctx.transpose() * dattn;
    g[lp.bo] += dattn.colwise().sum();
    const Matrix<T> dctx = dattn * t[lp.wo].transpose();

    Matrix<T> dq(lc.q.rows(), hd);
    Matrix<T> dk(lc.k.rows(), hd);
    Matrix<T> dv(lc.v.rows(), hd);
    for (int h = 0; h < heads; ++h) {
      const Index c0 = h * dh;
      const Matrix<T>& p = lc.probs[static_cast<std::size_t>(h)];
      const bool drop = !lc.attn_keep.empty();
      const Matrix<T> pd = drop ? Matrix<T>(p.cwiseProduct(lc.attn_keep[static_cast<std::size_t>(h)])) : p;
      const auto dctx_h = dctx.middleCols(c0, dh);
      dv.middleCols(c0, dh) = pd.transpose() * dctx_h;
      Matrix<T> dp = dctx_h * lc.v.middleCols(c0, dh).transpose();
      if (drop) dp = dp.cwiseProduct(lc.attn_keep[static_cast<std::size_t>(h)]);
      // softmax backward: ds = p * (dp - rowsum(dp * p))
      const Vec<T> rowdot = dp.cwiseProduct(p).rowwise().sum();
      Matrix<T> ds = p.cwiseProduct(Matrix<T>(dp.colwise() - rowdot));
      ds *= scale;
      dq.middleCols(c0, dh) = ds * lc.k.middleCols(c0, dh);
      dk.middleCols(c0, dh) = ds.transpose() * lc.q.middleCols(c0, dh);
    }
    g[lp.wq] += lc.x_in.transpose() * dq;
    g[lp.bq] += dq.colwise().sum();
    g[lp.wk] += lc.x_in.transpose() * dk;
    g[lp.bk] += dk.colwise().sum();
    g[lp.wv] += lc.x_in.transpose() * dv;
    g[lp.bv] += dv.colwise().sum();
    dx = dr1 + dq * t[lp.wq].transpose() + dk * t[lp.wk].transpose() + dv * t[lp.wv].transpose();
  }

  if (cache.emb_keep.size()) dx = dx.cwiseProduct(cache.emb_keep);
  const Matrix<T> demb = layer_norm_backward(dx, cache.emb_ln, t[L.emb_ln_g], &g[L.emb_ln_g], &g[L.emb_ln_b]);
  for (Index i = 0; i < demb.rows(); ++i) {
    g[L.tok_emb].row(cache.ids[static_cast<std::size_t>(i)]) += demb.row(i);
    g[L.pos_emb].row(i) += demb.row(i);
  }
}

// ---------------------------------------------------------------- heads

/// Forward state of the two-layer SBO network for a stack of targets.
template <class T>
struct SboForward {
  Matrix<T> h0, z1, z2, h1, y;
  LnCache<T> ln1, ln2;
};

template <class T>
SboForward<T> sbo_forward(const ParamLayout& L, const ParamSet<T>& P, Matrix<T> h0) {
  const auto& t = P.tensors;
  SboForward<T> f;
  f.h0 = std::move(h0);
  f.z1 = affine(f.h0, t[L.sbo_w1], t[L.sbo_b1]);
  f.h1 = layer_norm<T>(gelu(f.z1), t[L.sbo_ln1_g], t[L.sbo_ln1_b], &f.ln1);
  f.z2 = affine(f.h1, t[L.sbo_w2], t[L.sbo_b2]);
  f.y = layer_norm<T>(gelu(f.z2), t[L.sbo_ln2_g], t[L.sbo_ln2_b], &f.ln2);
  return f;
}

/// Returns d(h0).
template <class T>
Matrix<T> sbo_backward(const ParamLayout& L, const ParamSet<T>& P, const SboForward<T>& f, const Matrix<T>& dy,
                       ParamSet<T>& G) {
  const auto& t = P.tensors;
  auto& g = G.tensors;
  Matrix<T> dz2 = gelu_backward<T>(layer_norm_backward(dy, f.ln2, t[L.sbo_ln2_g], &g[L.sbo_ln2_g], &g[L.sbo_ln2_b]),
                                   f.z2);
  g[L.sbo_w2] += f.h1.transpose() * dz2;
  g[L.sbo_b2] += dz2.colwise().sum();
  const Matrix<T> dh1 = dz2 * t[L.sbo_w2].transpose();
  Matrix<T> dz1 = gelu_backward<T>(layer_norm_backward(dh1, f.ln1, t[L.sbo_ln1_g], &g[L.sbo_ln1_g], &g[L.sbo_ln1_b]),
                                   f.z1);
  g[L.sbo_w1] += f.h0.transpose() * dz1;
  g[L.sbo_b1] += dz1.colwise().sum();
  return dz1 * t[L.sbo_w1].transpose();
}

/// MLM transform (optional) for a stack of hidden rows.
template <class T>
struct MlmForward {
  Matrix<T> in, z, out;
  LnCache<T> ln;
};

template <class T>
MlmForward<T> mlm_forward(const ModelConfig& cfg, const ParamLayout& L, const ParamSet<T>& P, Matrix<T> in) {
  MlmForward<T> f;
  f.in = std::move(in);
  if (cfg.mlm_transform) {
    const auto& t = P.tensors;
    f.z = affine(f.in, t[L.mlm_w], t[L.mlm_b]);
    f.out = layer_norm<T>(gelu(f.z), t[L.mlm_ln_g], t[L.mlm_ln_b], &f.ln);
  } else {
    f.out = f.in;
  }
  return f;
}

template <class T>
Matrix<T> mlm_backward(const ModelConfig& cfg, const ParamLayout& L, const ParamSet<T>& P, const MlmForward<T>& f,
                       const Matrix<T>& dout, ParamSet<T>& G) {
  if (!cfg.mlm_transform) return dout;
  const auto& t = P.tensors;
  auto& g = G.tensors;
  Matrix<T> dz =
      gelu_backward<T>(layer_norm_backward(dout, f.ln, t[L.mlm_ln_g], &g[L.mlm_ln_g], &g[L.mlm_ln_b]), f.z);
  g[L.mlm_w] += f.in.transpose() * dz;
  g[L.mlm_b] += dz.colwise().sum();
  return dz * t[L.mlm_w].transpose();
}

template <class T>
Matrix<T> tied_logits(const ParamLayout& L, const ParamSet<T>& P, const Matrix<T>& rows, int bias_index) {
  Matrix<T> logits = rows * P.tensors[L.tok_emb].transpose();
  logits.rowwise() += P.tensors[bias_index].row(0);
  return logits;
}

void check_finite(double v, const char* term) {
  if (!std::isfinite(v)) throw NonFiniteError(term, std::string("non-finite ") + term + " loss");
}

}  // namespace

// ---------------------------------------------------------------- config

std::vector<std::string> ModelConfig::problems() const {
  std::vector<std::string> out;
  if (vocab_size <= kNumSpecials) out.push_back("model.vocab_size must exceed the number of special tokens");
  if (hidden_dim <= 0) out.push_back("model.hidden_dim must be positive");
  if (num_layers < 0) out.push_back("model.num_layers must be >= 0");
  if (num_heads <= 0 || (hidden_dim > 0 && hidden_dim % std::max(num_heads, 1) != 0)) {
    out.push_back("model.hidden_dim must be divisible by model.num_heads");
  }
  if (ffn_dim <= 0) out.push_back("model.ffn_dim must be positive");
  if (max_positions <= 2) out.push_back("model.max_positions must be > 2");
  if (sbo_pos_dim < 1) out.push_back("model.sbo_pos_dim must be >= 1");
  if (sbo_hidden_dim < 1) out.push_back("model.sbo_hidden_dim must be >= 1");
  if (sbo_max_span < 1) out.push_back("model.sbo_max_span must be >= 1");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) out.push_back("model.dropout_rate must be in [0, 1)");
  if (!(init_std > 0.0)) out.push_back("model.init_std must be positive");
  return out;
}

void ModelConfig::validate() const {
  auto p = problems();
  if (!p.empty()) throw ValidationError("invalid model config", std::move(p));
}

std::string to_string(const Objectives& o) {
  std::string s;
  auto add = [&](bool on, const char* name) {
    if (!on) return;
    if (!s.empty()) s += ',';
    s += name;
  };
  add(o.mlm, "mlm");
  add(o.sbo, "sbo");
  add(o.nsp, "nsp");
  return s;
}

Objectives parse_objectives(const std::string& list) {
  Objectives o{false, false, false};
  std::stringstream ss(list);
  for (std::string item; std::getline(ss, item, ',');) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (item == "mlm") {
      o.mlm = true;
    } else if (item == "sbo") {
      o.sbo = true;
    } else if (item == "nsp") {
      o.nsp = true;
    } else if (!item.empty()) {
      throw ValidationError("unknown objective '" + item + "' (expected mlm, sbo, nsp)");
    }
  }
  return o;
}

LossBreakdown& LossBreakdown::operator+=(const LossBreakdown& o) {
  mlm_sum += o.mlm_sum;
  sbo_sum += o.sbo_sum;
  nsp_sum += o.nsp_sum;
  mlm_count += o.mlm_count;
  sbo_count += o.sbo_count;
  nsp_count += o.nsp_count;
  return *this;
}

// ---------------------------------------------------------------- ParamSet

template <class T>
std::size_t ParamSet<T>::num_scalars() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += static_cast<std::size_t>(t.size());
  return n;
}

template <class T>
int ParamSet<T>::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (specs[i].name == name) return static_cast<int>(i);
  }
  return -1;
}

template <class T>
ParamSet<T> ParamSet<T>::zeros_like() const {
  ParamSet out;
  out.specs = specs;
  for (const auto& t : tensors) out.tensors.push_back(Matrix<T>::Zero(t.rows(), t.cols()));
  return out;
}

template <class T>
void ParamSet<T>::set_zero() {
  for (auto& t : tensors) t.setZero();
}

template <class T>
ParamSet<T>& ParamSet<T>::operator+=(const ParamSet& other) {
  for (std::size_t i = 0; i < tensors.size(); ++i) tensors[i] += other.tensors[i];
  return *this;
}

template <class T>
T ParamSet<T>::squared_norm() const {
  T s = 0;
  for (const auto& t : tensors) s += t.squaredNorm();
  return s;
}

template <class T>
bool ParamSet<T>::all_finite() const {
  return std::all_of(tensors.begin(), tensors.end(), [](const Matrix<T>& t) { return t.allFinite(); });
}

template struct ParamSet<float>;
template struct ParamSet<double>;

// ---------------------------------------------------------------- Model

template <class T>
Model<T>::Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  auto add = [this](std::string name, std::vector<std::int64_t> shape, bool decay) {
    const Index rows = shape.size() == 1 ? 1 : shape[0];
    const Index cols = shape.size() == 1 ? shape[0] : shape[1];
    params_.specs.push_back({std::move(name), std::move(shape), decay});
    params_.tensors.push_back(Matrix<T>::Zero(rows, cols));
    return static_cast<int>(params_.tensors.size() - 1);
  };
  const std::int64_t V = cfg_.vocab_size;
  const std::int64_t H = cfg_.hidden_dim;
  const std::int64_t F = cfg_.ffn_dim;
  const std::int64_t S = cfg_.sbo_hidden_dim;
  const std::int64_t Pd = cfg_.sbo_pos_dim;

  auto& L = layout_;
  L.tok_emb = add("embeddings.token", {V, H}, true);
  L.pos_emb = add("embeddings.position", {cfg_.max_positions, H}, true);
  L.emb_ln_g = add("embeddings.ln.gain", {H}, false);
  L.emb_ln_b = add("embeddings.ln.bias", {H}, false);
  for (int l = 0; l < cfg_.num_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    LayerParams lp{};
    lp.wq = add(p + "attn.query.weight", {H, H}, true);
    lp.bq = add(p + "attn.query.bias", {H}, false);
    lp.wk = add(p + "attn.key.weight", {H, H}, true);
    lp.bk = add(p + "attn.key.bias", {H}, false);
    lp.wv = add(p + "attn.value.weight", {H, H}, true);
    lp.bv = add(p + "attn.value.bias", {H}, false);
    lp.wo = add(p + "attn.output.weight", {H, H}, true);
    lp.bo = add(p + "attn.output.bias", {H}, false);
    lp.ln1_g = add(p + "attn.ln.gain", {H}, false);
    lp.ln1_b = add(p + "attn.ln.bias", {H}, false);
    lp.ff1_w = add(p + "ffn.in.weight", {H, F}, true);
    lp.ff1_b = add(p + "ffn.in.bias", {F}, false);
    lp.ff2_w = add(p + "ffn.out.weight", {F, H}, true);
    lp.ff2_b = add(p + "ffn.out.bias", {H}, false);
    lp.ln2_g = add(p + "ffn.ln.gain", {H}, false);
    lp.ln2_b = add(p + "ffn.ln.bias", {H}, false);
    L.layers.push_back(lp);
  }
  if (cfg_.mlm_transform) {
    L.mlm_w = add("mlm.transform.weight", {H, H}, true);
    L.mlm_b = add("mlm.transform.bias", {H}, false);
    L.mlm_ln_g = add("mlm.transform.ln.gain", {H}, false);
    L.mlm_ln_b = add("mlm.transform.ln.bias", {H}, false);
  }
  L.mlm_bias = add("mlm.output.bias", {V}, false);
  L.sbo_pos = add("sbo.position", {cfg_.sbo_max_span, Pd}, true);
  L.sbo_w1 = add("sbo.w1.weight", {2 * H + Pd, S}, true);
  L.sbo_b1 = add("sbo.w1.bias", {S}, false);
  L.sbo_ln1_g = add("sbo.ln1.gain", {S}, false);
  L.sbo_ln1_b = add("sbo.ln1.bias", {S}, false);
  L.sbo_w2 = add("sbo.w2.weight", {S, H}, true);
  L.sbo_b2 = add("sbo.w2.bias", {H}, false);
  L.sbo_ln2_g = add("sbo.ln2.gain", {H}, false);
  L.sbo_ln2_b = add("sbo.ln2.bias", {H}, false);
  L.sbo_bias = add("sbo.output.bias", {V}, false);
  L.nsp_w = add("nsp.weight", {H, 2}, true);
  L.nsp_b = add("nsp.bias", {2}, false);
  L.qa_start_w = add("span_select.start.weight", {H}, true);
  L.qa_start_b = add("span_select.start.bias", {1}, false);
  L.qa_end_w = add("span_select.end.weight", {H}, true);
  L.qa_end_b = add("span_select.end.bias", {1}, false);

  for (std::size_t i = 0; i < params_.specs.size(); ++i) {
    const auto& name = params_.specs[i].name;
    if (name.size() > 5 && name.compare(name.size() - 5, 5, ".gain") == 0) params_.tensors[i].setOnes();
  }
}

template <class T>
void Model<T>::init(std::uint64_t seed) {
  Rng rng = keyed_rng(seed, {stream::kInit});
  std::normal_distribution<double> normal(0.0, cfg_.init_std);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& t = params_.tensors[i];
    const auto& name = params_.specs[i].name;
    if (params_.specs[i].decay) {
      for (Index j = 0; j < t.size(); ++j) t.data()[j] = static_cast<T>(normal(rng));
    } else if (name.size() > 5 && name.compare(name.size() - 5, 5, ".gain") == 0) {
      t.setOnes();
    } else {
      t.setZero();
    }
  }
}

template <class T>
EncoderOutput<T> Model<T>::encode(std::span<const int> ids, const EvalOptions& opts) const {
  return {encoder_forward<T>(cfg_, layout_, params_, ids, opts, nullptr)};
}

template <class T>
RowVec<T> Model<T>::mlm_logits(const RowVec<T>& hidden) const {
  const MlmForward<T> f = mlm_forward<T>(cfg_, layout_, params_, Matrix<T>(hidden));
  return tied_logits<T>(layout_, params_, f.out, layout_.mlm_bias).row(0);
}

template <class T>
std::size_t Model<T>::sbo_position_row(std::size_t s, std::size_t i) const {
  if (i < s) throw ValidationError("SBO target precedes its span start");
  // Offsets past the table (possible when long words split into many subwords) share the last row.
  return std::min<std::size_t>(i - s, static_cast<std::size_t>(cfg_.sbo_max_span - 1));
}

template <class T>
RowVec<T> Model<T>::sbo_vector(const EncoderOutput<T>& out, const SpanMask& span, std::size_t i) const {
  if (span.start == 0 || span.end + 1 >= out.length()) {
    throw ValidationError("SBO needs observed tokens on both sides of the span");
  }
  if (i < span.start || i > span.end) throw ValidationError("SBO target outside its span");
  const Index H = cfg_.hidden_dim;
  Matrix<T> h0(1, 2 * H + cfg_.sbo_pos_dim);
  h0.block(0, 0, 1, H) = out.hidden.row(static_cast<Index>(span.start - 1));
  h0.block(0, H, 1, H) = out.hidden.row(static_cast<Index>(span.end + 1));
  h0.block(0, 2 * H, 1, cfg_.sbo_pos_dim) =
      params_.tensors[layout_.sbo_pos].row(static_cast<Index>(sbo_position_row(span.start, i)));
  return sbo_forward<T>(layout_, params_, std::move(h0)).y.row(0);
}

template <class T>
RowVec<T> Model<T>::sbo_logits(const EncoderOutput<T>& out, const SpanMask& span, std::size_t i) const {
  return tied_logits<T>(layout_, params_, Matrix<T>(sbo_vector(out, span, i)), layout_.sbo_bias).row(0);
}

template <class T>
RowVec<T> Model<T>::nsp_logits(const RowVec<T>& cls_hidden) const {
  return cls_hidden * params_.tensors[layout_.nsp_w] + params_.tensors[layout_.nsp_b];
}

template <class T>
SpanLogits<T> Model<T>::span_select_logits(const EncoderOutput<T>& out) const {
  const auto& t = params_.tensors;
  SpanLogits<T> s;
  s.start = (out.hidden * t[layout_.qa_start_w].transpose()).transpose();
  s.start.array() += t[layout_.qa_start_b](0, 0);
  s.end = (out.hidden * t[layout_.qa_end_w].transpose()).transpose();
  s.end.array() += t[layout_.qa_end_b](0, 0);
  return s;
}

template <class T>
LossResult<T> Model<T>::loss(const MaskedBatch& batch, const Objectives& obj, const EvalOptions& opts) const {
  LossResult<T> res;
  if (opts.compute_grads) res.grads = params_.zeros_like();
  auto& bd = res.breakdown;

  std::size_t mlm_total = 0;
  std::size_t sbo_total = 0;
  std::size_t nsp_total = 0;
  for (const auto& ex : batch) {
    if (obj.mlm) mlm_total += ex.mlm_targets.size();
    if (obj.sbo) {
      for (const auto& sp : ex.spans) sbo_total += sp.length();
    }
    if (obj.nsp && ex.nsp_label.has_value()) ++nsp_total;
  }
  const T mlm_scale = mlm_total ? T(1) / T(mlm_total) : T(0);
  const T sbo_scale = sbo_total ? T(1) / T(sbo_total) : T(0);
  const T nsp_scale = nsp_total ? T(1) / T(nsp_total) : T(0);
  const Index H = cfg_.hidden_dim;
  const auto& L = layout_;
  const auto& t = params_.tensors;

  for (const auto& ex : batch) {
    const bool want_mlm = obj.mlm && !ex.mlm_targets.empty();
    const bool want_sbo = obj.sbo && !ex.spans.empty();
    const bool want_nsp = obj.nsp && ex.nsp_label.has_value();
    if (!want_mlm && !want_sbo && !want_nsp) continue;

    EncoderCache<T> cache;
    const Matrix<T> hidden = encoder_forward<T>(cfg_, L, params_, ex.input_ids, opts, &cache);
    Matrix<T> dhidden = Matrix<T>::Zero(hidden.rows(), H);
    Matrix<T> dlogits;

    if (want_mlm) {
      const auto m = static_cast<Index>(ex.mlm_targets.size());
      Matrix<T> rows(m, H);
      std::vector<int> targets;
      for (Index j = 0; j < m; ++j) {
        const auto& tg = ex.mlm_targets[static_cast<std::size_t>(j)];
        rows.row(j) = hidden.row(static_cast<Index>(tg.position));
        targets.push_back(tg.original_id);
      }
      const MlmForward<T> f = mlm_forward<T>(cfg_, L, params_, std::move(rows));
      const Matrix<T> logits = tied_logits<T>(L, params_, f.out, L.mlm_bias);
      const auto losses = cross_entropy_rows<T>(logits, targets, mlm_scale, opts.compute_grads ? &dlogits : nullptr);
      for (double l : losses) bd.mlm_sum += l;
      bd.mlm_count += losses.size();
      if (opts.compute_grads) {
        auto& g = res.grads.tensors;
        g[L.tok_emb] += dlogits.transpose() * f.out;
        g[L.mlm_bias] += dlogits.colwise().sum();
        const Matrix<T> drows = mlm_backward<T>(cfg_, L, params_, f, dlogits * t[L.tok_emb], res.grads);
        for (Index j = 0; j < m; ++j) {
          dhidden.row(static_cast<Index>(ex.mlm_targets[static_cast<std::size_t>(j)].position)) += drows.row(j);
        }
      }
    }

    if (want_sbo) {
      std::size_t m = 0;
      for (const auto& sp : ex.spans) m += sp.length();
      const Index Pd = cfg_.sbo_pos_dim;
      Matrix<T> h0(static_cast<Index>(m), 2 * H + Pd);
      std::vector<int> targets;
      struct Route {
        Index left, right, pos;
      };
      std::vector<Route> routes;
      Index r = 0;
      for (const auto& sp : ex.spans) {
        if (sp.start == 0 || sp.end + 1 >= static_cast<std::size_t>(hidden.rows())) {
          throw ValidationError("span lacks observed boundary tokens");
        }
        for (std::size_t i = sp.start; i <= sp.end; ++i, ++r) {
          const Route route{static_cast<Index>(sp.start - 1), static_cast<Index>(sp.end + 1),
                            static_cast<Index>(sbo_position_row(sp.start, i))};
          h0.block(r, 0, 1, H) = hidden.row(route.left);
          h0.block(r, H, 1, H) = hidden.row(route.right);
          h0.block(r, 2 * H, 1, Pd) = t[L.sbo_pos].row(route.pos);
          routes.push_back(route);
          targets.push_back(sp.original_ids[i - sp.start]);
        }
      }
      const SboForward<T> f = sbo_forward<T>(L, params_, std::move(h0));
      const Matrix<T> logits = tied_logits<T>(L, params_, f.y, L.sbo_bias);
      const auto losses = cross_entropy_rows<T>(logits, targets, sbo_scale, opts.compute_grads ? &dlogits : nullptr);
      for (double l : losses) bd.sbo_sum += l;
      bd.sbo_count += losses.size();
      if (opts.compute_grads) {
        auto& g = res.grads.tensors;
        g[L.tok_emb] += dlogits.transpose() * f.y;
        g[L.sbo_bias] += dlogits.colwise().sum();
        const Matrix<T> dh0 = sbo_backward<T>(L, params_, f, dlogits * t[L.tok_emb], res.grads);
        for (std::size_t j = 0; j < routes.size(); ++j) {
          const auto jj = static_cast<Index>(j);
          dhidden.row(routes[j].left) += dh0.block(jj, 0, 1, H);
          dhidden.row(routes[j].right) += dh0.block(jj, H, 1, H);
          g[L.sbo_pos].row(routes[j].pos) += dh0.block(jj, 2 * H, 1, Pd);
        }
      }
    }

    if (want_nsp) {
      const Matrix<T> cls = hidden.row(0);
      const Matrix<T> logits = affine<T>(cls, t[L.nsp_w], t[L.nsp_b]);
      const auto losses =
          cross_entropy_rows<T>(logits, {*ex.nsp_label ? 1 : 0}, nsp_scale, opts.compute_grads ? &dlogits : nullptr);
      bd.nsp_sum += losses[0];
      bd.nsp_count += 1;
      if (opts.compute_grads) {
        auto& g = res.grads.tensors;
        g[L.nsp_w] += cls.transpose() * dlogits;
        g[L.nsp_b] += dlogits;
        dhidden.row(0) += dlogits * t[L.nsp_w].transpose();
      }
    }

    if (opts.compute_grads) encoder_backward<T>(cfg_, L, params_, cache, std::move(dhidden), res.grads);
  }

  check_finite(bd.mlm_sum, "mlm");
  check_finite(bd.sbo_sum, "sbo");
  check_finite(bd.nsp_sum, "nsp");
  return res;
}

template <class T>
SpanSelectResult<T> Model<T>::span_select_loss(const std::vector<SpanSelectExample>& batch,
                                               const EvalOptions& opts) const {
  SpanSelectResult<T> res;
  if (opts.compute_grads) res.grads = params_.zeros_like();
  if (batch.empty()) return res;
  const auto& L = layout_;
  const auto& t = params_.tensors;
  const T scale = T(0.5) / T(batch.size());
  for (const auto& ex : batch) {
    if (ex.start > ex.end || ex.end >= ex.input_ids.size()) {
      throw ValidationError("answer span outside the input sequence");
    }
    EncoderCache<T> cache;
    const Matrix<T> hidden = encoder_forward<T>(cfg_, L, params_, ex.input_ids, opts, &cache);
    Matrix<T> start_logits = t[L.qa_start_w] * hidden.transpose();
    start_logits.array() += t[L.qa_start_b](0, 0);
    Matrix<T> end_logits = t[L.qa_end_w] * hidden.transpose();
    end_logits.array() += t[L.qa_end_b](0, 0);
    Matrix<T> dstart;
    Matrix<T> dend;
    const auto ls = cross_entropy_rows<T>(start_logits, {static_cast<int>(ex.start)}, scale,
                                          opts.compute_grads ? &dstart : nullptr);
    const auto le = cross_entropy_rows<T>(end_logits, {static_cast<int>(ex.end)}, scale,
                                          opts.compute_grads ? &dend : nullptr);
    res.loss_sum += 0.5 * (ls[0] + le[0]);
    res.count += 1;
    if (opts.compute_grads) {
      auto& g = res.grads.tensors;
      g[L.qa_start_w] += dstart * hidden;
      g[L.qa_start_b](0, 0) += dstart.sum();
      g[L.qa_end_w] += dend * hidden;
      g[L.qa_end_b](0, 0) += dend.sum();
      Matrix<T> dhidden = dstart.transpose() * t[L.qa_start_w] + dend.transpose() * t[L.qa_end_w];
      encoder_backward<T>(cfg_, L, params_, cache, std::move(dhidden), res.grads);
    }
  }
  check_finite(res.loss_sum, "span_select");
  return res;
}

template <class T>
std::pair<std::size_t, std::size_t> best_span(const SpanLogits<T>& logits, const IndexRange& region,
                                              std::size_t max_len) {
  std::pair<std::size_t, std::size_t> best{0, 0};
  T best_score = logits.start(0) + logits.end(0);
  for (std::size_t s = region.begin; s < region.end; ++s) {
    for (std::size_t e = s; e < region.end && e - s < max_len; ++e) {
      const T score = logits.start(static_cast<Index>(s)) + logits.end(static_cast<Index>(e));
      if (score > best_score) {
        best_score = score;
        best = {s, e};
      }
    }
  }
  return best;
}

double cross_entropy(std::span<const double> logits, int target) {
  Matrix<double> row(1, static_cast<Index>(logits.size()));
  for (std::size_t i = 0; i < logits.size(); ++i) row(0, static_cast<Index>(i)) = logits[i];
  return cross_entropy_rows<double>(row, {target}, 1.0, nullptr)[0];
}

template class Model<float>;
template class Model<double>;
template std::pair<std::size_t, std::size_t> best_span<float>(const SpanLogits<float>&, const IndexRange&,
                                                              std::size_t);
template std::pair<std::size_t, std::size_t> best_span<double>(const SpanLogits<double>&, const IndexRange&,
                                                               std::size_t);

}  // namespace spanlab
