#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "spanlab/common.hpp"
#include "spanlab/masking.hpp"

namespace spanlab {

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

struct ModelConfig {
  int vocab_size = 0;
  int hidden_dim = 64;
  int num_layers = 2;
  int num_heads = 4;
  int ffn_dim = 256;
  int max_positions = 128;
  int sbo_pos_dim = 32;
  int sbo_hidden_dim = 64;
  /// Rows of the SBO relative-position table (the masking l_max).
  int sbo_max_span = 10;
  double dropout_rate = 0.1;
  double init_std = 0.02;
  /// Dense + GeLU + LayerNorm between the encoder output and the tied MLM projection.
  bool mlm_transform = true;

  std::vector<std::string> problems() const;
  void validate() const;
};

struct Objectives {
  bool mlm = true;
  bool sbo = false;
  bool nsp = false;

  bool operator==(const Objectives&) const = default;
};

std::string to_string(const Objectives& o);
/// "mlm,sbo" style lists.
Objectives parse_objectives(const std::string& list);

struct TensorSpec {
  std::string name;
  /// [n] for vectors, [rows, cols] for matrices.
  std::vector<std::int64_t> shape;
  /// Decoupled weight decay applies (weight matrices and embeddings, not biases or LayerNorm).
  bool decay = true;
};

/// Every learnable tensor, in a fixed order. Vectors are stored as 1 x n.
template <class T>
struct ParamSet {
  std::vector<TensorSpec> specs;
  std::vector<Matrix<T>> tensors;

  std::size_t size() const { return tensors.size(); }
  std::size_t num_scalars() const;
  /// -1 if absent.
  int index_of(const std::string& name) const;
  ParamSet zeros_like() const;
  void set_zero();
  ParamSet& operator+=(const ParamSet& other);
  T squared_norm() const;
  bool all_finite() const;
  template <class U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    out.specs = specs;
    for (const auto& t : tensors) out.tensors.push_back(t.template cast<U>());
    return out;
  }
};

struct LayerParams {
  int wq, bq, wk, bk, wv, bv, wo, bo;
  int ln1_g, ln1_b;
  int ff1_w, ff1_b, ff2_w, ff2_b;
  int ln2_g, ln2_b;
};

/// Tensor indices into ParamSet. The token embedding is the only
/// vocabulary-sized matrix; the MLM and SBO heads project through it.
struct ParamLayout {
  int tok_emb, pos_emb, emb_ln_g, emb_ln_b;
  std::vector<LayerParams> layers;
  int mlm_w = -1, mlm_b = -1, mlm_ln_g = -1, mlm_ln_b = -1;
  int mlm_bias;
  int sbo_pos, sbo_w1, sbo_b1, sbo_ln1_g, sbo_ln1_b, sbo_w2, sbo_b2, sbo_ln2_g, sbo_ln2_b, sbo_bias;
  int nsp_w, nsp_b;
  int qa_start_w, qa_start_b, qa_end_w, qa_end_b;
};

template <class T>
struct EncoderOutput {
  /// One row per input position.
  Matrix<T> hidden;
  std::size_t length() const { return static_cast<std::size_t>(hidden.rows()); }
};

struct LossBreakdown {
  double mlm_sum = 0.0;
  double sbo_sum = 0.0;
  double nsp_sum = 0.0;
  std::size_t mlm_count = 0;
  std::size_t sbo_count = 0;
  std::size_t nsp_count = 0;

  double mlm_mean() const { return mlm_count ? mlm_sum / static_cast<double>(mlm_count) : 0.0; }
  double sbo_mean() const { return sbo_count ? sbo_sum / static_cast<double>(sbo_count) : 0.0; }
  double nsp_mean() const { return nsp_count ? nsp_sum / static_cast<double>(nsp_count) : 0.0; }
  /// mean MLM + mean SBO + mean NSP.
  double total() const { return mlm_mean() + sbo_mean() + nsp_mean(); }
  LossBreakdown& operator+=(const LossBreakdown& o);
};

template <class T>
struct LossResult {
  LossBreakdown breakdown;
  /// Same layout as the model parameters; empty when gradients were not requested.
  ParamSet<T> grads;
  double total() const { return breakdown.total(); }
};

/// Dropout and gradient switches for one evaluation.
struct EvalOptions {
  bool train = false;
  /// Dropout source; required when train is true and dropout_rate > 0.
  Rng* rng = nullptr;
  bool compute_grads = true;
};

/// One span-selection example: targets are positions in input_ids
/// (position 0, the [CLS] token, for unanswerable questions).
struct SpanSelectExample {
  std::vector<int> input_ids;
  std::size_t start = 0;
  std::size_t end = 0;
  /// Positions a prediction may point at (besides [CLS]); [first, last) of the context.
  IndexRange answer_region;
};

template <class T>
struct SpanLogits {
  RowVec<T> start;
  RowVec<T> end;
};

template <class T>
struct SpanSelectResult {
  double loss_sum = 0.0;
  std::size_t count = 0;
  ParamSet<T> grads;
  double mean() const { return count ? loss_sum / static_cast<double>(count) : 0.0; }
};

/// Post-norm transformer encoder with learned absolute positions and GeLU,
/// plus MLM, SBO, NSP and start/end span-selection heads. Gradients are exact
/// reverse-mode.
template <class T>
class Model {
 public:
  explicit Model(ModelConfig cfg);

  /// normal(0, init_std) weights, LayerNorm gains 1, biases 0.
  void init(std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  const ParamLayout& layout() const { return layout_; }
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }

  EncoderOutput<T> encode(std::span<const int> ids, const EvalOptions& opts = {}) const;

  /// Tied-embedding projection (after the optional transform) plus bias.
  RowVec<T> mlm_logits(const RowVec<T>& hidden) const;
  /// The SBO representation y_i of target position `i` inside `span`.
  RowVec<T> sbo_vector(const EncoderOutput<T>& out, const SpanMask& span, std::size_t i) const;
  RowVec<T> sbo_logits(const EncoderOutput<T>& out, const SpanMask& span, std::size_t i) const;
  RowVec<T> nsp_logits(const RowVec<T>& cls_hidden) const;
  SpanLogits<T> span_select_logits(const EncoderOutput<T>& out) const;

  /// Row of the SBO position table used for target i of a span starting at s.
  std::size_t sbo_position_row(std::size_t s, std::size_t i) const;

  /// Per-token cross-entropies for the enabled objectives plus gradients of
  /// mean(MLM) + mean(SBO) + mean(NSP).
  LossResult<T> loss(const MaskedBatch& batch, const Objectives& objectives, const EvalOptions& opts = {}) const;

  /// Mean over examples of (CE(start) + CE(end)) / 2.
  SpanSelectResult<T> span_select_loss(const std::vector<SpanSelectExample>& batch,
                                       const EvalOptions& opts = {}) const;

  template <class U>
  Model<U> cast() const {
    Model<U> out(cfg_);
    out.params() = params_.template cast<U>();
    return out;
  }

 private:
  ModelConfig cfg_;
  ParamLayout layout_;
  ParamSet<T> params_;
};

/// argmax over start <= end, end - start < max_len within the answer region, or
/// (0, 0) when the [CLS] score s[0] + e[0] wins.
template <class T>
std::pair<std::size_t, std::size_t> best_span(const SpanLogits<T>& logits, const IndexRange& region,
                                              std::size_t max_len);

/// Cross-entropy of one logit row against `target`, computed stably.
double cross_entropy(std::span<const double> logits, int target);

extern template class Model<float>;
extern template class Model<double>;

}  // namespace spanlab
