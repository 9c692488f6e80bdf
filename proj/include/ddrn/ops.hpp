#ifndef DDRN_OPS_HPP_
#define DDRN_OPS_HPP_

#include <cstddef>
#include <vector>

#include "ddrn/tape.hpp"
#include "ddrn/tensor.hpp"

// Differentiable operations on Var<T>. All operate on row-major matrices
// whose row length is the trailing extent. The only broadcast is a length-n
// vector applied along the trailing axis (bias/gain); any other shape
// mismatch throws ShapeError.

namespace ddrn {

// Dense GEMM kernels shared by ops and non-tape code. C (+)= op(A)·op(B).
namespace kernels {
template <typename T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c, bool accumulate);
template <typename T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c, bool accumulate);
template <typename T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c, bool accumulate);
}  // namespace kernels

/// [m×k]·[k×n]
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b);
/// [m×k]·[n×k]ᵀ
template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> transpose(const Var<T>& a);

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> scale(const Var<T>& a, T factor);
/// a[r][c] + v[c]
template <typename T>
Var<T> add_row_vector(const Var<T>& a, const Var<T>& v);
/// a[r][c] * v[c]
template <typename T>
Var<T> mul_row_vector(const Var<T>& a, const Var<T>& v);

/// Exact (erf) GELU.
template <typename T>
Var<T> gelu(const Var<T>& x);

template <typename T>
Var<T> sum(const Var<T>& x);
template <typename T>
Var<T> mean(const Var<T>& x);
/// sqrt(Σ x²); gradient at the origin is taken as zero.
template <typename T>
Var<T> frobenius_norm(const Var<T>& x);

/// Softmax along the trailing axis, max-subtracted.
template <typename T>
Var<T> softmax(const Var<T>& x);

/// Row-wise (x - mean)/sqrt(var + eps) * gain + bias.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps = T(1e-5));

/// x·Wᵀ + b with W stored [out × in]. Pass an invalid Var to skip the bias.
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias = Var<T>());

/// Mean over rows of -Σ_c q_c log softmax(logits)_c with
/// q = (1-ε)·onehot(label) + ε/C.
template <typename T>
Var<T> cross_entropy_with_label_smoothing(const Var<T>& logits, const std::vector<int>& labels,
                                          T smoothing);

/// Running statistics owned by the caller; updated only in training mode.
template <typename T>
struct BatchNormStats {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T momentum = T(0.1);
  T eps = T(1e-5);

  explicit BatchNormStats(std::size_t dim = 0) : running_mean(dim, T(0)), running_var(dim, T(1)) {}
};

/// Batch normalisation over the row axis of [B×d]. Training mode uses batch
/// statistics (biased variance) and updates `stats` with the unbiased one.
/// Bias may be an invalid Var (BN-neck without shift).
template <typename T>
Var<T> batch_norm_1d(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, BatchNormStats<T>& stats,
                     bool training);

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts);
template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts);
/// out[i] = x[indices[i]]; backward scatter-adds.
template <typename T>
Var<T> gather_rows(const Var<T>& x, const std::vector<std::size_t>& indices);
/// Columns [begin, end).
template <typename T>
Var<T> slice_cols(const Var<T>& x, std::size_t begin, std::size_t end);
/// [groups·n × d] -> [groups × d], mean over each block of n consecutive rows.
template <typename T>
Var<T> mean_pool(const Var<T>& x, std::size_t groups);

/// Row-wise L2 normalisation. Throws NumericError on a row with norm < min_norm.
template <typename T>
Var<T> l2_normalize_rows(const Var<T>& x, T min_norm = T(1e-12));

/// [B × C·k] -> [B × C], max over each block of k columns; gradient routes to
/// the argmax (lowest index on ties).
template <typename T>
Var<T> group_max_cols(const Var<T>& x, std::size_t k);

/// out row i = candidates[choice[i]] row i. Gradient flows only to the chosen candidate.
template <typename T>
Var<T> select_rows(const std::vector<Var<T>>& candidates, const std::vector<std::size_t>& choice);

/// Forward value is `hard` verbatim; backward passes the incoming gradient to `soft` unchanged.
template <typename T>
Var<T> straight_through(const Tensor<T>& hard, const Var<T>& soft);

/// Multi-head scaled dot-product attention over `batch` independent
/// sequences of `seq` tokens. q, k, v are [batch·seq × d]. If `weights` is
/// non-null it receives the [batch × heads × seq × seq] attention weights.
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t batch, std::size_t seq,
                 std::size_t heads, std::vector<T>* weights = nullptr);

template <typename T>
struct AttentionParams {
  Var<T> q_weight, q_bias;
  Var<T> k_weight, k_bias;
  Var<T> v_weight, v_bias;
  Var<T> out_weight, out_bias;
};

/// Linear q/k/v projections, attention(), output projection. x is [batch·seq × d].
template <typename T>
Var<T> multi_head_attention(const Var<T>& x, const AttentionParams<T>& params, std::size_t batch, std::size_t seq,
                            std::size_t heads, std::vector<T>* weights = nullptr);

}  // namespace ddrn

#endif  // DDRN_OPS_HPP_
