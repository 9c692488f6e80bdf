#ifndef DDRN_EMBEDDING_SPACE_HPP_
#define DDRN_EMBEDDING_SPACE_HPP_

#include <cstddef>
#include <cstdint>
#include <vector>

#include "ddrn/rng.hpp"
#include "ddrn/tape.hpp"
#include "ddrn/tensor.hpp"

// Discrete embedding space: a trainable codebook of x vectors of dimension d.
// Patch tokens are replaced by the codebook row with the largest dot product
// (argmax in the forward pass); gradients follow the Gumbel-Softmax mixture
// of codebook rows (straight-through).

namespace ddrn {

/// Entries i.i.d. normal with std 1/sqrt(d). Throws ConfigError unless x >= 2, d >= 1.
template <typename T>
Tensor<T> init_codebook(std::size_t size, std::size_t dim, Rng& rng);

/// Checks x >= 2, d >= 1 and finite entries.
template <typename T>
void validate_codebook(const Tensor<T>& codebook);

/// Row-L2-normalised copy. Throws NumericError on a zero row.
template <typename T>
Tensor<T> normalized_rows(const Tensor<T>& codebook);

/// Source of the G_i terms: fresh samples, an injected array, or zeros.
class GumbelNoise {
 public:
  enum class Mode { kSampled, kFrozen, kZero };

  static GumbelNoise sampled(std::uint64_t seed);
  static GumbelNoise frozen(std::vector<double> values);
  static GumbelNoise zero();

  Mode mode() const { return mode_; }
  /// Sampled: -log(-log(U)) per element, advancing the generator. Frozen:
  /// the injected values verbatim (size must match). Zero: all zeros.
  template <typename T>
  std::vector<T> draw(std::size_t count);

 private:
  explicit GumbelNoise(Mode mode) : mode_(mode) {}

  Mode mode_;
  Rng rng_;
  std::vector<double> frozen_;
};

/// logits[i][j] = token_i · E_j.
template <typename T>
Var<T> similarity_logits(const Var<T>& tokens, const Var<T>& codebook);

/// Row-wise softmax((logits + G) / tau).
template <typename T>
Var<T> gumbel_softmax(const Var<T>& logits, T tau, GumbelNoise& noise);

struct QuantizeOptions {
  double tau = 0.1;
  /// Feed softmax(logits) instead of raw logits into the Gumbel-Softmax.
  bool softmax_first = false;
};

template <typename T>
struct QuantizeResult {
  Var<T> quantized;                  // forward: exact codebook rows
  std::vector<std::size_t> indices;  // argmax per token, lowest index on ties
  Var<T> soft_weights;               // [n × x] Gumbel-Softmax weights
  Var<T> logits;                     // [n × x] similarity logits
};

/// Nearest-embedding replacement with a straight-through backward: the value
/// is E[indices], the gradient is that of soft_weights · E.
template <typename T>
QuantizeResult<T> quantize_st(const Var<T>& tokens, const Var<T>& codebook, const QuantizeOptions& options,
                              GumbelNoise& noise);

/// ||Ë Ëᵀ - I||_F with Ë the row-normalised codebook.
template <typename T>
Var<T> orthogonal_loss(const Var<T>& codebook);

struct CosineHistogram {
  std::vector<double> bin_centers;
  std::vector<std::size_t> counts;
  std::size_t pairs = 0;  // x(x-1)
  double max_abs_cos = 0.0;
  double mean_abs_cos = 0.0;
};

/// Histogram on [-1, 1] of the x(x-1) ordered off-diagonal cosines of Ë.
template <typename T>
CosineHistogram cosine_histogram(const Tensor<T>& codebook, std::size_t bins);

std::size_t argmax_lowest(const auto* values, std::size_t n) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < n; ++j) {
    if (values[j] > values[best]) best = j;
  }
  return best;
}

}  // namespace ddrn

#endif  // DDRN_EMBEDDING_SPACE_HPP_
