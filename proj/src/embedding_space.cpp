#include "ddrn/embedding_space.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "ddrn/ops.hpp"

namespace ddrn {

template <typename T>
Tensor<T> init_codebook(std::size_t size, std::size_t dim, Rng& rng) {
  if (size < 2 || dim < 1) {
    throw ConfigError("codebook needs at least 2 vectors of dimension >= 1, got " + std::to_string(size) + "x" +
                      std::to_string(dim));
  }
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(dim)));
  Tensor<T> e({size, dim});
  for (auto& v : e.data()) v = static_cast<T>(normal(rng));
  return e;
}

template <typename T>
void validate_codebook(const Tensor<T>& codebook) {
  if (codebook.rank() != 2 || codebook.dim(0) < 2 || codebook.dim(1) < 1) {
    throw ShapeError("codebook must be x × d with x >= 2, got " + shape_str(codebook.shape()));
  }
  if (!codebook.all_finite()) throw NumericError("codebook has non-finite entries");
}

template <typename T>
Tensor<T> normalized_rows(const Tensor<T>& codebook) {
  Tensor<T> out = codebook;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    T s = T(0);
    for (T v : row) s += v * v;
    const T norm = std::sqrt(s);
    if (!(norm >= T(1e-12))) throw NumericError("codebook row " + std::to_string(r) + " has zero norm");
    for (T& v : row) v /= norm;
  }
  return out;
}

GumbelNoise GumbelNoise::sampled(std::uint64_t seed) {
  GumbelNoise g(Mode::kSampled);
  g.rng_.seed(seed);
  return g;
}

GumbelNoise GumbelNoise::frozen(std::vector<double> values) {
  GumbelNoise g(Mode::kFrozen);
  g.frozen_ = std::move(values);
  return g;
}

GumbelNoise GumbelNoise::zero() { return GumbelNoise(Mode::kZero); }

template <typename T>
std::vector<T> GumbelNoise::draw(std::size_t count) {
  std::vector<T> out(count, T(0));
  switch (mode_) {
    case Mode::kZero:
      break;
    case Mode::kFrozen:
      if (frozen_.size() != count) {
        throw ShapeError("frozen Gumbel noise has " + std::to_string(frozen_.size()) + " values, need " +
                         std::to_string(count));
      }
      std::transform(frozen_.begin(), frozen_.end(), out.begin(), [](double v) { return static_cast<T>(v); });
      break;
    case Mode::kSampled:
      for (auto& v : out) v = static_cast<T>(-std::log(-std::log(uniform_open(rng_))));
      break;
  }
  return out;
}

template std::vector<float> GumbelNoise::draw<float>(std::size_t);
template std::vector<double> GumbelNoise::draw<double>(std::size_t);

template <typename T>
Var<T> similarity_logits(const Var<T>& tokens, const Var<T>& codebook) {
  if (tokens.cols() != codebook.cols()) {
    throw ShapeError("similarity_logits: token dim " + std::to_string(tokens.cols()) + " vs codebook dim " +
                     std::to_string(codebook.cols()));
  }
  return matmul_nt(tokens, codebook);
}

template <typename T>
Var<T> gumbel_softmax(const Var<T>& logits, T tau, GumbelNoise& noise) {
  if (!(tau > T(0))) throw std::invalid_argument("gumbel_softmax: tau must be positive");
  Tape<T>& tape = logits.tape();
  Var<T> shifted = logits;
  if (noise.mode() != GumbelNoise::Mode::kZero) {
    shifted = add(logits, tape.constant(Tensor<T>(logits.shape(), noise.draw<T>(logits.numel()))));
  }
  return softmax(scale(shifted, T(1) / tau));
}

template <typename T>
QuantizeResult<T> quantize_st(const Var<T>& tokens, const Var<T>& codebook, const QuantizeOptions& options,
                              GumbelNoise& noise) {
  if (!(options.tau > 0.0)) throw std::invalid_argument("quantize_st: tau must be positive");
  QuantizeResult<T> r;
  r.logits = similarity_logits(tokens, codebook);
  const std::size_t n = tokens.rows(), x = codebook.rows(), d = codebook.cols();
  auto lv = r.logits.value();
  auto ev = codebook.value();
  Tensor<T> hard({n, d});
  r.indices.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    r.indices[i] = argmax_lowest(lv.data() + i * x, x);
    std::copy_n(ev.data() + r.indices[i] * d, d, hard.row(i).data());
  }
  Var<T> soft_in = options.softmax_first ? softmax(r.logits) : r.logits;
  r.soft_weights = gumbel_softmax(soft_in, static_cast<T>(options.tau), noise);
  r.quantized = straight_through(hard, matmul(r.soft_weights, codebook));
  return r;
}

template <typename T>
Var<T> orthogonal_loss(const Var<T>& codebook) {
  const std::size_t x = codebook.rows();
  Var<T> normed = l2_normalize_rows(codebook, T(1e-12));
  Var<T> gram = matmul_nt(normed, normed);
  return frobenius_norm(sub(gram, codebook.tape().constant(Tensor<T>::identity(x))));
}

template <typename T>
CosineHistogram cosine_histogram(const Tensor<T>& codebook, std::size_t bins) {
  validate_codebook(codebook);
  if (bins == 0) throw std::invalid_argument("cosine_histogram: bins must be positive");
  const Tensor<T> en = normalized_rows(codebook);
  const std::size_t x = en.rows(), d = en.cols();
  CosineHistogram h;
  h.counts.assign(bins, 0);
  h.bin_centers.resize(bins);
  const double width = 2.0 / static_cast<double>(bins);
  for (std::size_t b = 0; b < bins; ++b) h.bin_centers[b] = -1.0 + (static_cast<double>(b) + 0.5) * width;
  std::vector<T> gram(x * x);
  kernels::gemm_nt(x, d, x, en.data().data(), en.data().data(), gram.data(), false);
  double abs_sum = 0.0;
  for (std::size_t i = 0; i < x; ++i) {
    for (std::size_t j = 0; j < x; ++j) {
      if (i == j) continue;
      const double c = std::clamp(static_cast<double>(gram[i * x + j]), -1.0, 1.0);
      const auto bin = std::min(bins - 1, static_cast<std::size_t>((c + 1.0) / width));
      ++h.counts[bin];
      ++h.pairs;
      abs_sum += std::abs(c);
      h.max_abs_cos = std::max(h.max_abs_cos, std::abs(c));
    }
  }
  h.mean_abs_cos = abs_sum / static_cast<double>(h.pairs);
  return h;
}

#define DDRN_INSTANTIATE_ES(T)                                                                         \
  template Tensor<T> init_codebook<T>(std::size_t, std::size_t, Rng&);                                 \
  template void validate_codebook(const Tensor<T>&);                                                   \
  template Tensor<T> normalized_rows(const Tensor<T>&);                                                \
  template Var<T> similarity_logits(const Var<T>&, const Var<T>&);                                     \
  template Var<T> gumbel_softmax(const Var<T>&, T, GumbelNoise&);                                      \
  template QuantizeResult<T> quantize_st(const Var<T>&, const Var<T>&, const QuantizeOptions&, GumbelNoise&); \
  template Var<T> orthogonal_loss(const Var<T>&);                                                      \
  template CosineHistogram cosine_histogram(const Tensor<T>&, std::size_t);

DDRN_INSTANTIATE_ES(float)
DDRN_INSTANTIATE_ES(double)

#undef DDRN_INSTANTIATE_ES

}  // namespace ddrn
