#ifndef DDRN_LOSSES_HPP_
#define DDRN_LOSSES_HPP_

#include <cstddef>
#include <span>
#include <vector>

#include "ddrn/tape.hpp"
#include "ddrn/tensor.hpp"

namespace ddrn {

struct ArcMarginParams {
  double margin = 0.2;  // added to the true-class cosine
  double scale = 20.0;

  void validate() const;
};

/// Normalised dot products between feature rows and center rows: [B × C].
template <typename T>
Var<T> cosine_matrix(const Var<T>& features, const Var<T>& centers);

/// Mean over rows of -log(e^{s(cos_y + m)} / (e^{s(cos_y + m)} + Σ_{j≠y} e^{s cos_j})).
template <typename T>
Var<T> arc_margin_cross_entropy(const Var<T>& cosines, const std::vector<int>& labels, const ArcMarginParams& params);

/// ArcFace over flat class centers [C × d].
template <typename T>
Var<T> arcface_loss(const Var<T>& features, const std::vector<int>& labels, const Var<T>& centers,
                    const ArcMarginParams& params);

/// Per-class cosine = max over k subcenters. Centers are [C·k × d] with the
/// subcenters of class c at rows c·k .. c·k + k - 1.
template <typename T>
Var<T> subcenter_cos(const Var<T>& features, const Var<T>& centers, std::size_t k);

template <typename T>
Var<T> subcenter_arcface_loss(const Var<T>& features, const std::vector<int>& labels, const Var<T>& centers,
                              std::size_t k, const ArcMarginParams& params);

/// Shape of the hierarchical center stack: `levels` blocks of (classes + 1)
/// rows; row `classes` of each block is the continue center.
struct HierarchyShape {
  std::size_t levels = 3;
  std::size_t classes = 0;

  std::size_t rows_per_level() const { return classes + 1; }
  std::size_t continue_index() const { return classes; }
  std::size_t total_rows() const { return levels * (classes + 1); }
};

struct RoutingTrace {
  std::size_t level = 0;
  std::size_t argmax = 0;                        // real class chosen at `level`
  std::vector<std::vector<double>> visited_rows;  // cosine rows, one per visited level
};

/// Walks the levels: at level i, cosines against that level's C+1 centers;
/// an argmax on the continue center moves on to level i+1, except at the last
/// level where the continue center is masked out.
template <typename T>
RoutingTrace hs_route(std::span<const T> feature, const Tensor<T>& centers, const HierarchyShape& shape);

/// Routing of every row of a [B × K(C+1)] cosine matrix.
std::vector<RoutingTrace> hs_route_cosines(std::span<const double> cosines, std::size_t batch,
                                           const HierarchyShape& shape);

/// HS-Arcface. Routing is a hard decision; only the chosen level's C real-class
/// cosines enter the margin cross-entropy. `frozen_levels` overrides routing.
/// If `traces` is non-null it receives the routing of every sample.
template <typename T>
Var<T> hs_arcface_loss(const Var<T>& features, const std::vector<int>& labels, const Var<T>& centers,
                       const HierarchyShape& shape, const ArcMarginParams& params,
                       const std::vector<std::size_t>* frozen_levels = nullptr,
                       std::vector<RoutingTrace>* traces = nullptr);

/// Cross-entropy with label smoothing.
template <typename T>
Var<T> id_loss(const Var<T>& logits, const std::vector<int>& labels, T smoothing = T(0.1));

/// Thrown when a batch lacks the identities/instances batch-hard mining needs.
class BatchCompositionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Checks >= 2 identities and >= 2 samples for every identity present.
void validate_triplet_batch(const std::vector<int>& labels);

/// Batch-hard triplet loss on Euclidean distances: per anchor the farthest
/// positive and nearest negative, mean of max(0, d_ap - d_an + margin).
template <typename T>
Var<T> triplet_loss(const Var<T>& features, const std::vector<int>& labels, T margin = T(0.3));

}  // namespace ddrn

#endif  // DDRN_LOSSES_HPP_
