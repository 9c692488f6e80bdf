#include "ddrn/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>

#include "ddrn/embedding_space.hpp"
#include "ddrn/ops.hpp"

namespace ddrn {

namespace {

void check_labels(const std::vector<int>& labels, std::size_t batch, std::size_t classes, const char* op) {
  if (labels.size() != batch) {
    throw ShapeError(std::string(op) + ": " + std::to_string(labels.size()) + " labels for batch of " +
                     std::to_string(batch));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw std::out_of_range(std::string(op) + ": label " + std::to_string(y) + " outside [0, " +
                              std::to_string(classes) + ")");
    }
  }
}

// Squared distances below this are treated as coincident points.
constexpr double kMinSquaredDistance = 1e-12;

}  // namespace

void ArcMarginParams::validate() const {
  if (!(margin >= 0.0)) throw ConfigError("arc margin must be >= 0");
  if (!(scale > 0.0)) throw ConfigError("arc scale must be > 0");
}

template <typename T>
Var<T> cosine_matrix(const Var<T>& features, const Var<T>& centers) {
  if (features.cols() != centers.cols()) {
    throw ShapeError("cosine_matrix: feature dim " + std::to_string(features.cols()) + " vs center dim " +
                     std::to_string(centers.cols()));
  }
  return matmul_nt(l2_normalize_rows(features), l2_normalize_rows(centers));
}

template <typename T>
Var<T> arc_margin_cross_entropy(const Var<T>& cosines, const std::vector<int>& labels, const ArcMarginParams& params) {
  params.validate();
  const std::size_t batch = cosines.rows(), classes = cosines.cols();
  check_labels(labels, batch, classes, "arc_margin_cross_entropy");
  Var<T> shifted = cosines;
  if (params.margin != 0.0) {
    Tensor<T> margin({batch, classes});
    for (std::size_t b = 0; b < batch; ++b) margin.at(b, labels[b]) = static_cast<T>(params.margin);
    shifted = add(cosines, cosines.tape().constant(std::move(margin)));
  }
  Var<T> logits = params.scale == 1.0 ? shifted : scale(shifted, static_cast<T>(params.scale));
  return cross_entropy_with_label_smoothing(logits, labels, T(0));
}

template <typename T>
Var<T> arcface_loss(const Var<T>& features, const std::vector<int>& labels, const Var<T>& centers,
                    const ArcMarginParams& params) {
  check_labels(labels, features.rows(), centers.rows(), "arcface_loss");
  return arc_margin_cross_entropy(cosine_matrix(features, centers), labels, params);
}

template <typename T>
Var<T> subcenter_cos(const Var<T>& features, const Var<T>& centers, std::size_t k) {
  if (k == 0 || centers.rows() % k != 0) {
    throw ShapeError("subcenter_cos: " + std::to_string(centers.rows()) + " center rows not divisible by k=" +
                     std::to_string(k));
  }
  Var<T> cos = cosine_matrix(features, centers);
  return k == 1 ? cos : group_max_cols(cos, k);
}

template <typename T>
Var<T> subcenter_arcface_loss(const Var<T>& features, const std::vector<int>& labels, const Var<T>& centers,
                              std::size_t k, const ArcMarginParams& params) {
  Var<T> cos = subcenter_cos(features, centers, k);
  return arc_margin_cross_entropy(cos, labels, params);
}

std::vector<RoutingTrace> hs_route_cosines(std::span<const double> cosines, std::size_t batch,
                                           const HierarchyShape& shape) {
  if (shape.levels == 0) throw ConfigError("hierarchy needs at least one level");
  const std::size_t width = shape.total_rows(), per = shape.rows_per_level();
  if (cosines.size() != batch * width) throw ShapeError("hs_route_cosines: cosine matrix size mismatch");
  std::vector<RoutingTrace> traces(batch);
  std::vector<double> row(per);
  for (std::size_t b = 0; b < batch; ++b) {
    RoutingTrace& tr = traces[b];
    for (std::size_t level = 0; level < shape.levels; ++level) {
      std::copy_n(cosines.data() + b * width + level * per, per, row.data());
      tr.visited_rows.push_back(row);
      const bool last = level + 1 == shape.levels;
      if (last) row[shape.continue_index()] = -std::numeric_limits<double>::infinity();
      const std::size_t best = argmax_lowest(row.data(), per);
      if (best == shape.continue_index() && !last) continue;
      tr.level = level;
      tr.argmax = best;
      break;
    }
  }
  return traces;
}

template <typename T>
RoutingTrace hs_route(std::span<const T> feature, const Tensor<T>& centers, const HierarchyShape& shape) {
  if (centers.rows() != shape.total_rows() || centers.cols() != feature.size()) {
    throw ShapeError("hs_route: centers " + shape_str(centers.shape()) + " do not match hierarchy/feature");
  }
  Tensor<T> f({1, feature.size()}, std::vector<T>(feature.begin(), feature.end()));
  const Tensor<T> fn = normalized_rows(f);
  const Tensor<T> cn = normalized_rows(centers);
  std::vector<double> cos(shape.total_rows());
  for (std::size_t r = 0; r < cos.size(); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < feature.size(); ++c) s += static_cast<double>(fn[c]) * static_cast<double>(cn.at(r, c));
    cos[r] = s;
  }
  return hs_route_cosines(cos, 1, shape).front();
}

template <typename T>
Var<T> hs_arcface_loss(const Var<T>& features, const std::vector<int>& labels, const Var<T>& centers,
                       const HierarchyShape& shape, const ArcMarginParams& params,
                       const std::vector<std::size_t>* frozen_levels, std::vector<RoutingTrace>* traces) {
  if (shape.levels == 0) throw ConfigError("hierarchy needs at least one level");
  const std::size_t batch = features.rows();
  check_labels(labels, batch, shape.classes, "hs_arcface_loss");
  if (centers.rows() != shape.total_rows()) {
    throw ShapeError("hs_arcface_loss: expected " + std::to_string(shape.total_rows()) + " center rows, got " +
                     std::to_string(centers.rows()));
  }
  Var<T> cos_all = cosine_matrix(features, centers);

  std::vector<std::size_t> choice(batch);
  if (frozen_levels != nullptr) {
    if (frozen_levels->size() != batch) throw ShapeError("hs_arcface_loss: frozen routing length mismatch");
    for (std::size_t b = 0; b < batch; ++b) {
      if ((*frozen_levels)[b] >= shape.levels) throw std::out_of_range("hs_arcface_loss: frozen level out of range");
      choice[b] = (*frozen_levels)[b];
    }
  } else {
    auto cv = cos_all.value();
    std::vector<double> cosd(cv.begin(), cv.end());
    auto routed = hs_route_cosines(cosd, batch, shape);
    for (std::size_t b = 0; b < batch; ++b) choice[b] = routed[b].level;
    if (traces != nullptr) *traces = std::move(routed);
  }

  const std::size_t per = shape.rows_per_level();
  std::vector<Var<T>> level_cos;
  for (std::size_t level = 0; level < shape.levels; ++level) {
    level_cos.push_back(slice_cols(cos_all, level * per, level * per + shape.classes));
  }
  Var<T> chosen = shape.levels == 1 ? level_cos.front() : select_rows(level_cos, choice);
  return arc_margin_cross_entropy(chosen, labels, params);
}

template <typename T>
Var<T> id_loss(const Var<T>& logits, const std::vector<int>& labels, T smoothing) {
  return cross_entropy_with_label_smoothing(logits, labels, smoothing);
}

void validate_triplet_batch(const std::vector<int>& labels) {
  std::map<int, std::size_t> counts;
  for (int y : labels) ++counts[y];
  if (counts.size() < 2) throw BatchCompositionError("triplet batch needs at least 2 identities");
  for (const auto& [id, n] : counts) {
    if (n < 2) throw BatchCompositionError("identity " + std::to_string(id) + " has a single sample in the batch");
  }
}

template <typename T>
Var<T> triplet_loss(const Var<T>& features, const std::vector<int>& labels, T margin) {
  const std::size_t batch = features.rows(), d = features.cols();
  if (labels.size() != batch) throw ShapeError("triplet_loss: label count differs from batch");
  validate_triplet_batch(labels);
  auto fv = features.value();
  std::vector<T> dist(batch * batch, T(0));
  for (std::size_t i = 0; i < batch; ++i) {
    for (std::size_t j = i + 1; j < batch; ++j) {
      T s = T(0);
      for (std::size_t c = 0; c < d; ++c) {
        const T diff = fv[i * d + c] - fv[j * d + c];
        s += diff * diff;
      }
      dist[i * batch + j] = dist[j * batch + i] = std::sqrt(std::max(s, static_cast<T>(kMinSquaredDistance)));
    }
    dist[i * batch + i] = std::sqrt(static_cast<T>(kMinSquaredDistance));
  }
  std::vector<std::size_t> pos(batch), neg(batch);
  std::vector<bool> active(batch);
  T total = T(0);
  for (std::size_t a = 0; a < batch; ++a) {
    std::size_t p = batch, n = batch;
    for (std::size_t j = 0; j < batch; ++j) {
      if (j == a) continue;
      const T dj = dist[a * batch + j];
      if (labels[j] == labels[a]) {
        if (p == batch || dj > dist[a * batch + p]) p = j;
      } else if (n == batch || dj < dist[a * batch + n]) {
        n = j;
      }
    }
    pos[a] = p;
    neg[a] = n;
    const T hinge = dist[a * batch + p] - dist[a * batch + n] + margin;
    active[a] = hinge > T(0);
    if (active[a]) total += hinge;
  }
  const T inv = T(1) / static_cast<T>(batch);
  const int ix = features.id();
  return features.tape().record(
      "triplet_loss", Shape{1}, {total * inv}, {ix},
      [ix, batch, d, inv, pos = std::move(pos), neg = std::move(neg), active = std::move(active),
       dist = std::move(dist)](Tape<T>& t, int self) {
        const T g = t.grad(self)[0] * inv;
        auto fv = t.value(ix);
        auto gx = t.grad(ix);
        auto push = [&](std::size_t i, std::size_t j, T w) {
          T s = T(0);
          for (std::size_t c = 0; c < d; ++c) {
            const T diff = fv[i * d + c] - fv[j * d + c];
            s += diff * diff;
          }
          if (s < static_cast<T>(kMinSquaredDistance)) return;
          const T k = w / dist[i * batch + j];
          for (std::size_t c = 0; c < d; ++c) {
            const T diff = fv[i * d + c] - fv[j * d + c];
            gx[i * d + c] += k * diff;
            gx[j * d + c] -= k * diff;
          }
        };
        for (std::size_t a = 0; a < batch; ++a) {
          if (!active[a]) continue;
          push(a, pos[a], g);
          push(a, neg[a], -g);
        }
      });
}

#define DDRN_INSTANTIATE_LOSSES(T)                                                                               \
  template Var<T> cosine_matrix(const Var<T>&, const Var<T>&);                                                   \
  template Var<T> arc_margin_cross_entropy(const Var<T>&, const std::vector<int>&, const ArcMarginParams&);      \
  template Var<T> arcface_loss(const Var<T>&, const std::vector<int>&, const Var<T>&, const ArcMarginParams&);   \
  template Var<T> subcenter_cos(const Var<T>&, const Var<T>&, std::size_t);                                      \
  template Var<T> subcenter_arcface_loss(const Var<T>&, const std::vector<int>&, const Var<T>&, std::size_t,     \
                                         const ArcMarginParams&);                                                \
  template RoutingTrace hs_route(std::span<const T>, const Tensor<T>&, const HierarchyShape&);                   \
  template Var<T> hs_arcface_loss(const Var<T>&, const std::vector<int>&, const Var<T>&, const HierarchyShape&,  \
                                  const ArcMarginParams&, const std::vector<std::size_t>*,                       \
                                  std::vector<RoutingTrace>*);                                                   \
  template Var<T> id_loss(const Var<T>&, const std::vector<int>&, T);                                            \
  template Var<T> triplet_loss(const Var<T>&, const std::vector<int>&, T);

DDRN_INSTANTIATE_LOSSES(float)
DDRN_INSTANTIATE_LOSSES(double)

#undef DDRN_INSTANTIATE_LOSSES

}  // namespace ddrn
