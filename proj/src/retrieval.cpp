#include "ddrn/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <string>

namespace ddrn {

void RetrievalRun::validate() const {
  if (query.rank() != 2 || gallery.rank() != 2 || query.cols() != gallery.cols()) {
    throw ShapeError("retrieval: query " + shape_str(query.shape()) + " and gallery " + shape_str(gallery.shape()) +
                     " dims differ");
  }
  if (query_ids.size() != query.rows() || query_cams.size() != query.rows() || gallery_ids.size() != gallery.rows() ||
      gallery_cams.size() != gallery.rows()) {
    throw ShapeError("retrieval: label list lengths do not match descriptor counts");
  }
  for (int id : query_ids) {
    if (id < 0) throw std::invalid_argument("retrieval: negative query id");
  }
  for (int id : gallery_ids) {
    if (id < 0) throw std::invalid_argument("retrieval: negative gallery id");
  }
}

Tensor<double> distance_matrix(const RetrievalRun& run) {
  run.validate();
  const std::size_t nq = run.query.rows(), ng = run.gallery.rows(), d = run.query.cols();
  Tensor<double> dist({nq, ng});
  for (std::size_t i = 0; i < nq; ++i) {
    const float* q = run.query.data().data() + i * d;
    for (std::size_t j = 0; j < ng; ++j) {
      const float* g = run.gallery.data().data() + j * d;
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = static_cast<double>(q[c]) - static_cast<double>(g[c]);
        s += diff * diff;
      }
      dist.at(i, j) = std::sqrt(s);
    }
  }
  return dist;
}

EvalResult evaluate(const Tensor<double>& dist, const std::vector<int>& query_ids,
                    const std::vector<int>& gallery_ids, const std::vector<int>& query_cams,
                    const std::vector<int>& gallery_cams) {
  const std::size_t nq = query_ids.size(), ng = gallery_ids.size();
  if (dist.rank() != 2 || dist.rows() != nq || dist.cols() != ng || query_cams.size() != nq ||
      gallery_cams.size() != ng) {
    throw ShapeError("evaluate: distance matrix " + shape_str(dist.shape()) + " does not match label lists");
  }
  EvalResult r;
  std::vector<std::size_t> hits_at(ng, 0);
  std::vector<std::size_t> order(ng);
  double ap_sum = 0.0;
  for (std::size_t i = 0; i < nq; ++i) {
    std::iota(order.begin(), order.end(), 0);
    const double* row = dist.data().data() + i * ng;
    std::stable_sort(order.begin(), order.end(), [row](std::size_t a, std::size_t b) { return row[a] < row[b]; });
    std::size_t rank = 0, found = 0, first_hit = ng;
    double precision_sum = 0.0;
    for (std::size_t j : order) {
      const bool same_id = gallery_ids[j] == query_ids[i];
      if (same_id && gallery_cams[j] == query_cams[i]) continue;
      ++rank;
      if (!same_id) continue;
      ++found;
      if (first_hit == ng) first_hit = rank - 1;
      precision_sum += static_cast<double>(found) / static_cast<double>(rank);
    }
    if (found == 0) {
      ++r.skipped_queries;
      continue;
    }
    ++r.valid_queries;
    ++hits_at[first_hit];
    ap_sum += precision_sum / static_cast<double>(found);
  }
  r.cmc.assign(ng, 0.0);
  if (r.valid_queries == 0) return r;
  std::size_t cumulative = 0;
  for (std::size_t k = 0; k < ng; ++k) {
    cumulative += hits_at[k];
    r.cmc[k] = static_cast<double>(cumulative) / static_cast<double>(r.valid_queries);
  }
  r.mAP = ap_sum / static_cast<double>(r.valid_queries);
  return r;
}

EvalResult evaluate(const RetrievalRun& run) {
  return evaluate(distance_matrix(run), run.query_ids, run.gallery_ids, run.query_cams, run.gallery_cams);
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

}  // namespace

std::string format_report(const EvalResult& r) {
  std::string out = "mAP " + fmt(r.mAP) + "\nR@1 " + fmt(r.rank(1)) + "\nR@5 " + fmt(r.rank(5)) + "\nR@10 " +
                    fmt(r.rank(10)) + "\n";
  for (std::size_t k = 0; k < r.cmc.size(); ++k) out += std::to_string(k + 1) + " " + fmt(r.cmc[k]) + "\n";
  return out;
}

std::string format_report_kv(const EvalResult& r) {
  std::string out = "mAP=" + fmt(r.mAP) + "\nR@1=" + fmt(r.rank(1)) + "\nR@5=" + fmt(r.rank(5)) + "\nR@10=" +
                    fmt(r.rank(10)) + "\n";
  for (std::size_t k = 0; k < r.cmc.size(); ++k) out += "cmc." + std::to_string(k + 1) + "=" + fmt(r.cmc[k]) + "\n";
  return out;
}

}  // namespace ddrn
