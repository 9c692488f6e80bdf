#ifndef DDRN_RETRIEVAL_HPP_
#define DDRN_RETRIEVAL_HPP_

#include <cstddef>
#include <string>
#include <vector>

#include "ddrn/tensor.hpp"

namespace ddrn {

struct RetrievalRun {
  Tensor<float> query;    // [Q × D]
  Tensor<float> gallery;  // [G × D]
  std::vector<int> query_ids, gallery_ids;
  std::vector<int> query_cams, gallery_cams;

  void validate() const;
};

struct EvalResult {
  std::vector<double> cmc;  // cmc[k] = fraction of valid queries matched within the top k+1
  double mAP = 0.0;
  std::size_t valid_queries = 0;
  std::size_t skipped_queries = 0;  // no valid gallery match after exclusion

  double rank(std::size_t k) const { return k == 0 || cmc.empty() ? 0.0 : cmc[std::min(k, cmc.size()) - 1]; }
};

/// Pairwise Euclidean distances in double precision: [Q × G].
Tensor<double> distance_matrix(const RetrievalRun& run);

/// Single-query CMC and mAP. Gallery items sharing both id and camera with
/// the query are excluded; ranking is by (distance, gallery index).
EvalResult evaluate(const Tensor<double>& dist, const std::vector<int>& query_ids,
                    const std::vector<int>& gallery_ids, const std::vector<int>& query_cams,
                    const std::vector<int>& gallery_cams);
EvalResult evaluate(const RetrievalRun& run);

/// "mAP x\nR@1 x\nR@5 x\nR@10 x\n" followed by one "rank value" line per rank.
std::string format_report(const EvalResult& r);
/// Flat key=value block: mAP, R@1, R@5, R@10, cmc.<k>.
std::string format_report_kv(const EvalResult& r);

}  // namespace ddrn

#endif  // DDRN_RETRIEVAL_HPP_
