#ifndef DDRN_TRAINER_HPP_
#define DDRN_TRAINER_HPP_

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "ddrn/checkpoint.hpp"
#include "ddrn/config.hpp"
#include "ddrn/data.hpp"
#include "ddrn/model.hpp"
#include "ddrn/retrieval.hpp"

namespace ddrn {

/// Adam moments with decoupled weight decay; moments are index-aligned with
/// Model::params().
struct AdamState {
  std::vector<std::vector<float>> m, v;
  std::uint64_t step = 0;
};

template <typename T>
AdamState make_adam_state(const Model<T>& model);

/// One AdamW update over every parameter holding a gradient. Parameters
/// without a gradient are left untouched (their moments too).
template <typename T>
void adamw_step(Model<T>& model, AdamState& state, const TrainConfig& cfg, double lr);

/// Linear warm-up over the first warmup_fraction of steps, cosine decay to zero after.
double learning_rate(const TrainConfig& cfg, std::uint64_t step, std::uint64_t total_steps);

template <typename T>
struct LossBreakdown {
  Var<T> total;
  double total_value = 0.0;
  double hs = 0.0;   // HS-Arcface, or CE on the global head when hs_arcface is off
  double id = 0.0;
  double tri = 0.0;  // global + local triplet
  double orth = 0.0;
};

/// λ_hs·hs + λ_id·id + λ_tri·(tri_global + tri_local) + λ_orth·orth with the
/// ablation switches applied.
template <typename T>
LossBreakdown<T> total_loss(Model<T>& model, const std::vector<Var<T>>& params,
                            const typename Model<T>::Forward& fwd, const std::vector<int>& labels,
                            const TrainConfig& cfg);

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based
  double loss_total = 0.0, loss_hs = 0.0, loss_id = 0.0, loss_tri = 0.0, loss_orth = 0.0;
  double mAP = 0.0, rank1 = 0.0;
};

/// "epoch\tloss_total\tloss_hs\tloss_id\tloss_tri\tloss_orth\tmAP\trank1".
std::string format_metrics(const EpochMetrics& m);

struct SubSeeds {
  std::uint64_t data, init, gumbel, erasing, sampler;
  static SubSeeds from(const RunConfig& cfg);
};

class NonFiniteLossError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainResult {
  Model<float> model;
  AdamState adam;
  std::uint64_t step = 0;
  std::size_t epochs_done = 0;
  std::vector<EpochMetrics> metrics;
};

struct TrainHooks {
  std::ostream* log = nullptr;                             // metric lines
  std::function<void(const EpochMetrics&)> on_epoch;
  std::function<void(std::uint64_t step, double loss)> on_step;
  /// After each epoch, with the step and completed-epoch counters.
  std::function<void(const Model<float>&, const AdamState&, std::uint64_t, std::size_t)> on_epoch_state;
};

/// Full training run. `resume` continues from a checkpoint written by this
/// function (same config), including optimizer moments.
TrainResult train(const RunConfig& cfg, const SynthDataset& data, const TrainHooks& hooks = {},
                  const Checkpoint* resume = nullptr);

/// Embeds the query and gallery sets and scores them.
EvalResult evaluate_split(Model<float>& model, const std::vector<Sample>& query, const std::vector<Sample>& gallery);

Checkpoint make_checkpoint(const Model<float>& model, const RunConfig& cfg, std::uint64_t step, std::size_t epoch,
                           const AdamState* adam);
/// Builds a model from a checkpoint; throws CheckpointError on missing or mis-shaped tensors.
Model<float> restore_model(const Checkpoint& ckpt);
AdamState restore_adam(const Checkpoint& ckpt, const Model<float>& model);

}  // namespace ddrn

#endif  // DDRN_TRAINER_HPP_
