#ifndef DDRN_CONFIG_HPP_
#define DDRN_CONFIG_HPP_

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>

#include "ddrn/tensor.hpp"

namespace ddrn {

struct ModelConfig {
  std::size_t num_blocks = 4;
  std::size_t embed_dim = 64;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t patch_size = 16;
  std::size_t stride = 8;
  std::size_t image_height = 64;
  std::size_t image_width = 64;
  std::size_t codebook_size = 128;
  double tau = 0.1;
  std::size_t levels = 3;
  std::size_t num_ids = 32;
  bool embedding_space = true;
  bool resample_softmax_first = false;

  std::size_t patches_y() const { return (image_height - patch_size) / stride + 1; }
  std::size_t patches_x() const { return (image_width - patch_size) / stride + 1; }
  std::size_t num_patches() const { return patches_y() * patches_x(); }
  std::size_t seq_len() const { return num_patches() + 2; }
  std::size_t patch_dim() const { return 3 * patch_size * patch_size; }

  /// Throws ConfigError naming the violated constraint.
  void validate() const;
};

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t ids_per_batch = 8;
  std::size_t instances_per_id = 8;
  double lr = 3e-4;
  double weight_decay = 0.05;
  double warmup_fraction = 0.05;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double lambda_hs = 1.0;
  double lambda_id = 1.0;
  double lambda_tri = 1.0;
  double lambda_orth = 0.1;
  double arc_margin = 0.2;
  double arc_scale = 20.0;
  double triplet_margin = 0.3;
  double id_smoothing = 0.1;
  double erasing_prob = 0.5;
  std::size_t pad = 10;
  bool orthogonal_loss = true;
  bool hs_arcface = true;
  std::size_t eval_every = 1;
  std::uint64_t seed = 1;

  std::size_t batch_size() const { return ids_per_batch * instances_per_id; }
  void validate() const;
};

struct SynthSpec {
  std::size_t num_ids = 32;
  std::size_t images_per_id = 40;
  double test_fraction = 0.5;
  double train_occlusion_prob = 0.3;
  double test_occlusion_prob = 0.7;
  double occluder_min_area = 0.25;
  double occluder_max_area = 0.5;
  std::size_t background_pool = 6;
  /// 0 derives the data seed from the master seed.
  std::uint64_t data_seed = 0;

  void validate() const;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  SynthSpec synth;

  /// Cross-section checks (num_ids agreement, batch feasibility).
  void validate() const;
};

/// Error with the 1-based line it was raised for.
class ConfigParseError : public ConfigError {
 public:
  ConfigParseError(std::size_t line, const std::string& detail, const std::string& source = "")
      : ConfigError((source.empty() ? "" : source + ":") + "line " + std::to_string(line) + ": " + detail),
        line_(line),
        detail_(detail) {}
  std::size_t line() const { return line_; }
  const std::string& detail() const { return detail_; }

 private:
  std::size_t line_;
  std::string detail_;
};

/// Applies "key = value" lines on top of `base`. '#' starts a comment; blank
/// lines are skipped. Unknown keys, malformed values and duplicates throw
/// ConfigParseError. Does not validate.
RunConfig parse_config(std::istream& in, RunConfig base = {});
RunConfig load_config(const std::string& path);

/// Sets one key; returns false if the key is unknown. Throws ConfigError on a bad value.
bool set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);

/// Every key with its current value, one "key = value" line each, in a fixed order.
std::string format_config(const RunConfig& cfg);

/// Applies "embedding_space=on,orthogonal_loss=off,..." switches.
void apply_ablation(RunConfig& cfg, const std::string& spec);

}  // namespace ddrn

#endif  // DDRN_CONFIG_HPP_
