#ifndef DDRN_MODEL_HPP_
#define DDRN_MODEL_HPP_

#include <cstddef>
#include <string>
#include <vector>

#include "ddrn/config.hpp"
#include "ddrn/embedding_space.hpp"
#include "ddrn/losses.hpp"
#include "ddrn/ops.hpp"
#include "ddrn/rng.hpp"
#include "ddrn/tape.hpp"
#include "ddrn/tensor.hpp"

// Small pre-norm vision transformer: patch embedding with two CLS tokens,
// num_blocks - 1 encoder blocks, codebook reconstruction of the patch tokens,
// one decoder block, final LayerNorm and two BN-neck heads.

namespace ddrn {

/// [batch · length × d] token rows. Within an image, row 0 is the global CLS,
/// row 1 the local CLS and rows 2.. the patches.
template <typename T>
struct TokenSequence {
  Var<T> tokens;
  std::size_t batch = 0;
  std::size_t length = 0;

  std::size_t num_patches() const { return length - 2; }
  std::vector<std::size_t> cls_rows(std::size_t which) const;
  std::vector<std::size_t> patch_rows() const;
};

template <typename T>
struct HeadOutputs {
  Var<T> global_pre;   // triplet side
  Var<T> global_feat;  // after BN-neck
  Var<T> local_pre;
  Var<T> local_feat;
  Var<T> id_logits;    // [B × C] from local_feat
};

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  bool decay = false;  // receives decoupled weight decay
};

struct BlockIndex {
  std::size_t ln1_gain, ln1_bias, ln2_gain, ln2_bias;
  std::size_t q_w, q_b, k_w, k_b, v_w, v_b, proj_w, proj_b;
  std::size_t fc1_w, fc1_b, fc2_w, fc2_b;
};

template <typename T>
class Model {
 public:
  /// Initialises every parameter from `rng` in a fixed order.
  Model(const ModelConfig& config, Rng& rng);

  const ModelConfig& config() const { return config_; }
  std::vector<Parameter<T>>& params() { return params_; }
  const std::vector<Parameter<T>>& params() const { return params_; }
  Parameter<T>& param(const std::string& name);
  const Parameter<T>& param(const std::string& name) const;
  BatchNormStats<T>& neck_stats(bool global) { return global ? neck_global_ : neck_local_; }
  const BatchNormStats<T>& neck_stats(bool global) const { return global ? neck_global_ : neck_local_; }

  void set_requires_grad(bool on);
  void zero_grad();

  Tensor<T>& codebook() { return params_[codebook_].value; }
  const Tensor<T>& codebook() const { return params_[codebook_].value; }
  Tensor<T>& hs_centers() { return params_[hs_centers_].value; }
  HierarchyShape hierarchy() const { return {config_.levels, config_.num_ids}; }

  /// Leaf Vars for every parameter on `tape`; index-aligned with params().
  std::vector<Var<T>> bind(Tape<T>& tape);

  /// images: [B × 3 × H × W].
  TokenSequence<T> patch_embed(const std::vector<Var<T>>& p, const Tensor<T>& images) const;
  /// Blocks [first, last).
  TokenSequence<T> run_blocks(const std::vector<Var<T>>& p, const TokenSequence<T>& x, std::size_t first,
                              std::size_t last) const;
  TokenSequence<T> encode(const std::vector<Var<T>>& p, const TokenSequence<T>& x) const;
  /// Patches replaced by quantize_st; CLS rows copied through unchanged.
  TokenSequence<T> reconstruct(const std::vector<Var<T>>& p, const TokenSequence<T>& x, GumbelNoise& noise,
                               QuantizeResult<T>* quant = nullptr) const;
  TokenSequence<T> decode(const std::vector<Var<T>>& p, const TokenSequence<T>& x) const;
  /// Final LayerNorm, CLS/patch fusion and BN-necks. Training mode updates
  /// the neck running statistics.
  HeadOutputs<T> heads(const std::vector<Var<T>>& p, const TokenSequence<T>& x, bool training);

  struct Forward {
    TokenSequence<T> decoded;
    HeadOutputs<T> heads;
    QuantizeResult<T> quant;  // empty when the embedding space is off
  };
  Forward forward(const std::vector<Var<T>>& p, const Tensor<T>& images, bool training, GumbelNoise& noise);

  /// L2-normalised concat(global_feat, local_feat) in eval mode without noise: [B × 2d].
  Tensor<T> inference_embedding(const Tensor<T>& images);

  std::size_t index_of(const std::string& name) const;
  const BlockIndex& block(std::size_t i) const { return blocks_[i]; }

 private:
  std::size_t add_param(std::string name, Tensor<T> value, bool decay);

  ModelConfig config_;
  std::vector<Parameter<T>> params_;
  std::vector<BlockIndex> blocks_;
  std::size_t patch_w_, patch_b_, cls_global_, cls_local_, pos_;
  std::size_t norm_gain_, norm_bias_, codebook_, hs_centers_;
  std::size_t neck_global_gain_, neck_local_gain_, head_local_, head_global_;
  BatchNormStats<T> neck_global_, neck_local_;
};

/// Rows of an image batch as overlapping p×p patches, channel-major within a
/// patch: [B · n_p × 3p²].
template <typename T>
Tensor<T> im2col(const Tensor<T>& images, const ModelConfig& config);

extern template class Model<float>;
extern template class Model<double>;

}  // namespace ddrn

#endif  // DDRN_MODEL_HPP_
