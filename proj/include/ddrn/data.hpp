#ifndef DDRN_DATA_HPP_
#define DDRN_DATA_HPP_

#include <cstddef>
#include <cstdint>
#include <vector>

#include "ddrn/config.hpp"
#include "ddrn/rng.hpp"
#include "ddrn/tensor.hpp"

// Procedural stand-in for an occluded person re-id benchmark. Each identity
// is a figure with a fixed colour/stripe signature; images vary by pose
// jitter, camera colour response, shared backgrounds and rectangular occluders.

namespace ddrn {

struct Sample {
  Tensor<float> image;               // [3 × H × W], values in [0, 1]
  int id = 0;
  int camera = 0;
  std::vector<std::uint8_t> mask;    // H·W, 1 where an occluder was drawn
  double occluded_fraction = 0.0;
};

struct SynthDataset {
  std::vector<Sample> train;
  std::vector<Sample> query;            // camera 0, occluded with test_occlusion_prob
  std::vector<Sample> query_holistic;   // the same query renders without occluders
  std::vector<Sample> gallery;          // camera 1, holistic
};

/// Deterministic in (spec, height, width, seed).
SynthDataset synth_dataset(const SynthSpec& spec, std::size_t height, std::size_t width, std::uint64_t seed);

struct ErasingRect {
  std::size_t y = 0, x = 0, h = 0, w = 0;
};

struct AugmentTrace {
  std::size_t crop_y = 0, crop_x = 0;
  bool erased = false;
  ErasingRect rect;
};

struct AugmentOptions {
  std::size_t pad = 10;
  std::size_t out_height = 0;  // 0 keeps the input size
  std::size_t out_width = 0;
  double erasing_prob = 0.5;
  double erasing_min_area = 0.02;
  double erasing_max_area = 0.4;
  double erasing_min_aspect = 0.3;
};

/// Zero-pad by `pad`, random crop back to the input size, bilinear resize to
/// the output size, then with probability erasing_prob replace one random
/// rectangle by uniform noise.
Tensor<float> augment(const Tensor<float>& image, Rng& rng, const AugmentOptions& options,
                      AugmentTrace* trace = nullptr);

/// Bilinear resize of a [3 × H × W] image (align-corners off).
Tensor<float> resize_bilinear(const Tensor<float>& image, std::size_t height, std::size_t width);

/// Identity-balanced batches: each id's samples are shuffled and cut into
/// chunks of `instances` (topped up by resampling), and every batch takes one
/// chunk from each of `ids_per_batch` distinct ids.
std::vector<std::vector<std::size_t>> pk_batches(const std::vector<int>& labels, std::size_t ids_per_batch,
                                                 std::size_t instances, Rng& rng);

/// Stacks images into [B × 3 × H × W] with per-channel normalisation (x - 0.5) / 0.25.
Tensor<float> stack_images(const std::vector<const Tensor<float>*>& images);

}  // namespace ddrn

#endif  // DDRN_DATA_HPP_
