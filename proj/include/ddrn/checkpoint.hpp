#ifndef DDRN_CHECKPOINT_HPP_
#define DDRN_CHECKPOINT_HPP_

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>

#include "ddrn/config.hpp"
#include "ddrn/tensor.hpp"

namespace ddrn {

inline constexpr char kCheckpointMagic[8] = {'D', 'D', 'R', 'N', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Named float arrays plus the resolved run configuration and step counter.
struct Checkpoint {
  RunConfig config;
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;  // completed epochs
  std::map<std::string, Tensor<float>> tensors;
};

/// Layout (all integers little-endian):
///   8 bytes  magic "DDRNCKPT"
///   u32      format version
///   u64      manifest length L
///   L bytes  UTF-8 JSON manifest
///   data     f32 arrays, each at manifest offset (bytes from data start)
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);

}  // namespace ddrn

#endif  // DDRN_CHECKPOINT_HPP_
