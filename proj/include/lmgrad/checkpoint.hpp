#pragma once

// Binary checkpoint: magic `MLMCKPT1`, then C, V, D, r (r = 0 for a full
// head) as 8-byte little-endian unsigned integers, then H followed by W (or
// A then B), each row-major as 8-byte little-endian IEEE doubles.

#include <iosfwd>
#include <stdexcept>
#include <string>

#include "lmgrad/matrix_lm.hpp"

namespace lmgrad {

inline constexpr char kCheckpointMagic[8] = {'M', 'L', 'M', 'C', 'K', 'P', 'T', '1'};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void write_checkpoint(std::ostream& out, const ModelParams& params);
ModelParams read_checkpoint(std::istream& in);

void save_checkpoint(const std::string& path, const ModelParams& params);
ModelParams load_checkpoint(const std::string& path);

}  // namespace lmgrad
