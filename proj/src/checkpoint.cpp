#include "lmgrad/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace lmgrad {

namespace {

// Dimensions above this are treated as corruption rather than allocated.
constexpr std::uint64_t kMaxDim = std::uint64_t{1} << 31;

void put_u64(std::ostream& out, std::uint64_t x) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(x >> (8 * i));
  out.write(reinterpret_cast<const char*>(buf), 8);
}

std::uint64_t get_u64(std::istream& in) {
  unsigned char buf[8];
  if (!in.read(reinterpret_cast<char*>(buf), 8)) throw CheckpointError("checkpoint: truncated file");
  std::uint64_t x = 0;
  for (int i = 0; i < 8; ++i) x |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return x;
}

void put_matrix(std::ostream& out, const Matrix& m) {
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) put_u64(out, std::bit_cast<std::uint64_t>(m(i, j)));
}

Matrix get_matrix(std::istream& in, std::uint64_t rows, std::uint64_t cols) {
  Matrix m(static_cast<Index>(rows), static_cast<Index>(cols));
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) m(i, j) = std::bit_cast<double>(get_u64(in));
  if (!m.allFinite()) throw CheckpointError("checkpoint: non-finite parameter values");
  return m;
}

}  // namespace

void write_checkpoint(std::ostream& out, const ModelParams& params) {
  params.validate();
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  put_u64(out, static_cast<std::uint64_t>(params.hidden.rows()));
  put_u64(out, static_cast<std::uint64_t>(params.head.vocab_size()));
  put_u64(out, static_cast<std::uint64_t>(params.hidden.cols()));
  put_u64(out, static_cast<std::uint64_t>(params.head.inner_rank()));
  put_matrix(out, params.hidden);
  if (params.head.is_factored()) {
    put_matrix(out, params.head.as_factored().a);
    put_matrix(out, params.head.as_factored().b);
  } else {
    put_matrix(out, params.head.as_full().w);
  }
  if (!out) throw CheckpointError("checkpoint: write failed");
}

ModelParams read_checkpoint(std::istream& in) {
  char magic[sizeof(kCheckpointMagic)];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw CheckpointError("checkpoint: bad magic (expected MLMCKPT1)");
  const std::uint64_t c = get_u64(in);
  const std::uint64_t v = get_u64(in);
  const std::uint64_t d = get_u64(in);
  const std::uint64_t r = get_u64(in);
  if (c == 0 || v == 0 || d == 0 || c > kMaxDim || v > kMaxDim || d > kMaxDim || r > d)
    throw CheckpointError("checkpoint: invalid dimensions C=" + std::to_string(c) + " V=" + std::to_string(v) +
                          " D=" + std::to_string(d) + " r=" + std::to_string(r));
  ModelParams p;
  p.hidden = get_matrix(in, c, d);
  if (r == 0) {
    p.head = HeadWeights::full(get_matrix(in, v, d));
  } else {
    Matrix a = get_matrix(in, v, r);
    Matrix b = get_matrix(in, r, d);
    p.head = HeadWeights::factored(std::move(a), std::move(b));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw CheckpointError("checkpoint: trailing bytes after payload");
  return p;
}

void save_checkpoint(const std::string& path, const ModelParams& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot open " + path + " for writing");
  write_checkpoint(out, params);
}

ModelParams load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  return read_checkpoint(in);
}

}  // namespace lmgrad
