#include <gtest/gtest.h>

#include <cstring>
#include <limits>
#include <sstream>

#include "lmgrad/checkpoint.hpp"

using namespace lmgrad;

namespace {

std::string serialize(const ModelParams& p) {
  std::ostringstream out(std::ios::binary);
  write_checkpoint(out, p);
  return out.str();
}

ModelParams parse(const std::string& bytes) {
  std::istringstream in(bytes, std::ios::binary);
  return read_checkpoint(in);
}

}  // namespace

TEST(Checkpoint, FullHeadRoundTripIsExact) {
  const ModelParams p = init_params(7, 11, 4, 0, 1.0, 3);
  const ModelParams q = parse(serialize(p));
  EXPECT_EQ(q.hidden, p.hidden);
  EXPECT_FALSE(q.head.is_factored());
  EXPECT_EQ(q.head.as_full().w, p.head.as_full().w);
  EXPECT_EQ(serialize(q), serialize(p));
}

TEST(Checkpoint, FactoredHeadRoundTripIsExact) {
  const ModelParams p = init_params(5, 9, 4, 2, 1.0, 4);
  const ModelParams q = parse(serialize(p));
  ASSERT_TRUE(q.head.is_factored());
  EXPECT_EQ(q.head.as_factored().a, p.head.as_factored().a);
  EXPECT_EQ(q.head.as_factored().b, p.head.as_factored().b);
}

TEST(Checkpoint, LayoutHeaderIsLittleEndian) {
  const ModelParams p = init_params(2, 3, 1, 0, 1.0, 0);
  const std::string bytes = serialize(p);
  ASSERT_EQ(bytes.size(), 8 + 4 * 8 + (2 * 1 + 3 * 1) * 8u);
  EXPECT_EQ(bytes.substr(0, 8), "MLMCKPT1");
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 2);
  EXPECT_EQ(static_cast<unsigned char>(bytes[16]), 3);
  EXPECT_EQ(static_cast<unsigned char>(bytes[24]), 1);
  EXPECT_EQ(static_cast<unsigned char>(bytes[32]), 0);
}

TEST(Checkpoint, MalformedInputsAreRejected) {
  const std::string good = serialize(init_params(3, 4, 2, 0, 1.0, 1));
  std::string bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(parse(bad_magic), CheckpointError);
  EXPECT_THROW(parse(good.substr(0, good.size() - 3)), CheckpointError);
  EXPECT_THROW(parse(good + "x"), CheckpointError);
  EXPECT_THROW(parse(""), CheckpointError);
  std::string bad_dims = good;
  bad_dims[24] = 9;  // r = 10 exceeds D = 9
  bad_dims[32] = 10;
  EXPECT_THROW(parse(bad_dims), CheckpointError);
  std::string zero_c = good;
  zero_c[8] = 0;
  EXPECT_THROW(parse(zero_c), CheckpointError);
  std::string nan_value = good;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  std::memcpy(nan_value.data() + 40, &nan, 8);
  EXPECT_THROW(parse(nan_value), CheckpointError);
  EXPECT_THROW(load_checkpoint("/nonexistent/model.ckpt"), CheckpointError);
}
