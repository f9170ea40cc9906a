// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <fstream>

#include "sbkd/checkpoint.hpp"
#include "test_util.hpp"

using namespace sbkd;

TEST(Checkpoint, RoundTripStoresFloat32) {
  Checkpoint c;
  c.kind = ModelKind::teacher;
  c.band_index = 2;
  c.params = init_params(6, 5, 1);
  const Checkpoint back = deserialize_checkpoint(serialize_checkpoint(c));
  EXPECT_EQ(back.kind, ModelKind::teacher);
  EXPECT_EQ(back.band_index, 2);
  EXPECT_EQ(back.frame_len, 320);
  EXPECT_EQ(back.hop, 160);
  EXPECT_EQ(back.params.width, 6);
  EXPECT_EQ(back.params.hidden, 5);
  const ModelParams rounded = round_to_float(c.params);
  for (std::size_t k = 0; k < kArrayCount; ++k) EXPECT_TRUE(*arrays(back.params)[k] == *arrays(rounded)[k]);
}

TEST(Checkpoint, SerializationIsDeterministic) {
  Checkpoint c;
  c.params = init_params(4, 3, 9);
  EXPECT_EQ(serialize_checkpoint(c), serialize_checkpoint(c));
  EXPECT_EQ(serialize_checkpoint(deserialize_checkpoint(serialize_checkpoint(c))), serialize_checkpoint(c));
}

TEST(Checkpoint, StudentHasNoBand) {
  Checkpoint c;
  c.params = init_params(4, 3, 9);
  EXPECT_FALSE(deserialize_checkpoint(serialize_checkpoint(c)).band_index.has_value());
}

TEST(Checkpoint, CorruptInputIsDataError) {
  Checkpoint c;
  c.params = init_params(4, 3, 9);
  const std::string bytes = serialize_checkpoint(c);
  EXPECT_THROW(deserialize_checkpoint("XXXX" + bytes.substr(4)), DataError);
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 4)), DataError);
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, 6)), DataError);
}

TEST(Checkpoint, FileRoundTrip) {
  const auto dir = test::scratch_dir("ckpt");
  Checkpoint c;
  c.params = init_params(4, 3, 9);
  save_checkpoint(dir / "sub" / "m.sbse", c);
  const Checkpoint back = load_checkpoint(dir / "sub" / "m.sbse");
  EXPECT_EQ(serialize_checkpoint(back), serialize_checkpoint(c));
  EXPECT_THROW(load_checkpoint(dir / "missing.sbse"), DataError);
}
