#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>

#include "support.hpp"

using namespace eqtest;

namespace {

Checkpoint mixed_checkpoint() {
  Checkpoint ck;
  ck.tensors.push_back(CheckpointTensor::from_tensor("a", random_tensor(Shape{3, 4}, 1)));
  ck.tensors.push_back(CheckpointTensor::from_tensor("scalar", Tensor(Shape{1}, -0.0f)));

  const Tensor w = random_tensor(Shape{5, 3}, 2);
  CheckpointTensor i8;
  i8.name = "w8";
  i8.dtype = DType::i8;
  i8.shape = w.shape();
  i8.quant = weight_quant_params(w, 8);
  i8.ints = quantize_weight_codes(w, *i8.quant);
  ck.tensors.push_back(i8);

  CheckpointTensor i4;
  i4.name = "w4";
  i4.dtype = DType::i4;
  i4.shape = Shape{7};  // odd length exercises the padding nibble
  i4.ints = {-8, -1, 0, 1, 7, 3, -5};
  i4.quant = make_quant_params(4, true, 0.25f);
  ck.tensors.push_back(i4);

  ck.set_config("k", "v");
  ck.set_config("empty", "");
  return ck;
}

}  // namespace

TEST(Checkpoint, RoundTripIsByteIdentical) {
  const Checkpoint ck = mixed_checkpoint();
  const std::string bytes = serialize(ck);
  const Checkpoint back = deserialize(bytes);
  EXPECT_EQ(back, ck);
  EXPECT_EQ(serialize(back), bytes);
}

TEST(Checkpoint, HeaderLayout) {
  const std::string bytes = serialize(mixed_checkpoint());
  EXPECT_EQ(bytes.substr(0, 4), "EQNT");
  EXPECT_EQ(bytes[4], 1);  // little-endian u32 version
  EXPECT_EQ(bytes.substr(5, 3), std::string(3, '\0'));
  EXPECT_EQ(bytes[8], 4);  // tensor count
}

TEST(Checkpoint, Int4PacksTwoPerByte) {
  CheckpointTensor t;
  t.name = "x";
  t.dtype = DType::i4;
  t.shape = Shape{4};
  t.ints = {1, -1, -8, 7};
  CheckpointTensor t8 = t;
  t8.dtype = DType::i8;
  EXPECT_EQ(record_bytes(t8) - record_bytes(t), 2u);
  EXPECT_EQ(detail::pack_nibbles(1, -1), 0xF1);
  for (int v = -8; v <= 7; ++v) {
    const auto b = detail::pack_nibbles(static_cast<std::int8_t>(v), static_cast<std::int8_t>(-v - 1));
    EXPECT_EQ(detail::unpack_nibble(b, false), v);
    EXPECT_EQ(detail::unpack_nibble(b, true), -v - 1);
  }
  t.ints[0] = 8;
  Checkpoint ck;
  ck.tensors.push_back(t);
  EXPECT_THROW(serialize(ck), CheckpointError);
}

TEST(Checkpoint, RejectsBadMagic) {
  std::string bytes = serialize(mixed_checkpoint());
  bytes[0] = 'X';
  EXPECT_THROW(deserialize(bytes), CheckpointError);
  EXPECT_THROW(deserialize(""), CheckpointError);
}

TEST(Checkpoint, RejectsUnknownVersion) {
  std::string bytes = serialize(mixed_checkpoint());
  bytes[4] = 2;
  EXPECT_THROW(deserialize(bytes), CheckpointError);
}

TEST(Checkpoint, RejectsEveryTruncation) {
  const std::string bytes = serialize(mixed_checkpoint());
  for (std::size_t n = 0; n < bytes.size(); ++n) {
    EXPECT_THROW(deserialize(std::string_view(bytes).substr(0, n)), CheckpointError) << "prefix " << n;
  }
  EXPECT_THROW(deserialize(bytes + '\0'), CheckpointError);
}

TEST(Checkpoint, RejectsCorruptTags) {
  const Checkpoint ck = mixed_checkpoint();
  const std::string bytes = serialize(ck);
  // dtype tag of the first tensor follows the header and its name
  const std::size_t dtype_at = 12 + 4 + ck.tensors[0].name.size();
  std::string bad = bytes;
  bad[dtype_at] = 9;
  EXPECT_THROW(deserialize(bad), CheckpointError);
  bad = bytes;
  bad[dtype_at + 1] = 100;  // rank
  EXPECT_THROW(deserialize(bad), CheckpointError);
}

TEST(Checkpoint, ModelRoundTrip) {
  Model m = make_model(small_config(), Scheme::int8_full, 3);
  calibrate(m, small_dataset(4, 1), 4, true);
  const Model back = model_from_checkpoint(deserialize(serialize(model_to_checkpoint(m))));
  EXPECT_EQ(back.params, m.params);
  EXPECT_EQ(back.phase, m.phase);
  EXPECT_EQ(back.config, m.config);
  EXPECT_EQ(back.scheme(), Scheme::int8_full);
  const MolGraph g = small_molecule(4);
  const ForcePrediction a = predict(m, g), b = predict(back, g);
  EXPECT_EQ(a.energy, b.energy);
  EXPECT_EQ(a.forces, b.forces);
}

TEST(Checkpoint, UncalibratedQuantizersStayObserving) {
  const Model m = make_model(small_config(), Scheme::int8_scalar, 3);
  const Model back = model_from_checkpoint(model_to_checkpoint(m));
  for (const auto& a : m.quant.activations) EXPECT_EQ(back.phase_of(a.name), QuantPhase::observe);
}

TEST(Checkpoint, FileRoundTrip) {
  const auto path = (std::filesystem::temp_directory_path() / "eq_ckpt_test.bin").string();
  const Checkpoint ck = mixed_checkpoint();
  save_checkpoint(ck, path);
  EXPECT_EQ(load_checkpoint(path), ck);
  std::remove(path.c_str());
  EXPECT_THROW(load_checkpoint(path), CheckpointError);
}

TEST(Checkpoint, RejectsConfigMismatch) {
  Checkpoint ck = model_to_checkpoint(make_model(small_config(), Scheme::fp32, 1));
  ck.set_config("F0", "9");
  EXPECT_THROW(model_from_checkpoint(ck), CheckpointError);
  ck.set_config("F0", "eight");
  EXPECT_THROW(model_from_checkpoint(ck), CheckpointError);
}
