// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The promptalign Authors

#include <gtest/gtest.h>

#include <filesystem>
#include <limits>

#include "promptalign/io.hpp"
#include "promptalign/random.hpp"

namespace pa = promptalign;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "promptalign_io_test";
  std::filesystem::create_directories(dir);
  return dir / name;
}

pa::TensorMap sample_map() {
  pa::Rng rng(11);
  pa::TensorMap m;
  m.set("b.second", pa::gaussian_tensor<float>({3, 4}, 1.0, rng));
  m.set("a.first", pa::gaussian_tensor<float>({2, 1, 5}, 1.0, rng));
  m.set("scalar", pa::Tensor::scalar(-0.0f));
  return m;
}

}  // namespace

TEST(TensorFile, ExactByteLayout) {
  pa::TensorMap m;
  m.set("w", pa::Tensor({2}, std::vector<float>{1.0f, -2.0f}));
  const std::string bytes = pa::serialize_tensors(m);
  const std::string expected = std::string("MPAF") +
                               std::string("\x01\x00\x00\x00", 4) +  // version
                               std::string("\x01\x00\x00\x00", 4) +  // count
                               std::string("\x01\x00\x00\x00", 4) + "w" +
                               std::string("\x01\x00\x00\x00", 4) +  // rank
                               std::string("\x02\x00\x00\x00", 4) +  // dim
                               std::string("\x00\x00\x80\x3f", 4) +  // 1.0f
                               std::string("\x00\x00\x00\xc0", 4);   // -2.0f
  EXPECT_EQ(bytes, expected);
}

TEST(TensorFile, RoundTripKeepsOrderShapesAndBits) {
  const auto m = sample_map();
  const auto back = pa::deserialize_tensors(pa::serialize_tensors(m), "memory");
  ASSERT_EQ(back.size(), m.size());
  for (std::size_t i = 0; i < m.size(); ++i) {
    const auto& [name, t] = m.entries()[i];
    const auto& [name2, t2] = back.entries()[i];
    EXPECT_EQ(name, name2);
    EXPECT_EQ(t.shape(), t2.shape());
    for (std::size_t j = 0; j < t.size(); ++j)
      EXPECT_EQ(std::bit_cast<std::uint32_t>(t[j]), std::bit_cast<std::uint32_t>(t2[j]));
  }
}

TEST(TensorFile, SaveLoadSaveIsByteIdentical) {
  const auto a = scratch("a.mpaf"), b = scratch("b.mpaf");
  pa::save_tensors(a, sample_map());
  pa::save_tensors(b, pa::load_tensors(a));
  EXPECT_EQ(pa::read_file(a), pa::read_file(b));
}

TEST(TensorFile, NonFiniteValuesSurvive) {
  pa::TensorMap m;
  m.set("x", pa::Tensor({3}, std::vector<float>{std::numeric_limits<float>::infinity(),
                                                 std::numeric_limits<float>::quiet_NaN(),
                                                 std::numeric_limits<float>::denorm_min()}));
  const auto bytes = pa::serialize_tensors(m);
  EXPECT_EQ(pa::serialize_tensors(pa::deserialize_tensors(bytes, "m")), bytes);
}

TEST(TensorFile, RejectsCorruptInput) {
  const std::string good = pa::serialize_tensors(sample_map());
  auto expect_error = [](const std::string& bytes, const std::string& needle) {
    try {
      pa::deserialize_tensors(bytes, "file.mpaf");
      FAIL() << "accepted corrupt input (" << needle << ")";
    } catch (const std::runtime_error& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
      EXPECT_NE(std::string(e.what()).find("file.mpaf"), std::string::npos);
    }
  };
  expect_error("MPAX" + good.substr(4), "bad magic");
  expect_error(good.substr(0, 4) + std::string("\x02\x00\x00\x00", 4) + good.substr(8),
               "version 2");
  expect_error(good.substr(0, good.size() - 1), "truncated");
  expect_error(good + "x", "trailing");
  expect_error("MP", "truncated");

  pa::TensorMap twice;
  twice.set("x", pa::Tensor::scalar(1.0f));
  auto dup = pa::serialize_tensors(twice);
  const std::string entry = dup.substr(12);
  dup[8] = 2;  // claim two entries and repeat the first
  expect_error(dup + entry, "duplicate");

  pa::TensorMap one;
  one.set("x", pa::Tensor({1}, std::vector<float>{1.0f}));
  std::string zero = pa::serialize_tensors(one);
  // entry: name_len(4) 'x' rank(4) dim(4); the dim starts at byte 12+4+1+4
  zero[21] = 0;
  expect_error(zero, "zero dimension");
}

TEST(TensorFile, MissingEntryNamesIt) {
  const auto m = sample_map();
  try {
    m.at("nope");
    FAIL();
  } catch (const std::out_of_range& e) {
    EXPECT_NE(std::string(e.what()).find("nope"), std::string::npos);
  }
}

TEST(TensorFile, SetReplacesInPlace) {
  auto m = sample_map();
  m.set("b.second", pa::Tensor::scalar(3.0f));
  EXPECT_EQ(m.size(), 3u);
  EXPECT_EQ(m.entries()[0].first, "b.second");
  EXPECT_EQ(m.at("b.second")[0], 3.0f);
}

TEST(TensorFile, MissingFileIsAnError) {
  EXPECT_THROW(pa::load_tensors(scratch("does_not_exist.mpaf")), std::runtime_error);
}

TEST(ValueEncoding, U64RoundTripsExactly) {
  for (std::uint64_t v : {std::uint64_t{0}, std::uint64_t{1}, std::uint64_t{0xFFFF},
                          std::uint64_t{0x123456789ABCDEF0ULL},
                          std::numeric_limits<std::uint64_t>::max()})
    EXPECT_EQ(pa::decode_u64(pa::encode_u64(v)), v);
  EXPECT_THROW(pa::decode_u64(pa::Tensor::scalar(1.0f)), std::runtime_error);
}

TEST(ValueEncoding, TextRoundTrips) {
  for (const std::string s : {"", "a", "k = 4\ntemplate = 3\n", "caf\xc3\xa9"})
    EXPECT_EQ(pa::decode_text(pa::encode_text(s)), s);
}
