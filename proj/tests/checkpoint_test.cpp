#include "pcvd/checkpoint.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "pcvd/errors.hpp"

namespace pcvd {
namespace {

ParameterMap sample_params() {
  std::mt19937_64 rng(9);
  ParameterMap p;
  p.emplace("backbone.block0.kernel", Tensor::uniform({4, 3, 3, 3}, rng, -1, 1));
  p.emplace("head.bias", Tensor::uniform({5}, rng, -1, 1));
  p.emplace("scalar", Tensor::scalar(0.25));
  return p;
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const ParameterMap p = sample_params();
  const auto bytes = encode_checkpoint(p);
  const ParameterMap q = decode_checkpoint(bytes);
  ASSERT_EQ(q.size(), p.size());
  for (const auto& [name, t] : p) {
    const Tensor& u = q.at(name);
    EXPECT_EQ(u.shape(), t.shape());
    for (Index i = 0; i < t.numel(); ++i) EXPECT_EQ(u.values()[i], t.values()[i]);
  }
  EXPECT_EQ(encode_checkpoint(q), bytes);
  EXPECT_EQ(parameter_checksum(q), parameter_checksum(p));
}

TEST(Checkpoint, FileRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "pcvd_ckpt_test.bin";
  write_checkpoint(path, sample_params());
  EXPECT_EQ(parameter_checksum(read_checkpoint(path)), parameter_checksum(sample_params()));
  std::filesystem::remove(path);
}

TEST(Checkpoint, ChecksumSeesSingleBitChanges) {
  ParameterMap p = sample_params();
  const auto before = parameter_checksum(p);
  p.at("head.bias").mutable_values()[2] = std::nextafter(p.at("head.bias").values()[2], 10.0);
  EXPECT_NE(parameter_checksum(p), before);
}

TEST(Checkpoint, EveryTruncationIsAFormatError) {
  const auto bytes = encode_checkpoint(sample_params());
  for (std::size_t n = 0; n < bytes.size(); n += 7) {
    std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(n));
    EXPECT_THROW(decode_checkpoint(cut), FormatError) << n;
  }
}

TEST(Checkpoint, BadMagicAndTrailingBytes) {
  auto bytes = encode_checkpoint(sample_params());
  auto bad = bytes;
  bad[5] ^= 0xff;
  EXPECT_THROW(decode_checkpoint(bad), FormatError);
  bytes.push_back(0);
  try {
    decode_checkpoint(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset, bytes.size() - 1);
    EXPECT_EQ(e.category(), ErrorCategory::Format);
  }
}

TEST(Checkpoint, MissingFileIsIoError) {
  EXPECT_THROW(read_checkpoint("/nonexistent/dir/x.ckpt"), IoError);
}

}  // namespace
}  // namespace pcvd
