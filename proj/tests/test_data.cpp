#include <gtest/gtest.h>

#include <filesystem>
#include <map>

#include "fashionflow/data.hpp"
#include "fashionflow/errors.hpp"
#include "fashionflow/parallel.hpp"
#include "test_support.hpp"

namespace ff {
namespace {

namespace fs = std::filesystem;
using testing::uniform_int;

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("ff_test_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string expect_format_error(const std::string& bytes) {
  try {
    decode_tensor(bytes);
  } catch (const FormatError& e) {
    return e.what();
  }
  ADD_FAILURE() << "no FormatError";
  return {};
}

TEST(Vten, RoundTripIsBitIdentical) {
  Rng rng(1);
  const fs::path dir = scratch("roundtrip");
  for (int i = 0; i < 100; ++i) {
    Shape shape(static_cast<std::size_t>(uniform_int(rng, 0, 5)));
    for (auto& d : shape) d = uniform_int(rng, 1, 5);
    Tensor t = Tensor::randn(shape, rng, 10);
    if (i == 0) t[0] = -0.0f;
    const fs::path p = dir / "t.vten";
    write_tensor(p, t);
    const Tensor back = read_tensor(p);
    ASSERT_TRUE(back.bit_equal(t)) << i;
    ASSERT_EQ(read_file(p).size(), 13 + 4 * shape.size() + 4 * static_cast<std::size_t>(t.size()));
  }
}

TEST(Vten, HeaderLayoutIsLittleEndian) {
  const std::string b = encode_tensor(Tensor({2, 1}, std::vector<Scalar>{Scalar(1), Scalar(-2)}));
  ASSERT_EQ(b.size(), 4u + 4 + 1 + 4 + 8 + 8);
  EXPECT_EQ(b.substr(0, 4), "VTEN");
  EXPECT_EQ(b[4], 1);
  EXPECT_EQ(b[8], 0);  // dtype f32
  EXPECT_EQ(b[9], 2);  // rank
  EXPECT_EQ(b[13], 2);
  EXPECT_EQ(b[17], 1);
  // 1.0f = 0x3f800000
  EXPECT_EQ(static_cast<unsigned char>(b[24]), 0x3f);
  EXPECT_EQ(static_cast<unsigned char>(b[23]), 0x80);
}

TEST(Vten, CorruptFilesRaiseFormatErrors) {
  const std::string good = encode_tensor(Tensor({3, 4}, Scalar(0.5)));
  EXPECT_NE(expect_format_error(good.substr(0, good.size() - 1)).find("truncated"), std::string::npos);
  EXPECT_NE(expect_format_error(good.substr(0, 6)).find("byte offset"), std::string::npos);
  std::string magic = good;
  magic[0] = 'X';
  EXPECT_NE(expect_format_error(magic).find("VTEN"), std::string::npos);
  std::string version = good;
  version[4] = 2;
  EXPECT_NE(expect_format_error(version).find("version"), std::string::npos);
  std::string dtype = good;
  dtype[8] = 7;
  expect_format_error(dtype);
  EXPECT_THROW(read_tensor("/nonexistent/ff/x.vten"), IoError);
}

TEST(Synthetic, SameSeedAndIndexIsBitIdentical) {
  const VideoItem a = generate_item(3, 5, 8, 32), b = generate_item(3, 5, 8, 32), c = generate_item(3, 6, 8, 32);
  EXPECT_TRUE(a.video.bit_equal(b.video));
  EXPECT_FALSE(a.video.bit_equal(c.video));
}

TEST(Synthetic, ConditionIsFrameZeroAndRangeIsBounded) {
  for (Motion m : {Motion::sway, Motion::linear}) {
    for (const VideoItem& it : generate_dataset(6, 8, 32, 4, m)) {
      ASSERT_EQ(it.video.shape(), (Shape{8, 3, 32, 32}));
      EXPECT_TRUE(it.cond.bit_equal(select(it.video, 0, 0)));
      for (std::int64_t i = 0; i < it.video.size(); ++i) {
        ASSERT_GE(it.video[i], -1);
        ASSERT_LE(it.video[i], 1);
      }
    }
  }
}

// Only pose changes over time: the colour histogram of every frame matches frame 0.
TEST(Synthetic, ColourHistogramConstantAcrossFrames) {
  for (Motion m : {Motion::sway, Motion::linear}) {
    for (const VideoItem& it : generate_dataset(10, 12, 64, 5, m)) {
      auto hist = [&](std::int64_t f) {
        std::map<std::array<Scalar, 3>, int> h;
        for (std::int64_t y = 0; y < 64; ++y)
          for (std::int64_t x = 0; x < 64; ++x)
            ++h[{it.video.at({f, 0, y, x}), it.video.at({f, 1, y, x}), it.video.at({f, 2, y, x})}];
        return h;
      };
      const auto h0 = hist(0);
      bool moved = false;
      for (std::int64_t f = 1; f < 12; ++f) {
        EXPECT_EQ(hist(f), h0) << "frame " << f;
        moved = moved || !select(it.video, 0, f).bit_equal(it.cond);
      }
      EXPECT_TRUE(moved);
    }
  }
}

TEST(Synthetic, GenerationIgnoresThreadCount) {
  set_thread_count(1);
  const auto a = generate_dataset(6, 4, 16, 9);
  set_thread_count(3);
  const auto b = generate_dataset(6, 4, 16, 9);
  set_thread_count(0);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(a[i].video.bit_equal(b[i].video));
  EXPECT_THROW(generate_dataset(0, 4, 16, 9), ContractError);
}

TEST(Dataset, EightyVideosSplitSixtyFourSixteen) {
  EXPECT_EQ(train_split_size(80), 64);
  EXPECT_EQ(train_split_size(10), 8);
  EXPECT_EQ(train_split_size(1), 1);
  const fs::path dir = scratch("split");
  const auto items = generate_dataset(10, 3, 16, 11);
  EXPECT_EQ(save_dataset(dir, items), 8);
  EXPECT_TRUE(fs::exists(dir / "train" / "vid_0007.vten"));
  EXPECT_TRUE(fs::exists(dir / "test" / "cond_0001.vten"));
  const auto train = load_split(dir / "train"), test = load_split(dir / "test");
  ASSERT_EQ(train.size(), 8u);
  ASSERT_EQ(test.size(), 2u);
  EXPECT_TRUE(test[1].video.bit_equal(items[9].video));
  EXPECT_TRUE(test[1].cond.bit_equal(items[9].cond));
  const auto vids = load_videos(dir / "test");
  ASSERT_EQ(vids.size(), 2u);
  EXPECT_TRUE(vids[0].bit_equal(items[8].video));
  EXPECT_THROW(load_split(dir / "missing"), IoError);
  EXPECT_EQ(indexed_name("vid", 7), "vid_0007.vten");
}

}  // namespace
}  // namespace ff
