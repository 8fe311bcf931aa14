#include "fashionflow/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include "fashionflow/errors.hpp"
#include "fashionflow/parallel.hpp"

namespace ff {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "VTEN I/O assumes a little-endian host");

namespace {

void put_u32(std::string& out, std::uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); }

class Reader {
 public:
  Reader(std::string_view bytes, std::size_t base) : bytes_(bytes), base_(base) {}

  void need(std::size_t n, const char* what) const {
    if (pos_ + n > bytes_.size()) {
      throw FormatError("VTEN: truncated " + std::string(what) + " at byte offset " + std::to_string(base_ + pos_) +
                        " (need " + std::to_string(n) + " bytes, " + std::to_string(bytes_.size() - pos_) +
                        " available)");
    }
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v;
    std::memcpy(&v, bytes_.data() + pos_, 4);
    pos_ += 4;
    return v;
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<std::uint8_t>(bytes_[pos_++]);
  }
  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t offset() const { return base_ + pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::string_view bytes_;
  std::size_t base_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_tensor(const Tensor& t) {
  std::string out = "VTEN";
  put_u32(out, kTensorFileVersion);
  out.push_back('\0');
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
  const std::size_t header = out.size();
  out.resize(header + 4 * static_cast<std::size_t>(t.size()));
  if constexpr (std::is_same_v<Scalar, float>) {
    std::memcpy(out.data() + header, t.ptr(), 4 * static_cast<std::size_t>(t.size()));
  } else {
    for (std::int64_t i = 0; i < t.size(); ++i) {
      const float v = static_cast<float>(t[i]);
      std::memcpy(out.data() + header + 4 * static_cast<std::size_t>(i), &v, 4);
    }
  }
  return out;
}

Tensor decode_tensor(std::string_view bytes, std::size_t base) {
  Reader r(bytes, base);
  const auto magic = r.take(4, "magic");
  if (magic != "VTEN") throw FormatError("not a VTEN file: bad magic at byte offset " + std::to_string(base));
  const std::size_t version_at = r.offset();
  const auto version = r.u32("version");
  if (version != kTensorFileVersion) {
    throw FormatError("VTEN: unsupported version " + std::to_string(version) + " at byte offset " +
                      std::to_string(version_at));
  }
  const std::size_t dtype_at = r.offset();
  const auto dtype = r.u8("dtype");
  if (dtype != 0) {
    throw FormatError("VTEN: unsupported dtype code " + std::to_string(dtype) + " at byte offset " +
                      std::to_string(dtype_at));
  }
  const std::size_t rank_at = r.offset();
  const auto rank = r.u32("rank");
  if (rank > 16) {
    throw FormatError("VTEN: implausible rank " + std::to_string(rank) + " at byte offset " + std::to_string(rank_at));
  }
  Shape shape;
  std::uint64_t count = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    shape.push_back(r.u32("dims"));
    count *= static_cast<std::uint64_t>(shape.back());
  }
  const std::size_t payload_at = r.offset();
  if (count * 4 > r.remaining()) {
    throw FormatError("VTEN: truncated payload at byte offset " + std::to_string(payload_at) + ": expected " +
                      std::to_string(count * 4) + " bytes, found " + std::to_string(r.remaining()));
  }
  const auto payload = r.take(count * 4, "payload");
  std::vector<Scalar> data(count);
  if constexpr (std::is_same_v<Scalar, float>) {
    std::memcpy(data.data(), payload.data(), payload.size());
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      float v;
      std::memcpy(&v, payload.data() + 4 * i, 4);
      data[i] = v;
    }
  }
  return Tensor(std::move(shape), std::move(data));
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed: " + path.string());
  return ss.str();
}

void write_file(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

void write_tensor(const fs::path& path, const Tensor& t) { write_file(path, encode_tensor(t)); }

Tensor read_tensor(const fs::path& path) {
  const std::string bytes = read_file(path);
  try {
    return decode_tensor(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// --- Synthetic videos -------------------------------------------------------

SyntheticVideoSpec SyntheticVideoSpec::random(std::uint64_t seed, std::uint64_t index, int frames, int size,
                                              Motion motion) {
  Rng rng = make_rng(seed, {0x64617461, index});
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto colour = [&](double lo, double hi) {
    std::array<Scalar, 3> c{};
    // Quantised to 1/32 so palettes are exact in every precision.
    for (auto& v : c) v = static_cast<Scalar>(std::round((lo + (hi - lo) * unit(rng)) * 32.0) / 32.0);
    return c;
  };
  SyntheticVideoSpec s;
  s.frames = frames;
  s.height = size;
  s.width = size;
  s.background = colour(-1.0, -0.5);
  s.body = colour(0.1, 0.6);
  s.garment = colour(-0.9, 0.9);
  s.stripe = colour(0.7, 1.0);
  s.has_stripe = unit(rng) < 0.75;
  s.motion = motion;
  s.sway_amplitude = 2.0 + 4.0 * unit(rng);
  s.sway_period = 6.0 + 6.0 * unit(rng);
  s.sway_phase = 2.0 * std::numbers::pi * unit(rng);
  s.velocity = (unit(rng) < 0.5 ? -1 : 1) * (1 + static_cast<int>(unit(rng) * 2.0));
  s.start_offset = -s.velocity * frames / 2;
  s.stripe_phase = static_cast<int>(unit(rng) * 8.0);
  s.stripe_speed = 1 + static_cast<int>(unit(rng) * 2.0);
  return s;
}

Tensor render_video(const SyntheticVideoSpec& s) {
  const int f = s.frames, H = s.height, W = s.width;
  if (f < 1 || H < 8 || W < 8) throw ConfigError("synthetic video needs f >= 1 and a side of at least 8 pixels");
  Tensor video({f, 3, H, W});
  // Geometry scales with the frame; all edges land on whole pixels.
  const int cx = W / 2;
  const int head_r = std::max(1, H / 12);
  const int head_cy = H / 5;
  const int torso_cy = H / 2, torso_rx = W / 7, torso_ry = H / 3;
  const int g_top = torso_cy - torso_ry / 2, g_h = std::max(2, torso_ry), g_half = torso_rx;
  const int stripe_h = std::max(1, g_h / 6);

  for (int t = 0; t < f; ++t) {
    int dx = 0;
    if (s.motion == Motion::sway) {
      dx = static_cast<int>(std::lround(s.sway_amplitude * std::sin(2.0 * std::numbers::pi * t / s.sway_period + s.sway_phase)));
    } else {
      dx = s.start_offset + s.velocity * t;
    }
    // Keep the whole figure inside the frame so colour counts never change.
    dx = std::clamp(dx, -(cx - torso_rx - 1), W - 1 - cx - torso_rx - 1);
    const int phase = ((s.stripe_phase + s.stripe_speed * t) % g_h + g_h) % g_h;
    for (int i = 0; i < H; ++i) {
      for (int j = 0; j < W; ++j) {
        const int x = j - (cx + dx);
        const std::array<Scalar, 3>* c = &s.background;
        const double ty = static_cast<double>(i - torso_cy) / torso_ry, tx = static_cast<double>(x) / torso_rx;
        const double hy = static_cast<double>(i - head_cy) / head_r, hx = static_cast<double>(x) / head_r;
        if (tx * tx + ty * ty <= 1.0 || hx * hx + hy * hy <= 1.0) c = &s.body;
        if (i >= g_top && i < g_top + g_h && x >= -g_half && x < g_half) {
          c = &s.garment;
          const int row = ((i - g_top) - phase + g_h) % g_h;
          if (s.has_stripe && row < stripe_h) c = &s.stripe;
        }
        for (int ch = 0; ch < 3; ++ch) video.at({t, ch, i, j}) = (*c)[static_cast<std::size_t>(ch)];
      }
    }
  }
  return video;
}

VideoItem generate_item(std::uint64_t seed, std::uint64_t index, int frames, int size, Motion motion) {
  VideoItem item;
  item.video = render_video(SyntheticVideoSpec::random(seed, index, frames, size, motion));
  item.cond = select(item.video, 0, 0);
  return item;
}

std::vector<VideoItem> generate_dataset(int count, int frames, int size, std::uint64_t seed, Motion motion) {
  if (count < 1) throw ContractError("dataset count must be at least 1");
  std::vector<VideoItem> items(static_cast<std::size_t>(count));
  parallel_for(count, [&](std::int64_t i) {
    items[static_cast<std::size_t>(i)] = generate_item(seed, static_cast<std::uint64_t>(i), frames, size, motion);
  });
  return items;
}

// --- Dataset directories ----------------------------------------------------

int train_split_size(int count) { return (count * 4 + 4) / 5; }

std::string indexed_name(std::string_view stem, int index) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*s_%04d.vten", static_cast<int>(stem.size()), stem.data(), index);
  return buf;
}

int save_dataset(const fs::path& dir, const std::vector<VideoItem>& items) {
  const int count = static_cast<int>(items.size());
  const int n_train = train_split_size(count);
  for (int i = 0; i < count; ++i) {
    const bool train = i < n_train;
    const fs::path split = dir / (train ? "train" : "test");
    const int local = train ? i : i - n_train;
    write_tensor(split / indexed_name("vid", local), items[static_cast<std::size_t>(i)].video);
    write_tensor(split / indexed_name("cond", local), items[static_cast<std::size_t>(i)].cond);
  }
  return n_train;
}

std::vector<VideoItem> load_split(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("dataset directory not found: " + dir.string());
  std::vector<VideoItem> items;
  for (int i = 0;; ++i) {
    const fs::path vid = dir / indexed_name("vid", i);
    if (!fs::exists(vid)) break;
    VideoItem item;
    item.video = read_tensor(vid);
    item.cond = read_tensor(dir / indexed_name("cond", i));
    if (item.video.rank() != 4 || item.video.dim(1) != 3) {
      throw FormatError(vid.string() + ": expected a video (f, 3, H, W), got " + to_string(item.video.shape()));
    }
    items.push_back(std::move(item));
  }
  if (items.empty()) throw IoError("no vid_0000.vten in " + dir.string());
  return items;
}

std::vector<Tensor> load_videos(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("video directory not found: " + dir.string());
  std::vector<fs::path> paths;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    if (entry.path().extension() == ".vten" && name.rfind("cond_", 0) != 0) paths.push_back(entry.path());
  }
  std::sort(paths.begin(), paths.end());
  std::vector<Tensor> videos;
  for (const auto& p : paths) videos.push_back(read_tensor(p));
  if (videos.empty()) throw IoError("no .vten videos in " + dir.string());
  return videos;
}

}  // namespace ff
