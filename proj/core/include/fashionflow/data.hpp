#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "fashionflow/tensor.hpp"

namespace ff {

// --- VTEN tensor files ---
//
// Layout (little-endian): "VTEN", u32 version = 1, u8 dtype (0 = f32),
// u32 rank, u32 dims[rank], f32 payload in row-major order.

inline constexpr std::uint32_t kTensorFileVersion = 1;

std::string encode_tensor(const Tensor& t);
// `base` is added to reported byte offsets when the blob is embedded in a
// larger file.
Tensor decode_tensor(std::string_view bytes, std::size_t base = 0);

void write_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

// --- Synthetic sprite videos ---

enum class Motion { sway, linear };

struct SyntheticVideoSpec {
  int frames = 8;
  int height = 64;
  int width = 64;
  // Palette, each an RGB triple in [-1, 1].
  std::array<Scalar, 3> background{}, body{}, garment{}, stripe{};
  bool has_stripe = true;
  // Motion program: horizontal offset per frame and the stripe phase, which
  // cycles through the garment rows as the figure turns.
  Motion motion = Motion::sway;
  double sway_amplitude = 4;  // pixels
  double sway_period = 8;     // frames
  double sway_phase = 0;      // radians
  int velocity = 1;           // pixels per frame, linear motion
  int start_offset = 0;       // pixels, linear motion
  int stripe_phase = 0;       // rows
  int stripe_speed = 1;       // rows per frame

  // Draws every field except the sizes from (seed, index).
  static SyntheticVideoSpec random(std::uint64_t seed, std::uint64_t index, int frames, int size,
                                   Motion motion = Motion::sway);
};

// (f, 3, H, W) in [-1, 1].
Tensor render_video(const SyntheticVideoSpec& spec);

struct VideoItem {
  Tensor video;  // (f, 3, H, W)
  Tensor cond;   // (3, H, W), equal to frame 0
};

VideoItem generate_item(std::uint64_t seed, std::uint64_t index, int frames, int size, Motion motion = Motion::sway);
std::vector<VideoItem> generate_dataset(int count, int frames, int size, std::uint64_t seed,
                                        Motion motion = Motion::sway);

// --- Dataset directories ---

// ceil(0.8 * count) videos go to train/, the rest to test/.
int train_split_size(int count);

// Writes <dir>/train/{vid,cond}_%04d.vten and <dir>/test/... ; returns the
// number of training items.
int save_dataset(const std::filesystem::path& dir, const std::vector<VideoItem>& items);

// Loads vid_NNNN / cond_NNNN pairs of one split directory in index order.
std::vector<VideoItem> load_split(const std::filesystem::path& dir);

// Every *.vten in `dir` except cond_* files, sorted by name.
std::vector<Tensor> load_videos(const std::filesystem::path& dir);

std::string indexed_name(std::string_view stem, int index);  // "vid_0007.vten"

}  // namespace ff
