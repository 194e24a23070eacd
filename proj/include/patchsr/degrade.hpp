#pragma once

// Training-pair synthesis: a seeded pixel-space degradation chain for the
// removal stage, the noise-blend + partial-denoise texture eraser for the
// texture stage, the training crop policy, and the corpus manifest.

#include <array>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "patchsr/model.hpp"

namespace patchsr {

struct Range {
  double lo = 0.0;
  double hi = 0.0;

  double draw(Rng& rng) const { return lo == hi ? lo : rng.uniform(lo, hi); }
  void validate(const char* what) const {
    if (!(lo >= 0.0 && hi >= lo)) throw ConfigError(std::string("degrade: invalid range for ") + what);
  }
};

struct DegradeConfig {
  Range blur_sigma{0.2, 1.5};
  int factor = 4;
  Range noise_sigma{0.0, 0.04};
  Range compression{0.0, 0.6};  // 0 disables block quantisation, 1 is the coarsest table
  std::uint64_t seed = 0;

  static DegradeConfig all_off() {
    DegradeConfig c;
    c.blur_sigma = {0.0, 0.0};
    c.factor = 1;
    c.noise_sigma = {0.0, 0.0};
    c.compression = {0.0, 0.0};
    return c;
  }

  void validate() const {
    blur_sigma.validate("blur_sigma");
    noise_sigma.validate("noise_sigma");
    compression.validate("compression");
    if (compression.hi > 1.0) throw ConfigError("degrade: compression strength must lie in [0,1]");
    if (factor < 1) throw ConfigError("degrade: factor must be >= 1");
  }
};

namespace degrade {

inline constexpr int kBlock = 8;

/// Orthonormal 8-point DCT-II basis, basis[u][x].
inline const std::array<std::array<double, kBlock>, kBlock>& dct_basis() {
  static const auto b = [] {
    std::array<std::array<double, kBlock>, kBlock> m{};
    for (int u = 0; u < kBlock; ++u)
      for (int x = 0; x < kBlock; ++x)
        m[u][x] = (u == 0 ? std::sqrt(1.0 / kBlock) : std::sqrt(2.0 / kBlock)) *
                  std::cos((2 * x + 1) * u * 3.14159265358979323846 / (2 * kBlock));
    return m;
  }();
  return b;
}

/// Quantises 8x8 block DCT coefficients with step strength * 0.02 * (1 + u + v).
/// Edge blocks smaller than 8 are padded by edge replication and cropped back.
inline ImageBuffer block_quantize(const ImageBuffer& img, double strength) {
  if (strength <= 0.0) return img;
  const auto& B = dct_basis();
  ImageBuffer out = img;
  const int H = img.height(), W = img.width();
  double blk[kBlock][kBlock], coef[kBlock][kBlock], tmp[kBlock][kBlock];
  for (int c = 0; c < 3; ++c)
    for (int bi = 0; bi < H; bi += kBlock)
      for (int bj = 0; bj < W; bj += kBlock) {
        for (int x = 0; x < kBlock; ++x)
          for (int y = 0; y < kBlock; ++y) blk[x][y] = img(c, std::min(bi + x, H - 1), std::min(bj + y, W - 1));
        for (int u = 0; u < kBlock; ++u)
          for (int y = 0; y < kBlock; ++y) {
            double s = 0.0;
            for (int x = 0; x < kBlock; ++x) s += B[u][x] * blk[x][y];
            tmp[u][y] = s;
          }
        for (int u = 0; u < kBlock; ++u)
          for (int v = 0; v < kBlock; ++v) {
            double s = 0.0;
            for (int y = 0; y < kBlock; ++y) s += tmp[u][y] * B[v][y];
            const double step = strength * 0.02 * (1 + u + v);
            coef[u][v] = std::round(s / step) * step;
          }
        for (int x = 0; x < kBlock; ++x)
          for (int v = 0; v < kBlock; ++v) {
            double s = 0.0;
            for (int u = 0; u < kBlock; ++u) s += B[u][x] * coef[u][v];
            tmp[x][v] = s;
          }
        for (int x = 0; x < kBlock && bi + x < H; ++x)
          for (int y = 0; y < kBlock && bj + y < W; ++y) {
            double s = 0.0;
            for (int v = 0; v < kBlock; ++v) s += tmp[x][v] * B[v][y];
            out(c, bi + x, bj + y) = std::clamp(s, 0.0, 1.0);
          }
      }
  return out;
}

}  // namespace degrade

/// Seeded chain: Gaussian blur, area downscale, additive Gaussian noise with
/// clamping, block-DCT quantisation. Output is img / factor in each dimension.
inline ImageBuffer realesrgan_lite(const ImageBuffer& img, const DegradeConfig& cfg) {
  cfg.validate();
  if (img.height() % cfg.factor || img.width() % cfg.factor)
    throw DimensionError("realesrgan_lite: " + std::to_string(img.height()) + "x" + std::to_string(img.width()) +
                         " not divisible by factor " + std::to_string(cfg.factor));
  Rng rng(mix_seed(cfg.seed, 0xDE6));
  const double blur = cfg.blur_sigma.draw(rng);
  const double noise = cfg.noise_sigma.draw(rng);
  const double q = cfg.compression.draw(rng);
  ImageBuffer x = imaging::downscale_area(imaging::gaussian_blur(img, blur), cfg.factor);
  if (noise > 0.0)
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::clamp(x[i] + noise * rng.normal(), 0.0, 1.0);
  return degrade::block_quantize(x, q);
}

// ------------------------------------------------------------------ i2i eraser

struct I2iConfig {
  double strength = 0.4;
  int steps = 4;
  int downsample = 1;
  std::string prompt = "a clean smooth photo";
  std::string negative_prompt = "noise grain sharp texture detail";
  std::uint64_t seed = 0;

  void validate() const {
    if (!(strength >= 0.3 && strength <= 0.5))
      throw DomainError("i2i_degrade: strength " + std::to_string(strength) + " outside [0.3, 0.5]");
    if (steps < 0) throw DomainError("i2i_degrade: steps must be >= 0");
    if (downsample < 1) throw DomainError("i2i_degrade: downsample must be >= 1");
  }
};

/// Downsample, encode, blend with seeded noise at `strength`, then run `steps`
/// Euler steps of the model from `strength` to 0 and decode. The model sees the
/// prompt and negative prompt as one concatenated token sequence on both
/// branches, and the blended latent as its control condition.
inline ImageBuffer i2i_degrade(const ImageBuffer& img_hq, const I2iConfig& cfg, const VelocityModel& model,
                               const ModelConfig& mc) {
  cfg.validate();
  const Codec codec = mc.codec();
  const ImageBuffer small = imaging::downscale_area(img_hq, cfg.downsample);
  const LatentGrid z = codec.encode(small);
  Rng rng(mix_seed(cfg.seed, 0x121));
  const LatentGrid eps = LatentGrid::normal(z.channels(), z.height(), z.width(), rng);
  const LatentGrid z_s = flow::interpolate_state(z, eps, cfg.strength);
  if (cfg.steps == 0) return codec.decode(z_s);
  const PromptEmbedding txt = concat_prompts(mc.embed(cfg.prompt), mc.embed(cfg.negative_prompt));
  const TimeGrid grid = flow::make_time_grid(cfg.strength, cfg.steps);
  LatentGrid zt = z_s;
  for (int k = 0; k < grid.n_steps; ++k) {
    const double t0 = grid.points[static_cast<std::size_t>(k)], t1 = grid.points[static_cast<std::size_t>(k) + 1];
    const LatentGrid v = model.velocity({zt, t0, txt, txt, z_s, StageFlag::texture, 0});
    zt = flow::euler_step(zt, v, t0, t1);
  }
  return codec.decode(zt);
}

// ------------------------------------------------------------------ crop policy

enum class PromptScope { local, global };
enum class CropMode { native_patch, resize_then_crop };

inline const char* to_string(PromptScope s) { return s == PromptScope::local ? "local" : "global"; }
inline const char* to_string(CropMode m) { return m == CropMode::native_patch ? "native_patch" : "resize_then_crop"; }

struct CropPolicy {
  int crop_size = 64;
  double resize_probability = 0.2;
  int resize_short_side = 128;

  void validate() const {
    if (crop_size < 1) throw ConfigError("crop: crop_size must be >= 1");
    if (!(resize_probability >= 0.0 && resize_probability <= 1.0))
      throw ConfigError("crop: resize_probability must lie in [0,1]");
    if (resize_short_side < crop_size) throw ConfigError("crop: resize_short_side must be >= crop_size");
  }
};

struct CropResult {
  ImageBuffer patch;
  PromptScope scope = PromptScope::local;
  CropMode mode = CropMode::native_patch;
  int top = 0;
  int left = 0;
};

/// With probability resize_probability the short side is resized to the target
/// and the crop's prompt is the global one; otherwise a native-resolution crop
/// with its own local prompt.
inline CropResult rfe_crop(const ImageBuffer& img, const CropPolicy& policy, std::uint64_t seed) {
  policy.validate();
  if (img.height() < policy.crop_size || img.width() < policy.crop_size)
    throw DimensionError("rfe_crop: image " + std::to_string(img.height()) + "x" + std::to_string(img.width()) +
                         " smaller than crop " + std::to_string(policy.crop_size));
  Rng rng(mix_seed(seed, 0xC509));
  CropResult r;
  ImageBuffer src = img;
  if (rng.bernoulli(policy.resize_probability)) {
    r.mode = CropMode::resize_then_crop;
    r.scope = PromptScope::global;
    const int s = std::min(img.height(), img.width());
    const double k = static_cast<double>(policy.resize_short_side) / s;
    const int h = img.height() == s ? policy.resize_short_side : static_cast<int>(std::lround(img.height() * k));
    const int w = img.width() == s ? policy.resize_short_side : static_cast<int>(std::lround(img.width() * k));
    src = imaging::resize_bicubic(img, h, w);
  }
  r.top = rng.uniform_int(0, src.height() - policy.crop_size);
  r.left = rng.uniform_int(0, src.width() - policy.crop_size);
  r.patch = imaging::crop(src, r.top, r.left, policy.crop_size, policy.crop_size);
  return r;
}

// ------------------------------------------------------------------ manifest

enum class StageTag { removal, texture };

inline const char* to_string(StageTag s) { return s == StageTag::removal ? "removal" : "texture"; }
inline StageTag parse_stage_tag(const std::string& s) {
  if (s == "removal") return StageTag::removal;
  if (s == "texture") return StageTag::texture;
  throw FormatError("manifest: unknown stage tag '" + s + "'");
}

struct CorpusRecord {
  std::string hq_path;
  std::string lq_path;
  StageTag stage = StageTag::texture;
  std::string global_prompt;
  std::string local_prompt;
  std::uint64_t seed = 0;
};

inline nlohmann::json to_json(const CorpusRecord& r) {
  return {{"hq", r.hq_path},           {"lq", r.lq_path}, {"stage", to_string(r.stage)},
          {"global_prompt", r.global_prompt}, {"local_prompt", r.local_prompt}, {"seed", r.seed}};
}

inline CorpusRecord record_from_json(const nlohmann::json& j) {
  try {
    return {j.at("hq").get<std::string>(),           j.at("lq").get<std::string>(),
            parse_stage_tag(j.at("stage").get<std::string>()), j.value("global_prompt", std::string()),
            j.value("local_prompt", std::string()),  j.value("seed", std::uint64_t{0})};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest: ") + e.what());
  }
}

inline void write_manifest(const std::string& path, const std::vector<CorpusRecord>& records) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("manifest: cannot write " + path);
  for (const auto& r : records) os << to_json(r).dump() << '\n';
}

inline std::vector<CorpusRecord> read_manifest(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("manifest: cannot read " + path);
  std::vector<CorpusRecord> out;
  std::string line;
  for (int n = 1; std::getline(is, line); ++n) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError("manifest line " + std::to_string(n) + ": " + e.what());
    }
    out.push_back(record_from_json(j));
  }
  return out;
}

}  // namespace patchsr
