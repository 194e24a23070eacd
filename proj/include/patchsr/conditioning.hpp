#pragma once

// Latent codec and prompt embedder.
//
// The codec is a lossless space-to-depth rearrangement: an f x f block of RGB
// pixels becomes 3*f*f latent channels at one spatial site. The prompt embedder
// maps whitespace-separated words to hash-seeded pseudo-random token vectors.

#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "patchsr/autograd.hpp"
#include "patchsr/flowmatch.hpp"
#include "patchsr/image.hpp"
#include "patchsr/rng.hpp"

namespace patchsr {

class Codec {
 public:
  explicit Codec(int factor = 4) : f_(factor) {
    if (factor < 1) throw DomainError("Codec: factor must be >= 1");
  }

  int factor() const { return f_; }
  int latent_channels() const { return 3 * f_ * f_; }

  LatentGrid encode(const ImageBuffer& img) const {
    check_image(img.height(), img.width());
    const auto idx = encode_index(img.height(), img.width());
    Tensor out({latent_channels(), img.height() / f_, img.width() / f_});
    for (std::size_t i = 0; i < idx->size(); ++i) out[i] = img[(*idx)[i]];
    return LatentGrid(std::move(out));
  }

  ImageBuffer decode(const LatentGrid& z) const {
    check_latent(z.channels());
    const auto idx = decode_index(z.height(), z.width());
    Tensor out({3, z.height() * f_, z.width() * f_});
    for (std::size_t i = 0; i < idx->size(); ++i) out[i] = z[(*idx)[i]];
    return ImageBuffer(std::move(out));
  }

  /// Differentiable decode of a C x h x w latent Var into a 3 x H x W image Var.
  ag::Var decode(ag::Var z) const {
    const Shape& s = z.shape();
    if (s.size() != 3) throw DimensionError("Codec::decode: expected CxHxW latent");
    check_latent(s[0]);
    return ag::gather(z, decode_index(s[1], s[2]), {3, s[1] * f_, s[2] * f_});
  }

  /// For each latent element (c*f*f + di*f + dj, i, j), the flat image index it copies.
  std::shared_ptr<const std::vector<std::size_t>> encode_index(int H, int W) const {
    const int h = H / f_, w = W / f_;
    auto idx = std::make_shared<std::vector<std::size_t>>(static_cast<std::size_t>(3) * H * W);
    std::size_t k = 0;
    for (int c = 0; c < 3; ++c)
      for (int di = 0; di < f_; ++di)
        for (int dj = 0; dj < f_; ++dj)
          for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j)
              (*idx)[k++] = (static_cast<std::size_t>(c) * H + i * f_ + di) * W + j * f_ + dj;
    return idx;
  }

  /// Inverse permutation of encode_index for a latent of spatial size h x w.
  std::shared_ptr<const std::vector<std::size_t>> decode_index(int h, int w) const {
    const int H = h * f_, W = w * f_;
    const auto enc = encode_index(H, W);
    auto idx = std::make_shared<std::vector<std::size_t>>(enc->size());
    for (std::size_t k = 0; k < enc->size(); ++k) (*idx)[(*enc)[k]] = k;
    return idx;
  }

 private:
  void check_image(int H, int W) const {
    if (H % f_ || W % f_)
      throw DimensionError("Codec::encode: image " + std::to_string(H) + "x" + std::to_string(W) +
                           " not divisible by factor " + std::to_string(f_));
  }
  void check_latent(int channels) const {
    if (channels != latent_channels())
      throw DimensionError("Codec::decode: expected " + std::to_string(latent_channels()) + " channels, got " +
                           std::to_string(channels));
  }
  int f_;
};

/// Fixed-length text conditioning sequence (n_tokens x dim).
struct PromptEmbedding {
  Tensor tokens;
  std::string source_text;

  int n_tokens() const { return tokens.rows(); }
  int dim() const { return tokens.cols(); }
};

/// Concatenates two embeddings along the token axis (used for prompt + negative prompt).
inline PromptEmbedding concat_prompts(const PromptEmbedding& a, const PromptEmbedding& b) {
  if (a.dim() != b.dim()) throw DimensionError("concat_prompts: width mismatch");
  Tensor t({a.n_tokens() + b.n_tokens(), a.dim()});
  std::copy(a.tokens.data.begin(), a.tokens.data.end(), t.data.begin());
  std::copy(b.tokens.data.begin(), b.tokens.data.end(), t.data.begin() + static_cast<std::ptrdiff_t>(a.tokens.size()));
  return {std::move(t), a.source_text + " | " + b.source_text};
}

inline std::vector<std::string> split_words(const std::string& text) {
  std::istringstream is(text);
  std::vector<std::string> words;
  for (std::string w; is >> w;) words.push_back(w);
  return words;
}

/// Deterministic embedding: word k (k < n_tokens) becomes a vector with
/// N(0, 1/dim) entries drawn from a generator seeded by hash(word, seed).
/// Remaining rows hold the all-zero null token.
inline PromptEmbedding embed_prompt(const std::string& text, std::uint64_t seed, int dim, int n_tokens) {
  if (dim < 1 || n_tokens < 1) throw DomainError("embed_prompt: dim and n_tokens must be >= 1");
  PromptEmbedding e{Tensor({n_tokens, dim}), text};
  const auto words = split_words(text);
  const double sd = 1.0 / std::sqrt(static_cast<double>(dim));
  for (int k = 0; k < n_tokens && k < static_cast<int>(words.size()); ++k) {
    Rng rng(stable_hash(words[static_cast<std::size_t>(k)], seed));
    for (int j = 0; j < dim; ++j) e.tokens.at(k, j) = sd * rng.normal();
  }
  return e;
}

}  // namespace patchsr
