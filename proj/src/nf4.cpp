#include "gsq/nf4.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace gsq {

namespace {

constexpr std::array<double, 16> kCodebook = {
    -1.0,
    -0.69619289060372003,
    -0.52507303869522914,
    -0.39491749069930993,
    -0.28444135761810768,
    -0.18477343519288886,
    -0.091049992144279307,
    0.0,
    0.079580329094169372,
    0.16093017270493618,
    0.24611229392993589,
    0.33791519352165506,
    0.44070980241319013,
    0.56261697007523703,
    0.72295672789288212,
    1.0,
};

double scale_for(float scale_of_scales, unsigned code) {
  return double(scale_of_scales) * (code / 255.0);
}

// Smallest code in [1, 255] whose reconstructed scale is >= absmax.
std::uint8_t cover_code(double absmax, float scale_of_scales) {
  int c = static_cast<int>(std::ceil(absmax / double(scale_of_scales) * 255.0));
  c = std::clamp(c, 1, 255);
  while (c > 1 && scale_for(scale_of_scales, c - 1) >= absmax) --c;
  while (c < 255 && scale_for(scale_of_scales, c) < absmax) ++c;
  return static_cast<std::uint8_t>(c);
}

}  // namespace

const std::array<double, 16>& nf4_codebook() noexcept { return kCodebook; }

std::uint8_t nf4_nearest_code(double normalized) noexcept {
  std::uint8_t best = 0;
  double best_dist = std::fabs(normalized - kCodebook[0]);
  for (std::uint8_t i = 1; i < kCodebook.size(); ++i) {
    const double d = std::fabs(normalized - kCodebook[i]);
    if (d < best_dist) {
      best = i;
      best_dist = d;
    }
  }
  return best;
}

Nf4Tensor nf4_quantize(std::span<const double> w, std::size_t block_size) {
  if (block_size == 0) throw ShapeError("nf4_quantize: block size must be positive");
  for (double v : w)
    if (!std::isfinite(v)) throw NonFiniteError("nf4_quantize: non-finite weight");

  Nf4Tensor out;
  out.length = w.size();
  out.block_size = block_size;
  const std::size_t n_blocks = (w.size() + block_size - 1) / block_size;
  out.padding = n_blocks * block_size - w.size();

  std::vector<double> absmax(n_blocks, 0.0);
  for (std::size_t i = 0; i < w.size(); ++i)
    absmax[i / block_size] = std::max(absmax[i / block_size], std::fabs(w[i]));

  out.blocks.resize(n_blocks);
  for (std::size_t chunk = 0; chunk < n_blocks; chunk += kNf4BlocksPerScale) {
    const std::size_t end = std::min(n_blocks, chunk + kNf4BlocksPerScale);
    const double chunk_max =
        *std::max_element(absmax.begin() + static_cast<std::ptrdiff_t>(chunk),
                          absmax.begin() + static_cast<std::ptrdiff_t>(end));
    float sos = 1.0f;  // degenerate scale for an all-zero chunk
    if (chunk_max > 0.0) {
      sos = static_cast<float>(chunk_max);
      if (double(sos) < chunk_max) sos = std::nextafter(sos, INFINITY);
    }
    for (std::size_t b = chunk; b < end; ++b) {
      auto& blk = out.blocks[b];
      blk.scale_of_scales = sos;
      blk.absmax_code = absmax[b] > 0.0 ? cover_code(absmax[b], sos) : 0;
      blk.codes.assign(block_size, kNf4ZeroCode);
      if (blk.absmax_code == 0) continue;
      const double scale = blk.scale();
      for (std::size_t i = 0; i < block_size; ++i) {
        const std::size_t idx = b * block_size + i;
        if (idx < w.size()) blk.codes[i] = nf4_nearest_code(w[idx] / scale);
      }
    }
  }
  return out;
}

std::vector<double> nf4_dequantize(std::span<const Nf4Block> blocks) {
  std::vector<double> out;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const auto& blk = blocks[b];
    const double scale = blk.scale();
    for (std::size_t i = 0; i < blk.codes.size(); ++i) {
      const auto c = blk.codes[i];
      if (c >= kCodebook.size()) {
        throw CorruptDataError("nf4_dequantize: code " + std::to_string(c) + " in block " +
                               std::to_string(b) + " element " + std::to_string(i) +
                               " is out of range");
      }
      out.push_back(kCodebook[c] * scale);
    }
  }
  return out;
}

std::vector<double> nf4_dequantize(const Nf4Tensor& t) {
  auto out = nf4_dequantize(std::span<const Nf4Block>(t.blocks));
  if (out.size() < t.length) throw CorruptDataError("nf4_dequantize: fewer elements than length");
  out.resize(t.length);
  return out;
}

}  // namespace gsq
