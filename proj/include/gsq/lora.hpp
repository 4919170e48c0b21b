#pragma once

// Fully quantized LoRA linear layer.
//
// Forward:
//   Y = Q(X)·Q(DQ(W))^T + s · Q(Q(X)·Q(A)^T)·Q(B)^T
// Backward (each product a GSE integer GEMM, intermediates re-quantized):
//   dA = s · Q(Q(B)^T·Q(dY)^T)·Q(X)
//   dB = s · Q(dY)^T·Q(Q(X)·Q(A)^T)
//   dX = Q(dY)·Q(W) + s · Q(Q(dY)·Q(B))·Q(A)
// where s is the optional adapter multiplier (default 1). Every GEMM groups
// its operands along the reduction dimension, so a tensor used in two GEMMs
// with different reduction axes is quantized once per grouping.
//
// Bit widths: X and W use act_bits, A/B and the forward adapter intermediate
// use adapter_bits, dY and backward intermediates use grad_bits.

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "gsq/formats.hpp"
#include "gsq/gse.hpp"
#include "gsq/matrix.hpp"
#include "gsq/nf4.hpp"
#include "gsq/rng.hpp"

namespace gsq {

/// "W-A-G" bit assignment plus group size and LoRA rank.
///
/// Text form: "4-<act>-<grad>[:a<adapter>][:n<group>][:r<rank>][:id]", e.g.
/// "4-8-8:a8:n32:r16". Omitted fields take defaults (adapter = act, n32, r8).
struct QuantConfig {
  static constexpr int kWeightBits = 4;

  int act_bits = 8;
  int grad_bits = 8;
  int adapter_bits = 8;
  std::size_t group_size = 32;
  std::size_t rank = 8;
  bool identity = false;  ///< Q and Q^-1 become exact identities

  void validate() const;

  /// "4-<act>-<grad>"
  std::string notation() const;
  /// Full text form; parse(to_string()) == *this.
  std::string to_string() const;
  static QuantConfig parse(std::string_view text);

  GseSpec act_spec() const { return GseSpec::make(act_bits, group_size); }
  GseSpec grad_spec() const { return GseSpec::make(grad_bits, group_size); }
  GseSpec adapter_spec() const { return GseSpec::make(adapter_bits, group_size); }

  bool operator==(const QuantConfig&) const = default;
};

/// Testing seam: same config with quantizers replaced by identities.
QuantConfig identity_quantizer_mode(QuantConfig cfg);
/// Inverse of identity_quantizer_mode.
QuantConfig quantized_mode(QuantConfig cfg);

/// Q(p)·Q(q) as a GSE integer GEMM: p grouped along rows, q along columns.
Matrix qcd_matmul(const Matrix& p, const Matrix& q, const GseSpec& spec_p, const GseSpec& spec_q);

struct GradBundle {
  Matrix d_a;  ///< r x ic
  Matrix d_b;  ///< oc x r
  Matrix d_x;  ///< batch x ic
};

class LoraLinear {
 public:
  /// w_frozen must hold out_features * in_features elements (row-major W).
  LoraLinear(std::string name, std::size_t out_features, std::size_t in_features,
             Nf4Tensor w_frozen, Matrix a, Matrix b, double adapter_scale = 1.0);

  /// NF4-quantizes `w`, draws A ~ N(0, a_std^2) and sets B = 0.
  static LoraLinear from_dense(std::string name, const Matrix& w, std::size_t rank, Rng& rng,
                               double a_std = 0.02, std::size_t nf4_block = kNf4DefaultBlock);

  const std::string& name() const noexcept { return name_; }
  std::size_t in_features() const noexcept { return in_; }
  std::size_t out_features() const noexcept { return out_; }
  std::size_t rank() const noexcept { return a_.rows(); }
  double adapter_scale() const noexcept { return adapter_scale_; }

  const Nf4Tensor& frozen_weight() const noexcept { return w_frozen_; }
  /// DQ(W^NF4) as an oc x ic matrix.
  const Matrix& base_weight() const noexcept { return w_dense_; }

  const Matrix& a() const noexcept { return a_; }
  const Matrix& b() const noexcept { return b_; }
  /// Trainable parameters. Shapes must not change.
  Matrix& a_mut() noexcept { return a_; }
  Matrix& b_mut() noexcept { return b_; }

  /// Computes Y and caches the (quantized) input for backward.
  Matrix forward(const Matrix& x, const QuantConfig& cfg);
  /// Requires a cached forward with the same quantization mode.
  GradBundle backward(const Matrix& d_y, const QuantConfig& cfg) const;

  bool has_cache() const noexcept { return !std::holds_alternative<std::monostate>(cache_); }
  void clear_cache() noexcept { cache_ = std::monostate{}; }
  /// The cached Q(X), when the last forward ran in quantized mode.
  const GseTensor* cached_input() const noexcept { return std::get_if<GseTensor>(&cache_); }

 private:
  void check_config(const QuantConfig& cfg) const;
  const GseTensor& weight_t_cols(const GseSpec& spec) const;  // Q(W^T), reduction over ic
  const GseTensor& weight_cols(const GseSpec& spec) const;    // Q(W), reduction over oc

  std::string name_;
  std::size_t out_ = 0;
  std::size_t in_ = 0;
  Nf4Tensor w_frozen_;
  Matrix w_dense_;
  Matrix a_;
  Matrix b_;
  double adapter_scale_ = 1.0;
  std::variant<std::monostate, Matrix, GseTensor> cache_;
  // W is frozen, so its GSE copies are memoized per spec.
  mutable std::optional<GseTensor> w_t_q_;
  mutable std::optional<GseTensor> w_q_;
};

// Layer checkpoint: "GSQL" | u8 version | u16 len + name | u64 oc | u64 ic | u64 rank |
// f64 adapter_scale | u16 len + QuantConfig text | u64 nf4 length |
// u32 block size | u32 padding | u64 block count | per block: u8 absmax code,
// f32 scale of scales, codes packed two per byte (low nibble first) |
// A as f32 (r x ic) | B as f32 (oc x r). Little-endian throughout.

struct LayerCheckpoint {
  QuantConfig config;
  LoraLinear layer;
};

std::vector<std::uint8_t> encode_checkpoint(const LoraLinear& layer, const QuantConfig& cfg);
LayerCheckpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

}  // namespace gsq
