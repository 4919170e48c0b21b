#include "gsq/lora.hpp"

#include <charconv>
#include <cmath>
#include <string>

#include "gsq/error.hpp"
#include "gsq/io.hpp"

namespace gsq {

namespace {

constexpr std::uint8_t kCheckpointVersion = 1;

std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

template <typename T>
T parse_number(std::string_view s, std::string_view field) {
  T value{};
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc{} || ptr != s.data() + s.size())
    throw ConfigError("QuantConfig: bad " + std::string(field) + " '" + std::string(s) + "'");
  return value;
}

void require_finite(const Matrix& m, const std::string& layer, const char* what) {
  if (!all_finite(m.values()))
    throw NonFiniteError("layer '" + layer + "': non-finite " + what);
}

}  // namespace

// ---------------------------------------------------------------------------
// QuantConfig

void QuantConfig::validate() const {
  auto check_bits = [](int bits, const char* what) {
    if (bits < 5 || bits > 8)
      throw ConfigError(std::string("QuantConfig: ") + what + " bits must be in [5, 8], got " +
                        std::to_string(bits));
  };
  check_bits(act_bits, "activation");
  check_bits(grad_bits, "gradient");
  check_bits(adapter_bits, "adapter");
  if (group_size < 1 || group_size > 65536)
    throw ConfigError("QuantConfig: group size must be in [1, 65536]");
  if (rank < 1) throw ConfigError("QuantConfig: rank must be >= 1");
}

std::string QuantConfig::notation() const {
  return std::to_string(kWeightBits) + "-" + std::to_string(act_bits) + "-" +
         std::to_string(grad_bits);
}

std::string QuantConfig::to_string() const {
  std::string s = notation() + ":a" + std::to_string(adapter_bits) + ":n" +
                  std::to_string(group_size) + ":r" + std::to_string(rank);
  if (identity) s += ":id";
  return s;
}

QuantConfig QuantConfig::parse(std::string_view text) {
  QuantConfig cfg;
  const auto colon = text.find(':');
  const std::string_view wag = text.substr(0, colon);
  const auto d1 = wag.find('-');
  const auto d2 = d1 == std::string_view::npos ? d1 : wag.find('-', d1 + 1);
  if (d1 == std::string_view::npos || d2 == std::string_view::npos)
    throw ConfigError("QuantConfig: expected W-A-G notation, got '" + std::string(text) + "'");
  if (parse_number<int>(wag.substr(0, d1), "weight bits") != kWeightBits)
    throw ConfigError("QuantConfig: weight bits are fixed at 4 (NF4)");
  cfg.act_bits = parse_number<int>(wag.substr(d1 + 1, d2 - d1 - 1), "activation bits");
  cfg.grad_bits = parse_number<int>(wag.substr(d2 + 1), "gradient bits");
  cfg.adapter_bits = cfg.act_bits;

  std::string_view rest = colon == std::string_view::npos ? "" : text.substr(colon + 1);
  while (!rest.empty()) {
    const auto next = rest.find(':');
    const std::string_view field = rest.substr(0, next);
    rest = next == std::string_view::npos ? "" : rest.substr(next + 1);
    if (field == "id") {
      cfg.identity = true;
    } else if (field.size() > 1 && field[0] == 'a') {
      cfg.adapter_bits = parse_number<int>(field.substr(1), "adapter bits");
    } else if (field.size() > 1 && field[0] == 'n') {
      cfg.group_size = parse_number<std::size_t>(field.substr(1), "group size");
    } else if (field.size() > 1 && field[0] == 'r') {
      cfg.rank = parse_number<std::size_t>(field.substr(1), "rank");
    } else {
      throw ConfigError("QuantConfig: unknown field '" + std::string(field) + "'");
    }
  }
  cfg.validate();
  return cfg;
}

QuantConfig identity_quantizer_mode(QuantConfig cfg) {
  cfg.identity = true;
  return cfg;
}

QuantConfig quantized_mode(QuantConfig cfg) {
  cfg.identity = false;
  return cfg;
}

Matrix qcd_matmul(const Matrix& p, const Matrix& q, const GseSpec& spec_p, const GseSpec& spec_q) {
  if (p.cols() != q.rows())
    throw ShapeError("qcd_matmul: inner dimensions differ (" + shape_str(p) + " · " + shape_str(q) + ")");
  return gse_gemm(quantize_matrix(p, GroupAxis::kAlongRows, spec_p),
                  quantize_matrix(q, GroupAxis::kAlongCols, spec_q));
}

// ---------------------------------------------------------------------------
// LoraLinear

LoraLinear::LoraLinear(std::string name, std::size_t out_features, std::size_t in_features,
                       Nf4Tensor w_frozen, Matrix a, Matrix b, double adapter_scale)
    : name_(std::move(name)),
      out_(out_features),
      in_(in_features),
      w_frozen_(std::move(w_frozen)),
      a_(std::move(a)),
      b_(std::move(b)),
      adapter_scale_(adapter_scale) {
  if (w_frozen_.length != out_ * in_)
    throw ShapeError("layer '" + name_ + "': frozen weight has " + std::to_string(w_frozen_.length) +
                     " elements, expected " + std::to_string(out_ * in_));
  if (a_.cols() != in_ || b_.rows() != out_ || b_.cols() != a_.rows() || a_.rows() == 0)
    throw ShapeError("layer '" + name_ + "': adapter shapes A " + shape_str(a_) + ", B " +
                     shape_str(b_) + " do not fit " + std::to_string(out_) + "x" +
                     std::to_string(in_));
  if (!std::isfinite(adapter_scale_)) throw NonFiniteError("layer '" + name_ + "': adapter scale");
  w_dense_ = Matrix(out_, in_, nf4_dequantize(w_frozen_));
}

LoraLinear LoraLinear::from_dense(std::string name, const Matrix& w, std::size_t rank, Rng& rng,
                                  double a_std, std::size_t nf4_block) {
  auto a = rng.normal_matrix(rank, w.cols(), a_std);
  Matrix b(w.rows(), rank);
  return LoraLinear(std::move(name), w.rows(), w.cols(), nf4_quantize(w.values(), nf4_block),
                    std::move(a), std::move(b));
}

void LoraLinear::check_config(const QuantConfig& cfg) const {
  cfg.validate();
  if (cfg.rank != rank())
    throw ShapeError("layer '" + name_ + "': config rank " + std::to_string(cfg.rank) +
                     " != adapter rank " + std::to_string(rank()));
}

const GseTensor& LoraLinear::weight_t_cols(const GseSpec& spec) const {
  if (!w_t_q_ || w_t_q_->spec() != spec)
    w_t_q_ = quantize_matrix(w_dense_.transposed(), GroupAxis::kAlongCols, spec);
  return *w_t_q_;
}

const GseTensor& LoraLinear::weight_cols(const GseSpec& spec) const {
  if (!w_q_ || w_q_->spec() != spec) w_q_ = quantize_matrix(w_dense_, GroupAxis::kAlongCols, spec);
  return *w_q_;
}

Matrix LoraLinear::forward(const Matrix& x, const QuantConfig& cfg) {
  check_config(cfg);
  if (x.cols() != in_)
    throw ShapeError("layer '" + name_ + "': input " + shape_str(x) + " does not match " +
                     std::to_string(in_) + " input features");
  require_finite(x, name_, "activations");
  require_finite(a_, name_, "adapter A");
  require_finite(b_, name_, "adapter B");

  if (cfg.identity) {
    cache_ = x;
    const Matrix base = matmul(x, w_dense_.transposed());
    const Matrix adapter = matmul(matmul(x, a_.transposed()), b_.transposed());
    return base + adapter_scale_ * adapter;
  }

  const GseSpec act = cfg.act_spec();
  const GseSpec adp = cfg.adapter_spec();
  GseTensor qx = quantize_matrix(x, GroupAxis::kAlongRows, act);
  const Matrix base = gse_gemm(qx, weight_t_cols(act));
  const Matrix h = gse_gemm(qx, quantize_matrix(a_.transposed(), GroupAxis::kAlongCols, adp));
  const Matrix adapter = gse_gemm(quantize_matrix(h, GroupAxis::kAlongRows, adp),
                                  quantize_matrix(b_.transposed(), GroupAxis::kAlongCols, adp));
  cache_ = std::move(qx);
  return base + adapter_scale_ * adapter;
}

GradBundle LoraLinear::backward(const Matrix& d_y, const QuantConfig& cfg) const {
  check_config(cfg);
  if (!has_cache()) throw Error("layer '" + name_ + "': forward not called");
  if (d_y.cols() != out_)
    throw ShapeError("layer '" + name_ + "': d_y " + shape_str(d_y) + " does not match " +
                     std::to_string(out_) + " output features");
  require_finite(d_y, name_, "output gradient");
  const double s = adapter_scale_;

  if (cfg.identity) {
    const Matrix* x = std::get_if<Matrix>(&cache_);
    if (x == nullptr) throw Error("layer '" + name_ + "': cached forward ran in quantized mode");
    if (x->rows() != d_y.rows()) throw ShapeError("layer '" + name_ + "': batch size changed");
    const Matrix dy_t = d_y.transposed();
    GradBundle g;
    g.d_a = s * matmul(matmul(b_.transposed(), dy_t), *x);
    g.d_b = s * matmul(dy_t, matmul(*x, a_.transposed()));
    g.d_x = matmul(d_y, w_dense_) + s * matmul(matmul(d_y, b_), a_);
    return g;
  }

  const GseTensor* qx = std::get_if<GseTensor>(&cache_);
  if (qx == nullptr) throw Error("layer '" + name_ + "': cached forward ran in identity mode");
  if (qx->rows() != d_y.rows()) throw ShapeError("layer '" + name_ + "': batch size changed");
  const GseSpec act = cfg.act_spec();
  const GseSpec grad = cfg.grad_spec();
  const GseSpec adp = cfg.adapter_spec();
  const Matrix dy_t = d_y.transposed();

  // dA = (Q(B)^T · Q(dY)^T) · Q(X); X is regrouped along the batch axis.
  const Matrix bt_dyt = gse_gemm(quantize_matrix(b_.transposed(), GroupAxis::kAlongRows, adp),
                                 quantize_matrix(dy_t, GroupAxis::kAlongCols, grad));
  const Matrix x_hat = dequantize_matrix(*qx);
  GradBundle g;
  g.d_a = s * gse_gemm(quantize_matrix(bt_dyt, GroupAxis::kAlongRows, grad),
                       quantize_matrix(x_hat, GroupAxis::kAlongCols, act));

  // dB = Q(dY)^T · (Q(X) · Q(A)^T)
  const Matrix h = gse_gemm(*qx, quantize_matrix(a_.transposed(), GroupAxis::kAlongCols, adp));
  g.d_b = s * gse_gemm(quantize_matrix(dy_t, GroupAxis::kAlongRows, grad),
                       quantize_matrix(h, GroupAxis::kAlongCols, adp));

  // dX = Q(dY) · Q(W) + (Q(dY) · Q(B)) · Q(A)
  const GseTensor qdy = quantize_matrix(d_y, GroupAxis::kAlongRows, grad);
  const Matrix base = gse_gemm(qdy, weight_cols(act));
  const Matrix dy_b = gse_gemm(qdy, quantize_matrix(b_, GroupAxis::kAlongCols, adp));
  const Matrix adapter = gse_gemm(quantize_matrix(dy_b, GroupAxis::kAlongRows, grad),
                                  quantize_matrix(a_, GroupAxis::kAlongCols, adp));
  g.d_x = base + s * adapter;
  return g;
}

// ---------------------------------------------------------------------------
// Checkpoints

std::vector<std::uint8_t> encode_checkpoint(const LoraLinear& layer, const QuantConfig& cfg) {
  io::ByteWriter w;
  w.put_magic("GSQL");
  w.put<std::uint8_t>(kCheckpointVersion);
  auto put_string = [&w](const std::string& s) {
    if (s.size() > 0xFFFF) throw ShapeError("checkpoint string too long");
    w.put<std::uint16_t>(static_cast<std::uint16_t>(s.size()));
    w.put_bytes(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
  };
  put_string(layer.name());
  w.put<std::uint64_t>(layer.out_features());
  w.put<std::uint64_t>(layer.in_features());
  w.put<std::uint64_t>(layer.rank());
  w.put<double>(layer.adapter_scale());
  put_string(cfg.to_string());
  const auto& nf4 = layer.frozen_weight();
  w.put<std::uint64_t>(nf4.length);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(nf4.block_size));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(nf4.padding));
  w.put<std::uint64_t>(nf4.blocks.size());
  for (const auto& blk : nf4.blocks) {
    w.put<std::uint8_t>(blk.absmax_code);
    w.put<float>(blk.scale_of_scales);
    for (std::size_t i = 0; i < blk.codes.size(); i += 2) {
      const std::uint8_t lo = blk.codes[i];
      const std::uint8_t hi = i + 1 < blk.codes.size() ? blk.codes[i + 1] : 0;
      w.put<std::uint8_t>(static_cast<std::uint8_t>(lo | (hi << 4)));
    }
  }
  for (double v : layer.a().values()) w.put<float>(static_cast<float>(v));
  for (double v : layer.b().values()) w.put<float>(static_cast<float>(v));
  return w.take();
}

LayerCheckpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic("GSQL");
  const auto version_at = r.offset();
  if (r.get<std::uint8_t>("version") != kCheckpointVersion)
    throw ParseError("unsupported checkpoint version", version_at);
  auto get_string = [&r](const char* what) {
    const auto n = r.get<std::uint16_t>(what);
    auto raw = r.get_bytes(n, what);
    return std::string(raw.begin(), raw.end());
  };
  std::string name = get_string("name");
  const auto dims_at = r.offset();
  const auto oc = r.get<std::uint64_t>("oc");
  const auto ic = r.get<std::uint64_t>("ic");
  const auto rank = r.get<std::uint64_t>("rank");
  if (oc == 0 || ic == 0 || rank == 0 || oc > (1u << 20) || ic > (1u << 20) || rank > (1u << 20))
    throw ParseError("implausible layer dimensions", dims_at);
  const double scale = r.get<double>("adapter_scale");
  const auto cfg_at = r.offset();
  QuantConfig cfg;
  try {
    cfg = QuantConfig::parse(get_string("config"));
  } catch (const ConfigError& e) {
    throw ParseError(std::string("bad config: ") + e.what(), cfg_at);
  }

  Nf4Tensor nf4;
  nf4.length = r.get<std::uint64_t>("nf4 length");
  nf4.block_size = r.get<std::uint32_t>("nf4 block size");
  nf4.padding = r.get<std::uint32_t>("nf4 padding");
  const auto count_at = r.offset();
  const auto n_blocks = r.get<std::uint64_t>("nf4 block count");
  if (nf4.block_size == 0 || n_blocks * nf4.block_size != nf4.length + nf4.padding ||
      nf4.length != oc * ic)
    throw ParseError("NF4 layout inconsistent with layer dimensions", count_at);
  nf4.blocks.resize(n_blocks);
  for (auto& blk : nf4.blocks) {
    blk.absmax_code = r.get<std::uint8_t>("absmax code");
    blk.scale_of_scales = r.get<float>("scale of scales");
    blk.codes.resize(nf4.block_size);
    auto packed = r.get_bytes((nf4.block_size + 1) / 2, "nf4 codes");
    for (std::size_t i = 0; i < nf4.block_size; ++i)
      blk.codes[i] = (packed[i / 2] >> (4 * (i % 2))) & 0x0F;
  }
  Matrix a(rank, ic), b(oc, rank);
  for (double& v : a.values()) v = r.get<float>("A");
  for (double& v : b.values()) v = r.get<float>("B");
  r.expect_end();
  return LayerCheckpoint{cfg, LoraLinear(std::move(name), oc, ic, std::move(nf4), std::move(a),
                                         std::move(b), scale)};
}

}  // namespace gsq
