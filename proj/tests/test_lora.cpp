#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "gsq/error.hpp"
#include "gsq/lora.hpp"
#include "lora_fixtures.hpp"
#include "oracles.hpp"

using namespace gsq;

namespace {

Matrix qdq(const Matrix& m, GroupAxis axis, const GseSpec& spec) {
  return dequantize_matrix(quantize_matrix(m, axis, spec));
}

Matrix abs_of(const Matrix& m) {
  Matrix r = m;
  for (double& v : r.values()) v = std::fabs(v);
  return r;
}

Matrix random_ints(Rng& rng, std::size_t r, std::size_t c, int lim) {
  Matrix m(r, c);
  for (double& v : m.values()) v = double(int(rng.below(2 * lim + 1)) - lim);
  return m;
}

QuantConfig cfg_for(std::size_t rank, int bits, std::size_t group) {
  QuantConfig cfg;
  cfg.act_bits = cfg.grad_bits = cfg.adapter_bits = bits;
  cfg.group_size = group;
  cfg.rank = rank;
  return cfg;
}

}  // namespace

TEST_CASE("QuantConfig text form") {
  QuantConfig cfg;
  CHECK(cfg.notation() == "4-8-8");
  CHECK(QuantConfig::parse("4-8-8") == cfg);
  auto c = QuantConfig::parse("4-5-6:a7:n16:r4:id");
  CHECK(c.act_bits == 5);
  CHECK(c.grad_bits == 6);
  CHECK(c.adapter_bits == 7);
  CHECK(c.group_size == 16);
  CHECK(c.rank == 4);
  CHECK(c.identity);
  CHECK(QuantConfig::parse("4-6-5").adapter_bits == 6);

  Rng rng(11);
  for (int i = 0; i < 500; ++i) {
    QuantConfig r;
    r.act_bits = 5 + int(rng.below(4));
    r.grad_bits = 5 + int(rng.below(4));
    r.adapter_bits = 5 + int(rng.below(4));
    r.group_size = 1 + rng.below(128);
    r.rank = 1 + rng.below(64);
    r.identity = rng.below(2) == 1;
    CHECK(QuantConfig::parse(r.to_string()) == r);
    CHECK_NOTHROW(r.act_spec().validate());
    CHECK_NOTHROW(r.grad_spec().validate());
    CHECK_NOTHROW(r.adapter_spec().validate());
  }

  CHECK_THROWS_AS(QuantConfig::parse("8-8-8"), ConfigError);
  CHECK_THROWS_AS(QuantConfig::parse("4-9-8"), ConfigError);
  CHECK_THROWS_AS(QuantConfig::parse("4-8-4"), ConfigError);
  CHECK_THROWS_AS(QuantConfig::parse("4-8"), ConfigError);
  CHECK_THROWS_AS(QuantConfig::parse("4-8-8:q3"), ConfigError);
  CHECK_THROWS_AS(QuantConfig::parse("4-8-8:r0"), ConfigError);
  CHECK_THROWS_AS(QuantConfig::parse("4-8-8:nx"), ConfigError);
}

TEST_CASE("identity mode toggles") {
  const auto cfg = QuantConfig::parse("4-6-7:a5:n8:r2");
  CHECK(identity_quantizer_mode(cfg).identity);
  CHECK(quantized_mode(identity_quantizer_mode(cfg)) == cfg);
}

TEST_CASE("qcd_matmul") {
  Rng rng(5);
  const auto s8 = GseSpec::make(8, 8);
  SUBCASE("zero right operand") {
    const Matrix p = rng.normal_matrix(3, 16, 1.0);
    const Matrix r = qcd_matmul(p, Matrix(16, 4), s8, s8);
    for (double v : r.values()) CHECK(v == 0.0);
  }
  SUBCASE("small integers are exact at M=7") {
    for (int t = 0; t < 20; ++t) {
      const Matrix p = random_ints(rng, 4, 20, 127);
      const Matrix q = random_ints(rng, 20, 5, 127);
      CHECK(qcd_matmul(p, q, s8, s8) == oracle::gemm(p, q));
    }
  }
  SUBCASE("random 4x64 by 64x3 vs FP64 over dequantized operands") {
    const auto s6 = GseSpec::make(6, 32);
    const auto s7 = GseSpec::make(7, 32);
    for (int t = 0; t < 20; ++t) {
      const Matrix p = rng.normal_matrix(4, 64, 1.0);
      const Matrix q = rng.normal_matrix(64, 3, 1.0);
      const Matrix ref = oracle::gemm(qdq(p, GroupAxis::kAlongRows, s6),
                                      qdq(q, GroupAxis::kAlongCols, s7));
      CHECK(oracle::max_rel_err(qcd_matmul(p, q, s6, s7), ref, 1e-300) <= 1e-12);
    }
  }
  CHECK_THROWS_AS(qcd_matmul(Matrix(2, 3), Matrix(4, 2), s8, s8), ShapeError);
}

TEST_CASE("forward: vanishing adapter leaves the frozen path") {
  Rng rng(21);
  auto layer = fixtures::random_layer(rng, 12, 16, 3);
  const auto cfg = cfg_for(3, 6, 8);
  const Matrix x = rng.normal_matrix(5, 16, 1.0);
  const Matrix base = qcd_matmul(x, layer.base_weight().transposed(), cfg.act_spec(), cfg.act_spec());

  Matrix saved_a = layer.a();
  layer.a_mut() = Matrix(3, 16);
  CHECK(layer.forward(x, cfg) == base);
  layer.a_mut() = saved_a;
  layer.b_mut() = Matrix(12, 3);
  CHECK(layer.forward(x, cfg) == base);
}

TEST_CASE("forward matches the quantize-dequantize pipeline and its error bound") {
  Rng rng(8);
  for (int t = 0; t < 20; ++t) {
    auto layer = fixtures::random_layer(rng, 8, 8, 4);
    const auto cfg = cfg_for(4, 8, 8);
    const Matrix x = rng.normal_matrix(2, 8, 1.0);
    const Matrix y = layer.forward(x, cfg);

    const auto act = cfg.act_spec(), adp = cfg.adapter_spec();
    const Matrix wt = layer.base_weight().transposed();
    const Matrix at = layer.a().transposed(), bt = layer.b().transposed();
    const Matrix xh = qdq(x, GroupAxis::kAlongRows, act);
    const Matrix wth = qdq(wt, GroupAxis::kAlongCols, act);
    const Matrix ath = qdq(at, GroupAxis::kAlongCols, adp);
    const Matrix bth = qdq(bt, GroupAxis::kAlongCols, adp);
    const Matrix h_raw = oracle::gemm(xh, ath);
    const Matrix hq = qdq(h_raw, GroupAxis::kAlongRows, adp);
    const Matrix pipeline = oracle::gemm(xh, wth) + oracle::gemm(hq, bth);
    CHECK(oracle::max_rel_err(y, pipeline, 1e-12) <= 1e-12);

    // Elementwise triangle bound against the unquantized output.
    const Matrix h = oracle::gemm(x, at);
    const Matrix y_fp = oracle::gemm(x, wt) + oracle::gemm(h, bt);
    const Matrix ex = abs_of(xh - x), ew = abs_of(wth - wt), ea = abs_of(ath - at),
                 eb = abs_of(bth - bt);
    const Matrix ax = abs_of(x);
    const Matrix base_bound =
        oracle::gemm(ex, abs_of(wt)) + oracle::gemm(ax, ew) + oracle::gemm(ex, ew);
    const Matrix e_h = abs_of(hq - h_raw) + oracle::gemm(ex, abs_of(at)) + oracle::gemm(ax, ea) +
                       oracle::gemm(ex, ea);
    const Matrix ad_bound =
        oracle::gemm(e_h, abs_of(bt)) + oracle::gemm(abs_of(h), eb) + oracle::gemm(e_h, eb);
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double bound = base_bound.values()[i] + ad_bound.values()[i];
      CHECK(std::fabs(y.values()[i] - y_fp.values()[i]) <= bound * (1 + 1e-9) + 1e-14);
    }
  }
}

TEST_CASE("forward: row determinism and caching") {
  Rng rng(9);
  auto layer = fixtures::random_layer(rng, 6, 16, 2);
  const auto cfg = cfg_for(2, 5, 8);
  Matrix x = rng.normal_matrix(4, 16, 1.0);
  for (std::size_t c = 0; c < 16; ++c) x(3, c) = x(1, c);
  CHECK_FALSE(layer.has_cache());
  const Matrix y = layer.forward(x, cfg);
  for (std::size_t c = 0; c < 6; ++c) CHECK(y(3, c) == y(1, c));
  REQUIRE(layer.cached_input() != nullptr);
  CHECK(*layer.cached_input() == quantize_matrix(x, GroupAxis::kAlongRows, cfg.act_spec()));
  layer.forward(x, identity_quantizer_mode(cfg));
  CHECK(layer.has_cache());
  CHECK(layer.cached_input() == nullptr);
  layer.clear_cache();
  CHECK_FALSE(layer.has_cache());
}

TEST_CASE("forward errors") {
  Rng rng(10);
  auto layer = fixtures::random_layer(rng, 4, 8, 2);
  const auto cfg = cfg_for(2, 8, 8);
  CHECK_THROWS_AS(layer.forward(Matrix(2, 7), cfg), ShapeError);
  CHECK_THROWS_AS(layer.forward(Matrix(2, 8), cfg_for(3, 8, 8)), ShapeError);
  Matrix bad(2, 8);
  bad(1, 3) = std::nan("");
  try {
    layer.forward(bad, cfg);
    FAIL("expected NonFiniteError");
  } catch (const NonFiniteError& e) {
    CHECK(std::string(e.what()).find("probe") != std::string::npos);
  }
  CHECK_THROWS_AS(LoraLinear("x", 4, 8, nf4_quantize(std::vector<double>(31, 1.0)), Matrix(2, 8),
                             Matrix(4, 2)),
                  ShapeError);
  CHECK_THROWS_AS(LoraLinear("x", 4, 8, nf4_quantize(std::vector<double>(32, 1.0)), Matrix(2, 8),
                             Matrix(4, 3)),
                  ShapeError);
}

TEST_CASE("identity mode reproduces dense LoRA") {
  Rng rng(12);
  for (int t = 0; t < 20; ++t) {
    const double s = t % 2 ? 1.0 : 0.37;
    auto layer = fixtures::random_layer(rng, 7, 13, 3, s);
    const auto cfg = identity_quantizer_mode(cfg_for(3, 8, 8));
    const Matrix x = rng.normal_matrix(4, 13, 1.0);
    const Matrix y = layer.forward(x, cfg);
    const Matrix ref = oracle::gemm(x, layer.base_weight().transposed()) +
                       s * oracle::gemm(oracle::gemm(x, layer.a().transposed()), layer.b().transposed());
    CHECK(oracle::max_rel_err(y, ref, 1e-300) <= 1e-14);
  }
}

TEST_CASE("identity-mode backward vs central differences") {
  Rng rng(13);
  double worst = 0.0;
  for (int t = 0; t < 30; ++t) {
    const std::size_t ic = 2 + rng.below(15), oc = 2 + rng.below(15), r = 1 + rng.below(4);
    const std::size_t batch = 1 + rng.below(6);
    const double s = t % 3 == 0 ? 0.5 : 1.0;
    auto layer = fixtures::random_layer(rng, oc, ic, r, s);
    const auto cfg = identity_quantizer_mode(cfg_for(r, 8, 8));
    Matrix x = rng.normal_matrix(batch, ic, 1.0);
    const Matrix probe = rng.normal_matrix(batch, oc, 1.0);

    layer.forward(x, cfg);
    const GradBundle g = layer.backward(probe, cfg);
    CHECK(g.d_a.rows() == r);
    CHECK(g.d_a.cols() == ic);
    CHECK(g.d_b.rows() == oc);
    CHECK(g.d_b.cols() == r);
    CHECK(g.d_x.rows() == batch);
    CHECK(g.d_x.cols() == ic);

    Matrix a = layer.a(), b = layer.b();
    const Matrix& w = layer.base_weight();
    auto loss = [&] { return fixtures::dense_probe_loss(x, w, a, b, s, probe); };
    const Matrix fa = fixtures::central_diff(a, 1e-4, loss);
    const Matrix fb = fixtures::central_diff(b, 1e-4, loss);
    const Matrix fx = fixtures::central_diff(x, 1e-4, loss);
    worst = std::max({worst, fixtures::max_rel(g.d_a, fa), fixtures::max_rel(g.d_b, fb),
                      fixtures::max_rel(g.d_x, fx)});
  }
  CHECK(worst <= 1e-6);
}

TEST_CASE("zero output gradient gives zero gradients") {
  Rng rng(14);
  auto layer = fixtures::random_layer(rng, 8, 16, 4);
  for (bool id : {false, true}) {
    auto cfg = cfg_for(4, 7, 8);
    cfg.identity = id;
    layer.forward(rng.normal_matrix(3, 16, 1.0), cfg);
    const GradBundle g = layer.backward(Matrix(3, 8), cfg);
    for (const Matrix* m : {&g.d_a, &g.d_b, &g.d_x})
      for (double v : m->values()) CHECK(v == 0.0);
  }
}

TEST_CASE("backward preconditions") {
  Rng rng(15);
  auto layer = fixtures::random_layer(rng, 4, 8, 2);
  const auto cfg = cfg_for(2, 8, 8);
  try {
    (void)layer.backward(Matrix(2, 4), cfg);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("forward not called") != std::string::npos);
  }
  layer.forward(rng.normal_matrix(2, 8, 1.0), cfg);
  CHECK_THROWS_AS((void)layer.backward(Matrix(2, 5), cfg), ShapeError);
  CHECK_THROWS_AS((void)layer.backward(Matrix(3, 4), cfg), ShapeError);
  CHECK_THROWS_AS((void)layer.backward(Matrix(2, 4), identity_quantizer_mode(cfg)), Error);
  Matrix bad(2, 4);
  bad(0, 0) = INFINITY;
  CHECK_THROWS_AS((void)layer.backward(bad, cfg), NonFiniteError);
}

TEST_CASE("quantized backward equals the composition of primitives") {
  Rng rng(16);
  for (int t = 0; t < 10; ++t) {
    auto cfg = cfg_for(3, 8, 8);
    cfg.act_bits = 5 + int(rng.below(4));
    cfg.grad_bits = 5 + int(rng.below(4));
    cfg.adapter_bits = 5 + int(rng.below(4));
    const double s = 0.75;
    auto layer = fixtures::random_layer(rng, 10, 20, 3, s);
    const Matrix x = rng.normal_matrix(6, 20, 1.0);
    const Matrix dy = rng.normal_matrix(6, 10, 1.0);
    layer.forward(x, cfg);
    const GradBundle g = layer.backward(dy, cfg);

    const auto act = cfg.act_spec(), grad = cfg.grad_spec(), adp = cfg.adapter_spec();
    const auto R = GroupAxis::kAlongRows, C = GroupAxis::kAlongCols;
    const GseTensor qx = quantize_matrix(x, R, act);
    const Matrix xh = dequantize_matrix(qx);
    const Matrix bt_dyt =
        gse_gemm(quantize_matrix(layer.b().transposed(), R, adp), quantize_matrix(dy.transposed(), C, grad));
    const Matrix d_a = s * gse_gemm(quantize_matrix(bt_dyt, R, grad), quantize_matrix(xh, C, act));
    const Matrix h = gse_gemm(qx, quantize_matrix(layer.a().transposed(), C, adp));
    const Matrix d_b = s * gse_gemm(quantize_matrix(dy.transposed(), R, grad), quantize_matrix(h, C, adp));
    const Matrix dy_b = gse_gemm(quantize_matrix(dy, R, grad), quantize_matrix(layer.b(), C, adp));
    const Matrix d_x = gse_gemm(quantize_matrix(dy, R, grad), quantize_matrix(layer.base_weight(), C, act)) +
                       s * gse_gemm(quantize_matrix(dy_b, R, grad), quantize_matrix(layer.a(), C, adp));
    CHECK(g.d_a == d_a);
    CHECK(g.d_b == d_b);
    CHECK(g.d_x == d_x);
  }
}

TEST_CASE("power-of-two scaling of d_y") {
  Rng rng(17);
  auto layer = fixtures::random_layer(rng, 8, 16, 2);
  const Matrix x = rng.normal_matrix(4, 16, 1.0);
  const Matrix dy = rng.normal_matrix(4, 8, 1.0);
  for (bool id : {false, true}) {
    auto cfg = cfg_for(2, 6, 8);
    cfg.identity = id;
    layer.forward(x, cfg);
    const GradBundle g = layer.backward(dy, cfg);
    for (double alpha : {0.25, 2.0, 8.0}) {
      const GradBundle ga = layer.backward(alpha * dy, cfg);
      CHECK(ga.d_a == alpha * g.d_a);
      CHECK(ga.d_b == alpha * g.d_b);
      CHECK(ga.d_x == alpha * g.d_x);
    }
  }
  // Identity mode is linear for any alpha up to FP64 rounding.
  const auto cfg = identity_quantizer_mode(cfg_for(2, 6, 8));
  layer.forward(x, cfg);
  const GradBundle g = layer.backward(dy, cfg);
  const GradBundle ga = layer.backward(0.3 * dy, cfg);
  CHECK(fixtures::frob_rel(ga.d_x, 0.3 * g.d_x) <= 1e-14);
}

TEST_CASE("quantized INT8 gradients vs surrogate FP64 gradients") {
  // Surrogate: FP64 backward of the forward with every operand replaced by
  // its quantize-dequantize image (quantizers treated as identity).
  Rng rng(18);
  double worst_a = 0.0, worst_b = 0.0;
  for (int t = 0; t < 20; ++t) {
    auto layer = fixtures::random_layer(rng, 8, 8, 4);
    const auto cfg = cfg_for(4, 8, 8);
    const Matrix x = rng.normal_matrix(2, 8, 1.0);
    const Matrix dy = rng.normal_matrix(2, 8, 1.0);
    layer.forward(x, cfg);
    const GradBundle g = layer.backward(dy, cfg);
    const auto act = cfg.act_spec(), adp = cfg.adapter_spec();
    const Matrix xh = qdq(x, GroupAxis::kAlongRows, act);
    const Matrix ah = qdq(layer.a().transposed(), GroupAxis::kAlongCols, adp).transposed();
    const Matrix bh = qdq(layer.b().transposed(), GroupAxis::kAlongCols, adp).transposed();
    const Matrix sa = oracle::gemm(oracle::gemm(bh.transposed(), dy.transposed()), xh);
    const Matrix sb = oracle::gemm(dy.transposed(), oracle::gemm(xh, ah.transposed()));
    worst_a = std::max(worst_a, fixtures::frob_rel(g.d_a, sa));
    worst_b = std::max(worst_b, fixtures::frob_rel(g.d_b, sb));
  }
  MESSAGE("INT8 surrogate deviation: dA " << worst_a << ", dB " << worst_b);
  CHECK(worst_a <= 0.03);
  CHECK(worst_b <= 0.03);
}

TEST_CASE("gradient error shrinks with grad_bits") {
  Rng rng(19);
  double err[4] = {0, 0, 0, 0};
  const int seeds = 12;
  for (int t = 0; t < seeds; ++t) {
    auto layer = fixtures::random_layer(rng, 16, 16, 4);
    const Matrix x = rng.normal_matrix(8, 16, 1.0);
    const Matrix dy = rng.normal_matrix(8, 16, 1.0);
    auto base = cfg_for(4, 8, 8);
    layer.forward(x, identity_quantizer_mode(base));
    const GradBundle ref = layer.backward(dy, identity_quantizer_mode(base));
    for (int bits = 5; bits <= 8; ++bits) {
      auto cfg = base;
      cfg.grad_bits = bits;
      layer.forward(x, cfg);
      const GradBundle g = layer.backward(dy, cfg);
      err[bits - 5] += (fixtures::frob_rel(g.d_a, ref.d_a) + fixtures::frob_rel(g.d_b, ref.d_b) +
                        fixtures::frob_rel(g.d_x, ref.d_x)) /
                       (3.0 * seeds);
    }
  }
  MESSAGE("mean gradient error by grad bits: " << err[0] << " " << err[1] << " " << err[2] << " "
                                               << err[3]);
  CHECK(err[0] >= err[1]);
  CHECK(err[1] >= err[2]);
  CHECK(err[2] >= err[3]);
}

TEST_CASE("frozen weight is never mutated") {
  Rng rng(20);
  Matrix w = rng.normal_matrix(8, 16, 0.25);
  auto layer = LoraLinear::from_dense("l0", w, 4, rng);
  for (double v : layer.b().values()) CHECK(v == 0.0);
  const Nf4Tensor before = layer.frozen_weight();
  const Matrix dense_before = layer.base_weight();
  const auto cfg = cfg_for(4, 6, 8);
  for (int step = 0; step < 25; ++step) {
    const Matrix x = rng.normal_matrix(4, 16, 1.0);
    const Matrix y = layer.forward(x, step % 2 ? cfg : identity_quantizer_mode(cfg));
    const GradBundle g = layer.backward(y, step % 2 ? cfg : identity_quantizer_mode(cfg));
    layer.a_mut() = layer.a() - 0.01 * g.d_a;
    layer.b_mut() = layer.b() - 0.01 * g.d_b;
  }
  CHECK(layer.frozen_weight() == before);
  CHECK(layer.base_weight() == dense_before);
}

TEST_CASE("checkpoint round trip") {
  Rng rng(22);
  auto layer = fixtures::random_layer(rng, 9, 70, 3, 0.5);
  const auto cfg = QuantConfig::parse("4-6-5:a7:n16:r3");
  const auto bytes = encode_checkpoint(layer, cfg);
  const auto back = decode_checkpoint(bytes);
  CHECK(back.config == cfg);
  CHECK(back.layer.name() == "probe");
  CHECK(back.layer.frozen_weight() == layer.frozen_weight());
  CHECK(back.layer.adapter_scale() == 0.5);
  for (std::size_t i = 0; i < layer.a().size(); ++i)
    CHECK(back.layer.a().values()[i] == double(float(layer.a().values()[i])));
  CHECK(encode_checkpoint(back.layer, back.config) == bytes);

  CHECK_THROWS_AS(decode_checkpoint(std::span(bytes).first(bytes.size() - 1)), ParseError);
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad), ParseError);
  bad = bytes;
  bad.push_back(0);
  CHECK_THROWS_AS(decode_checkpoint(bad), ParseError);
}
