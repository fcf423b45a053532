#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "test_util.hpp"
#include "tweo/fp8.hpp"
#include "tweo/ops.hpp"
#include "tweo/rng.hpp"

using namespace tweo;
using namespace tweo::fp8;

TEST_CASE("format specs carry the right constants") {
  const auto& e4 = spec_of(Format::E4M3);
  CHECK(e4.exp_bits == 4);
  CHECK(e4.man_bits == 3);
  CHECK(e4.bias == 7);
  CHECK(e4.max_finite == 448.0);
  CHECK_FALSE(e4.has_inf);

  const auto& e5 = spec_of(Format::E5M2);
  CHECK(e5.exp_bits == 5);
  CHECK(e5.man_bits == 2);
  CHECK(e5.bias == 15);
  CHECK(e5.max_finite == 57344.0);
  CHECK(e5.has_inf);

  CHECK(format_from_name("e4m3") == Format::E4M3);
  CHECK(format_from_name("E5M2") == Format::E5M2);
  CHECK(format_from_name("lossless") == Format::LOSSLESS);
  CHECK_THROWS_AS(format_from_name("fp8"), ContractError);
  CHECK(overflow_from_name("saturate") == Overflow::SATURATE);
  CHECK(overflow_from_name("STRICT") == Overflow::STRICT);
  CHECK_THROWS_AS(overflow_from_name("clip"), ContractError);

  CHECK_THROWS_AS(encode(1.0, Format::LOSSLESS), ContractError);
  CHECK_THROWS_AS(decode(0, Format::LOSSLESS), ContractError);
}

TEST_CASE("decode matches the first-principles table") {
  for (bool e4m3 : {true, false}) {
    const Format f = e4m3 ? Format::E4M3 : Format::E5M2;
    const auto ref = testutil::ref_fp8_table(e4m3);
    CHECK(ref.max_finite == spec_of(f).max_finite);
    for (int c = 0; c < 256; ++c) {
      const double got = decode(uint8_t(c), f);
      const double want = ref.table[c];
      if (std::isnan(want)) {
        CHECK(std::isnan(got));
        CHECK(std::signbit(got) == std::signbit(want));
      } else {
        CHECK(got == want);
        if (want == 0.0) CHECK(std::signbit(got) == ((c & 0x80) != 0));
      }
    }
  }
}

TEST_CASE("every code decode/encode round trips exactly") {
  for (Format f : {Format::E4M3, Format::E5M2}) {
    for (int c = 0; c < 256; ++c) {
      const double v = decode(uint8_t(c), f);
      CHECK(encode(v, f) == uint8_t(c));
    }
  }
}

TEST_CASE("positive codes decode to strictly increasing values") {
  for (bool e4m3 : {true, false}) {
    const Format f = e4m3 ? Format::E4M3 : Format::E5M2;
    const int top = e4m3 ? 0x7E : 0x7B;
    double prev = -1;
    for (int c = 0; c <= top; ++c) {
      const double v = decode(uint8_t(c), f);
      CHECK(v > prev);
      prev = v;
    }
  }
}

TEST_CASE("encode agrees with nearest-even search on the whole grid") {
  for (bool e4m3 : {true, false}) {
    const Format f = e4m3 ? Format::E4M3 : Format::E5M2;
    const auto ref = testutil::ref_fp8_table(e4m3);
    const int top = e4m3 ? 0x7E : 0x7B;
    // exact grid points, midpoints between neighbors (the tie cases), and
    // off-midpoint nudges in both directions
    for (int c = 0; c < top; ++c) {
      const double v1 = ref.table[c];
      const double v2 = ref.table[c + 1];
      const double mid = v1 + (v2 - v1) / 2;
      for (double probe : {v1, v2, mid, std::nextafter(mid, 0.0),
                           std::nextafter(mid, 1e9), v1 * 0.999 + v2 * 0.001}) {
        CHECK(encode(probe, f) == testutil::ref_fp8_encode(probe, ref));
        CHECK(encode(-probe, f) == testutil::ref_fp8_encode(-probe, ref));
      }
    }
    // a dense pseudorandom sweep across the full range
    Rng rng(99);
    for (int i = 0; i < 4000; ++i) {
      const double mag = std::exp(rng.uniform() * std::log(ref.max_finite * 1.5 / 1e-10)) * 1e-10;
      const double v = rng.uniform() < 0.5 ? mag : -mag;
      CHECK(encode(v, f) == testutil::ref_fp8_encode(v, ref));
    }
  }
}

TEST_CASE("e4m3 boundary values") {
  CHECK(decode(encode(448.0, Format::E4M3), Format::E4M3) == 448.0);
  CHECK(encode(448.0, Format::E4M3) == 0x7E);
  // no infinities: everything past the top saturates to max finite
  CHECK(decode(encode(449.0, Format::E4M3), Format::E4M3) == 448.0);
  CHECK(decode(encode(1e30, Format::E4M3), Format::E4M3) == 448.0);
  CHECK(decode(encode(INFINITY, Format::E4M3), Format::E4M3) == 448.0);
  CHECK(decode(encode(-INFINITY, Format::E4M3), Format::E4M3) == -448.0);
  // canonical NaN code S.1111.111
  CHECK(encode(NAN, Format::E4M3) == 0x7F);
  CHECK(std::isnan(decode(0x7F, Format::E4M3)));
  CHECK(std::isnan(decode(0xFF, Format::E4M3)));

  // smallest subnormal is 2^-9; the subnormal grid is exact
  CHECK(decode(0x01, Format::E4M3) == std::ldexp(1.0, -9));
  for (int m = 1; m <= 7; ++m) {
    const double v = m * std::ldexp(1.0, -9);
    CHECK(decode(encode(v, Format::E4M3), Format::E4M3) == v);
  }
}

TEST_CASE("e5m2 boundary values") {
  CHECK(encode(57344.0, Format::E5M2) == 0x7B);
  CHECK(decode(0x7B, Format::E5M2) == 57344.0);
  // finite overflow saturates, real infinities use the inf codes
  CHECK(decode(encode(60000.0, Format::E5M2), Format::E5M2) == 57344.0);
  CHECK(encode(INFINITY, Format::E5M2) == 0x7C);
  CHECK(encode(-INFINITY, Format::E5M2) == 0xFC);
  CHECK(std::isinf(decode(0x7C, Format::E5M2)));
  CHECK(decode(0xFC, Format::E5M2) == -INFINITY);
  CHECK(std::isnan(decode(0x7D, Format::E5M2)));

  CHECK(decode(0x01, Format::E5M2) == std::ldexp(1.0, -16));
  for (int m = 1; m <= 3; ++m) {
    const double v = m * std::ldexp(1.0, -16);
    CHECK(decode(encode(v, Format::E5M2), Format::E5M2) == v);
  }
}

TEST_CASE("amax history ring") {
  AmaxHistory h(3);
  CHECK(h.empty());
  CHECK(h.max() == 0.0);
  CHECK(h.capacity() == 3);

  h.push(1);
  h.push(2);
  CHECK(h.size() == 2);
  CHECK(h.snapshot() == std::vector<double>{1, 2});
  h.push(3);
  h.push(4);  // evicts 1
  h.push(5);  // evicts 2
  CHECK(h.size() == 3);
  CHECK(h.snapshot() == std::vector<double>{3, 4, 5});
  CHECK(h.max() == 5.0);
  h.push(0);
  h.push(0);
  h.push(0);
  CHECK(h.max() == 0.0);

  AmaxHistory tiny(0);  // degenerate capacity is bumped to 1
  tiny.push(7);
  tiny.push(9);
  CHECK(tiny.capacity() == 1);
  CHECK(tiny.max() == 9.0);
}

TEST_CASE("delayed scale formula and clamps") {
  ScalingState st(16, 0);
  CHECK(compute_delayed_scale(st, Format::E4M3) == 1.0);  // empty history

  st.hist.push(100);
  st.hist.push(200);
  st.hist.push(50);
  CHECK(compute_delayed_scale(st, Format::E4M3) == doctest::Approx(2.24).epsilon(1e-12));
  CHECK(compute_delayed_scale(st, Format::E5M2) == doctest::Approx(286.72).epsilon(1e-12));

  ScalingState margined(16, 1);
  margined.hist.push(100);
  margined.hist.push(200);
  CHECK(compute_delayed_scale(margined, Format::E4M3) == doctest::Approx(1.12).epsilon(1e-12));

  ScalingState tiny(16, 0);
  tiny.hist.push(1e-30);
  CHECK(compute_delayed_scale(tiny, Format::E4M3) == std::ldexp(1.0, 40));
  ScalingState zero(16, 0);
  zero.hist.push(0.0);
  CHECK(compute_delayed_scale(zero, Format::E4M3) == std::ldexp(1.0, 40));
  ScalingState huge(16, 0);
  huge.hist.push(1e30);
  CHECK(compute_delayed_scale(huge, Format::E4M3) == std::ldexp(1.0, -40));

  CHECK(compute_delayed_scale(st, Format::LOSSLESS) == 1.0);
}

TEST_CASE("tensor quantization uses the pre-update history") {
  ScalingState st(16, 0);
  std::vector<float> a = {100.0f, -25.0f, 3.0f};
  double amax = 0;
  auto qa = fp8_quantize_tensor(a.data(), {3}, st, Format::E4M3, Overflow::SATURATE, &amax);
  CHECK(amax == 100.0);
  CHECK(qa.scale == 1.0);  // fresh history: this tensor cannot see itself
  CHECK(st.hist.snapshot() == std::vector<double>{100.0});

  std::vector<float> b = {1.0f, 0.5f};
  auto qb = fp8_quantize_tensor(b.data(), {2}, st, Format::E4M3, Overflow::SATURATE, &amax);
  CHECK(qb.scale == doctest::Approx(4.48).epsilon(1e-12));  // 448 / 100

  SUBCASE("dequant divides the scale back out") {
    auto back = qb.dequant();
    for (size_t i = 0; i < b.size(); ++i) {
      const double scaled = double(b[i]) * qb.scale;
      const double want = decode(encode(scaled, Format::E4M3), Format::E4M3) / qb.scale;
      CHECK(back[i] == float(want));
    }
  }
  SUBCASE("non-finite input is rejected") {
    std::vector<float> bad = {1.0f, NAN};
    ScalingState s2;
    CHECK_THROWS_AS(fp8_quantize_tensor(bad.data(), {2}, s2, Format::E4M3, Overflow::SATURATE),
                    NumericError);
  }
}

TEST_CASE("saturate vs strict overflow semantics") {
  std::vector<float> x = {500.0f, -1000.0f, 10.0f};
  SUBCASE("saturate clips") {
    ScalingState st;
    auto q = fp8_quantize_tensor(x.data(), {3}, st, Format::E4M3, Overflow::SATURATE);
    CHECK(q.saturated == 2);
    auto d = q.dequant();
    CHECK(d[0] == 448.0f);
    CHECK(d[1] == -448.0f);
    CHECK(d[2] == 10.0f);
  }
  SUBCASE("strict marks NaN codes") {
    ScalingState st;
    auto q = fp8_quantize_tensor(x.data(), {3}, st, Format::E4M3, Overflow::STRICT);
    CHECK(q.saturated == 2);
    auto d = q.dequant();
    CHECK(std::isnan(d[0]));
    CHECK(std::isnan(d[1]));
    CHECK(d[2] == 10.0f);
  }
}

TEST_CASE("lossless bypass keeps exact bits") {
  ScalingState st;
  Rng rng(7);
  auto t = Tensor<float>::randn({4, 5}, rng, 0, 100.0);
  auto q = fp8_quantize_tensor(t.data().data(), t.shape(), st, Format::LOSSLESS,
                               Overflow::SATURATE);
  CHECK(q.numel() == 20);
  CHECK(q.saturated == 0);
  CHECK(q.dequant() == t.data());
  CHECK_FALSE(st.hist.empty());  // amax is still recorded
}

namespace {

// replays fp8_linear's exact arithmetic with independent scaling states
struct ManualLinear {
  std::vector<float> xdq, wdq, y;
  fp8::Fp8Tensor qx, qw;
};

ManualLinear manual_forward(const Tensor<float>& x, const Tensor<float>& W,
                            const Tensor<float>& bias, Format f, Overflow mode) {
  ManualLinear m;
  ScalingState sx, sw;
  m.qx = fp8_quantize_tensor(x.data().data(), x.shape(), sx, f, mode);
  m.qw = fp8_quantize_tensor(W.data().data(), W.shape(), sw, f, mode);
  m.xdq = m.qx.dequant();
  m.wdq = m.qw.dequant();
  const size_t rows = x.dim(0), din = x.dim(1), dout = W.dim(0);
  m.y.assign(rows * dout, 0.0f);
  kern_nt(m.xdq.data(), m.wdq.data(), m.y.data(), rows, din, dout, false);
  for (size_t i = 0; i < rows; ++i)
    for (size_t j = 0; j < dout; ++j) m.y[i * dout + j] += bias.data()[j];
  return m;
}

}  // namespace

TEST_CASE("fp8_linear forward equals a hand-run quantized matmul") {
  Rng rng(11);
  auto x = Tensor<float>::randn({6, 8}, rng, 0, 2.0);
  auto W = Tensor<float>::randn({5, 8}, rng, 0, 0.5);
  auto b = Tensor<float>::randn({5}, rng, 0, 0.1);

  LinearFp8States st(16, 0, 0);
  Fp8RunCtx ctx;
  std::vector<QuantEvent> events;
  ctx.on_event = [&](const QuantEvent& e) { events.push_back(e); };

  auto y = fp8_linear(x, W, b, st, ctx, "probe");
  auto m = manual_forward(x, W, b, Format::E4M3, Overflow::SATURATE);
  CHECK(y.shape() == Shape{6, 5});
  CHECK(y.data() == m.y);

  REQUIRE(events.size() == 2);
  CHECK(events[0].role == std::string("x"));
  CHECK(events[0].site == "probe");
  CHECK(events[0].scale == 1.0);
  CHECK(events[1].role == std::string("w"));

  SUBCASE("shape mismatches are rejected") {
    auto bad = Tensor<float>::zeros({5, 9});
    CHECK_THROWS_AS(fp8_linear(x, bad, b, st, ctx, "probe"), DimError);
    auto badb = Tensor<float>::zeros({4});
    CHECK_THROWS_AS(fp8_linear(x, W, badb, st, ctx, "probe"), DimError);
  }
}

TEST_CASE("fp8_linear backward quantizes the gradient and uses dequantized operands") {
  Rng rng(12);
  auto x = Tensor<float>::randn({4, 6}, rng, 0, 2.0);
  auto W = Tensor<float>::randn({3, 6}, rng, 0, 0.5);
  auto b = Tensor<float>::randn({3}, rng, 0, 0.1);
  auto R = Tensor<float>::randn({4, 3}, rng, 0, 1.0);
  x.set_requires_grad(true);
  W.set_requires_grad(true);
  b.set_requires_grad(true);

  LinearFp8States st(16, 0, 0);
  Fp8RunCtx ctx;
  auto y = fp8_linear(x, W, b, st, ctx, "probe");
  backward(sum_all(mul(y, R)));

  // replay: upstream gradient is exactly R, quantized to E5M2 at scale 1
  auto m = manual_forward(x, W, b, Format::E4M3, Overflow::SATURATE);
  ScalingState sg;
  auto qg = fp8_quantize_tensor(R.data().data(), R.shape(), sg, Format::E5M2,
                                Overflow::SATURATE);
  auto gdq = qg.dequant();
  std::vector<float> dx(4 * 6, 0.0f), dw(3 * 6, 0.0f), db(3, 0.0f);
  kern_nn(gdq.data(), m.wdq.data(), dx.data(), 4, 3, 6, true);
  kern_tn(gdq.data(), m.xdq.data(), dw.data(), 4, 3, 6, true);
  for (size_t i = 0; i < 4; ++i)
    for (size_t j = 0; j < 3; ++j) db[j] += gdq[i * 3 + j];

  CHECK(x.grad() == dx);
  CHECK(W.grad() == dw);
  CHECK(b.grad() == db);
  CHECK(st.g.hist.size() == 1);  // gradient state saw exactly one tensor
}

TEST_CASE("lossless fp8_linear is bit-identical to the plain ops") {
  Rng rng(13);
  auto x1 = Tensor<float>::randn({5, 7}, rng, 0, 3.0);
  auto W1 = Tensor<float>::randn({4, 7}, rng, 0, 0.7);
  auto b1 = Tensor<float>::randn({4}, rng, 0, 0.2);
  auto R = Tensor<float>::randn({5, 4}, rng, 0, 1.0);

  // identical leaf copies for the reference route
  auto x2 = Tensor<float>::from(x1.shape(), x1.data());
  auto W2 = Tensor<float>::from(W1.shape(), W1.data());
  auto b2 = Tensor<float>::from(b1.shape(), b1.data());
  for (auto* t : {&x1, &W1, &b1, &x2, &W2, &b2}) t->set_requires_grad(true);

  LinearFp8States st(16, 0, 0);
  Fp8RunCtx ctx;
  ctx.lossless = true;
  auto y1 = fp8_linear(x1, W1, b1, st, ctx, "probe");
  auto y2 = add_bias(matmul_nt(x2, W2), b2);
  CHECK(y1.data() == y2.data());

  backward(sum_all(mul(y1, R)));
  backward(sum_all(mul(y2, R)));
  CHECK(x1.grad() == x2.grad());
  CHECK(W1.grad() == W2.grad());
  CHECK(b1.grad() == b2.grad());
  CHECK(ctx.sat_total == 0);
}

TEST_CASE("strict overflow in fp8_linear raises a collapse signal") {
  auto x = Tensor<float>::from({1, 2}, {500.0f, 1.0f});
  auto W = Tensor<float>::from({1, 2}, {1.0f, 1.0f});
  LinearFp8States st(16, 0, 0);
  Fp8RunCtx ctx;
  ctx.overflow = Overflow::STRICT;
  ctx.step = 42;

  bool caught = false;
  try {
    fp8_linear(x, W, Tensor<float>(), st, ctx, "layer0.attn_in");
  } catch (const CollapseSignal& c) {
    caught = true;
    CHECK(c.step == 42);
    CHECK(c.site == "layer0.attn_in.x");
    CHECK(c.amax == 500.0);
  }
  CHECK(caught);

  SUBCASE("saturate mode sails through and counts") {
    Fp8RunCtx sat;
    LinearFp8States st2(16, 0, 0);
    auto y = fp8_linear(x, W, Tensor<float>(), st2, sat, "layer0.attn_in");
    CHECK(sat.sat_total == 1);
    CHECK(y.data()[0] == 449.0f);  // 448 clip + the in-range second lane
  }
}

TEST_CASE("qdq straight-through estimator") {
  Rng rng(14);
  auto t = Tensor<float>::randn({3, 4}, rng, 0, 5.0);
  t.set_requires_grad(true);
  ScalingState st;
  Fp8RunCtx ctx;
  auto y = fp8_qdq_ste(t, st, Format::E4M3, ctx, "ln0", "ln_in");

  // values pass through the codec
  for (size_t i = 0; i < t.numel(); ++i) {
    const double want = decode(encode(double(t.data()[i]), Format::E4M3), Format::E4M3);
    CHECK(y.data()[i] == float(want));
  }

  auto R = Tensor<float>::randn({3, 4}, rng);
  backward(sum_all(mul(y, R)));
  CHECK(t.grad() == R.data());  // identity gradient, codec invisible

  SUBCASE("strict qdq also collapses") {
    auto big = Tensor<float>::from({2}, {1e4f, 0.0f});
    ScalingState st2;
    Fp8RunCtx strict;
    strict.overflow = Overflow::STRICT;
    CHECK_THROWS_AS(fp8_qdq_ste(big, st2, Format::E4M3, strict, "lnf", "ln_in"),
                    CollapseSignal);
  }
}
