#include <catch2/catch_amalgamated.hpp>

#include <bit>
#include <cmath>
#include <cstdint>
#include <vector>

#include "duet/checkpoint.hpp"
#include "duet/rng.hpp"
#include "duet/sha256.hpp"
#include "duet/tensor.hpp"

using duet::Tensor;

namespace {

std::int64_t ulp_distance(double a, double b) {
  auto bits = [](double x) {
    auto i = std::bit_cast<std::int64_t>(x);
    return i < 0 ? std::numeric_limits<std::int64_t>::min() - i : i;
  };
  return std::abs(bits(a) - bits(b));
}

// Independent rounding oracle: nearest value with an 8-bit explicit
// mantissa, ties to even, computed by scaling the significand into
// [256, 512) and rounding with the default FE_TONEAREST mode.
float bf16_oracle(float x) {
  if (x == 0.0f) return x;
  int e = 0;
  const double m = std::frexp(std::fabs(static_cast<double>(x)), &e);
  const double scaled = m * 512.0;  // in [256, 512)
  const double k = std::nearbyint(scaled);
  const double out = std::ldexp(k / 512.0, e);
  return std::copysign(static_cast<float>(out), x);
}

}  // namespace

TEST_CASE("deterministic_sum basics", "[numerics]") {
  REQUIRE(duet::deterministic_sum(std::vector<float>{}) == 0.0f);
  std::vector<float> tenths(10, 0.1f);
  const float once = duet::deterministic_sum(tenths);
  const float again = duet::deterministic_sum(tenths);
  REQUIRE(std::bit_cast<std::uint32_t>(once) ==
          std::bit_cast<std::uint32_t>(again));
}

TEST_CASE("deterministic_sum order sensitivity across dtypes", "[numerics]") {
  // Sequential f32 accumulation absorbs the 1.0: 1e8f + 1.0f rounds back
  // to 1e8f. f64 has the headroom and keeps it.
  std::vector<float> xs32{1e8f, 1.0f, -1e8f};
  REQUIRE(duet::deterministic_sum(xs32) == 0.0f);
  std::vector<double> xs64{1e8, 1.0, -1e8};
  REQUIRE(duet::deterministic_sum(xs64) == 1.0);
}

TEST_CASE("quantize_bf16 matches the rounding oracle", "[numerics]") {
  REQUIRE(duet::quantize_bf16(1.0f) == 1.0f);
  REQUIRE(duet::quantize_bf16(-0.0f) == -0.0f);
  REQUIRE(std::signbit(duet::quantize_bf16(-0.0f)));
  REQUIRE(duet::quantize_bf16(1.002f) == 1.00390625f);
  REQUIRE(duet::quantize_bf16(1.002) == 1.00390625);

  duet::RngStream s = duet::stream(0, 0, "bf16");
  for (int i = 0; i < 2000; ++i) {
    const float scale = static_cast<float>(std::ldexp(1.0, (i % 41) - 20));
    const float x = static_cast<float>(s.uniform(-1.0, 1.0)) * scale;
    REQUIRE(duet::quantize_bf16(x) == bf16_oracle(x));
  }
}

TEST_CASE("quantize_bf16 is idempotent and monotone", "[numerics]") {
  duet::RngStream s = duet::stream(1, 0, "bf16");
  float prev_x = -10.0f;
  float prev_q = duet::quantize_bf16(prev_x);
  for (int i = 0; i < 1000; ++i) {
    const float x = static_cast<float>(s.uniform(-10.0, 10.0));
    const float q = duet::quantize_bf16(x);
    REQUIRE(duet::quantize_bf16(q) == q);
    if (x >= prev_x) {
      REQUIRE(q >= prev_q);
    } else {
      REQUIRE(q <= prev_q);
    }
    prev_x = x;
    prev_q = q;
  }
}

TEST_CASE("tensor construction validates shape", "[numerics]") {
  REQUIRE_THROWS_AS(Tensor<double>::from({2, 2}, {1.0, 2.0, 3.0}),
                    duet::ShapeMismatch);
  auto t = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
  REQUIRE(t.rows() == 2);
  REQUIRE(t.at(1, 0) == 3.0);
}

TEST_CASE("l2_normalize", "[numerics]") {
  SECTION("3-4-5 triangle") {
    auto v = duet::l2_normalize(Tensor<double>::from({2}, {3.0, 4.0}));
    REQUIRE(v.data()[0] == Catch::Approx(0.6).margin(1e-15));
    REQUIRE(v.data()[1] == Catch::Approx(0.8).margin(1e-15));
  }
  SECTION("already unit") {
    auto v = duet::l2_normalize(Tensor<double>::from({3}, {1.0, 0.0, 0.0}));
    REQUIRE(v.data() == std::vector<double>{1.0, 0.0, 0.0});
  }
  SECTION("zero norm rejected") {
    REQUIRE_THROWS_AS(duet::l2_normalize(Tensor<double>::from({2}, {0.0, 0.0})),
                      duet::ZeroNorm);
    // Tiny but valid rows pass: epsilon distinguishes true zeros.
    REQUIRE_NOTHROW(
        duet::l2_normalize(Tensor<double>::from({2}, {1e-9, 0.0})));
  }
  SECTION("idempotent within 1 ulp in f64") {
    duet::RngStream s = duet::stream(2, 0, "norm");
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<double> row(8);
      for (auto& x : row) x = s.uniform(-2.0, 2.0);
      auto once = duet::l2_normalize(Tensor<double>::from({8}, row));
      auto twice = duet::l2_normalize(once);
      for (std::size_t i = 0; i < 8; ++i) {
        REQUIRE(ulp_distance(once.data()[i], twice.data()[i]) <= 1);
      }
    }
  }
  SECTION("rows normalized independently") {
    auto m = duet::l2_normalize(
        Tensor<double>::from({2, 2}, {3.0, 4.0, 0.0, 2.0}));
    REQUIRE(m.at(0, 0) == Catch::Approx(0.6).margin(1e-15));
    REQUIRE(m.at(1, 1) == 1.0);
  }
}

TEST_CASE("gradient basics", "[numerics]") {
  SECTION("f(x) = x*x at 3 has gradient 6") {
    auto x = Tensor<double>::scalar(3.0, true);
    auto loss = duet::mul(x, x);
    auto grads = duet::grad(loss, {x});
    REQUIRE(grads[0].item() == 6.0);
  }
  SECTION("constant loss gives zero gradient") {
    auto x = Tensor<double>::scalar(3.0, true);
    auto c = Tensor<double>::scalar(7.0);
    auto loss = duet::mul(c, c);
    auto grads = duet::grad(loss, {x});
    REQUIRE(grads[0].item() == 0.0);
  }
  SECTION("non-scalar loss is rejected") {
    auto x = Tensor<double>::from({2}, {1.0, 2.0}, true);
    REQUIRE_THROWS_AS(duet::grad(x, {x}), duet::NotScalar);
  }
  SECTION("disconnected param yields zeros, not an error") {
    auto x = Tensor<double>::scalar(1.0, true);
    auto y = Tensor<double>::from({3}, {1.0, 2.0, 3.0}, true);
    auto loss = duet::mul(x, x);
    auto grads = duet::grad(loss, {x, y});
    REQUIRE(grads[1].data() == std::vector<double>{0.0, 0.0, 0.0});
  }
}

TEST_CASE("gradients match central finite differences", "[numerics]") {
  // Random three-layer network in f64, checked on 100 seeds.
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    duet::RngStream s = duet::stream(seed, 0, "fd");
    auto draw = [&](std::vector<std::size_t> shape) {
      std::vector<double> data;
      std::size_t n = 1;
      for (auto d : shape) n *= d;
      for (std::size_t i = 0; i < n; ++i) data.push_back(s.normal(0.0, 0.5));
      return Tensor<double>::from(shape, std::move(data), true);
    };
    auto x = draw({3, 4});
    auto w0 = draw({4, 5});
    auto b0 = draw({5});
    auto w1 = draw({5, 3});
    auto b1 = draw({3});
    auto w2 = draw({3, 2});

    auto forward = [&](const Tensor<double>& w0_, const Tensor<double>& b0_,
                       const Tensor<double>& w1_, const Tensor<double>& b1_,
                       const Tensor<double>& w2_) {
      auto h0 = duet::tanh_op(duet::add_rows(duet::matmul(x, w0_), b0_));
      auto h1 = duet::tanh_op(duet::add_rows(duet::matmul(h0, w1_), b1_));
      return duet::sum_all(duet::matmul(h1, w2_));
    };

    auto loss = forward(w0, b0, w1, b1, w2);
    std::vector<Tensor<double>> params{w0, b0, w1, b1, w2};
    auto grads = duet::grad(loss, params);

    const double h = 1e-5;
    for (std::size_t p = 0; p < params.size(); ++p) {
      for (std::size_t i = 0; i < params[p].numel(); ++i) {
        auto perturb = [&](double delta) {
          std::vector<double> data = params[p].data();
          data[i] += delta;
          auto t = Tensor<double>::from(params[p].shape(), std::move(data));
          std::vector<Tensor<double>> alt{w0, b0, w1, b1, w2};
          alt[p] = t;
          return forward(alt[0], alt[1], alt[2], alt[3], alt[4]).item();
        };
        const double fd = (perturb(h) - perturb(-h)) / (2 * h);
        const double an = grads[p].data()[i];
        const double denom = std::max({std::fabs(fd), std::fabs(an), 1e-8});
        REQUIRE(std::fabs(an - fd) / denom < 1e-6);
      }
    }
  }
}

TEST_CASE("backward replays in reverse recording order deterministically",
          "[numerics]") {
  auto run = [] {
    auto x = Tensor<double>::from({4}, {0.2, -0.4, 0.6, 0.8}, true);
    auto y = duet::tanh_op(x);
    auto z = duet::mul(y, y);
    auto loss = duet::sum_all(duet::add(z, y));
    return duet::grad(loss, {x})[0].data();
  };
  REQUIRE(run() == run());
}

TEST_CASE("checkpoint container round-trips bit-exactly", "[checkpoint]") {
  duet::RngStream s = duet::stream(4, 0, "ckpt");
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
  tensors.emplace_back("theta.w0", Tensor<float>::from({3, 2}, {1.5f, -2.25f,
                                                               0.1f, 4.0f,
                                                               -0.0f, 3.75f}));
  tensors.emplace_back("log_tau",
                       Tensor<float>::scalar(static_cast<float>(s.normal(0, 1))));
  std::vector<float> big;
  for (int i = 0; i < 64; ++i) big.push_back(static_cast<float>(s.uniform(-9, 9)));
  tensors.emplace_back("phi.embed", Tensor<float>::from({8, 8}, big));

  const std::string bytes = duet::serialize_checkpoint(tensors);
  REQUIRE(bytes.substr(0, 4) == "RPCK");
  REQUIRE(duet::peek_checkpoint_dtype(bytes) == duet::DtypeTag::f32);

  const auto back = duet::deserialize_checkpoint<float>(bytes);
  REQUIRE(back.size() == tensors.size());
  // Entries come back sorted by name.
  REQUIRE(back[0].first == "log_tau");
  REQUIRE(back[1].first == "phi.embed");
  REQUIRE(back[2].first == "theta.w0");
  for (const auto& [name, t] : back) {
    for (const auto& [oname, ot] : tensors) {
      if (oname != name) continue;
      REQUIRE(t.shape() == ot.shape());
      for (std::size_t i = 0; i < t.numel(); ++i) {
        REQUIRE(std::bit_cast<std::uint32_t>(t.data()[i]) ==
                std::bit_cast<std::uint32_t>(ot.data()[i]));
      }
    }
  }
  // Re-serializing the parsed form reproduces the bytes.
  REQUIRE(duet::serialize_checkpoint(back) == bytes);

  REQUIRE_THROWS_AS(duet::deserialize_checkpoint<double>(bytes), duet::IoError);
  REQUIRE_THROWS_AS(duet::deserialize_checkpoint<float>(bytes + "x"),
                    duet::IoError);
  REQUIRE_THROWS_AS(duet::peek_checkpoint_dtype("JUNK"), duet::IoError);
}

TEST_CASE("sha256 standard vectors", "[sha256]") {
  REQUIRE(duet::sha256_hex("") ==
          "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  REQUIRE(duet::sha256_hex("abc") ==
          "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  REQUIRE(duet::sha256_hex(
              "abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq") ==
          "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1");
  // Multi-block input (length > 64 bytes).
  REQUIRE(duet::sha256_hex(std::string(1000, 'a')) ==
          duet::sha256_hex(std::string(1000, 'a')));
  REQUIRE(duet::sha256_hex(std::string(64, 'x')).size() == 64);
}
