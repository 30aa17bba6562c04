#include <catch2/catch_amalgamated.hpp>

#include "test_support.hpp"

using namespace lowbit;
using namespace testsupport;

namespace {

Dense make_dense(std::vector<float> w, Shape wshape, std::vector<float> b,
                 Activation act, int n_values) {
  Dense d;
  d.name = "test";
  d.w = Tensor(std::move(wshape), std::move(w), true);
  if (!b.empty()) {
    const int64_t bn = static_cast<int64_t>(b.size());
    d.b = Tensor({bn}, std::move(b), true);
  }
  d.act = act;
  d.quant = QuantSpec{n_values, 1.4f, MeanMode::Abs};
  return d;
}

}  // namespace

TEST_CASE("fully connected forward, worked ternary example") {
  Dense d = make_dense({0.5f, -0.5f, 0.5f, 0.5f}, {2, 2}, {0.0f, 0.0f},
                       Activation::Relu, 3);
  Tensor x({1, 2}, {1.0f, 1.0f});
  Tensor a = d.forward(x, false);
  CHECK(a.data()[0] == 0.0f);
  CHECK(a.data()[1] == Catch::Approx(1.4).epsilon(1e-6));
  // scale recovered from the masters: 1.4 * 0.5
  auto q = quantize(d.w, 3);
  CHECK(q.gamma == Catch::Approx(0.7).epsilon(1e-6));
  CHECK(q.w_q.data()[0] == 1.0f);
  CHECK(q.w_q.data()[1] == -1.0f);
  CHECK(q.w_q.data()[2] == 1.0f);
  CHECK(q.w_q.data()[3] == 1.0f);
}

TEST_CASE("zero input yields activation of the bias") {
  Dense d = make_dense({0.3f, -0.8f, 0.4f, 0.9f}, {2, 2}, {0.25f, -0.5f},
                       Activation::Relu, 5);
  Tensor x = Tensor::zeros({3, 2});
  Tensor a = d.forward(x, false);
  for (int64_t r = 0; r < 3; ++r) {
    CHECK(a.data()[r * 2 + 0] == 0.25f);
    CHECK(a.data()[r * 2 + 1] == 0.0f);
  }
}

TEST_CASE("training and inference forwards are elementwise identical") {
  Prng rng(61);
  for (int n : {2, 3, 5, 17}) {
    Dense d = Dense::create("d", 6, 4, Activation::Relu, QuantSpec{n}, true,
                            rng.split(0, n));
    Tensor x = random_tensor({5, 6}, rng);
    Tensor inf = d.forward(x, false);
    Tape tape;
    Tensor tr = d.forward(x, true);
    for (int64_t i = 0; i < inf.numel(); ++i)
      CHECK(tr.data()[i] == inf.data()[i]);
  }
}

TEST_CASE("degenerate layer scale propagates") {
  Dense d = make_dense({0.0f, 0.0f, 0.0f, 0.0f}, {2, 2}, {}, Activation::Linear, 3);
  Tensor x({1, 2}, {1.0f, 2.0f});
  CHECK_THROWS_AS(d.forward(x, false), DegenerateScale);
}

TEST_CASE("full-precision layers skip quantization") {
  Dense d = make_dense({0.5f, -0.5f, 0.5f, 0.5f}, {2, 2}, {}, Activation::Linear, 0);
  Tensor x({1, 2}, {1.0f, 1.0f});
  Tensor a = d.forward(x, false);
  CHECK(a.data()[0] == 0.0f);
  CHECK(a.data()[1] == 1.0f);
}

TEST_CASE("conv impulse response is the flipped effective kernel") {
  Prng rng(62);
  Conv2dLayer c = Conv2dLayer::create("c", 1, 1, 3, Activation::Linear,
                                      QuantSpec{5}, rng.split(1));
  Tensor x = Tensor::zeros({1, 7, 7, 1});
  x.data_mut()[3 * 7 + 3] = 1.0f;  // unit impulse at (3, 3)
  Tensor y = c.forward(x, false);
  auto q = quantize(c.w, 5);
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx) {
      const float got = y.data()[(3 + dy) * 7 + (3 + dx)];
      const float expect = q.gamma * q.w_q.data()[(1 - dy) * 3 + (1 - dx)];
      CHECK(got == Catch::Approx(double(expect)).margin(1e-7));
    }
}

TEST_CASE("conv output shape preserves spatial extents") {
  Prng rng(63);
  Conv2dLayer c = Conv2dLayer::create("c", 3, 64, 3, Activation::Relu,
                                      QuantSpec{3}, rng.split(2));
  Tensor x = random_tensor({2, 32, 32, 3}, rng, 0.0f, 1.0f);
  Tensor y = c.forward(x, false);
  CHECK(y.shape() == Shape{2, 32, 32, 64});

  Conv2dLayer c5 = Conv2dLayer::create("c5", 3, 8, 5, Activation::Relu,
                                       QuantSpec{3}, rng.split(3));
  CHECK(c5.forward(x, false).shape() == Shape{2, 32, 32, 8});
}

TEST_CASE("conv on a 1x1 image reduces to the center tap") {
  // with same padding every neighbor tap is zero fill, so the output is the
  // dense formula through the filter centers
  Prng rng(80);
  Conv2dLayer c = Conv2dLayer::create("c", 2, 3, 3, Activation::Linear,
                                      QuantSpec{5}, rng.split(5));
  Tensor x({1, 1, 1, 2}, {0.7f, -0.4f});
  Tensor y = c.forward(x, false);
  REQUIRE(y.shape() == Shape{1, 1, 1, 3});
  auto q = quantize(c.w, 5);
  for (int64_t o = 0; o < 3; ++o) {
    const float center0 = q.gamma * q.w_q.data()[((o * 2 + 0) * 3 + 1) * 3 + 1];
    const float center1 = q.gamma * q.w_q.data()[((o * 2 + 1) * 3 + 1) * 3 + 1];
    const float expect = 0.7f * center0 - 0.4f * center1 + c.b.data()[o];
    CHECK(y.data()[o] == Catch::Approx(double(expect)).margin(1e-6));
  }
}

TEST_CASE("conv rejects channel mismatch") {
  Prng rng(64);
  Conv2dLayer c = Conv2dLayer::create("c", 4, 8, 3, Activation::Relu,
                                      QuantSpec{3}, rng.split(4));
  Tensor x = random_tensor({1, 8, 8, 3}, rng);
  CHECK_THROWS_AS(c.forward(x, false), ShapeError);
}

TEST_CASE("conv against the direct reference") {
  Prng rng(65);
  Tensor x = random_tensor({2, 6, 5, 3}, rng, -1.0f, 1.0f);
  Tensor w = random_tensor({4, 3, 3, 3}, rng, -0.5f, 0.5f);
  Tensor y = conv2d(x, w);
  auto ref = ref_conv2d(to_double(x.data()), to_double(w.data()), 2, 6, 5, 3, 4, 3);
  for (int64_t i = 0; i < y.numel(); ++i)
    CHECK(y.data()[i] == Catch::Approx(ref[size_t(i)]).margin(1e-5));
}

TEST_CASE("maxpool forward, tie rule, and shape chain") {
  Tensor x({1, 2, 2, 1}, {1, 2, 3, 4});
  Tensor y = maxpool2x2(x);
  CHECK(y.numel() == 1);
  CHECK(y.item() == 4.0f);

  // constant window: gradient concentrates on the first element
  Tensor c = Tensor::full({1, 2, 2, 1}, 5.0f, true);
  Tape tape;
  Tensor loss = sum(maxpool2x2(c));
  tape.backward(loss);
  CHECK(c.grad()[0] == 1.0f);
  CHECK(c.grad()[1] == 0.0f);
  CHECK(c.grad()[2] == 0.0f);
  CHECK(c.grad()[3] == 0.0f);

  Prng rng(66);
  Tensor img = random_tensor({1, 32, 32, 2}, rng);
  Tensor p1 = maxpool2x2(img);
  Tensor p2 = maxpool2x2(p1);
  Tensor p3 = maxpool2x2(p2);
  CHECK(p3.shape() == Shape{1, 4, 4, 2});

  Tensor odd = random_tensor({1, 5, 4, 1}, rng);
  CHECK_THROWS_AS(maxpool2x2(odd), ShapeError);
}

TEST_CASE("maxpool matches reference on random input") {
  Prng rng(67);
  Tensor x = random_tensor({3, 8, 6, 4}, rng);
  Tensor y = maxpool2x2(x);
  auto ref = ref_maxpool2x2(to_double(x.data()), 3, 8, 6, 4);
  for (int64_t i = 0; i < y.numel(); ++i)
    CHECK(y.data()[i] == Catch::Approx(ref[size_t(i)]).margin(1e-7));
}

TEST_CASE("layer norm basics") {
  LayerNormLayer ln = LayerNormLayer::create("ln", 4);
  Tensor c = Tensor::full({2, 4}, 3.25f);
  Tensor y = ln.forward(c);
  for (int64_t i = 0; i < y.numel(); ++i)
    CHECK(std::fabs(y.data()[i]) < 1e-3f);

  LayerNormLayer ln2 = LayerNormLayer::create("ln2", 2);
  Tensor pm({1, 2}, {1.0f, -1.0f});
  Tensor y2 = ln2.forward(pm);
  CHECK(y2.data()[0] == Catch::Approx(1.0).margin(1e-4));
  CHECK(y2.data()[1] == Catch::Approx(-1.0).margin(1e-4));

  Prng rng(68);
  Tensor x = random_tensor({16, 64}, rng, -3.0f, 3.0f);
  Tensor yn = LayerNormLayer::create("ln3", 64).forward(x);
  for (int64_t r = 0; r < 16; ++r) {
    double m = 0.0, v = 0.0;
    for (int64_t j = 0; j < 64; ++j) m += yn.data()[r * 64 + j];
    m /= 64;
    for (int64_t j = 0; j < 64; ++j) {
      const double d = yn.data()[r * 64 + j] - m;
      v += d * d;
    }
    v /= 64;
    CHECK(std::fabs(m) < 1e-4);
    CHECK(std::fabs(v - 1.0) < 1e-3);
  }
}

TEST_CASE("layer norm gradients match finite differences") {
  Prng rng(69);
  Tensor x = random_tensor({3, 6}, rng, -2.0f, 2.0f, true);
  Tensor gain = random_tensor({6}, rng, 0.5f, 1.5f, true);
  Tensor shift = random_tensor({6}, rng, -0.5f, 0.5f, true);
  Tensor mixw = random_tensor({18}, rng);
  auto engine = [&] {
    Tensor y = layer_norm(x, gain, shift);
    return sum(mul(reshape(y, {18}), mixw));
  };
  auto ref = [&] {
    auto y = ref_layer_norm(to_double(x.data()), to_double(gain.data()),
                            to_double(shift.data()), 6);
    double acc = 0.0;
    for (size_t i = 0; i < y.size(); ++i) acc += y[i] * mixw.data()[i];
    return acc;
  };
  auto stats = check_gradients(engine, ref, {x, gain, shift}, 18);
  INFO("worst rel err " << stats.worst);
  CHECK(stats.failed == 0);
}

TEST_CASE("dropout identity and statistics") {
  Prng rng(70);
  Tensor x = random_tensor({100}, rng, -1.0f, 1.0f);
  Prng r1(1);
  Tensor same_rate0 = dropout(x, 0.0f, r1, true);
  Tensor same_eval = dropout(x, 0.5f, r1, false);
  CHECK(same_rate0.same_storage(x));
  CHECK(same_eval.same_storage(x));
  CHECK_THROWS_AS(dropout(x, 1.0f, r1, true), std::invalid_argument);
  CHECK_THROWS_AS(dropout(x, -0.1f, r1, true), std::invalid_argument);

  Tensor big = Tensor::full({100000}, 1.0f);
  Prng r2(2);
  Tensor dropped = dropout(big, 0.3f, r2, true);
  int64_t zeros = 0;
  for (float v : dropped.data())
    if (v == 0.0f) ++zeros;
  const double frac = double(zeros) / double(big.numel());
  CHECK(std::fabs(frac - 0.3) < 0.01);
  for (float v : dropped.data())
    if (v != 0.0f) CHECK(v == Catch::Approx(1.0 / 0.7).epsilon(1e-5));
}

TEST_CASE("patch extraction shapes and exact reassembly") {
  Prng rng(71);
  Tensor x = random_tensor({2, 32, 32, 3}, rng);
  Tensor p = extract_patches(x, 4);
  CHECK(p.shape() == Shape{2, 64, 48});

  Tensor whole = extract_patches(x, 32);
  CHECK(whole.shape() == Shape{2, 1, 3072});
  for (int64_t i = 0; i < x.numel(); ++i)
    CHECK(whole.data()[i] == x.data()[i]);

  // reassemble the 4x4 patches and compare with the source image
  auto pv = p.data();
  for (int64_t s = 0; s < 2; ++s)
    for (int64_t py = 0; py < 8; ++py)
      for (int64_t px = 0; px < 8; ++px)
        for (int64_t dy = 0; dy < 4; ++dy)
          for (int64_t dx = 0; dx < 4; ++dx)
            for (int64_t c = 0; c < 3; ++c) {
              const float from_patch =
                  pv[((s * 64 + py * 8 + px) * 48) + (dy * 4 + dx) * 3 + c];
              const float from_img =
                  x.data()[((s * 32 + py * 4 + dy) * 32 + px * 4 + dx) * 3 + c];
              CHECK(from_patch == from_img);
            }

  CHECK_THROWS_AS(extract_patches(x, 5), ShapeError);
}

TEST_CASE("patch encoder adds positions to projected patches") {
  Prng rng(72);
  PatchEncoder enc = PatchEncoder::create(48, 64, 64, rng.split(9));
  Tensor zero_patches = Tensor::zeros({2, 64, 48});
  Tensor out = enc.forward(zero_patches, false);
  CHECK(out.shape() == Shape{2, 64, 64});
  // zero patches: projection contributes only its (zero) bias, so the output
  // is the positional table broadcast over the batch
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t i = 0; i < 64 * 64; ++i)
      CHECK(out.data()[b * 64 * 64 + i] == enc.pos.data()[i]);

  // two positions with identical content differ exactly by their positions
  Tensor patches = Tensor::zeros({1, 64, 48});
  for (int64_t t = 0; t < 48; ++t) {
    patches.data_mut()[0 * 48 + t] = 0.5f;
    patches.data_mut()[7 * 48 + t] = 0.5f;
  }
  Tensor enc_out = enc.forward(patches, false);
  for (int64_t e = 0; e < 64; ++e) {
    const float diff = enc_out.data()[0 * 64 + e] - enc_out.data()[7 * 64 + e];
    const float pos_diff = enc.pos.data()[0 * 64 + e] - enc.pos.data()[7 * 64 + e];
    CHECK(diff == Catch::Approx(double(pos_diff)).margin(1e-6));
  }
}

TEST_CASE("attention with identical tokens attends uniformly") {
  Prng rng(73);
  MultiHeadAttention att = MultiHeadAttention::create("att", 8, 2, 0.1f,
                                                      QuantSpec{5}, rng.split(11));
  // all sequence positions identical: every query sees the same key set, so
  // each output position must be identical too
  Tensor x = Tensor::zeros({1, 4, 8});
  for (int64_t t = 0; t < 4; ++t)
    for (int64_t e = 0; e < 8; ++e) x.data_mut()[t * 8 + e] = 0.1f * float(e);
  Tensor y = att.forward(x, false, nullptr);
  REQUIRE(y.shape() == Shape{1, 4, 8});
  for (int64_t t = 1; t < 4; ++t)
    for (int64_t e = 0; e < 8; ++e)
      CHECK(y.data()[t * 8 + e] == Catch::Approx(double(y.data()[e])).margin(1e-6));
}

TEST_CASE("attention requires head-divisible embedding") {
  Prng rng(74);
  CHECK_THROWS_AS(MultiHeadAttention::create("bad", 6, 4, 0.0f, QuantSpec{3},
                                             rng.split(12)),
                  ShapeError);
}

TEST_CASE("single-head attention matches a hand evaluation") {
  Prng rng(75);
  MultiHeadAttention att = MultiHeadAttention::create("att", 2, 1, 0.0f,
                                                      QuantSpec{3}, rng.split(13));
  // place the masters on known values
  auto setw = [](Dense& d, std::vector<float> v) {
    std::copy(v.begin(), v.end(), d.w.data_mut().begin());
  };
  setw(att.q_proj, {0.5f, -0.25f, 0.25f, 0.5f});
  setw(att.k_proj, {0.4f, 0.4f, -0.4f, 0.2f});
  setw(att.v_proj, {0.6f, 0.1f, -0.1f, 0.3f});
  setw(att.out_proj, {0.2f, -0.6f, 0.4f, 0.2f});
  Tensor x({1, 2, 2}, {0.8f, -0.3f, -0.5f, 0.9f});
  Tensor y = att.forward(x, false, nullptr);

  // reference: effective weights from the quantizer, then plain double math
  auto eff = [&](const Dense& d) {
    auto q = quantize(d.w, 3);
    std::vector<double> m(4);
    for (int i = 0; i < 4; ++i) m[size_t(i)] = double(q.gamma) * q.w_q.data()[i];
    return m;  // [out x in] row-major
  };
  auto apply = [](const std::vector<double>& w, const double* v, double* out) {
    out[0] = w[0] * v[0] + w[1] * v[1];
    out[1] = w[2] * v[0] + w[3] * v[1];
  };
  auto wq = eff(att.q_proj), wk = eff(att.k_proj), wv = eff(att.v_proj),
       wo = eff(att.out_proj);
  double xin[2][2] = {{0.8, -0.3}, {-0.5, 0.9}};
  double q[2][2], k[2][2], v[2][2];
  for (int t = 0; t < 2; ++t) {
    apply(wq, xin[t], q[t]);
    apply(wk, xin[t], k[t]);
    apply(wv, xin[t], v[t]);
  }
  const double inv_sqrt = 1.0 / std::sqrt(2.0);
  for (int t = 0; t < 2; ++t) {
    double s0 = (q[t][0] * k[0][0] + q[t][1] * k[0][1]) * inv_sqrt;
    double s1 = (q[t][0] * k[1][0] + q[t][1] * k[1][1]) * inv_sqrt;
    const double m = std::max(s0, s1);
    const double e0 = std::exp(s0 - m), e1 = std::exp(s1 - m);
    const double p0 = e0 / (e0 + e1), p1 = e1 / (e0 + e1);
    double ctx[2] = {p0 * v[0][0] + p1 * v[1][0], p0 * v[0][1] + p1 * v[1][1]};
    double out[2];
    apply(wo, ctx, out);
    CHECK(y.data()[t * 2 + 0] == Catch::Approx(out[0]).margin(1e-5));
    CHECK(y.data()[t * 2 + 1] == Catch::Approx(out[1]).margin(1e-5));
  }
}

TEST_CASE("two-layer quantized stack gradients match frozen-grid finite differences") {
  Prng rng(76);
  Dense l1 = Dense::create("l1", 4, 5, Activation::Relu, QuantSpec{5}, true,
                           rng.split(20));
  Dense l2 = Dense::create("l2", 5, 3, Activation::Softmax, QuantSpec{5}, true,
                           rng.split(21));
  Tensor x = random_tensor({3, 4}, rng, -1.0f, 1.0f);
  Tensor target = one_hot(std::vector<int>{0, 2, 1}, 3);

  auto engine = [&] {
    Tensor h = l1.forward(x, true);
    Tensor p = l2.forward(h, true);
    return cross_entropy(p, target);
  };

  // 64-bit recomputation with each layer's quantization decision and scale
  // frozen at the base point: effective = W + (gamma*W_q - W_base).
  auto freeze = [](const Dense& d) {
    auto q = quantize(d.w, d.quant.n_values, d.quant.beta, d.quant.mean_mode);
    std::vector<double> c(size_t(d.w.numel()));
    for (int64_t i = 0; i < d.w.numel(); ++i)
      c[size_t(i)] = double(q.gamma) * q.w_q.data()[i] - double(d.w.data()[i]);
    return c;
  };
  auto c1 = freeze(l1), c2 = freeze(l2);
  auto ref = [&] {
    auto w1 = to_double(l1.w.data());
    auto w2 = to_double(l2.w.data());
    for (size_t i = 0; i < w1.size(); ++i) w1[i] += c1[i];
    for (size_t i = 0; i < w2.size(); ++i) w2[i] += c2[i];
    auto h = ref_linear(to_double(x.data()), w1, to_double(l1.b.data()), 3, 4, 5);
    ref_relu(h);
    auto p = ref_linear(h, w2, to_double(l2.b.data()), 3, 5, 3);
    ref_softmax_rows(p, 3);
    return ref_cross_entropy(p, to_double(target.data()), 3, 3);
  };

  // sample parameters away from rounding boundaries
  auto away = [&](const Tensor& t, int64_t i) {
    const Dense& owner = t.same_storage(l1.w) ? l1 : l2;
    if (!t.same_storage(owner.w)) return true;  // biases are smooth
    auto q = quantize(owner.w, 5);
    const float u = t.data()[i] / q.gamma * 2.0f + 2.0f;
    const float frac = u - std::floor(u);
    return std::fabs(frac - 0.5f) > 0.05f;
  };
  auto stats = check_gradients(engine, ref, {l1.w, l1.b, l2.w, l2.b}, 10, 1e-3,
                               1e-3, away);
  INFO("checked " << stats.checked << " worst rel " << stats.worst);
  CHECK(stats.checked >= 20);
  CHECK(stats.failed == 0);
}

TEST_CASE("conv+dense composite gradients match finite differences (full precision)") {
  Prng rng(77);
  Conv2dLayer conv = Conv2dLayer::create("c", 2, 3, 3, Activation::Relu,
                                         QuantSpec{}, rng.split(30));
  Dense head = Dense::create("h", 3 * 2 * 2, 2, Activation::Softmax, QuantSpec{},
                             true, rng.split(31));
  Tensor x = random_tensor({2, 4, 4, 2}, rng, -1.0f, 1.0f);
  Tensor target = one_hot(std::vector<int>{1, 0}, 2);

  auto engine = [&] {
    Tensor h = conv.forward(x, true);
    h = maxpool2x2(h);
    h = flatten(h);
    Tensor p = head.forward(h, true);
    return cross_entropy(p, target);
  };
  auto ref = [&] {
    auto h = ref_conv2d(to_double(x.data()), to_double(conv.w.data()), 2, 4, 4,
                        2, 3, 3);
    for (int64_t r = 0; r < 2 * 4 * 4; ++r)
      for (int64_t o = 0; o < 3; ++o) h[size_t(r * 3 + o)] += conv.b.data()[o];
    ref_relu(h);
    auto pooled = ref_maxpool2x2(h, 2, 4, 4, 3);
    auto p = ref_linear(pooled, to_double(head.w.data()),
                        to_double(head.b.data()), 2, 12, 2);
    ref_softmax_rows(p, 2);
    return ref_cross_entropy(p, to_double(target.data()), 2, 2);
  };
  auto stats = check_gradients(engine, ref, {conv.w, conv.b, head.w, head.b}, 14);
  INFO("checked " << stats.checked << " worst rel " << stats.worst);
  CHECK(stats.failed == 0);
}

TEST_CASE("attention block gradients match finite differences") {
  Prng rng(79);
  MultiHeadAttention att = MultiHeadAttention::create("att", 4, 2, 0.0f,
                                                      QuantSpec{}, rng.split(50));
  Tensor x = random_tensor({1, 3, 4}, rng, -1.0f, 1.0f, true);
  Tensor mixw = random_tensor({12}, rng);

  auto engine = [&] {
    Tensor y = att.forward(x, true, nullptr);
    return sum(mul(reshape(y, {12}), mixw));
  };
  auto ref = [&] {
    auto proj = [&](const Dense& d, const std::vector<double>& in) {
      std::vector<double> out(12, 0.0);
      for (int t = 0; t < 3; ++t)
        for (int o = 0; o < 4; ++o)
          for (int i = 0; i < 4; ++i)
            out[size_t(t * 4 + o)] += in[size_t(t * 4 + i)] * d.w.data()[o * 4 + i];
      return out;
    };
    auto xv = to_double(x.data());
    auto q = proj(att.q_proj, xv), k = proj(att.k_proj, xv), v = proj(att.v_proj, xv);
    std::vector<double> ctx(12, 0.0);
    const double inv_sqrt = 1.0 / std::sqrt(2.0);
    for (int h = 0; h < 2; ++h) {
      for (int t = 0; t < 3; ++t) {
        double scores[3];
        for (int s = 0; s < 3; ++s) {
          double dot = 0.0;
          for (int c = 0; c < 2; ++c)
            dot += q[size_t(t * 4 + h * 2 + c)] * k[size_t(s * 4 + h * 2 + c)];
          scores[s] = dot * inv_sqrt;
        }
        const double m = std::max({scores[0], scores[1], scores[2]});
        double z = 0.0;
        double e[3];
        for (int s = 0; s < 3; ++s) {
          e[s] = std::exp(scores[s] - m);
          z += e[s];
        }
        for (int s = 0; s < 3; ++s)
          for (int c = 0; c < 2; ++c)
            ctx[size_t(t * 4 + h * 2 + c)] += e[s] / z * v[size_t(s * 4 + h * 2 + c)];
      }
    }
    auto out = proj(att.out_proj, ctx);
    double acc = 0.0;
    for (int i = 0; i < 12; ++i) acc += out[size_t(i)] * mixw.data()[i];
    return acc;
  };
  auto stats = check_gradients(
      engine, ref, {x, att.q_proj.w, att.k_proj.w, att.v_proj.w, att.out_proj.w},
      16);
  INFO("checked " << stats.checked << " worst rel " << stats.worst);
  CHECK(stats.checked >= 60);
  CHECK(stats.failed == 0);
}

TEST_CASE("transformer model trains end to end on the synthetic set") {
  Dataset train = make_synthetic(4, 10, 3, "train");
  Dataset val = make_synthetic(1, 10, 3, "test");
  auto m = build_model({ModelKind::VIT1, 5, 1.4f, MeanMode::Abs, 3, 3});
  TrainConfig cfg;
  cfg.lr = 0.01f;  // transformer default
  cfg.batch_size = 40;
  cfg.seed = 3;
  SgdMomentum opt;
  double first = 0.0, last = 0.0;
  for (int64_t e = 1; e <= 8; ++e) {
    auto r = train_epoch(*m, train, val, cfg, opt, e);
    if (e == 1) first = r.train_loss;
    last = r.train_loss;
  }
  CHECK(last < first);
}

TEST_CASE("optimizer steps move masters off-grid while the image stays on-grid") {
  Prng rng(78);
  Dense d = Dense::create("d", 8, 4, Activation::Relu, QuantSpec{3}, true,
                          rng.split(40));
  Tensor x = random_tensor({4, 8}, rng);
  Tensor target = one_hot(std::vector<int>{0, 1, 2, 3}, 4);
  SgdMomentum opt;
  std::vector<Tensor> params{d.w, d.b};
  for (int step = 0; step < 3; ++step) {
    Tape tape;
    Tensor p = softmax_lastdim(d.forward(x, true));
    Tensor loss = cross_entropy(p, target);
    tape.backward(loss);
    opt.step(params, 0.05f, 0.9f);
    for (const Tensor& t : params) t.clear_grad();
  }
  auto g = grid_values(3);
  auto q = quantize(d.w, 3);
  int64_t off_grid_masters = 0;
  for (int64_t i = 0; i < d.w.numel(); ++i) {
    bool on_grid = false;
    for (float v : g.values) on_grid |= (d.w.data()[i] == v * q.gamma);
    if (!on_grid) ++off_grid_masters;
    bool image_on_grid = false;
    for (float v : g.values) image_on_grid |= (q.w_q.data()[i] == v);
    CHECK(image_on_grid);
  }
  CHECK(off_grid_masters > 0);
}
