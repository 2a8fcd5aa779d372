#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "physfed/error.hpp"
#include "physfed/model.hpp"

using namespace physfed;
using namespace physfed::ad;

namespace {

ModelConfig small_config(int size = 16) {
  ModelConfig cfg;
  cfg.channels = 4;
  cfg.report_dim = 16;
  cfg.hidden_dim = 8;
  cfg.code_dim = 4;
  cfg.n_heads = 2;
  cfg.token_count = 2;
  cfg.image_size = size;
  return cfg;
}

Tensor random_tensor(std::vector<int> shape, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

struct Inputs {
  Tensor x, g, f;
};

Inputs random_inputs(const ModelConfig& cfg, std::uint64_t seed) {
  return {random_tensor({1, cfg.image_size, cfg.image_size}, seed),
          random_tensor({1, static_cast<int>(kProtocolDims)}, seed + 1),
          random_tensor({1, cfg.report_dim}, seed + 2, -1, 1)};
}

double stddev(const std::vector<double>& v) {
  double m = 0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

struct Bound {
  BoundParams enc, hs, ha, dec;
  Bound(Tape& t, const ModelParameters& p, int id)
      : enc(t, p.encoder), hs(t, p.hs), ha(t, p.ha), dec(t, p.decoder(id)) {}
};

// The five component combinations of the ablation grid.
const std::vector<AblationFlags> kAblationGrid{
    {true, true, true}, {false, true, false}, {true, false, false}, {false, false, false}, {false, false, false}};

}  // namespace

TEST(ModelConfig, Validation) {
  EXPECT_NO_THROW(ModelConfig{}.validate());
  auto c = ModelConfig{};
  c.report_dim = 62;
  EXPECT_THROW(c.validate(), Error);
  c = ModelConfig{};
  c.hidden_dim = 30;
  EXPECT_THROW(c.validate(), Error);
  c = ModelConfig{};
  c.n_heads = 8;  // token width 4, head dim 0
  EXPECT_THROW(c.validate(), Error);
  EXPECT_EQ(ModelConfig{}.head_dim(), 1);
}

TEST(Init, DeterministicAndSharedDecoders) {
  const auto cfg = small_config();
  const auto a = init_params(cfg, 5, {1, 2});
  const auto b = init_params(cfg, 5, {1, 2});
  EXPECT_EQ(a.encoder, b.encoder);
  EXPECT_EQ(a.hs, b.hs);
  EXPECT_EQ(a.ha, b.ha);
  EXPECT_EQ(a.decoder(1), a.decoder(2));
  EXPECT_NE(init_params(cfg, 6, {1}).encoder, a.encoder);
  EXPECT_THROW(a.decoder(3), Error);
}

TEST(Init, HeStd) {
  auto cfg = ModelConfig{};
  cfg.channels = 64;
  const auto p = init_params(cfg, 1, {1});
  const auto& w = p.encoder.at("conv3.w");  // 64 x 32 x 3 x 3
  ASSERT_GE(w.size(), 10000u);
  const double target = std::sqrt(2.0 / (32 * 9));
  EXPECT_NEAR(stddev(w.data()), target, 0.2 * target);
}

TEST(Encoder, ZeroInputAndShape) {
  const auto cfg = small_config(64);
  const auto p = init_params(cfg, 1, {1});
  Tape t;
  BoundParams enc(t, p.encoder);
  const auto f = encode(enc, t.leaf(Tensor({1, 64, 64})));
  EXPECT_EQ(f.shape(), (std::vector<int>{4, 64, 64}));
  for (double v : f.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(Scanning, IdentityStartAndPurity) {
  const auto cfg = small_config();
  const auto p = init_params(cfg, 1, {1});
  const auto g = random_tensor({1, 7}, 3);
  Tape t;
  BoundParams hs(t, p.hs);
  const auto a = scanning_hypernet(hs, t.leaf(g));
  const auto b = scanning_hypernet(hs, t.leaf(g));
  EXPECT_EQ(a.alpha.value(), Tensor({4}, 1.0));
  EXPECT_EQ(a.beta.value(), Tensor({4}, 0.0));
  const Tensor code = a.code.value();
  EXPECT_EQ(code, b.code.value());
  EXPECT_EQ(code.shape(), (std::vector<int>{1, 4}));
  // Copy before recording more nodes: value() refers into the tape.
  const Tensor again = scanning_code(hs, t.leaf(g)).value();
  EXPECT_EQ(again, code);
}

TEST(Scanning, CodeHeadSkipsAlphaBeta) {
  const auto cfg = small_config();
  const auto p = init_params(cfg, 1, {1});
  Tape t;
  BoundParams hs(t, p.hs);
  const auto before = alpha_beta_head_evaluations();
  scanning_code(hs, t.leaf(random_tensor({1, 7}, 4)));
  EXPECT_EQ(alpha_beta_head_evaluations(), before);
  scanning_hypernet(hs, t.leaf(random_tensor({1, 7}, 4)));
  EXPECT_GT(alpha_beta_head_evaluations(), before);
}

TEST(Scanning, AlphaGradientFiniteDifference) {
  const auto cfg = small_config();
  const auto p = init_params(cfg, 1, {1}, InitOptions{false, 1.0});
  const std::vector<NamedInput> inputs{{"fc1.w", p.hs.at("fc1.w")}, {"fc2.w", p.hs.at("fc2.w")}};
  const auto g = random_tensor({1, 7}, 5);
  const auto report = finite_diff_check(
      [&](Tape& t, std::span<const Var> v) {
        BoundParams hs(t, p.hs);
        hs.rebind("fc1.w", v[0]);
        hs.rebind("fc2.w", v[1]);
        return sum(scanning_hypernet(hs, t.leaf(g)).alpha);
      },
      inputs, 1e-6, 1e-4);
  EXPECT_TRUE(report.pass);
}

TEST(Anatomy, IdentityStartAndShape) {
  const auto cfg = small_config();
  const auto p = init_params(cfg, 1, {1});
  Tape t;
  BoundParams ha(t, p.ha);
  const auto f = anatomy_hypernet(ha, cfg, t.leaf(random_tensor({1, 16}, 6, -1, 1)));
  EXPECT_EQ(f.value(), Tensor({1, 16, 16}, 1.0));
  EXPECT_THROW(anatomy_hypernet(ha, cfg, t.leaf(Tensor({1, 12}))), Error);
}

TEST(Anatomy, AttentionPermutationEquivariance) {
  const auto cfg = small_config();
  const auto p = init_params(cfg, 2, {1}, InitOptions{false, 1.0});
  const int n = cfg.token_count, w = cfg.token_width();
  const auto tokens = random_tensor({n, w}, 7, -1, 1);
  Tensor swapped({n, w});
  for (int c = 0; c < w; ++c) {
    swapped[static_cast<std::size_t>(c)] = tokens[static_cast<std::size_t>(w + c)];
    swapped[static_cast<std::size_t>(w + c)] = tokens[static_cast<std::size_t>(c)];
  }
  Tape t;
  BoundParams ha(t, p.ha);
  const auto a = attention_core(ha, cfg, t.leaf(tokens)).value();
  const auto b = attention_core(ha, cfg, t.leaf(swapped)).value();
  for (int c = 0; c < w; ++c) {
    EXPECT_NEAR(a[static_cast<std::size_t>(c)], b[static_cast<std::size_t>(w + c)], 1e-14);
    EXPECT_NEAR(a[static_cast<std::size_t>(w + c)], b[static_cast<std::size_t>(c)], 1e-14);
  }
}

TEST(Anatomy, QueryGradientFiniteDifference) {
  const auto cfg = small_config();
  const auto p = init_params(cfg, 3, {1}, InitOptions{false, 1.0});
  const std::vector<NamedInput> inputs{{"q.w", p.ha.at("q.w")}};
  const auto f_t = random_tensor({1, 16}, 8, -1, 1);
  const auto report = finite_diff_check(
      [&](Tape& t, std::span<const Var> v) {
        BoundParams ha(t, p.ha);
        ha.rebind("q.w", v[0]);
        return mean(anatomy_hypernet(ha, cfg, t.leaf(f_t)));
      },
      inputs, 1e-6, 1e-4);
  EXPECT_TRUE(report.pass);
}

TEST(Modulate, HandArithmetic) {
  Tape t;
  auto fx = t.leaf(Tensor({1, 2, 2}, {1, 2, 3, 4}));
  auto fan = t.leaf(Tensor({1, 2, 2}, 2.0));
  const auto out = modulate(fx, fan, t.leaf(Tensor({1}, {3})), t.leaf(Tensor({1}, {1})));
  EXPECT_EQ(out.value(), Tensor({1, 2, 2}, {7, 13, 19, 25}));
}

TEST(Modulate, IdentityAndAnnihilation) {
  Tape t;
  const auto fx_v = random_tensor({3, 4, 4}, 9);
  auto fx = t.leaf(fx_v);
  auto ones = t.leaf(Tensor({3}, 1.0));
  auto zeros = t.leaf(Tensor({3}, 0.0));
  EXPECT_EQ(modulate(fx, t.leaf(Tensor({1, 4, 4}, 1.0)), ones, zeros).value(), fx_v);
  auto beta = t.leaf(Tensor({3}, {0.5, -1, 2}));
  const auto out = modulate(fx, t.leaf(Tensor({1, 4, 4}, 0.0)), ones, beta).value();
  for (int c = 0; c < 3; ++c) {
    for (int i = 0; i < 16; ++i) EXPECT_EQ(out[static_cast<std::size_t>(c * 16 + i)], beta.value()[c]);
  }
}

TEST(Modulate, AffineComposition) {
  Tape t;
  auto fx = t.leaf(random_tensor({2, 3, 3}, 10));
  auto ones = t.leaf(Tensor({1, 3, 3}, 1.0));
  const Tensor a1({2}, {1.5, -0.5}), b1({2}, {0.25, 2}), a2({2}, {0.75, 3}), b2({2}, {-1, 0.125});
  const auto twice = modulate(modulate(fx, ones, t.leaf(a1), t.leaf(b1)), ones, t.leaf(a2), t.leaf(b2)).value();
  Tensor a12({2}), b12({2});
  for (std::size_t c = 0; c < 2; ++c) {
    a12[c] = a1[c] * a2[c];
    b12[c] = a2[c] * b1[c] + b2[c];
  }
  const auto once = modulate(fx, ones, t.leaf(a12), t.leaf(b12)).value();
  for (std::size_t i = 0; i < once.size(); ++i) EXPECT_NEAR(twice[i], once[i], 1e-12);
}

TEST(Decoder, ZeroInitIsResidualIdentity) {
  const auto cfg = small_config(64);
  const auto p = init_params(cfg, 1, {1});
  Tape t;
  BoundParams dec(t, p.decoder(1));
  const auto x = random_tensor({1, 64, 64}, 11);
  const auto y = decode(dec, t.leaf(random_tensor({4, 64, 64}, 12)), t.leaf(x));
  EXPECT_EQ(y.shape(), (std::vector<int>{1, 64, 64}));
  EXPECT_EQ(y.value(), x);
}

TEST(Forward, IdentityAtInitForEveryConfiguration) {
  const auto cfg = small_config();
  const auto p = init_params(cfg, 4, {1, 2, kSharedDecoder});
  for (const auto& flags : kAblationGrid) {
    for (int id : {1, 2}) {
      const auto in = random_inputs(cfg, 100 + static_cast<std::uint64_t>(id));
      Tape t;
      Bound b(t, p, flags.generic_decoder ? kSharedDecoder : id);
      const auto out = forward(b.enc, b.hs, b.ha, b.dec, cfg, t.leaf(in.x), t.leaf(in.g), t.leaf(in.f), flags);
      EXPECT_EQ(out.prediction.value(), in.x);
    }
  }
}

TEST(Forward, AblationFlagsTakeEffect) {
  const auto cfg = small_config();
  const auto p = init_params(cfg, 4, {1}, InitOptions{false, 1.0});
  const auto in = random_inputs(cfg, 50);
  auto run = [&](const AblationFlags& flags, const Tensor& g, const Tensor& f) {
    Tape t;
    Bound b(t, p, 1);
    return forward(b.enc, b.hs, b.ha, b.dec, cfg, t.leaf(in.x), t.leaf(g), t.leaf(f), flags).prediction.value();
  };
  const auto g2 = random_tensor({1, 7}, 151);
  const auto f2 = random_tensor({1, cfg.report_dim}, 152, -1, 1);
  const AblationFlags full{};
  EXPECT_NE(run(full, in.g, in.f), run(full, g2, in.f));
  EXPECT_NE(run(full, in.g, in.f), run(full, in.g, f2));
  const AblationFlags no_scan{true, false, false};
  EXPECT_EQ(run(no_scan, in.g, in.f), run(no_scan, g2, in.f));
  const AblationFlags no_anat{false, true, false};
  EXPECT_EQ(run(no_anat, in.g, in.f), run(no_anat, in.g, f2));
}

TEST(Forward, EndToEndEncoderGradient) {
  const auto cfg = small_config();
  const auto p = init_params(cfg, 8, {1}, InitOptions{false, 1.0});
  const auto in = random_inputs(cfg, 60);
  const auto ref = random_tensor({1, 16, 16}, 61);
  const std::vector<NamedInput> inputs{{"enc.conv1.w", p.encoder.at("conv1.w")}};
  const auto report = finite_diff_check(
      [&](Tape& t, std::span<const Var> v) {
        Bound b(t, p, 1);
        b.enc.rebind("conv1.w", v[0]);
        const auto out = forward(b.enc, b.hs, b.ha, b.dec, cfg, t.leaf(in.x), t.leaf(in.g), t.leaf(in.f), {});
        return mean(mul(sub(out.prediction, t.leaf(ref)), sub(out.prediction, t.leaf(ref))));
      },
      inputs, 1e-6, 1e-4);
  EXPECT_TRUE(report.pass);
}

TEST(Forward, PredictMatchesGraph) {
  const auto cfg = small_config();
  const auto p = init_params(cfg, 9, {1}, InitOptions{false, 1.0});
  const auto in = random_inputs(cfg, 70);
  Tape t;
  Bound b(t, p, 1);
  const auto out = forward(b.enc, b.hs, b.ha, b.dec, cfg, t.leaf(in.x), t.leaf(in.g), t.leaf(in.f), {});
  NormalizedProtocol g;
  for (std::size_t j = 0; j < kProtocolDims; ++j) g.values[j] = in.g[j];
  const auto img = tensor_image(in.x, 1.0);
  const auto pred = predict(p, cfg, img, g, in.f.data(), 1, {});
  EXPECT_EQ(pred.data, out.prediction.value().data());
  EXPECT_THROW(predict(p, cfg, img, g, in.f.data(), 7, {}), Error);
}

TEST(Forward, ScanOverrideReplacesHeads) {
  const auto cfg = small_config();
  const auto p = init_params(cfg, 9, {1}, InitOptions{false, 1.0});
  const auto in = random_inputs(cfg, 80);
  NormalizedProtocol g1, g2;
  for (std::size_t j = 0; j < kProtocolDims; ++j) {
    g1.values[j] = in.g[j];
    g2.values[j] = 1.0 - in.g[j];
  }
  const auto sv = evaluate_scanning(p.hs, g1);
  const auto img = tensor_image(in.x, 1.0);
  const auto direct = predict(p, cfg, img, g1, in.f.data(), 1, {});
  const auto overridden = predict(p, cfg, img, g2, in.f.data(), 1, {}, ScanOverride{sv.alpha, sv.beta});
  EXPECT_EQ(direct.data, overridden.data);
}

TEST(Checkpoint, RoundTripAndMagic) {
  const auto cfg = small_config();
  Checkpoint ck{cfg, AblationFlags{true, false, true}, init_params(cfg, 3, {kSharedDecoder})};
  const auto path = std::filesystem::temp_directory_path() / "physfed_ckpt_rt.pfm";
  save_checkpoint(path, ck);
  const auto back = load_checkpoint(path);
  EXPECT_EQ(back.config, cfg);
  EXPECT_EQ(back.flags, ck.flags);
  EXPECT_EQ(back.params.encoder, ck.params.encoder);
  EXPECT_EQ(back.params.hs, ck.params.hs);
  EXPECT_EQ(back.params.ha, ck.params.ha);
  EXPECT_EQ(back.params.decoders, ck.params.decoders);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.write("XXXX", 4);
  }
  try {
    load_checkpoint(path);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::VersionMismatch);
  }
  std::filesystem::remove(path);
}
