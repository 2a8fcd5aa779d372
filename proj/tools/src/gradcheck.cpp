#include "physfed/app/gradcheck.hpp"

#include <random>

#include "physfed/model.hpp"
#include "physfed/objective.hpp"

namespace physfed::app {

using ad::NamedInput;
using ad::Tape;
using ad::Tensor;
using ad::Var;

namespace {

class Factory {
 public:
  explicit Factory(std::uint64_t seed) : eng_(seed) {}

  Tensor normal(std::vector<int> shape, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = scale * gauss_(eng_);
    return t;
  }

  // Values bounded away from zero so that relu kinks sit far from any probe.
  Tensor away_from_zero(std::vector<int> shape) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) {
      const double g = gauss_(eng_);
      v = g >= 0 ? 0.1 + g : -0.1 + g;
    }
    return t;
  }

 private:
  std::mt19937_64 eng_;
  std::normal_distribution<double> gauss_{0.0, 1.0};
};

// Weighted sum with fixed random weights: every output coordinate feeds the
// loss with a distinct coefficient.
Var probe(Tape& tape, Var out, const Tensor& weights) { return ad::sum(ad::mul(out, tape.leaf(weights))); }

ModelConfig small_model(int size) {
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

}  // namespace

std::vector<GradcheckResult> run_gradcheck_suite(const GradcheckOptions& opts) {
  Factory f(opts.seed);
  const int s = opts.image_size;
  std::vector<GradcheckResult> out;
  auto check = [&](const std::string& name, std::vector<NamedInput> inputs, const ad::GraphFn& graph) {
    out.push_back({name, ad::finite_diff_check(graph, inputs, opts.h, opts.tol)});
  };

  {
    const Tensor w_out = f.normal({4, s, s});
    check("conv2d", {{"input", f.normal({3, s, s})}, {"kernels", f.normal({4, 3, 3, 3}, 0.3)}, {"bias", f.normal({4})}},
          [&](Tape& t, std::span<const Var> l) { return probe(t, ad::conv2d(l[0], l[1], l[2]), w_out); });
  }
  {
    const Tensor w_out = f.normal({1, 5});
    check("linear", {{"x", f.normal({1, 8})}, {"w", f.normal({8, 5})}, {"b", f.normal({5})}},
          [&](Tape& t, std::span<const Var> l) { return probe(t, ad::linear(l[0], l[1], l[2]), w_out); });
  }
  {
    const Tensor w_out = f.normal({4, s});
    check("relu", {{"x", f.away_from_zero({4, s})}},
          [&](Tape& t, std::span<const Var> l) { return probe(t, ad::relu(l[0]), w_out); });
  }
  {
    const Tensor w_out = f.normal({1, 4});
    check("avgpool1d", {{"x", f.normal({1, 16})}},
          [&](Tape& t, std::span<const Var> l) { return probe(t, ad::avgpool1d(l[0], 4), w_out); });
  }
  {
    const Tensor w_out = f.normal({4, 6});
    check("softmax", {{"x", f.normal({4, 6})}},
          [&](Tape& t, std::span<const Var> l) { return probe(t, ad::softmax(l[0]), w_out); });
  }
  {
    const Tensor w_out = f.normal({3, 5});
    check("matmul", {{"a", f.normal({3, 4})}, {"b", f.normal({4, 5})}},
          [&](Tape& t, std::span<const Var> l) { return probe(t, ad::matmul(l[0], l[1]), w_out); });
  }
  {
    const Tensor w_out = f.normal({4, 3});
    check("transpose", {{"a", f.normal({3, 4})}},
          [&](Tape& t, std::span<const Var> l) { return probe(t, ad::transpose(l[0]), w_out); });
  }
  {
    const Tensor w_out = f.normal({2, s, s});
    check("add_broadcast", {{"a", f.normal({2, s, s})}, {"b", f.normal({1, s, s})}},
          [&](Tape& t, std::span<const Var> l) { return probe(t, ad::add(l[0], l[1]), w_out); });
    check("sub_broadcast", {{"a", f.normal({2, s, s})}, {"b", f.normal({2, 1, 1})}},
          [&](Tape& t, std::span<const Var> l) { return probe(t, ad::sub(l[0], l[1]), w_out); });
    check("mul_broadcast", {{"a", f.normal({2, s, s})}, {"b", f.normal({1, s, s})}},
          [&](Tape& t, std::span<const Var> l) { return probe(t, ad::mul(l[0], l[1]), w_out); });
  }
  {
    const Tensor w_out = f.normal({3, 4});
    check("scale", {{"a", f.normal({3, 4})}},
          [&](Tape& t, std::span<const Var> l) { return probe(t, ad::scale(l[0], -1.7), w_out); });
    check("add_scalar", {{"a", f.normal({3, 4})}},
          [&](Tape& t, std::span<const Var> l) { return probe(t, ad::add_scalar(l[0], 0.4), w_out); });
  }
  {
    const Tensor w_out = f.normal({2, 6});
    check("reshape", {{"a", f.normal({3, 4})}},
          [&](Tape& t, std::span<const Var> l) { return probe(t, ad::reshape(l[0], {2, 6}), w_out); });
  }
  {
    const Tensor a = f.normal({3, 4});
    check("mean", {{"a", a}}, [](Tape&, std::span<const Var> l) { return ad::mul(ad::mean(l[0]), ad::mean(l[0])); });
    check("sum", {{"a", a}}, [](Tape&, std::span<const Var> l) { return ad::mul(ad::sum(l[0]), ad::sum(l[0])); });
  }
  {
    const Tensor w_out = f.normal({3, s, s});
    check("channel_affine", {{"x", f.normal({3, s, s})}, {"alpha", f.normal({3})}, {"beta", f.normal({3})}},
          [&](Tape& t, std::span<const Var> l) { return probe(t, ad::channel_affine(l[0], l[1], l[2]), w_out); });
  }
  {
    const Tensor w_out = f.normal({3, 4});
    check("slice_cols", {{"a", f.normal({3, 8})}},
          [&](Tape& t, std::span<const Var> l) { return probe(t, ad::slice_cols(l[0], 2, 4), w_out); });
  }
  {
    const Tensor w_out = f.normal({3, 6});
    check("concat_cols", {{"a", f.normal({3, 2})}, {"b", f.normal({3, 4})}}, [&](Tape& t, std::span<const Var> l) {
      const std::vector<Var> parts{l[0], l[1]};
      return probe(t, ad::concat_cols(parts), w_out);
    });
  }
  check("dot", {{"a", f.normal({1, 6})}, {"b", f.normal({1, 6})}}, [](Tape&, std::span<const Var> l) {
    const Var d = ad::dot(l[0], l[1]);
    return ad::mul(d, d);
  });
  check("mse_loss", {{"pred", f.normal({1, s, s})}, {"ref", f.normal({1, s, s})}},
        [](Tape&, std::span<const Var> l) { return mse_loss(l[0], l[1]); });
  check("orth_loss", {{"c1", f.normal({1, 5})}, {"c2", f.normal({1, 5})}, {"c3", f.normal({1, 5})}},
        [](Tape&, std::span<const Var> l) {
          const std::vector<Var> codes(l.begin(), l.end());
          return orth_loss(codes, 1);
        });

  // Model stages and the composed path use a fully random initialization so
  // that no branch is trivially zero.
  const ModelConfig cfg = small_model(s);
  const auto params = init_params(cfg, opts.seed, {1}, InitOptions{false, 1.0});
  const Tensor x = f.normal({1, s, s}, 0.5);
  const Tensor g_hat = f.normal({1, 7}, 0.5);
  const Tensor f_t = f.normal({1, cfg.report_dim}, 0.3);

  {
    const Tensor w_out = f.normal({cfg.channels, s, s});
    check("encoder", {{"x", x}, {"conv1.w", params.encoder.at("conv1.w")}, {"conv3.b", params.encoder.at("conv3.b")}},
          [&](Tape& t, std::span<const Var> l) {
            BoundParams enc(t, params.encoder);
            enc.rebind("conv1.w", l[1]);
            enc.rebind("conv3.b", l[2]);
            return probe(t, encode(enc, l[0]), w_out);
          });
  }
  {
    const Tensor wa = f.normal({cfg.channels});
    const Tensor wb = f.normal({cfg.channels});
    const Tensor wc = f.normal({1, cfg.code_dim});
    check("scanning_hypernet",
          {{"g_hat", g_hat}, {"fc1.w", params.hs.at("fc1.w")}, {"alpha.w", params.hs.at("alpha.w")},
           {"beta.w", params.hs.at("beta.w")}, {"code.w", params.hs.at("code.w")}},
          [&](Tape& t, std::span<const Var> l) {
            BoundParams hs(t, params.hs);
            hs.rebind("fc1.w", l[1]);
            hs.rebind("alpha.w", l[2]);
            hs.rebind("beta.w", l[3]);
            hs.rebind("code.w", l[4]);
            const auto o = scanning_hypernet(hs, l[0]);
            return ad::add(ad::add(probe(t, o.alpha, wa), probe(t, o.beta, wb)), probe(t, o.code, wc));
          });
  }
  {
    const Tensor w_out = f.normal({1, s, s});
    check("anatomy_hypernet",
          {{"f_t", f_t}, {"fc_in.w", params.ha.at("fc_in.w")}, {"q.w", params.ha.at("q.w")}, {"k.w", params.ha.at("k.w")},
           {"v.w", params.ha.at("v.w")}, {"o.b", params.ha.at("o.b")}, {"out.w", params.ha.at("out.w")}},
          [&](Tape& t, std::span<const Var> l) {
            BoundParams ha(t, params.ha);
            ha.rebind("fc_in.w", l[1]);
            ha.rebind("q.w", l[2]);
            ha.rebind("k.w", l[3]);
            ha.rebind("v.w", l[4]);
            ha.rebind("o.b", l[5]);
            ha.rebind("out.w", l[6]);
            return probe(t, anatomy_hypernet(ha, cfg, l[0]), w_out);
          });
  }
  {
    const Tensor w_out = f.normal({cfg.channels, s, s});
    check("modulate",
          {{"f_x", f.normal({cfg.channels, s, s})}, {"f_an", f.normal({1, s, s})}, {"alpha", f.normal({cfg.channels})},
           {"beta", f.normal({cfg.channels})}},
          [&](Tape& t, std::span<const Var> l) { return probe(t, modulate(l[0], l[1], l[2], l[3]), w_out); });
  }
  {
    const Tensor w_out = f.normal({1, s, s});
    const auto& dec_params = params.decoder(1);
    check("decoder",
          {{"f_per", f.normal({cfg.channels, s, s})}, {"x", x}, {"conv1.w", dec_params.at("conv1.w")},
           {"conv3.w", dec_params.at("conv3.w")}},
          [&](Tape& t, std::span<const Var> l) {
            BoundParams dec(t, dec_params);
            dec.rebind("conv1.w", l[2]);
            dec.rebind("conv3.w", l[3]);
            return probe(t, decode(dec, l[0], l[1]), w_out);
          });
  }
  {
    const Tensor w_out = f.normal({1, s, s});
    const Tensor w_code = f.normal({1, cfg.code_dim});
    const auto& dec_params = params.decoder(1);
    check("composed_forward",
          {{"x", x},
           {"g_hat", g_hat},
           {"f_t", f_t},
           {"enc.conv1.w", params.encoder.at("conv1.w")},
           {"hs.fc1.w", params.hs.at("fc1.w")},
           {"ha.fc_in.w", params.ha.at("fc_in.w")},
           {"dec.conv1.w", dec_params.at("conv1.w")}},
          [&](Tape& t, std::span<const Var> l) {
            BoundParams enc(t, params.encoder);
            BoundParams hs(t, params.hs);
            BoundParams ha(t, params.ha);
            BoundParams dec(t, dec_params);
            enc.rebind("conv1.w", l[3]);
            hs.rebind("fc1.w", l[4]);
            ha.rebind("fc_in.w", l[5]);
            dec.rebind("conv1.w", l[6]);
            const auto graph = forward(enc, hs, ha, dec, cfg, l[0], l[1], l[2], AblationFlags{});
            return ad::add(probe(t, graph.prediction, w_out), probe(t, graph.code, w_code));
          });
  }
  {
    const Tensor ref = f.normal({1, s, s}, 0.5);
    const std::vector<Tensor> others{f.normal({1, 7}, 0.5), f.normal({1, 7}, 0.5)};
    const auto& dec_params = params.decoder(1);
    check("training_loss",
          {{"x", x}, {"hs.code.w", params.hs.at("code.w")}, {"hs.fc2.w", params.hs.at("fc2.w")},
           {"dec.conv3.w", dec_params.at("conv3.w")}},
          [&](Tape& t, std::span<const Var> l) {
            BoundParams enc(t, params.encoder);
            BoundParams hs(t, params.hs);
            BoundParams ha(t, params.ha);
            BoundParams dec(t, dec_params);
            hs.rebind("code.w", l[1]);
            hs.rebind("fc2.w", l[2]);
            dec.rebind("conv3.w", l[3]);
            const Var g = t.leaf(g_hat);
            const auto graph = forward(enc, hs, ha, dec, cfg, l[0], g, t.leaf(f_t), AblationFlags{});
            std::vector<Var> codes{graph.code};
            for (const auto& o : others) codes.push_back(scanning_code(hs, t.leaf(o)));
            return total_loss(graph.prediction, t.leaf(ref), codes, 0, LossConfig{0.01});
          });
  }
  return out;
}

}  // namespace physfed::app
