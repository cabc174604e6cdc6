#include <cmath>
#include <limits>

#include "doctest.h"
#include "mlens/model.hpp"
#include "mlens/numerics.hpp"

using namespace mlens;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.num_layers = 2;
  cfg.num_heads = 2;
  cfg.model_dim = 8;
  cfg.ffn_dim = 16;
  cfg.vocab_size = 32;
  cfg.max_seq_len = 16;
  cfg.num_visual_slots = 2;
  cfg.num_audio_slots = 2;
  cfg.feature_dim = 4;
  return cfg;
}

std::vector<Vec> random_features(int count, int dim, Rng& rng) {
  std::vector<Vec> out;
  for (int i = 0; i < count; ++i) {
    Vec f(static_cast<size_t>(dim));
    for (double& x : f) x = rng.gaussian();
    out.push_back(std::move(f));
  }
  return out;
}

}  // namespace

TEST_CASE("causal mask definition") {
  const double neg_inf = -std::numeric_limits<double>::infinity();
  Matrix m1 = causal_mask(1);
  CHECK(m1(0, 0) == 0.0);

  Matrix m3 = causal_mask(3);
  CHECK(m3(0, 0) == 0.0);
  CHECK(m3(0, 1) == neg_inf);
  CHECK(m3(0, 2) == neg_inf);
  CHECK(m3(2, 0) == 0.0);
  CHECK(m3(2, 2) == 0.0);

  Matrix m6 = causal_mask(6);
  for (int i = 0; i < 6; ++i)
    for (int j = i + 1; j < 6; ++j) CHECK(m6(i, j) == neg_inf);
}

TEST_CASE("assemble_input layout and determinism") {
  ModelConfig cfg = tiny_config();
  cfg.num_visual_slots = 4;
  cfg.num_audio_slots = 4;
  Parameters p = Parameters::init(cfg, Rng(1));
  Rng rng(2);
  auto vis = random_features(4, cfg.feature_dim, rng);
  auto aud = random_features(4, cfg.feature_dim, rng);
  AssembledInput in = assemble_input(p, vis, aud, {5, 6});
  CHECK(in.length() == 10);
  CHECK(in.layout.visual_positions == std::vector<int>{0, 1, 2, 3});
  CHECK(in.layout.audio_positions == std::vector<int>{4, 5, 6, 7});
  CHECK(in.layout.query_positions == std::vector<int>{8, 9});

  // identical features in two audio slots give identical embedding rows
  // apart from position embeddings
  auto aud2 = aud;
  aud2[1] = aud2[0];
  AssembledInput in2 = assemble_input(p, vis, aud2, {5});
  for (int d = 0; d < cfg.model_dim; ++d) {
    const double e0 = in2.embeddings(4, d) - p.pos_emb(4, d);
    const double e1 = in2.embeddings(5, d) - p.pos_emb(5, d);
    CHECK(e0 == doctest::Approx(e1).epsilon(1e-15));
  }

  CHECK_THROWS_AS(assemble_input(p, random_features(3, cfg.feature_dim, rng), aud, {5}), ConfigError);
  CHECK_THROWS_AS(assemble_input(p, vis, aud, {}), ConfigError);
}

TEST_CASE("assemble_input with zero visual slots") {
  ModelConfig cfg = tiny_config();
  cfg.num_visual_slots = 0;
  cfg.num_audio_slots = 3;
  Parameters p = Parameters::init(cfg, Rng(1));
  Rng rng(4);
  AssembledInput in = assemble_input(p, {}, random_features(3, cfg.feature_dim, rng), {1});
  CHECK(in.layout.visual_positions.empty());
  CHECK(in.layout.audio_positions == std::vector<int>{0, 1, 2});
}

TEST_CASE("forward trace invariants") {
  ModelConfig cfg = tiny_config();
  Parameters p = Parameters::init(cfg, Rng(3));
  Rng rng(5);
  AssembledInput in = assemble_input(p, random_features(2, cfg.feature_dim, rng),
                                     random_features(2, cfg.feature_dim, rng), {1, 2});
  const int n = in.length();
  ForwardTrace t = forward(p, in.embeddings, {causal_mask(n)}, true);

  CHECK(static_cast<int>(t.hidden_states.size()) == cfg.num_layers + 1);
  for (int l = 0; l < cfg.num_layers; ++l) {
    for (int h = 0; h < cfg.num_heads; ++h) {
      const Matrix& a = t.attention_weights[l][h];
      for (int i = 0; i < n; ++i) {
        double row = 0.0;
        for (int j = 0; j < n; ++j) {
          row += a(i, j);
          if (j > i) CHECK(std::abs(a(i, j)) <= 1e-12);  // causality
        }
        CHECK(row == doctest::Approx(1.0).epsilon(1e-6));
      }
    }
  }

  // trace on/off parity: bit-identical logits
  ForwardTrace t2 = forward(p, in.embeddings, {causal_mask(n)}, false);
  CHECK(t.logits == t2.logits);

  // determinism across repeated runs
  ForwardTrace t3 = forward(p, in.embeddings, {causal_mask(n)}, true);
  CHECK(t.logits == t3.logits);
  for (int l = 0; l <= cfg.num_layers; ++l) CHECK(t.hidden_states[l] == t3.hidden_states[l]);
}

TEST_CASE("self-only mask isolates positions") {
  ModelConfig cfg = tiny_config();
  Parameters p = Parameters::init(cfg, Rng(3));
  Rng rng(6);
  auto vis = random_features(2, cfg.feature_dim, rng);
  auto aud = random_features(2, cfg.feature_dim, rng);
  AssembledInput a = assemble_input(p, vis, aud, {1, 2});
  const int n = a.length();
  const double neg_inf = -std::numeric_limits<double>::infinity();
  Matrix self_only(n, n, neg_inf);
  for (int i = 0; i < n; ++i) self_only(i, i) = 0.0;

  ForwardTrace ta = forward(p, a.embeddings, {self_only}, false);

  // change another position's content; isolated outputs stay identical
  auto aud2 = aud;
  for (double& x : aud2[0]) x += 1.0;
  AssembledInput b = assemble_input(p, vis, aud2, {1, 2});
  ForwardTrace tb = forward(p, b.embeddings, {self_only}, false);
  for (int v = 0; v < cfg.vocab_size; ++v) {
    CHECK(ta.logits(0, v) == tb.logits(0, v));
    CHECK(ta.logits(n - 1, v) == tb.logits(n - 1, v));
  }
}

TEST_CASE("residual stream additivity") {
  // h^l - h'^l must equal the FFN sublayer output exactly; recompute the
  // FFN from the traced post-attention state with the same op ordering.
  ModelConfig cfg = tiny_config();
  Parameters p = Parameters::init(cfg, Rng(3));
  Rng rng(8);
  AssembledInput in = assemble_input(p, random_features(2, cfg.feature_dim, rng),
                                     random_features(2, cfg.feature_dim, rng), {1});
  const int n = in.length();
  ForwardTrace t = forward(p, in.embeddings, {causal_mask(n)}, true);
  REQUIRE(static_cast<int>(t.post_attention_states.size()) == cfg.num_layers);

  const double gelu_c = 0.7978845608028654;
  const double gelu_a = 0.044715;
  for (int l = 0; l < cfg.num_layers; ++l) {
    const Matrix& hp = t.post_attention_states[l];
    const LayerParams& lp = p.layers[l];
    Matrix normed(n, cfg.model_dim);
    for (int i = 0; i < n; ++i) {
      double ss = 0.0;
      for (int j = 0; j < cfg.model_dim; ++j) ss += hp(i, j) * hp(i, j);
      const double r = std::sqrt(ss / cfg.model_dim + 1e-8);
      for (int j = 0; j < cfg.model_dim; ++j) normed(i, j) = lp.ffn_norm_gain[j] * hp(i, j) / r;
    }
    Matrix pre = matmul(normed, lp.w1);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < cfg.ffn_dim; ++j) pre(i, j) += lp.b1[j];
    Matrix act(n, cfg.ffn_dim);
    for (size_t i = 0; i < pre.data.size(); ++i) {
      const double x = pre.data[i];
      const double u = gelu_c * (x + gelu_a * x * x * x);
      act.data[i] = 0.5 * x * (1.0 + std::tanh(u));
    }
    Matrix ffn_out = matmul(act, lp.w2);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < cfg.model_dim; ++j) ffn_out(i, j) += lp.b2[j];
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < cfg.model_dim; ++j)
        CHECK(t.hidden_states[l + 1](i, j) == hp(i, j) + ffn_out(i, j));
  }
}

TEST_CASE("generate_greedy forced argmax, tie-break, determinism") {
  ModelConfig cfg = tiny_config();
  Parameters p = Parameters::init(cfg, Rng(3));
  Rng rng(9);
  auto vis = random_features(2, cfg.feature_dim, rng);
  auto aud = random_features(2, cfg.feature_dim, rng);

  SUBCASE("unembedding bias forced high emits that token repeatedly") {
    p.unembed_bias[7] = 1e6;
    AssembledInput in = assemble_input(p, vis, aud, {1});
    GenerateResult g = generate_greedy(p, in, 4);
    CHECK(g.tokens == std::vector<int>{7, 7, 7, 7});
    CHECK(g.final_input.layout.generated_positions.size() == 4);
  }

  SUBCASE("ties break to the lowest token index") {
    Vec logits(8, 0.0);
    logits[3] = 5.0;
    logits[5] = 5.0;
    CHECK(argmax_lowest_index(logits) == 3);
  }

  SUBCASE("same input twice gives identical sequences") {
    AssembledInput in = assemble_input(p, vis, aud, {1});
    GenerateResult g1 = generate_greedy(p, in, 5);
    GenerateResult g2 = generate_greedy(p, in, 5);
    CHECK(g1.tokens == g2.tokens);
    CHECK(g1.trace.logits == g2.trace.logits);
  }

  SUBCASE("generation stops at eos") {
    p.unembed_bias[cfg.eos_token] = 1e6;
    AssembledInput in = assemble_input(p, vis, aud, {1});
    GenerateResult g = generate_greedy(p, in, 5);
    CHECK(g.tokens == std::vector<int>{cfg.eos_token});
  }
}

TEST_CASE("next_token_distribution equals softmax of final logits") {
  ModelConfig cfg = tiny_config();
  Parameters p = Parameters::init(cfg, Rng(3));
  Rng rng(10);
  AssembledInput in = assemble_input(p, random_features(2, cfg.feature_dim, rng),
                                     random_features(2, cfg.feature_dim, rng), {1});
  ProbVector dist = next_token_distribution(p, in);
  ForwardTrace t = forward(p, in.embeddings, {causal_mask(in.length())}, true);
  Vec last(t.logits.row(in.length() - 1), t.logits.row(in.length() - 1) + cfg.vocab_size);
  ProbVector expect = softmax(last);
  double sum = 0.0;
  for (size_t i = 0; i < dist.size(); ++i) {
    CHECK(dist[i] == expect[i]);
    sum += dist[i];
  }
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("analytic gradients match finite differences") {
  ModelConfig cfg = tiny_config();  // 2 layers, d_m=8, |V|=32
  Parameters p = Parameters::init(cfg, Rng(42));
  Rng rng(11);
  auto vis = random_features(2, cfg.feature_dim, rng);
  auto aud = random_features(2, cfg.feature_dim, rng);
  AssembledInput in = assemble_input(p, vis, aud, {1});
  append_generated_token(p, in, 9);
  append_generated_token(p, in, 17);
  const int n = in.length();
  std::vector<TargetSpec> targets{{n - 3, 9}, {n - 2, 17}, {n - 1, 0}};

  Parameters grads = Parameters::zeros_like(p);
  const double loss = loss_and_gradients(p, in, causal_mask(n), targets, grads);
  CHECK(std::isfinite(loss));

  std::vector<double*> scalars = p.scalars();
  std::vector<double*> gscalars = grads.scalars();
  // loss as a function of the flattened parameter vector
  auto f = [&](const Vec& x) {
    for (size_t i = 0; i < scalars.size(); ++i) *scalars[i] = x[i];
    Parameters scratch = Parameters::zeros_like(p);
    AssembledInput fresh = assemble_input(p, vis, aud, {1});
    append_generated_token(p, fresh, 9);
    append_generated_token(p, fresh, 17);
    return loss_and_gradients(p, fresh, causal_mask(n), targets, scratch);
  };
  Vec x0(scalars.size());
  for (size_t i = 0; i < scalars.size(); ++i) x0[i] = *scalars[i];

  // spot-check a deterministic stride of coordinates across all parameter
  // groups (full FD over every scalar runs in the acceptance suite)
  Rng pick(13);
  int checked = 0;
  for (size_t i = 0; i < scalars.size(); i += 37) {
    Vec xp = x0, xm = x0;
    const double eps = 1e-5;
    xp[i] += eps;
    xm[i] -= eps;
    const double fd = (f(xp) - f(xm)) / (2 * eps);
    const double an = *gscalars[i];
    const double denom = std::max({1.0, std::abs(fd), std::abs(an)});
    CHECK(std::abs(fd - an) / denom <= 1e-4);
    ++checked;
  }
  CHECK(checked > 50);
  // restore
  for (size_t i = 0; i < scalars.size(); ++i) *scalars[i] = x0[i];
}

TEST_CASE("overlength sequence rejected") {
  ModelConfig cfg = tiny_config();
  cfg.max_seq_len = 6;
  Parameters p = Parameters::init(cfg, Rng(3));
  Rng rng(12);
  CHECK_THROWS_AS(assemble_input(p, random_features(2, cfg.feature_dim, rng),
                                 random_features(2, cfg.feature_dim, rng), {1, 2, 3}),
                  ConfigError);
}
