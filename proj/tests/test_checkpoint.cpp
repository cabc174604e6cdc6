#include <cstdio>
#include <fstream>

#include "doctest.h"
#include "mlens/checkpoint.hpp"

using namespace mlens;

namespace {

ModelConfig demo_config() {
  ModelConfig cfg;
  cfg.num_layers = 2;
  cfg.num_heads = 2;
  cfg.model_dim = 8;
  cfg.ffn_dim = 16;
  cfg.vocab_size = 12;
  cfg.max_seq_len = 16;
  cfg.num_visual_slots = 2;
  cfg.num_audio_slots = 2;
  cfg.feature_dim = 4;
  return cfg;
}

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& name) : path("/tmp/mlens_test_" + name) {}
  ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("checkpoint round trip") {
  Parameters p = Parameters::init(demo_config(), Rng(71));
  TempFile f("roundtrip.ckpt");
  save_checkpoint(p, f.path);
  Parameters q = load_checkpoint(f.path);

  CHECK(q.config.num_layers == p.config.num_layers);
  CHECK(q.config.vocab_size == p.config.vocab_size);

  // repeated load -> bit identical parameters
  Parameters q2 = load_checkpoint(f.path);
  auto a = q.scalars();
  auto b = q2.scalars();
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(*a[i] == *b[i]);

  // values survive the f32 quantization within f32 precision
  auto orig = p.scalars();
  for (size_t i = 0; i < a.size(); ++i) CHECK(*a[i] == doctest::Approx(*orig[i]).epsilon(1e-6));

  // saving the loaded model reproduces the file byte for byte
  TempFile f2("roundtrip2.ckpt");
  save_checkpoint(q, f2.path);
  std::ifstream s1(f.path, std::ios::binary), s2(f2.path, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(s1)), {});
  std::string b2((std::istreambuf_iterator<char>(s2)), {});
  CHECK(b1 == b2);
}

TEST_CASE("loaded model forwards identically across loads") {
  Parameters p = Parameters::init(demo_config(), Rng(72));
  TempFile f("forward.ckpt");
  save_checkpoint(p, f.path);
  Parameters a = load_checkpoint(f.path);
  Parameters b = load_checkpoint(f.path);
  Rng rng(73);
  std::vector<Vec> vis, aud;
  for (int i = 0; i < 2; ++i) {
    Vec x(4), y(4);
    for (double& v : x) v = rng.gaussian();
    for (double& v : y) v = rng.gaussian();
    vis.push_back(x);
    aud.push_back(y);
  }
  AssembledInput ia = assemble_input(a, vis, aud, {1});
  AssembledInput ib = assemble_input(b, vis, aud, {1});
  ForwardTrace ta = forward(a, ia.embeddings, {causal_mask(ia.length())}, false);
  ForwardTrace tb = forward(b, ib.embeddings, {causal_mask(ib.length())}, false);
  CHECK(ta.logits == tb.logits);
}

TEST_CASE("corrupted checkpoints rejected") {
  Parameters p = Parameters::init(demo_config(), Rng(74));
  TempFile f("corrupt.ckpt");
  save_checkpoint(p, f.path);

  SUBCASE("bad magic") {
    std::fstream s(f.path, std::ios::in | std::ios::out | std::ios::binary);
    s.write("XXXX", 4);
    s.close();
    CHECK_THROWS_AS(load_checkpoint(f.path), ConfigError);
  }

  SUBCASE("bad version") {
    std::fstream s(f.path, std::ios::in | std::ios::out | std::ios::binary);
    s.seekp(4);
    const char bytes[4] = {9, 0, 0, 0};
    s.write(bytes, 4);
    s.close();
    CHECK_THROWS_AS(load_checkpoint(f.path), ConfigError);
  }

  SUBCASE("truncated payload") {
    std::ifstream in(f.path, std::ios::binary);
    std::string blob((std::istreambuf_iterator<char>(in)), {});
    in.close();
    std::ofstream out(f.path, std::ios::binary | std::ios::trunc);
    out.write(blob.data(), static_cast<std::streamsize>(blob.size() / 2));
    out.close();
    CHECK_THROWS_AS(load_checkpoint(f.path), ConfigError);
  }

  SUBCASE("missing file") { CHECK_THROWS_AS(load_checkpoint("/tmp/does_not_exist.ckpt"), ConfigError); }
}
