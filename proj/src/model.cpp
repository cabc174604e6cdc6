#include "mlens/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "json.hpp"

namespace mlens {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kRmsEps = 1e-8;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

double gelu(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_grad(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  const double t = std::tanh(u);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

// y_i = g_i * x_i / rms(x). Returns per-row rms for the backward pass.
void rmsnorm_rows(const Matrix& x, const Vec& gain, Matrix& y, Vec& rms) {
  const int d = x.cols;
  y = Matrix(x.rows, d);
  rms.assign(x.rows, 0.0);
  for (int i = 0; i < x.rows; ++i) {
    const double* xr = x.row(i);
    double ss = 0.0;
    for (int j = 0; j < d; ++j) ss += xr[j] * xr[j];
    const double r = std::sqrt(ss / d + kRmsEps);
    rms[i] = r;
    double* yr = y.row(i);
    for (int j = 0; j < d; ++j) yr[j] = gain[j] * xr[j] / r;
  }
}

// Given dL/dy, accumulates dL/dgain and returns dL/dx.
Matrix rmsnorm_backward(const Matrix& x, const Vec& gain, const Vec& rms, const Matrix& dy, Vec& dgain) {
  const int d = x.cols;
  Matrix dx(x.rows, d);
  for (int i = 0; i < x.rows; ++i) {
    const double* xr = x.row(i);
    const double* dyr = dy.row(i);
    double* dxr = dx.row(i);
    const double r = rms[i];
    double t = 0.0;
    for (int j = 0; j < d; ++j) {
      dgain[j] += dyr[j] * xr[j] / r;
      t += dyr[j] * gain[j] * xr[j];
    }
    const double scale = t / (d * r * r * r);
    for (int j = 0; j < d; ++j) dxr[j] = gain[j] * dyr[j] / r - xr[j] * scale;
  }
  return dx;
}

// Row-wise softmax honoring -inf mask entries.
void softmax_rows(Matrix& m) {
  for (int i = 0; i < m.rows; ++i) {
    double* r = m.row(i);
    double mx = kNegInf;
    for (int j = 0; j < m.cols; ++j) mx = std::max(mx, r[j]);
    if (mx == kNegInf) throw NumericError("attention row fully masked");
    double sum = 0.0;
    for (int j = 0; j < m.cols; ++j) {
      r[j] = (r[j] == kNegInf) ? 0.0 : std::exp(r[j] - mx);
      sum += r[j];
    }
    for (int j = 0; j < m.cols; ++j) r[j] /= sum;
  }
}

Matrix gaussian_matrix(int rows, int cols, double scale, Rng& rng) {
  Matrix m(rows, cols);
  for (double& v : m.data) v = scale * rng.gaussian();
  return m;
}

struct LayerCache {
  Matrix input;        // residual stream entering the layer
  Matrix attn_normed;  // rmsnorm(input)
  Vec attn_rms;
  Matrix q, k, v;                // n x d_m
  std::vector<Matrix> attn;      // per head, n x n
  Matrix head_concat;            // n x d_m
  Matrix post_attn;              // input + attention output
  Matrix ffn_normed;
  Vec ffn_rms;
  Matrix ffn_pre;   // n x ffn_dim, pre-activation
  Matrix ffn_act;   // gelu(ffn_pre)
};

struct FullCache {
  std::vector<LayerCache> layers;
  Matrix final_hidden;
  Matrix final_normed;
  Vec final_rms;
};

ForwardTrace forward_impl(const Parameters& params, const Matrix& embeddings, const std::vector<Matrix>& masks,
                          bool trace, FullCache* cache) {
  const ModelConfig& cfg = params.config;
  const int n = embeddings.rows;
  const int d = cfg.model_dim;
  const int heads = cfg.num_heads;
  const int dk = cfg.head_dim();
  if (n > cfg.max_seq_len) throw ConfigError("sequence exceeds max_seq_len");
  if (embeddings.cols != d) throw ConfigError("embedding width does not match model_dim");
  if (masks.empty()) throw ConfigError("at least one attention mask required");
  if (masks.size() != 1 && static_cast<int>(masks.size()) != cfg.num_layers)
    throw ConfigError("mask count must be 1 or num_layers");
  for (const Matrix& m : masks)
    if (m.rows != n || m.cols != n) throw ConfigError("mask shape mismatch");

  ForwardTrace out;
  if (trace) {
    out.hidden_states.reserve(cfg.num_layers + 1);
    out.hidden_states.push_back(embeddings);
    out.attention_weights.resize(cfg.num_layers);
  }
  if (cache) cache->layers.resize(cfg.num_layers);

  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
  Matrix h = embeddings;

  for (int l = 0; l < cfg.num_layers; ++l) {
    const LayerParams& lp = params.layers[l];
    const Matrix& mask = masks.size() == 1 ? masks[0] : masks[l];
    LayerCache* lc = cache ? &cache->layers[l] : nullptr;
    if (lc) lc->input = h;

    Matrix normed;
    Vec rms;
    rmsnorm_rows(h, lp.attn_norm_gain, normed, rms);

    Matrix q = matmul(normed, lp.wq);
    Matrix k = matmul(normed, lp.wk);
    Matrix v = matmul(normed, lp.wv);

    Matrix concat(n, d);
    std::vector<Matrix> head_attn(heads);
    for (int hd = 0; hd < heads; ++hd) {
      const int off = hd * dk;
      Matrix scores(n, n);
      for (int i = 0; i < n; ++i) {
        const double* qi = q.row(i) + off;
        const double* mrow = mask.row(i);
        double* srow = scores.row(i);
        for (int j = 0; j < n; ++j) {
          if (mrow[j] == kNegInf) {
            srow[j] = kNegInf;
            continue;
          }
          const double* kj = k.row(j) + off;
          double acc = 0.0;
          for (int c = 0; c < dk; ++c) acc += qi[c] * kj[c];
          srow[j] = acc * inv_sqrt_dk + mrow[j];
        }
      }
      softmax_rows(scores);
      for (int i = 0; i < n; ++i) {
        double* orow = concat.row(i) + off;
        const double* arow = scores.row(i);
        for (int j = 0; j < n; ++j) {
          const double a = arow[j];
          if (a == 0.0) continue;
          const double* vj = v.row(j) + off;
          for (int c = 0; c < dk; ++c) orow[c] += a * vj[c];
        }
      }
      head_attn[hd] = std::move(scores);
    }

    Matrix attn_out = matmul(concat, lp.wo);
    Matrix post_attn = h;
    add_inplace(post_attn, attn_out);

    Matrix ffn_normed;
    Vec ffn_rms;
    rmsnorm_rows(post_attn, lp.ffn_norm_gain, ffn_normed, ffn_rms);
    Matrix pre = matmul(ffn_normed, lp.w1);
    for (int i = 0; i < n; ++i) {
      double* r = pre.row(i);
      for (int j = 0; j < cfg.ffn_dim; ++j) r[j] += lp.b1[j];
    }
    Matrix act(n, cfg.ffn_dim);
    for (size_t i = 0; i < pre.data.size(); ++i) act.data[i] = gelu(pre.data[i]);
    Matrix ffn_out = matmul(act, lp.w2);
    for (int i = 0; i < n; ++i) {
      double* r = ffn_out.row(i);
      for (int j = 0; j < d; ++j) r[j] += lp.b2[j];
    }
    Matrix next = post_attn;
    add_inplace(next, ffn_out);

    if (trace) {
      out.attention_weights[l] = head_attn;
      out.post_attention_states.push_back(post_attn);
      out.hidden_states.push_back(next);
    }
    if (lc) {
      lc->attn_normed = std::move(normed);
      lc->attn_rms = std::move(rms);
      lc->q = std::move(q);
      lc->k = std::move(k);
      lc->v = std::move(v);
      lc->attn = std::move(head_attn);
      lc->head_concat = std::move(concat);
      lc->post_attn = post_attn;
      lc->ffn_normed = std::move(ffn_normed);
      lc->ffn_rms = std::move(ffn_rms);
      lc->ffn_pre = std::move(pre);
      lc->ffn_act = std::move(act);
    }
    h = std::move(next);
  }

  Matrix final_normed;
  Vec final_rms;
  rmsnorm_rows(h, params.final_norm_gain, final_normed, final_rms);
  out.logits = matmul_nt(final_normed, params.unembed);
  for (int i = 0; i < n; ++i) {
    double* r = out.logits.row(i);
    for (int j = 0; j < cfg.vocab_size; ++j) r[j] += params.unembed_bias[j];
  }
  if (cache) {
    cache->final_hidden = std::move(h);
    cache->final_normed = std::move(final_normed);
    cache->final_rms = std::move(final_rms);
  }
  return out;
}

}  // namespace

void ModelConfig::validate() const {
  if (num_layers < 1 || num_heads < 1 || model_dim < 1 || ffn_dim < 1 || vocab_size < 1 || max_seq_len < 1 ||
      feature_dim < 1)
    throw ConfigError("model config counts must be >= 1");
  if (num_visual_slots < 0 || num_audio_slots < 0) throw ConfigError("slot counts must be >= 0");
  if (model_dim % num_heads != 0) throw ConfigError("model_dim must be divisible by num_heads");
  if (max_seq_len < num_visual_slots + num_audio_slots + 2)
    throw ConfigError("max_seq_len too small for configured modality slots");
  if (eos_token < 0 || eos_token >= vocab_size) throw ConfigError("eos_token out of vocabulary");
}

std::string ModelConfig::to_json() const {
  nlohmann::json j{{"num_layers", num_layers},
                   {"num_heads", num_heads},
                   {"model_dim", model_dim},
                   {"ffn_dim", ffn_dim},
                   {"vocab_size", vocab_size},
                   {"max_seq_len", max_seq_len},
                   {"num_visual_slots", num_visual_slots},
                   {"num_audio_slots", num_audio_slots},
                   {"feature_dim", feature_dim},
                   {"eos_token", eos_token},
                   {"vision_only", vision_only}};
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed model config JSON: ") + e.what());
  }
  ModelConfig cfg;
  auto req = [&](const char* field) -> nlohmann::json {
    if (!j.contains(field)) throw ConfigError(std::string("model config missing field: ") + field);
    return j.at(field);
  };
  cfg.num_layers = req("num_layers").get<int>();
  cfg.num_heads = req("num_heads").get<int>();
  cfg.model_dim = req("model_dim").get<int>();
  cfg.ffn_dim = req("ffn_dim").get<int>();
  cfg.vocab_size = req("vocab_size").get<int>();
  cfg.max_seq_len = req("max_seq_len").get<int>();
  cfg.num_visual_slots = req("num_visual_slots").get<int>();
  cfg.num_audio_slots = req("num_audio_slots").get<int>();
  cfg.feature_dim = req("feature_dim").get<int>();
  cfg.eos_token = j.value("eos_token", 0);
  cfg.vision_only = j.value("vision_only", false);
  cfg.validate();
  return cfg;
}

Parameters Parameters::init(const ModelConfig& cfg, Rng rng) {
  cfg.validate();
  Parameters p;
  p.config = cfg;
  const double emb_scale = 0.02;
  const double proj_scale = 1.0 / std::sqrt(static_cast<double>(cfg.model_dim));
  p.tok_emb = gaussian_matrix(cfg.vocab_size, cfg.model_dim, emb_scale, rng);
  p.pos_emb = gaussian_matrix(cfg.max_seq_len, cfg.model_dim, emb_scale, rng);
  p.vis_proj = gaussian_matrix(cfg.feature_dim, cfg.model_dim, 1.0 / std::sqrt(static_cast<double>(cfg.feature_dim)), rng);
  p.aud_proj = gaussian_matrix(cfg.feature_dim, cfg.model_dim, 1.0 / std::sqrt(static_cast<double>(cfg.feature_dim)), rng);
  p.audio_null.resize(cfg.model_dim);
  for (double& v : p.audio_null) v = emb_scale * rng.gaussian();
  p.layers.resize(cfg.num_layers);
  for (LayerParams& lp : p.layers) {
    lp.attn_norm_gain.assign(cfg.model_dim, 1.0);
    lp.wq = gaussian_matrix(cfg.model_dim, cfg.model_dim, proj_scale, rng);
    lp.wk = gaussian_matrix(cfg.model_dim, cfg.model_dim, proj_scale, rng);
    lp.wv = gaussian_matrix(cfg.model_dim, cfg.model_dim, proj_scale, rng);
    lp.wo = gaussian_matrix(cfg.model_dim, cfg.model_dim, proj_scale / std::sqrt(2.0 * cfg.num_layers), rng);
    lp.ffn_norm_gain.assign(cfg.model_dim, 1.0);
    lp.w1 = gaussian_matrix(cfg.model_dim, cfg.ffn_dim, proj_scale, rng);
    lp.b1.assign(cfg.ffn_dim, 0.0);
    lp.w2 = gaussian_matrix(cfg.ffn_dim, cfg.model_dim,
                            1.0 / std::sqrt(static_cast<double>(cfg.ffn_dim)) / std::sqrt(2.0 * cfg.num_layers), rng);
    lp.b2.assign(cfg.model_dim, 0.0);
  }
  p.final_norm_gain.assign(cfg.model_dim, 1.0);
  p.unembed = gaussian_matrix(cfg.vocab_size, cfg.model_dim, proj_scale, rng);
  p.unembed_bias.assign(cfg.vocab_size, 0.0);
  return p;
}

Parameters Parameters::zeros_like(const Parameters& src) {
  Parameters p = src;
  for (double* s : p.scalars()) *s = 0.0;
  return p;
}

std::vector<double*> Parameters::scalars() {
  std::vector<double*> out;
  auto push_mat = [&](Matrix& m) {
    for (double& v : m.data) out.push_back(&v);
  };
  auto push_vec = [&](Vec& v) {
    for (double& x : v) out.push_back(&x);
  };
  push_mat(tok_emb);
  push_mat(pos_emb);
  push_mat(vis_proj);
  push_mat(aud_proj);
  push_vec(audio_null);
  for (LayerParams& lp : layers) {
    push_vec(lp.attn_norm_gain);
    push_mat(lp.wq);
    push_mat(lp.wk);
    push_mat(lp.wv);
    push_mat(lp.wo);
    push_vec(lp.ffn_norm_gain);
    push_mat(lp.w1);
    push_vec(lp.b1);
    push_mat(lp.w2);
    push_vec(lp.b2);
  }
  push_vec(final_norm_gain);
  push_mat(unembed);
  push_vec(unembed_bias);
  return out;
}

std::vector<const double*> Parameters::scalars() const {
  auto mut = const_cast<Parameters*>(this)->scalars();
  return std::vector<const double*>(mut.begin(), mut.end());
}

AssembledInput assemble_input(const Parameters& params, const std::vector<Vec>& visual_features,
                              const std::vector<Vec>& audio_features, const std::vector<int>& query_tokens) {
  const ModelConfig& cfg = params.config;
  if (static_cast<int>(visual_features.size()) != cfg.num_visual_slots)
    throw ConfigError("visual feature count does not match configured slots");
  if (static_cast<int>(audio_features.size()) != cfg.num_audio_slots)
    throw ConfigError("audio feature count does not match configured slots");
  if (query_tokens.empty()) throw ConfigError("query must be nonempty");
  const int n = cfg.num_visual_slots + cfg.num_audio_slots + static_cast<int>(query_tokens.size());
  if (n > cfg.max_seq_len) throw ConfigError("assembled input exceeds max_seq_len");

  AssembledInput out;
  out.embeddings = Matrix(n, cfg.model_dim);
  out.sources.resize(n);
  int pos = 0;
  auto project = [&](const Vec& feat, const Matrix& proj, double* dst) {
    if (static_cast<int>(feat.size()) != cfg.feature_dim) throw ConfigError("feature dimension mismatch");
    for (int f = 0; f < cfg.feature_dim; ++f) {
      const double x = feat[f];
      if (x == 0.0) continue;
      const double* prow = proj.row(f);
      for (int d = 0; d < cfg.model_dim; ++d) dst[d] += x * prow[d];
    }
  };
  for (const Vec& feat : visual_features) {
    project(feat, params.vis_proj, out.embeddings.row(pos));
    out.sources[pos] = {PositionSource::Kind::VisualFeature, -1, feat};
    out.layout.visual_positions.push_back(pos);
    ++pos;
  }
  for (const Vec& feat : audio_features) {
    if (cfg.vision_only) {
      double* dst = out.embeddings.row(pos);
      for (int d = 0; d < cfg.model_dim; ++d) dst[d] = params.audio_null[d];
      out.sources[pos] = {PositionSource::Kind::AudioNull, -1, {}};
    } else {
      project(feat, params.aud_proj, out.embeddings.row(pos));
      out.sources[pos] = {PositionSource::Kind::AudioFeature, -1, feat};
    }
    out.layout.audio_positions.push_back(pos);
    ++pos;
  }
  for (int tok : query_tokens) {
    if (tok < 0 || tok >= cfg.vocab_size) throw ConfigError("query token out of vocabulary");
    double* dst = out.embeddings.row(pos);
    const double* src = params.tok_emb.row(tok);
    for (int d = 0; d < cfg.model_dim; ++d) dst[d] = src[d];
    out.sources[pos] = {PositionSource::Kind::Token, tok, {}};
    out.layout.query_positions.push_back(pos);
    ++pos;
  }
  for (int i = 0; i < n; ++i) {
    double* dst = out.embeddings.row(i);
    const double* pe = params.pos_emb.row(i);
    for (int d = 0; d < cfg.model_dim; ++d) dst[d] += pe[d];
  }
  return out;
}

void append_generated_token(const Parameters& params, AssembledInput& input, int token) {
  const ModelConfig& cfg = params.config;
  if (token < 0 || token >= cfg.vocab_size) throw ConfigError("generated token out of vocabulary");
  const int pos = input.length();
  if (pos >= cfg.max_seq_len) throw ConfigError("sequence exceeds max_seq_len");
  Matrix grown(pos + 1, cfg.model_dim);
  std::copy(input.embeddings.data.begin(), input.embeddings.data.end(), grown.data.begin());
  double* dst = grown.row(pos);
  const double* src = params.tok_emb.row(token);
  const double* pe = params.pos_emb.row(pos);
  for (int d = 0; d < cfg.model_dim; ++d) dst[d] = src[d] + pe[d];
  input.embeddings = std::move(grown);
  input.sources.push_back({PositionSource::Kind::Token, token, {}});
  input.layout.generated_positions.push_back(pos);
}

Matrix causal_mask(int n) {
  if (n < 1) throw ConfigError("causal_mask needs n >= 1");
  Matrix m(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) m(i, j) = kNegInf;
  return m;
}

ForwardTrace forward(const Parameters& params, const Matrix& embeddings, const std::vector<Matrix>& masks,
                     bool trace) {
  return forward_impl(params, embeddings, masks, trace, nullptr);
}

int argmax_lowest_index(const Vec& v) {
  int best = 0;
  for (size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = static_cast<int>(i);
  return best;
}

GenerateResult generate_greedy(const Parameters& params, AssembledInput input, int max_new,
                               const std::function<std::vector<Matrix>(int, const SequenceLayout&)>& mask_builder) {
  if (max_new < 1) throw ConfigError("max_new must be >= 1");
  GenerateResult result;
  auto masks_for = [&](int n, const SequenceLayout& layout) {
    if (mask_builder) return mask_builder(n, layout);
    return std::vector<Matrix>{causal_mask(n)};
  };
  for (int step = 0; step < max_new; ++step) {
    const int n = input.length();
    ForwardTrace t = forward(params, input.embeddings, masks_for(n, input.layout), false);
    Vec last(t.logits.row(n - 1), t.logits.row(n - 1) + params.config.vocab_size);
    const int tok = argmax_lowest_index(last);
    result.tokens.push_back(tok);
    append_generated_token(params, input, tok);
    if (tok == params.config.eos_token) break;
  }
  result.trace = forward(params, input.embeddings, masks_for(input.length(), input.layout), true);
  result.final_input = std::move(input);
  return result;
}

ProbVector next_token_distribution(const Parameters& params, const AssembledInput& input) {
  if (input.length() == 0) throw ConfigError("empty context");
  ForwardTrace t = forward(params, input.embeddings, {causal_mask(input.length())}, false);
  const int n = input.length();
  Vec last(t.logits.row(n - 1), t.logits.row(n - 1) + params.config.vocab_size);
  return softmax(last);
}

double loss_and_gradients(const Parameters& params, const AssembledInput& input, const Matrix& mask,
                          const std::vector<TargetSpec>& targets, Parameters& grads) {
  const ModelConfig& cfg = params.config;
  if (targets.empty()) throw ConfigError("no training targets");
  const int n = input.length();
  const int d = cfg.model_dim;
  const int heads = cfg.num_heads;
  const int dk = cfg.head_dim();
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));

  FullCache cache;
  ForwardTrace t = forward_impl(params, input.embeddings, {mask}, false, &cache);

  // Mean cross-entropy over target positions; dlogits = (p - onehot)/m.
  const double inv_m = 1.0 / static_cast<double>(targets.size());
  double loss = 0.0;
  Matrix dlogits(n, cfg.vocab_size);
  for (const TargetSpec& ts : targets) {
    if (ts.position < 0 || ts.position >= n) throw ConfigError("target position out of range");
    if (ts.target < 0 || ts.target >= cfg.vocab_size) throw ConfigError("target token out of range");
    Vec row(t.logits.row(ts.position), t.logits.row(ts.position) + cfg.vocab_size);
    loss += cross_entropy_loss(row, ts.target) * inv_m;
    ProbVector p = softmax(row);
    double* dr = dlogits.row(ts.position);
    for (int v = 0; v < cfg.vocab_size; ++v) dr[v] += (p[static_cast<size_t>(v)] - (v == ts.target ? 1.0 : 0.0)) * inv_m;
  }
  if (!std::isfinite(loss)) throw NumericError("non-finite training loss");

  // Unembedding: logits = final_normed * W_U^T + b
  {
    Matrix dwu = matmul_tn(dlogits, cache.final_normed);  // V x d
    add_inplace(grads.unembed, dwu);
    for (int i = 0; i < n; ++i) {
      const double* dr = dlogits.row(i);
      for (int v = 0; v < cfg.vocab_size; ++v) grads.unembed_bias[v] += dr[v];
    }
  }
  Matrix dnormed = matmul(dlogits, params.unembed);  // n x d
  Matrix dh = rmsnorm_backward(cache.final_hidden, params.final_norm_gain, cache.final_rms, dnormed,
                               grads.final_norm_gain);

  for (int l = cfg.num_layers - 1; l >= 0; --l) {
    const LayerParams& lp = params.layers[l];
    LayerParams& gl = grads.layers[l];
    const LayerCache& lc = cache.layers[l];

    // FFN sublayer: next = post_attn + (gelu(norm(post_attn) W1 + b1) W2 + b2)
    Matrix dffn_out = dh;  // residual passes dh through unchanged
    Matrix dact = matmul_nt(dffn_out, lp.w2);
    {
      Matrix dw2 = matmul_tn(lc.ffn_act, dffn_out);
      add_inplace(gl.w2, dw2);
      for (int i = 0; i < n; ++i) {
        const double* r = dffn_out.row(i);
        for (int j = 0; j < d; ++j) gl.b2[j] += r[j];
      }
    }
    Matrix dpre(n, cfg.ffn_dim);
    for (size_t i = 0; i < dpre.data.size(); ++i) dpre.data[i] = dact.data[i] * gelu_grad(lc.ffn_pre.data[i]);
    {
      Matrix dw1 = matmul_tn(lc.ffn_normed, dpre);
      add_inplace(gl.w1, dw1);
      for (int i = 0; i < n; ++i) {
        const double* r = dpre.row(i);
        for (int j = 0; j < cfg.ffn_dim; ++j) gl.b1[j] += r[j];
      }
    }
    Matrix dffn_normed = matmul_nt(dpre, lp.w1);
    Matrix dpost_partial = rmsnorm_backward(lc.post_attn, lp.ffn_norm_gain, lc.ffn_rms, dffn_normed, gl.ffn_norm_gain);
    Matrix dpost = dh;
    add_inplace(dpost, dpost_partial);

    // Attention sublayer: post_attn = input + concat(heads) Wo
    Matrix dconcat = matmul_nt(dpost, lp.wo);
    {
      Matrix dwo = matmul_tn(lc.head_concat, dpost);
      add_inplace(gl.wo, dwo);
    }
    Matrix dq(n, d), dkm(n, d), dv(n, d);
    for (int hd = 0; hd < heads; ++hd) {
      const int off = hd * dk;
      const Matrix& a = lc.attn[hd];
      // dA = dO_h V_h^T ; dV_h = A^T dO_h
      Matrix da(n, n);
      for (int i = 0; i < n; ++i) {
        const double* doi = dconcat.row(i) + off;
        double* dai = da.row(i);
        const double* arow = a.row(i);
        for (int j = 0; j < n; ++j) {
          if (arow[j] == 0.0 && j > i) continue;  // masked entries carry no gradient
          const double* vj = lc.v.row(j) + off;
          double acc = 0.0;
          for (int c = 0; c < dk; ++c) acc += doi[c] * vj[c];
          dai[j] = acc;
        }
      }
      for (int j = 0; j < n; ++j) {
        double* dvj = dv.row(j) + off;
        for (int i = 0; i < n; ++i) {
          const double aij = a(i, j);
          if (aij == 0.0) continue;
          const double* doi = dconcat.row(i) + off;
          for (int c = 0; c < dk; ++c) dvj[c] += aij * doi[c];
        }
      }
      // softmax backward per row: dS_ij = A_ij (dA_ij - sum_k dA_ik A_ik)
      Matrix ds(n, n);
      for (int i = 0; i < n; ++i) {
        const double* arow = a.row(i);
        const double* darow = da.row(i);
        double dot = 0.0;
        for (int j = 0; j < n; ++j) dot += darow[j] * arow[j];
        double* dsrow = ds.row(i);
        for (int j = 0; j < n; ++j) dsrow[j] = arow[j] * (darow[j] - dot);
      }
      // dQ_h = dS K_h / sqrt(dk); dK_h = dS^T Q_h / sqrt(dk)
      for (int i = 0; i < n; ++i) {
        double* dqi = dq.row(i) + off;
        const double* dsrow = ds.row(i);
        for (int j = 0; j < n; ++j) {
          const double s = dsrow[j] * inv_sqrt_dk;
          if (s == 0.0) continue;
          const double* kj = lc.k.row(j) + off;
          double* dkj = dkm.row(j) + off;
          const double* qi = lc.q.row(i) + off;
          for (int c = 0; c < dk; ++c) {
            dqi[c] += s * kj[c];
            dkj[c] += s * qi[c];
          }
        }
      }
    }
    Matrix dnormed_attn = matmul_nt(dq, lp.wq);
    {
      Matrix tmp = matmul_nt(dkm, lp.wk);
      add_inplace(dnormed_attn, tmp);
      tmp = matmul_nt(dv, lp.wv);
      add_inplace(dnormed_attn, tmp);
      Matrix dwq = matmul_tn(lc.attn_normed, dq);
      add_inplace(gl.wq, dwq);
      Matrix dwk = matmul_tn(lc.attn_normed, dkm);
      add_inplace(gl.wk, dwk);
      Matrix dwv = matmul_tn(lc.attn_normed, dv);
      add_inplace(gl.wv, dwv);
    }
    Matrix dinput_partial =
        rmsnorm_backward(lc.input, lp.attn_norm_gain, lc.attn_rms, dnormed_attn, gl.attn_norm_gain);
    dh = dpost;
    add_inplace(dh, dinput_partial);
  }

  // Embedding assembly gradients.
  for (int i = 0; i < n; ++i) {
    const double* de = dh.row(i);
    double* pe = grads.pos_emb.row(i);
    for (int c = 0; c < d; ++c) pe[c] += de[c];
    const PositionSource& src = input.sources[i];
    switch (src.kind) {
      case PositionSource::Kind::Token: {
        double* te = grads.tok_emb.row(src.token);
        for (int c = 0; c < d; ++c) te[c] += de[c];
        break;
      }
      case PositionSource::Kind::VisualFeature:
        for (int f = 0; f < cfg.feature_dim; ++f) {
          double* pr = grads.vis_proj.row(f);
          const double x = src.feature[f];
          for (int c = 0; c < d; ++c) pr[c] += x * de[c];
        }
        break;
      case PositionSource::Kind::AudioFeature:
        for (int f = 0; f < cfg.feature_dim; ++f) {
          double* pr = grads.aud_proj.row(f);
          const double x = src.feature[f];
          for (int c = 0; c < d; ++c) pr[c] += x * de[c];
        }
        break;
      case PositionSource::Kind::AudioNull:
        for (int c = 0; c < d; ++c) grads.audio_null[c] += de[c];
        break;
    }
  }
  return loss;
}

}  // namespace mlens
