#include "mlens/interventions.hpp"

#include <algorithm>
#include <limits>

#include "json.hpp"
#include "mlens/parallel.hpp"

namespace mlens {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
}

std::vector<int> resolve_selector(const PositionSelector& sel, const SequenceLayout& layout) {
  std::vector<int> out;
  if (const auto* tag = std::get_if<std::string>(&sel)) {
    if (*tag == "visual")
      out = layout.visual_positions;
    else if (*tag == "audio")
      out = layout.audio_positions;
    else if (*tag == "query")
      out = layout.query_positions;
    else if (*tag == "generated")
      out = layout.generated_positions;
    else
      throw ConfigError("unknown position selector tag: " + *tag);
    if (out.empty()) throw ConfigError("selector '" + *tag + "' resolves to an empty position set");
  } else {
    out = std::get<std::vector<int>>(sel);
    if (out.empty()) throw ConfigError("literal position selector is empty");
    const int n = layout.total();
    for (int p : out)
      if (p < 0 || p >= n) throw ConfigError("selector position out of range");
  }
  return out;
}

std::vector<int> resolve_window(int center, int width, int num_layers) {
  if (width < 1) throw ConfigError("window width must be >= 1");
  if (center < 0 || center >= num_layers) throw ConfigError("window center outside model depth");
  const int lo = std::max(0, center - (width - 1) / 2);
  const int hi = std::min(num_layers - 1, center + width / 2);
  std::vector<int> out;
  for (int l = lo; l <= hi; ++l) out.push_back(l);
  return out;
}

std::string KnockoutSpec::to_json() const {
  nlohmann::json j;
  auto sel = [](const PositionSelector& s) -> nlohmann::json {
    if (const auto* tag = std::get_if<std::string>(&s)) return *tag;
    return std::get<std::vector<int>>(s);
  };
  j["source"] = sel(source);
  j["target"] = sel(target);
  j["center"] = center;
  j["width"] = width;
  return j.dump();
}

KnockoutSpec KnockoutSpec::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed knockout spec JSON: ") + e.what());
  }
  auto sel = [](const nlohmann::json& v, const char* field) -> PositionSelector {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_array()) return v.get<std::vector<int>>();
    throw ConfigError(std::string("knockout spec field must be a tag or position list: ") + field);
  };
  KnockoutSpec spec;
  if (!j.contains("source")) throw ConfigError("knockout spec missing field: source");
  if (!j.contains("target")) throw ConfigError("knockout spec missing field: target");
  spec.source = sel(j.at("source"), "source");
  spec.target = sel(j.at("target"), "target");
  spec.center = j.value("center", 0);
  spec.width = j.value("width", 9);
  if (spec.width < 1) throw ConfigError("knockout spec width must be >= 1");
  return spec;
}

Matrix apply_knockout(const Matrix& mask, const KnockoutSpec& spec, int layer, const SequenceLayout& layout) {
  // Window membership from center/width alone; the upper depth clip is the
  // caller's responsibility (knockout_masks checks against model depth).
  if (layer < 0) throw ConfigError("layer index must be >= 0");
  const int lo = std::max(0, spec.center - (spec.width - 1) / 2);
  const int hi = spec.center + spec.width / 2;
  if (layer < lo || layer > hi) return mask;
  const std::vector<int> src = resolve_selector(spec.source, layout);
  const std::vector<int> tgt = resolve_selector(spec.target, layout);
  for (int t : tgt)
    for (int s : src)
      if (t == s) throw ConfigError("knockout source and target sets must be disjoint");
  Matrix out = mask;
  for (int t : tgt)
    for (int s : src) out(t, s) = kNegInf;
  return out;
}

std::vector<Matrix> knockout_masks(int n, const SequenceLayout& layout, const KnockoutSpec& spec, int num_layers) {
  const std::vector<int> window = resolve_window(spec.center, spec.width, num_layers);
  const Matrix base = causal_mask(n);
  std::vector<Matrix> masks(static_cast<size_t>(num_layers), base);
  // Skip the intervention while T is still empty during decoding of the
  // first token ("generated" targets only exist once a token is emitted).
  const auto* tag = std::get_if<std::string>(&spec.target);
  if (tag && *tag == "generated" && layout.generated_positions.empty()) return masks;
  for (int l : window) masks[static_cast<size_t>(l)] = apply_knockout(base, spec, l, layout);
  return masks;
}

GenerateResult knockout_generate(const Parameters& params, AssembledInput input, const KnockoutSpec& spec,
                                 int max_new) {
  const int L = params.config.num_layers;
  // validate eagerly: window within depth, selectors resolvable
  resolve_window(spec.center, spec.width, L);
  resolve_selector(spec.source, input.layout);
  auto builder = [&params, &spec, L](int n, const SequenceLayout& layout) {
    return knockout_masks(n, layout, spec, L);
  };
  return generate_greedy(params, std::move(input), max_new, builder);
}

SweepResult knockout_sweep(const KnockoutSpec& spec_template, int num_layers, int num_samples,
                           const std::function<double(int, const std::optional<KnockoutSpec>&)>& metric,
                           int threads) {
  if (num_samples < 1) throw ConfigError("knockout_sweep needs at least one sample");
  SweepResult result;
  // job 0..num_samples-1: baseline; afterwards (center, sample) pairs
  const int total = num_samples * (num_layers + 1);
  std::vector<double> cells(static_cast<size_t>(total));
  parallel_for(total, threads, [&](int job) {
    const int center = job / num_samples - 1;
    const int sample = job % num_samples;
    std::optional<KnockoutSpec> spec;
    if (center >= 0) {
      spec = spec_template;
      spec->center = center;
    }
    try {
      cells[static_cast<size_t>(job)] = metric(sample, spec);
    } catch (const Error& e) {
      throw Error("sample " + std::to_string(sample) + ": " + e.what());
    }
  });
  auto mean_over = [&](int center) {
    double acc = 0.0;
    for (int s = 0; s < num_samples; ++s) acc += cells[static_cast<size_t>((center + 1) * num_samples + s)];
    return acc / num_samples;
  };
  result.baseline = mean_over(-1);
  result.per_center.resize(static_cast<size_t>(num_layers));
  for (int c = 0; c < num_layers; ++c) result.per_center[static_cast<size_t>(c)] = mean_over(c);
  return result;
}

}  // namespace mlens
