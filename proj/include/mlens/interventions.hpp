#pragma once

#include <functional>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "mlens/model.hpp"

namespace mlens {

// Position-set selector: a modality tag resolved against a layout, or
// literal positions.
using PositionSelector = std::variant<std::string, std::vector<int>>;

// Resolves "visual" / "audio" / "query" / "generated" or literal positions.
// Throws ConfigError when the resolved set is empty.
std::vector<int> resolve_selector(const PositionSelector& sel, const SequenceLayout& layout);

// The T-cannot-attend-to-S attention intervention over a window of layers.
struct KnockoutSpec {
  PositionSelector source;  // S: positions being hidden
  PositionSelector target;  // T: positions whose attention is blocked
  int center = 0;           // window center layer
  int width = 9;            // window width in layers

  std::string to_json() const;
  static KnockoutSpec from_json(const std::string& text);
};

// The `width` consecutive layers centered at `center`, clipped to [0, L-1].
std::vector<int> resolve_window(int center, int width, int num_layers);

// Returns the mask with entries (t, s) set to -inf for t in T, s in S when
// `layer` is inside the spec's window; otherwise returns the mask unchanged.
Matrix apply_knockout(const Matrix& mask, const KnockoutSpec& spec, int layer, const SequenceLayout& layout);

// Per-layer masks for a knockout run: causal mask plus the intervention at
// windowed layers. When the spec targets "generated", newly emitted tokens
// join T as they are produced (the layout passed in grows during decoding).
std::vector<Matrix> knockout_masks(int n, const SequenceLayout& layout, const KnockoutSpec& spec, int num_layers);

// Greedy decoding with the knockout applied at every step.
GenerateResult knockout_generate(const Parameters& params, AssembledInput input, const KnockoutSpec& spec,
                                 int max_new);

struct SweepResult {
  double baseline = 0.0;
  std::vector<double> per_center;  // index = window center layer
};

// Windowed layer sweep: for each center layer 0..L-1 the spec template is
// re-centered and the per-sample metric is averaged over the slice; the
// un-intervened baseline is recorded alongside. Work parallelizes over
// (center, sample) pairs; reduction order is fixed.
SweepResult knockout_sweep(const KnockoutSpec& spec_template, int num_layers, int num_samples,
                           const std::function<double(int sample, const std::optional<KnockoutSpec>&)>& metric,
                           int threads = 1);

}  // namespace mlens
