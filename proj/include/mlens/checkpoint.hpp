#pragma once

#include <string>

#include "mlens/model.hpp"

namespace mlens {

// Binary checkpoint format:
//   bytes 0..3   magic "MLNS"
//   u32 LE       format version (currently 1)
//   u32 LE       length of UTF-8 JSON ModelConfig block
//   ...          config JSON
//   f32 LE blob  parameters, in Parameters::scalars() order:
//                token embeddings, position embeddings, visual projection,
//                audio projection, audio null vector, per-layer blocks
//                (attn norm gain, W_Q, W_K, W_V, W_O, ffn norm gain,
//                 W1, b1, W2, b2), final norm gain, unembedding, bias.
inline constexpr uint32_t kCheckpointVersion = 1;

void save_checkpoint(const Parameters& params, const std::string& path);

// Throws ConfigError on bad magic, version, or truncated payload.
Parameters load_checkpoint(const std::string& path);

}  // namespace mlens
