#pragma once

#include <filesystem>

#include "json.hpp"

#include "bsa/training.hpp"

// Versioned JSON checkpoint holding a base forecaster, an optional attention
// module (parameters, carried momentum, flags) and free-form run metadata.
//
//   {
//     "format": "bsa-checkpoint", "version": 1,
//     "model": {"kind": "dlinear" | "rlinear", "lookback": L, "horizon": S,
//               "channels": N, "ma_window": w,
//               "parameters": [{"name": ..., "rows": r, "cols": c,
//                               "data": [column-major values]}, ...]},
//     "attention": null | {"factors": K, "features": D,
//                          "sa_matrix": {rows, cols, data},
//                          "raw_smoothing": [K values],
//                          "momentum": null | {rows, cols, data},
//                          "learn_smoothing": bool, "batched_bptt": bool,
//                          "sigma_idx": s},
//     "meta": {...}
//   }
//
// Doubles are written with round-trip precision.
namespace bsa {

inline constexpr int kCheckpointVersion = 1;

nlohmann::json pipeline_to_json(const Pipeline& pipeline, const nlohmann::json& meta = {});
Pipeline pipeline_from_json(const nlohmann::json& j);

void save_checkpoint(const std::filesystem::path& path, const Pipeline& pipeline,
                     const nlohmann::json& meta = {});

struct LoadedCheckpoint {
  Pipeline pipeline;
  nlohmann::json meta;
};
// Throws ParseError on malformed or mismatched content, IoError if unreadable.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace bsa
