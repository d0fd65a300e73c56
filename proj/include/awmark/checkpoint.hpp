#ifndef AWMARK_CHECKPOINT_HPP
#define AWMARK_CHECKPOINT_HPP

#include <string>

#include "awmark/nn.hpp"

namespace awmark {

/// Checkpoint directory layout shared by every model in this project:
/// `manifest.json` (format version, dtype, tensor names/shapes, config echo)
/// plus one raw little-endian float64 file per tensor, file name equal to the
/// tensor name. Round-trips are bit-exact.
inline constexpr int kCheckpointFormatVersion = 1;

void save_checkpoint(const std::string& dir, const ParamSet& params,
                     const std::string& config_json);

/// Loads tensors into a fresh ParamSet and returns the stored config echo.
ParamSet load_checkpoint(const std::string& dir, std::string* config_json_out = nullptr);

/// FNV-1a 64-bit of a file's bytes, hex-encoded; used for artifact hashes.
std::string file_hash_hex(const std::string& path);

}  // namespace awmark

#endif
