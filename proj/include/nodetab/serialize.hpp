#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include "nodetab/analysis.hpp"
#include "nodetab/model.hpp"

namespace nodetab {

// Model files open with a 6-byte magic; dense and compiled artifacts share
// the container format but carry different payloads.
inline constexpr std::string_view kModelMagic = "NODEv1";
inline constexpr std::string_view kCompiledMagic = "NODEc1";
inline constexpr std::uint32_t kModelFormatVersion = 1;

// FNV-1a 64-bit hash; used as the config tamper-detection digest.
std::uint64_t fnv1a(std::string_view bytes);

// All integers and IEEE-754 doubles are written little-endian, so files are
// byte-identical across platforms. Tensors serialize per layer in the order
// F, b raw, tau raw, R. save(load(f)) reproduces f byte for byte.
void save_model(const NodeModel& model, const std::string& path);
NodeModel load_model(const std::string& path);

void save_compiled(const CompiledModel& compiled, const std::string& path);
CompiledModel load_compiled(const std::string& path);

// Magic of an existing file ("NODEv1" or "NODEc1"); errors on anything else.
std::string peek_model_magic(const std::string& path);

// In-memory encodings (round-trip tests and digests).
std::string encode_model(const NodeModel& model);
NodeModel decode_model(std::string_view bytes);

}  // namespace nodetab
