#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "peftkit/model.hpp"
#include "peftkit/peft.hpp"

namespace peftkit {

inline constexpr const char* kToolVersion = "peftkit 0.1.0";
inline constexpr int kCheckpointFormatVersion = 1;

// CRC-64/XZ (reflected ECMA-182 polynomial). Corruption detection only.
class Crc64 {
  public:
    void update(const void* data, size_t len);
    void update(std::string_view bytes) { update(bytes.data(), bytes.size()); }
    uint64_t value() const { return ~crc_; }

  private:
    uint64_t crc_ = ~0ULL;
};

uint64_t crc64(std::string_view bytes);
uint64_t file_crc64(const std::filesystem::path& path);
std::string crc64_hex(uint64_t value);

// Binary tensor layout: rank then dims as little-endian u64, then the
// row-major payload as little-endian f32.
std::string serialize_tensor(const Tensor& t);
Tensor deserialize_tensor(std::string_view bytes);

// Quantized layout: rows, cols, block_size as little-endian u64, then the
// packed nibble codes, then the block scales as little-endian f32.
std::string serialize_q4(const QuantizedMatrix& q);
QuantizedMatrix deserialize_q4(std::string_view bytes);

/// A checkpoint is a directory holding manifest.json plus one weights.bin
/// blob of concatenated tensor records. Every manifest entry carries the
/// CRC-64 of its byte range; loading verifies them, and a load/save round
/// trip reproduces both files byte for byte.
void save_model_checkpoint(const std::filesystem::path& dir, const TransformerModel& model,
                           bool force = true);
TransformerModel load_model_checkpoint(const std::filesystem::path& dir);

void save_adapter_checkpoint(const std::filesystem::path& dir, const PeftSet& peft,
                             bool force = true);
PeftSet load_adapter_checkpoint(const std::filesystem::path& dir);

bool checkpoint_exists(const std::filesystem::path& dir);
std::string checkpoint_kind(const std::filesystem::path& dir);  // "model" | "adapter"

// CRC-64 over the canonical serialization of all base tensors (dense bits
// and quantized codes/scales alike). The frozen-base contract is checked
// by comparing this before and after training.
uint64_t model_checksum(const TransformerModel& model);
uint64_t peft_checksum(const PeftSet& peft);

/// Enough to re-run a command deterministically: the command, its fully
/// resolved configuration, the seed, the tool version and digests of every
/// input file. Written as run.json next to each command's output.
struct RunManifest {
    std::string command;
    nlohmann::json config;
    uint64_t seed = 0;
    std::vector<std::pair<std::string, uint64_t>> input_digests;
    int64_t started_unix_ms = 0;
    int64_t finished_unix_ms = 0;

    nlohmann::json to_json() const;
};

void write_run_manifest(const std::filesystem::path& path, const RunManifest& manifest);

}  // namespace peftkit
