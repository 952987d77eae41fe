#pragma once

// "ILMC" named-array container: magic, u32 version, metadata strings, array
// directory (name, dims, payload offset/count), float32 little-endian payload.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ilm/nn.hpp"

namespace ilm {

constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  std::vector<std::pair<std::string, std::string>> metadata;
  std::vector<NamedArray> arrays;

  void set_meta(const std::string& key, const std::string& value);
  std::optional<std::string> meta(const std::string& key) const;
  const NamedArray& array(const std::string& name) const;
  bool has_array(const std::string& name) const;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);

// Writes through a temporary file and renames it into place.
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::filesystem::path& path);
std::string read_file(const std::filesystem::path& path);
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);

void add_arrays(Checkpoint& ckpt, const nn::NamedTensors& tensors);
// Copies stored values into existing parameters; names and shapes must match.
void load_arrays(const Checkpoint& ckpt, const nn::NamedTensors& tensors);

Tensor array_to_tensor(const NamedArray& array, bool requires_grad = false);

// Hash of the exact in-memory parameter values (names, shapes, doubles).
std::string parameter_checksum(const nn::NamedTensors& tensors);

}  // namespace ilm
