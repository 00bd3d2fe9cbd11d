#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "ctrlnerf/discriminator.hpp"
#include "ctrlnerf/field.hpp"

namespace ctrlnerf {

// On-disk model container: the 8-byte magic "CNRF0001" and a newline, then
// `key=value` header lines (UTF-8, LF). Each `tensor=<name>:<d0>x<d1>...`
// line declares one payload array; payload arrays are raw little-endian
// 32-bit floats concatenated in declaration order after a blank line. The
// declared length must equal the file remainder exactly, and load -> save is
// byte-identical.

struct Checkpoint {
  struct TensorEntry {
    std::string name;
    std::vector<int> shape;
    std::vector<float> data;
  };

  std::vector<std::pair<std::string, std::string>> meta;  // file order
  std::vector<TensorEntry> tensors;                       // payload order

  const std::string* find_meta(const std::string& key) const;
  const TensorEntry* find_tensor(const std::string& name) const;

  // Typed meta accessors; throw IoError when the key is missing or malformed.
  std::string meta_str(const std::string& key) const;
  long meta_int(const std::string& key) const;
  double meta_double(const std::string& key) const;
};

inline constexpr char kCheckpointMagic[] = "CNRF0001";

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// --- model adapters ----------------------------------------------------------

Checkpoint checkpoint_from_field(const ConditionalField& field, const FieldConfig& cfg,
                                 std::uint64_t seed, long iteration);
std::pair<FieldConfig, ConditionalField> field_from_checkpoint(const Checkpoint& ckpt);

Checkpoint checkpoint_from_classifier(const AuxClassifier& clf, std::uint64_t seed,
                                      long iteration);
AuxClassifier classifier_from_checkpoint(const Checkpoint& ckpt);

Checkpoint checkpoint_from_discriminator(const PatchDiscriminator& d, std::uint64_t seed,
                                         long iteration);
PatchDiscriminator discriminator_from_checkpoint(const Checkpoint& ckpt);

}  // namespace ctrlnerf
