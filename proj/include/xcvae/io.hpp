#pragma once

// On-disk artifacts: NPZ archives of float64 arrays with a JSON metadata
// entry, model checkpoints, phantom datasets and run manifests.

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "xcvae/classifier.hpp"
#include "xcvae/config.hpp"
#include "xcvae/cvae.hpp"
#include "xcvae/phantom.hpp"
#include "xcvae/tensor.hpp"

namespace xcvae {

std::string read_file(const std::string& path);
/// Writes through a temporary file and renames it into place.
void write_file(const std::string& path, std::string_view bytes);

std::string sha1_hex(std::string_view bytes);
/// SHA-1 of "blob <size>\0<bytes>", the hash git assigns to file contents.
std::string git_blob_hash(std::string_view bytes);
std::string file_git_hash(const std::string& path);

// ---------------------------------------------------------------------------
// NPZ

inline constexpr const char* kMetadataEntry = "__metadata__.json";

struct Archive {
  std::map<std::string, Tensor> arrays;
  nlohmann::json metadata = nlohmann::json::object();
};

/// Uncompressed zip of "<name>.npy" members plus the metadata entry. Output is
/// byte-identical for identical archives.
std::string encode_npz(const Archive& archive);
/// Accepts stored and deflated members; integer, bool and float32 arrays are
/// widened to double.
Archive decode_npz(std::string_view bytes);

void save_npz(const std::string& path, const Archive& archive);
Archive load_npz(const std::string& path);

std::string encode_npy(const Tensor& t);
Tensor decode_npy(std::string_view bytes, const std::string& name = "array");

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr int kCheckpointSchema = 1;

struct CheckpointInfo {
  std::string module;  // "cvae" or "classifier"
  RunConfig config;
  int epoch = 0;
  nlohmann::json metrics = nlohmann::json::object();
  /// Classifier only: whether the side branch saw real masks.
  bool use_side_information = true;
  std::string ablation = "full";
};

void save_checkpoint(const std::string& path, const CvaeState& state, const CheckpointInfo& info);
void save_checkpoint(const std::string& path, const ClassifierState& state,
                     const CheckpointInfo& info);

/// Both loaders check schema_version and module and throw ValidationError on a
/// mismatch, a missing array or a shape difference.
std::pair<CvaeState, CheckpointInfo> load_cvae_checkpoint(const std::string& path);
std::pair<ClassifierState, CheckpointInfo> load_classifier_checkpoint(const std::string& path);

/// Checkpoint info from an archive's metadata without building the model.
CheckpointInfo read_checkpoint_info(const Archive& archive);

// ---------------------------------------------------------------------------
// Datasets

struct Dataset {
  RunConfig config;
  std::vector<Volume> volumes;
  Splits splits;

  std::vector<const Volume*> split(const std::string& name) const;
  /// Index of the volume with this id; throws ValidationError if unknown.
  std::size_t find(const std::string& id) const;
};

/// Dataset index: config, volume order, split membership and class counts.
inline constexpr const char* kDatasetFile = "dataset.json";

/// Generates volumes and splits from the config's phantom section.
Dataset build_dataset(const RunConfig& cfg);
/// Layout: <dir>/dataset.json plus <dir>/volumes/<id>/{volume.npz,meta.json}.
void save_dataset(const std::string& dir, const Dataset& ds);
Dataset load_dataset(const std::string& dir);
/// Every file written by save_dataset, index first.
std::vector<std::string> dataset_files(const std::string& dir, const Dataset& ds);

// ---------------------------------------------------------------------------
// Manifests

struct Manifest {
  std::string command;
  nlohmann::json config;
  std::uint64_t seed = 0;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  double wall_time_s = 0.0;
};

/// Writes manifest.json into `dir` with git-style hashes of every listed file.
void write_manifest(const std::string& dir, const Manifest& m);

}  // namespace xcvae
