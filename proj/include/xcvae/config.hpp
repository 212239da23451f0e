#pragma once

// Run configuration: one JSON document with per-command sections. Every
// default is the reference hyperparameter set; the slice size of the models is
// taken from the phantom section.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "xcvae/classifier.hpp"
#include "xcvae/cvae.hpp"
#include "xcvae/explain.hpp"
#include "xcvae/metrics.hpp"
#include "xcvae/phantom.hpp"

namespace xcvae {

struct PhantomSection {
  PhantomConfig generator;
  std::size_t volumes = 1000;
  SplitFractions splits;
};

struct CvaeSection {
  CvaeConfig model;  // encoder slice size is overwritten from the phantom section
  CvaeTrainConfig train;
};

struct ClassifierSection {
  ClassifierConfig model;
  ClassifierTrainConfig train;
};

struct ExplainSection {
  ExplainOptions options;
  /// Colour scale saturates at this quantile of |relevance|.
  double colormap_quantile = 0.99;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "runs";
  PhantomSection phantom;
  CvaeSection cvae;
  ClassifierSection classifier;
  ExplainSection explain;
  EvalConfig metrics;

  /// Model configs with the slice size filled in from the phantom section.
  CvaeConfig cvae_model() const;
  ClassifierConfig classifier_model() const;
  void validate() const;
};

nlohmann::json to_json(const RunConfig& cfg);
/// Throws ValidationError on unknown keys or wrongly typed values.
RunConfig config_from_json(const nlohmann::json& j);

RunConfig load_config(const std::string& path);
void save_config(const RunConfig& cfg, const std::string& path);

/// Applies "dotted.path=value" overrides. The value is parsed as JSON when
/// possible and taken as a string otherwise. The path must already exist.
RunConfig apply_overrides(const RunConfig& cfg, const std::vector<std::string>& assignments);

/// Sets the global seed and every per-section seed to `seed`.
RunConfig with_seed(RunConfig cfg, std::uint64_t seed);

/// Hex SHA-1 of the canonical JSON dump.
std::string config_hash(const RunConfig& cfg);

}  // namespace xcvae
