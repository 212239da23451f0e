#pragma once

// Two-stage training pipeline shared by the command-line tool and the
// end-to-end experiment: CVAE pre-training, weight transfer, classifier
// training and scoring.

#include <functional>
#include <string>
#include <vector>

#include "xcvae/classifier.hpp"
#include "xcvae/config.hpp"
#include "xcvae/cvae.hpp"
#include "xcvae/io.hpp"
#include "xcvae/metrics.hpp"

namespace xcvae {

/// full: CVAE with masks, transferred encoder, masks at classification.
/// no_side: CVAE and classifier both see all-ones masks.
/// no_cvae: randomly initialised encoder and all-ones masks.
enum class Ablation { full, no_side, no_cvae };

Ablation parse_ablation(const std::string& name);
std::string ablation_name(Ablation a);
bool uses_side_information(Ablation a);

CvaeTrainResult pretrain_cvae(const Dataset& ds, const RunConfig& cfg, bool use_side_information,
                              const EpochCallback& on_epoch = {});

/// Starting point of classifier training. `cvae` is required unless the
/// variant is no_cvae.
ClassifierState initial_classifier(const RunConfig& cfg, Ablation ablation,
                                   const CvaeState* cvae);

ClassifierTrainResult fit_classifier(const Dataset& ds, const RunConfig& cfg, Ablation ablation,
                                     ClassifierState initial,
                                     const ClassifierEpochCallback& on_epoch = {});

/// Positive-class probabilities, one per volume.
std::vector<double> score_volumes(const std::vector<const Volume*>& volumes,
                                  const ClassifierState& state, bool use_mask);
std::vector<int> labels_of(const std::vector<const Volume*>& volumes);

struct VariantResult {
  Ablation ablation = Ablation::full;
  EvalResult eval;
  std::vector<double> scores;
  ClassifierState state;
  int best_epoch = 0;
};

using LogFn = std::function<void(const std::string&)>;

/// Trains and evaluates the requested variants on the test split. The
/// side-information CVAE and the mask-free CVAE are each trained at most once.
std::vector<VariantResult> run_variants(const Dataset& ds, const RunConfig& cfg,
                                        const std::vector<Ablation>& variants,
                                        const LogFn& log = {});

nlohmann::json eval_to_json(const EvalResult& r, bool include_curve = false);

}  // namespace xcvae
