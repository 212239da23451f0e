#include "xcvae/pipeline.hpp"

#include <cstdio>
#include <optional>

namespace xcvae {

Ablation parse_ablation(const std::string& name) {
  if (name == "full") return Ablation::full;
  if (name == "no-side") return Ablation::no_side;
  if (name == "no-cvae") return Ablation::no_cvae;
  throw ValidationError("unknown ablation '" + name + "' (full|no-side|no-cvae)");
}

std::string ablation_name(Ablation a) {
  switch (a) {
    case Ablation::full: return "full";
    case Ablation::no_side: return "no-side";
    case Ablation::no_cvae: return "no-cvae";
  }
  return "full";
}

bool uses_side_information(Ablation a) { return a == Ablation::full; }

CvaeTrainResult pretrain_cvae(const Dataset& ds, const RunConfig& cfg, bool use_side_information,
                              const EpochCallback& on_epoch) {
  CvaeTrainConfig hp = cfg.cvae.train;
  hp.use_side_information = use_side_information;
  return train_cvae(ds.split("train"), cfg.cvae_model(), hp, on_epoch);
}

ClassifierState initial_classifier(const RunConfig& cfg, Ablation ablation,
                                   const CvaeState* cvae) {
  if (ablation == Ablation::no_cvae) {
    return init_classifier(cfg.classifier_model(), cfg.classifier.train.seed);
  }
  if (!cvae) throw ValidationError("variant '" + ablation_name(ablation) + "' needs a CVAE checkpoint");
  return transfer_weights(*cvae, cfg.classifier_model(), cfg.classifier.train.seed);
}

ClassifierTrainResult fit_classifier(const Dataset& ds, const RunConfig& cfg, Ablation ablation,
                                     ClassifierState initial,
                                     const ClassifierEpochCallback& on_epoch) {
  ClassifierTrainConfig hp = cfg.classifier.train;
  hp.use_side_information = hp.use_side_information && uses_side_information(ablation);
  return train_classifier(ds.split("train"), ds.split("validation"), std::move(initial), hp,
                          on_epoch);
}

std::vector<double> score_volumes(const std::vector<const Volume*>& volumes,
                                  const ClassifierState& state, bool use_mask) {
  std::vector<double> out;
  out.reserve(volumes.size());
  for (const Volume* v : volumes) out.push_back(classify_volume(*v, state, use_mask).positive);
  return out;
}

std::vector<int> labels_of(const std::vector<const Volume*>& volumes) {
  std::vector<int> out;
  for (const Volume* v : volumes) out.push_back(v->label);
  return out;
}

std::vector<VariantResult> run_variants(const Dataset& ds, const RunConfig& cfg,
                                        const std::vector<Ablation>& variants, const LogFn& log) {
  auto say = [&](const std::string& s) {
    if (log) log(s);
  };
  std::optional<CvaeState> with_side, without_side;
  const auto test = ds.split("test");
  const auto labels = labels_of(test);
  std::vector<VariantResult> results;
  for (Ablation a : variants) {
    const CvaeState* cvae = nullptr;
    if (a == Ablation::full) {
      if (!with_side) {
        say("training CVAE with side information");
        with_side = pretrain_cvae(ds, cfg, true).state;
      }
      cvae = &*with_side;
    } else if (a == Ablation::no_side) {
      if (!without_side) {
        say("training CVAE without side information");
        without_side = pretrain_cvae(ds, cfg, false).state;
      }
      cvae = &*without_side;
    }
    say("training classifier (" + ablation_name(a) + ")");
    ClassifierTrainResult fit = fit_classifier(ds, cfg, a, initial_classifier(cfg, a, cvae));
    VariantResult r;
    r.ablation = a;
    r.best_epoch = fit.best_epoch;
    r.state = std::move(fit.state);
    const bool use_mask = cfg.classifier.train.use_side_information && uses_side_information(a);
    r.scores = score_volumes(test, r.state, use_mask);
    r.eval = evaluate_scores(r.scores, labels, cfg.metrics);
    results.push_back(std::move(r));
  }
  return results;
}

namespace {

nlohmann::json opt(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

}  // namespace

nlohmann::json eval_to_json(const EvalResult& r, bool include_curve) {
  const ConfusionMetrics& c = r.confusion;
  nlohmann::json j = {
      {"threshold", r.threshold},
      {"confusion",
       {{"tp", c.counts.tp}, {"tn", c.counts.tn}, {"fp", c.counts.fp}, {"fn", c.counts.fn}}},
      {"sensitivity", opt(c.sensitivity)},
      {"specificity", opt(c.specificity)},
      {"precision", opt(c.precision)},
      {"f1", opt(c.f1)},
      {"auc", r.auc},
      {"auc_ci", {r.auc_ci.low, r.auc_ci.high}},
      {"tpr_target", r.tpr_target},
      {"fpr_at_tpr", r.fpr_at_target.fpr},
      {"fpr_at_tpr_reached", r.fpr_at_target.reached},
      {"fpr_at_tpr_ci", {r.fpr_ci.low, r.fpr_ci.high}},
      {"ci_method", "stratified percentile bootstrap"},
  };
  if (include_curve) {
    nlohmann::json pts = nlohmann::json::array();
    for (const RocPoint& p : r.roc.points) pts.push_back({p.fpr, p.tpr});
    j["roc"] = pts;
  }
  return j;
}

}  // namespace xcvae
