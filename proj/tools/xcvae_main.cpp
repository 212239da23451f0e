// Command-line front end: generate, train-cvae, train-classifier, evaluate,
// explain, config. Exit codes: 0 success, 1 invalid input, 2 runtime failure.

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "xcvae/config.hpp"
#include "xcvae/explain.hpp"
#include "xcvae/image.hpp"
#include "xcvae/io.hpp"
#include "xcvae/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace xcvae;

namespace {

constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "JSON run configuration");
  cmd->add_option("--set", c.overrides, "Override a config value, e.g. --set cvae.epochs=20")
      ->take_all();
  cmd->add_option("--seed", c.seed, "Seed for generation, training and bootstrap");
  cmd->add_option("--out", c.out, "Output directory (relative paths resolve under $XCVAE_OUTPUT_ROOT)");
}

/// Base config (file if given, otherwise `fallback`), then --seed, then --set.
RunConfig resolve_config(const Common& c, const RunConfig& fallback) {
  RunConfig cfg = c.config_path.empty() ? fallback : load_config(c.config_path);
  if (c.seed) cfg = with_seed(cfg, *c.seed);
  cfg = apply_overrides(cfg, c.overrides);
  return cfg;
}

fs::path output_dir(const Common& c, const RunConfig& cfg, const std::string& command) {
  fs::path out = c.out.empty() ? fs::path(cfg.output_dir) / command : fs::path(c.out);
  if (out.is_relative()) {
    if (const char* root = std::getenv("XCVAE_OUTPUT_ROOT"); root && *root) out = fs::path(root) / out;
  }
  fs::create_directories(out);
  return out;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<std::string> inputs_with(std::vector<std::string> files, const std::string& extra) {
  files.push_back(extra);
  return files;
}

void require_dataset_geometry(const RunConfig& cfg, const Dataset& ds) {
  if (cfg.phantom.generator.height != ds.config.phantom.generator.height ||
      cfg.phantom.generator.width != ds.config.phantom.generator.width) {
    throw ValidationError("config slice size differs from the dataset's");
  }
}

int cmd_generate(const Common& c) {
  const auto t0 = std::chrono::steady_clock::now();
  const RunConfig cfg = resolve_config(c, RunConfig{});
  const fs::path out = output_dir(c, cfg, "generate");
  const Dataset ds = build_dataset(cfg);
  save_dataset(out.string(), ds);
  save_config(cfg, (out / "config.json").string());
  write_manifest(out.string(), {"generate", to_json(cfg), cfg.seed, {},
                                [&] {
                                  auto files = dataset_files(out.string(), ds);
                                  files.push_back((out / "config.json").string());
                                  return files;
                                }(),
                                seconds_since(t0)});
  std::cout << "wrote " << ds.volumes.size() << " volumes (train " << ds.splits.train.size()
            << ", validation " << ds.splits.validation.size() << ", test "
            << ds.splits.test.size() << ") to " << out.string() << "\n";
  return 0;
}

int cmd_train_cvae(const Common& c, const std::string& data, bool no_side) {
  const auto t0 = std::chrono::steady_clock::now();
  const Dataset ds = load_dataset(data);
  const RunConfig cfg = resolve_config(c, ds.config);
  require_dataset_geometry(cfg, ds);
  const fs::path out = output_dir(c, cfg, "train-cvae");
  std::ostringstream trace;
  trace << std::setprecision(17) << "epoch,recon_term,kl_term,total\n";
  const CvaeTrainResult r = pretrain_cvae(ds, cfg, !no_side, [&](const EpochLoss& e) {
    trace << e.epoch << ',' << e.reconstruction << ',' << e.kl << ',' << e.total << '\n';
    std::cout << "epoch " << e.epoch << " reconstruction " << e.reconstruction << " kl " << e.kl
              << "\n";
  });
  CheckpointInfo info;
  info.config = cfg;
  info.epoch = cfg.cvae.train.epochs;
  info.use_side_information = !no_side;
  info.ablation = no_side ? "no-side" : "full";
  if (!r.trace.empty()) {
    const EpochLoss& last = r.trace.back();
    info.metrics = {{"reconstruction", last.reconstruction}, {"kl", last.kl}, {"loss", last.total}};
  }
  const std::string ckpt = (out / "cvae.npz").string();
  save_checkpoint(ckpt, r.state, info);
  write_file((out / "loss_trace.csv").string(), trace.str());
  write_manifest(out.string(), {"train-cvae", to_json(cfg), cfg.seed,
                                dataset_files(data, ds),
                                {ckpt, (out / "loss_trace.csv").string()}, seconds_since(t0)});
  std::cout << "checkpoint " << ckpt << "\n";
  return 0;
}

int cmd_train_classifier(const Common& c, const std::string& data, const std::string& cvae_path,
                         const std::string& ablation_text) {
  const auto t0 = std::chrono::steady_clock::now();
  const Ablation ablation = parse_ablation(ablation_text);
  const Dataset ds = load_dataset(data);
  const RunConfig cfg = resolve_config(c, ds.config);
  require_dataset_geometry(cfg, ds);
  std::optional<CvaeState> cvae;
  std::vector<std::string> inputs = dataset_files(data, ds);
  if (ablation != Ablation::no_cvae) {
    if (cvae_path.empty()) throw ValidationError("--cvae is required unless --ablation no-cvae");
    auto [state, info] = load_cvae_checkpoint(cvae_path);
    if (info.use_side_information != (ablation == Ablation::full)) {
      std::cerr << "warning: CVAE checkpoint was trained "
                << (info.use_side_information ? "with" : "without")
                << " side information but --ablation is " << ablation_text << "\n";
    }
    cvae = std::move(state);
    inputs.push_back(cvae_path);
  }
  const fs::path out = output_dir(c, cfg, "train-classifier");
  json trace = json::array();
  ClassifierTrainResult r = fit_classifier(
      ds, cfg, ablation, initial_classifier(cfg, ablation, cvae ? &*cvae : nullptr),
      [&](const ClassifierEpoch& e) {
        trace.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss},
                         {"validation_loss", e.validation_loss}});
        std::cout << "epoch " << e.epoch << " train " << e.train_loss << " validation "
                  << e.validation_loss << "\n";
      });
  CheckpointInfo info;
  info.config = cfg;
  info.epoch = r.best_epoch;
  info.ablation = ablation_name(ablation);
  info.use_side_information = cfg.classifier.train.use_side_information && uses_side_information(ablation);
  info.metrics = {{"best_epoch", r.best_epoch}, {"stopped_early", r.stopped_early}};
  const std::string ckpt = (out / "classifier.npz").string();
  save_checkpoint(ckpt, r.state, info);
  write_file((out / "loss_trace.json").string(), trace.dump(2) + "\n");
  write_manifest(out.string(), {"train-classifier", to_json(cfg), cfg.seed, inputs,
                                {ckpt, (out / "loss_trace.json").string()}, seconds_since(t0)});
  std::cout << "best epoch " << r.best_epoch << ", checkpoint " << ckpt << "\n";
  return 0;
}

int cmd_evaluate(const Common& c, const std::string& data, const std::string& ckpt,
                 const std::string& split) {
  const auto t0 = std::chrono::steady_clock::now();
  const Dataset ds = load_dataset(data);
  auto [state, info] = load_classifier_checkpoint(ckpt);
  const RunConfig cfg = resolve_config(c, info.config);
  require_dataset_geometry(cfg, ds);
  const fs::path out = output_dir(c, cfg, "evaluate");
  const auto volumes = ds.split(split);
  const auto labels = labels_of(volumes);
  const auto scores = score_volumes(volumes, state, info.use_side_information);
  const EvalResult r = evaluate_scores(scores, labels, cfg.metrics);
  json j = eval_to_json(r, true);
  j["split"] = split;
  j["ablation"] = info.ablation;
  j["volumes"] = volumes.size();
  write_file((out / "metrics.json").string(), j.dump(2) + "\n");
  const auto band = roc_band(scores, labels, 101, cfg.metrics.bootstrap);
  write_png((out / "roc.png").string(), plot_roc(r.roc, band));
  std::ostringstream csv;
  csv << std::setprecision(17) << "volume_id,p_neg,p_pos,label\n";
  for (std::size_t i = 0; i < volumes.size(); ++i) {
    csv << volumes[i]->id << ',' << 1.0 - scores[i] << ',' << scores[i] << ',' << labels[i] << '\n';
  }
  write_file((out / "predictions.csv").string(), csv.str());
  write_manifest(out.string(), {"evaluate", to_json(cfg), cfg.seed,
                                inputs_with(dataset_files(data, ds), ckpt),
                                {(out / "metrics.json").string(), (out / "roc.png").string(),
                                 (out / "predictions.csv").string()},
                                seconds_since(t0)});
  auto show = [](const std::optional<double>& v) { return v ? std::to_string(*v) : "undefined"; };
  std::cout << "sensitivity " << show(r.confusion.sensitivity) << " specificity "
            << show(r.confusion.specificity) << " f1 " << show(r.confusion.f1) << " auc " << r.auc
            << " [" << r.auc_ci.low << ", " << r.auc_ci.high << "]\n";
  return 0;
}

int cmd_explain(const Common& c, const std::string& data, const std::string& ckpt,
                const std::string& volume_id, int class_index, std::size_t zoom,
                bool signed_map) {
  const auto t0 = std::chrono::steady_clock::now();
  const Dataset ds = load_dataset(data);
  auto [state, info] = load_classifier_checkpoint(ckpt);
  const RunConfig cfg = resolve_config(c, info.config);
  require_dataset_geometry(cfg, ds);
  const Volume& v = ds.volumes[ds.find(volume_id)];
  const fs::path out = output_dir(c, cfg, "explain");
  ExplainOptions opts = cfg.explain.options;
  opts.use_mask = info.use_side_information;
  const RelevanceMap m = explain_volume(state, v, class_index, opts);

  Archive raw;
  raw.arrays["image_relevance"] = m.image_relevance;
  raw.arrays["mask_relevance"] = m.mask_relevance;
  json stages = json::array();
  for (const StageSum& s : m.stages) {
    stages.push_back({{"stage", s.stage}, {"relevance_out", s.relevance_out},
                      {"relevance_in", s.relevance_in}});
  }
  raw.metadata = {{"volume", v.id}, {"label", v.label}, {"class_index", m.class_index},
                  {"score", m.score}, {"stages", stages}};
  std::vector<std::string> outputs{(out / "relevance.npz").string()};
  save_npz(outputs.front(), raw);

  const double scale = relevance_scale(m.image_relevance, cfg.explain.colormap_quantile);
  const std::size_t H = v.height(), W = v.width();
  for (std::size_t s = 0; s < v.slices(); ++s) {
    Tensor img({H, W}), rel({H, W});
    std::copy_n(v.intensities.data() + s * H * W, H * W, img.data());
    std::copy_n(m.image_relevance.data() + s * H * W, H * W, rel.data());
    char name[64];
    std::snprintf(name, sizeof name, "slice_%02zu", s);
    const std::string base = (out / name).string();
    write_png(base + "_image.png", upscale(grey_image(img), zoom));
    write_png(base + "_relevance.png",
              upscale(relevance_image(rel, scale, !signed_map), zoom));
    write_png(base + "_overlay.png", upscale(relevance_overlay(img, rel, scale), zoom));
    outputs.insert(outputs.end(), {base + "_image.png", base + "_relevance.png", base + "_overlay.png"});
  }
  write_manifest(out.string(), {"explain", to_json(cfg), cfg.seed,
                                inputs_with(dataset_files(data, ds), ckpt), outputs,
                                seconds_since(t0)});
  std::cout << "volume " << v.id << " (label " << v.label << ") class " << class_index
            << " score " << m.score << ", " << v.slices() << " slices written to " << out.string()
            << "\n";
  return 0;
}

int cmd_config(const Common& c) {
  const RunConfig cfg = resolve_config(c, RunConfig{});
  cfg.validate();
  const std::string text = to_json(cfg).dump(2) + "\n";
  if (c.out.empty()) {
    std::cout << text;
  } else {
    write_file(c.out, text);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Explainable CVAE lesion-gated diagnosis on synthetic CT phantoms"};
  app.require_subcommand(1);

  Common gen_c, cvae_c, cls_c, eval_c, exp_c, cfg_c;
  std::string data, cvae_ckpt, ckpt, ablation = "full", split = "test", volume;
  bool no_side = false;
  bool signed_map = false;
  int class_index = 1;
  std::size_t zoom = 4;

  auto* gen = app.add_subcommand("generate", "Generate a phantom dataset with splits");
  add_common(gen, gen_c);

  auto* tcv = app.add_subcommand("train-cvae", "Pre-train the CVAE encoder");
  add_common(tcv, cvae_c);
  tcv->add_option("--data", data, "Dataset directory")->required();
  tcv->add_flag("--no-side", no_side, "Replace lesion masks with all-ones masks");

  auto* tcl = app.add_subcommand("train-classifier", "Train the volume classifier");
  add_common(tcl, cls_c);
  tcl->add_option("--data", data, "Dataset directory")->required();
  tcl->add_option("--cvae", cvae_ckpt, "CVAE checkpoint to transfer from");
  tcl->add_option("--ablation", ablation, "full | no-side | no-cvae")
      ->check(CLI::IsMember({"full", "no-side", "no-cvae"}));

  auto* ev = app.add_subcommand("evaluate", "Evaluate a classifier checkpoint");
  add_common(ev, eval_c);
  ev->add_option("--data", data, "Dataset directory")->required();
  ev->add_option("--checkpoint", ckpt, "Classifier checkpoint")->required();
  ev->add_option("--split", split, "train | validation | test | all");

  auto* ex = app.add_subcommand("explain", "Relevance heatmaps for one volume");
  add_common(ex, exp_c);
  ex->add_option("--data", data, "Dataset directory")->required();
  ex->add_option("--checkpoint", ckpt, "Classifier checkpoint")->required();
  ex->add_option("--volume", volume, "Volume id, e.g. vol_0007")->required();
  ex->add_option("--class", class_index, "Class whose score is explained (0 or 1)")
      ->check(CLI::Range(0, 1));
  ex->add_flag("--signed", signed_map, "Show negative relevance in blue as well");
  ex->add_option("--zoom", zoom, "Nearest-neighbour upscaling of the PNGs")->check(CLI::Range(1, 16));

  auto* cf = app.add_subcommand("config", "Print the resolved configuration");
  add_common(cf, cfg_c);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitValidation;
  }

  try {
    if (*gen) return cmd_generate(gen_c);
    if (*tcv) return cmd_train_cvae(cvae_c, data, no_side);
    if (*tcl) return cmd_train_classifier(cls_c, data, cvae_ckpt, ablation);
    if (*ev) return cmd_evaluate(eval_c, data, ckpt, split);
    if (*ex) return cmd_explain(exp_c, data, ckpt, volume, class_index, zoom, signed_map);
    if (*cf) return cmd_config(cfg_c);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
