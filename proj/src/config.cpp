#include "xcvae/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "xcvae/io.hpp"

namespace xcvae {
namespace {

using nlohmann::json;

// Strict reader: every key in the object must be consumed.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ValidationError("config: '" + path_ + "' must be an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ValidationError("config: wrong type for '" + where(key) + "'");
    }
  }

  void get_range(const char* key, IntRange& r) {
    std::array<int, 2> a{r.lo, r.hi};
    get(key, a);
    r = {a[0], a[1]};
  }

  void get_range(const char* key, RealRange& r) {
    std::array<double, 2> a{r.lo, r.hi};
    get(key, a);
    r = {a[0], a[1]};
  }

  template <class Fn>
  void section(const char* key, Fn&& fn) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    Reader sub(j_.at(key), where(key));
    fn(sub);
    sub.finish();
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ValidationError("config: unknown key '" + where(k.c_str()) + "'");
    }
  }

 private:
  std::string where(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

const char* profile_name(LesionProfile p) {
  return p == LesionProfile::soft_gaussian ? "soft_gaussian" : "dense_plateau";
}

LesionProfile parse_profile(const std::string& s) {
  if (s == "soft_gaussian") return LesionProfile::soft_gaussian;
  if (s == "dense_plateau") return LesionProfile::dense_plateau;
  throw ValidationError("config: unknown lesion profile '" + s + "'");
}

json lesion_json(const LesionClassConfig& c) {
  return {{"count", {c.count.lo, c.count.hi}},
          {"sigma_fraction", {c.sigma_fraction.lo, c.sigma_fraction.hi}},
          {"sigma_slices", {c.sigma_slices.lo, c.sigma_slices.hi}},
          {"amplitude_hu", {c.amplitude_hu.lo, c.amplitude_hu.hi}},
          {"peripheral_bias", c.peripheral_bias},
          {"profile", profile_name(c.profile)}};
}

void read_lesion(Reader& r, LesionClassConfig& c) {
  r.get_range("count", c.count);
  r.get_range("sigma_fraction", c.sigma_fraction);
  r.get_range("sigma_slices", c.sigma_slices);
  r.get_range("amplitude_hu", c.amplitude_hu);
  r.get("peripheral_bias", c.peripheral_bias);
  std::string profile = profile_name(c.profile);
  r.get("profile", profile);
  c.profile = parse_profile(profile);
}

json encoder_json(const EncoderConfig& e) {
  return {{"conv1_filters", e.conv1_filters}, {"conv1_kernel", e.conv1_kernel},
          {"conv2_filters", e.conv2_filters}, {"conv2_kernel", e.conv2_kernel},
          {"conv3_filters", e.conv3_filters}, {"conv3_kernel", e.conv3_kernel},
          {"embed_dim", e.embed_dim},         {"pre_merge_dim", e.pre_merge_dim},
          {"merge_dim", e.merge_dim},         {"side_bias", e.side_bias}};
}

void read_encoder(Reader& r, EncoderConfig& e) {
  r.get("conv1_filters", e.conv1_filters);
  r.get("conv1_kernel", e.conv1_kernel);
  r.get("conv2_filters", e.conv2_filters);
  r.get("conv2_kernel", e.conv2_kernel);
  r.get("conv3_filters", e.conv3_filters);
  r.get("conv3_kernel", e.conv3_kernel);
  r.get("embed_dim", e.embed_dim);
  r.get("pre_merge_dim", e.pre_merge_dim);
  r.get("merge_dim", e.merge_dim);
  r.get("side_bias", e.side_bias);
}

}  // namespace

CvaeConfig RunConfig::cvae_model() const {
  CvaeConfig m = cvae.model;
  m.encoder.slice_height = phantom.generator.height;
  m.encoder.slice_width = phantom.generator.width;
  return m;
}

ClassifierConfig RunConfig::classifier_model() const {
  ClassifierConfig m = classifier.model;
  m.encoder = cvae_model().encoder;
  return m;
}

void RunConfig::validate() const {
  phantom.generator.validate();
  if (phantom.volumes < 3) throw ValidationError("config: phantom.volumes must be at least 3");
  cvae_model().encoder.validate();
  classifier_model().validate();
  if (cvae.train.epochs < 0 || classifier.train.epochs < 0) {
    throw ValidationError("config: epochs must be non-negative");
  }
  if (!(cvae.train.learning_rate > 0) || !(classifier.train.learning_rate > 0)) {
    throw ValidationError("config: learning rates must be positive");
  }
  if (cvae.train.batch_size == 0 || classifier.train.batch_size == 0) {
    throw ValidationError("config: batch sizes must be positive");
  }
  if (classifier.train.patience < 1) throw ValidationError("config: patience must be positive");
  explain.options.rules.validate();
  if (!(explain.colormap_quantile > 0 && explain.colormap_quantile <= 1)) {
    throw ValidationError("config: explain.colormap_quantile must lie in (0, 1]");
  }
  if (metrics.bootstrap.iterations < 1 || !(metrics.bootstrap.level > 0) ||
      !(metrics.bootstrap.level < 1)) {
    throw ValidationError("config: invalid bootstrap settings");
  }
}

nlohmann::json to_json(const RunConfig& c) {
  const PhantomConfig& g = c.phantom.generator;
  const auto& ct = c.cvae.train;
  const auto& kt = c.classifier.train;
  const auto& km = c.classifier.model;
  const auto& rules = c.explain.options.rules;
  return {
      {"seed", c.seed},
      {"output_dir", c.output_dir},
      {"phantom",
       {{"volumes", c.phantom.volumes},
        {"splits",
         {{"train", c.phantom.splits.train},
          {"validation", c.phantom.splits.validation},
          {"test", c.phantom.splits.test}}},
        {"height", g.height},
        {"width", g.width},
        {"slices", {g.slices.lo, g.slices.hi}},
        {"positive", lesion_json(g.positive)},
        {"negative", lesion_json(g.negative)},
        {"vessels_per_slice", {g.vessels_per_slice.lo, g.vessels_per_slice.hi}},
        {"noise_hu", g.noise_hu},
        {"class_balance", g.class_balance},
        {"seed", g.seed},
        {"spacing_mm", g.spacing_mm}}},
      {"cvae",
       {{"encoder", encoder_json(c.cvae.model.encoder)},
        {"latent_dim", c.cvae.model.latent_dim},
        {"grid_channels", c.cvae.model.grid_channels},
        {"tconv1_filters", c.cvae.model.tconv1_filters},
        {"tconv1_kernel", c.cvae.model.tconv1_kernel},
        {"tconv2_filters", c.cvae.model.tconv2_filters},
        {"tconv2_kernel", c.cvae.model.tconv2_kernel},
        {"tconv3_kernel", c.cvae.model.tconv3_kernel},
        {"epochs", ct.epochs},
        {"learning_rate", ct.learning_rate},
        {"batch_size", ct.batch_size},
        {"seed", ct.seed},
        {"use_side_information", ct.use_side_information}}},
      {"classifier",
       {{"spp_levels", km.spp_levels},
        {"descriptor_dim", km.descriptor_dim},
        {"clusters", km.clusters},
        {"epochs", kt.epochs},
        {"learning_rate", kt.learning_rate},
        {"weight_decay", kt.weight_decay},
        {"patience", kt.patience},
        {"batch_size", kt.batch_size},
        {"seed", kt.seed},
        {"use_side_information", kt.use_side_information},
        {"freeze_side_branch", kt.freeze_side_branch},
        {"netvlad_init", kt.netvlad_init == NetVladInit::kmeans ? "kmeans" : "random"},
        {"focal_gamma", kt.focal.gamma},
        {"focal_lambda_negative", kt.focal.lambda_negative},
        {"focal_lambda_positive", kt.focal.lambda_positive}}},
      {"explain",
       {{"alpha", rules.alpha},
        {"beta", rules.beta},
        {"low", rules.low},
        {"high", rules.high},
        {"epsilon", rules.epsilon},
        {"smooth", c.explain.options.smooth},
        {"smooth_sigma", c.explain.options.smooth_sigma},
        {"use_mask", c.explain.options.use_mask},
        {"colormap_quantile", c.explain.colormap_quantile}}},
      {"metrics",
       {{"threshold", c.metrics.threshold},
        {"tpr_target", c.metrics.tpr_target},
        {"bootstrap_iterations", c.metrics.bootstrap.iterations},
        {"bootstrap_level", c.metrics.bootstrap.level},
        {"bootstrap_seed", c.metrics.bootstrap.seed}}},
  };
}

RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  Reader root(j, "");
  root.get("seed", c.seed);
  root.get("output_dir", c.output_dir);
  root.section("phantom", [&](Reader& r) {
    PhantomConfig& g = c.phantom.generator;
    r.get("volumes", c.phantom.volumes);
    r.section("splits", [&](Reader& s) {
      s.get("train", c.phantom.splits.train);
      s.get("validation", c.phantom.splits.validation);
      s.get("test", c.phantom.splits.test);
    });
    r.get("height", g.height);
    r.get("width", g.width);
    r.get_range("slices", g.slices);
    r.section("positive", [&](Reader& s) { read_lesion(s, g.positive); });
    r.section("negative", [&](Reader& s) { read_lesion(s, g.negative); });
    r.get_range("vessels_per_slice", g.vessels_per_slice);
    r.get("noise_hu", g.noise_hu);
    r.get("class_balance", g.class_balance);
    r.get("seed", g.seed);
    r.get("spacing_mm", g.spacing_mm);
  });
  root.section("cvae", [&](Reader& r) {
    auto& m = c.cvae.model;
    auto& t = c.cvae.train;
    r.section("encoder", [&](Reader& s) { read_encoder(s, m.encoder); });
    r.get("latent_dim", m.latent_dim);
    r.get("grid_channels", m.grid_channels);
    r.get("tconv1_filters", m.tconv1_filters);
    r.get("tconv1_kernel", m.tconv1_kernel);
    r.get("tconv2_filters", m.tconv2_filters);
    r.get("tconv2_kernel", m.tconv2_kernel);
    r.get("tconv3_kernel", m.tconv3_kernel);
    r.get("epochs", t.epochs);
    r.get("learning_rate", t.learning_rate);
    r.get("batch_size", t.batch_size);
    r.get("seed", t.seed);
    r.get("use_side_information", t.use_side_information);
  });
  root.section("classifier", [&](Reader& r) {
    auto& m = c.classifier.model;
    auto& t = c.classifier.train;
    r.get("spp_levels", m.spp_levels);
    r.get("descriptor_dim", m.descriptor_dim);
    r.get("clusters", m.clusters);
    r.get("epochs", t.epochs);
    r.get("learning_rate", t.learning_rate);
    r.get("weight_decay", t.weight_decay);
    r.get("patience", t.patience);
    r.get("batch_size", t.batch_size);
    r.get("seed", t.seed);
    r.get("use_side_information", t.use_side_information);
    r.get("freeze_side_branch", t.freeze_side_branch);
    std::string init = t.netvlad_init == NetVladInit::kmeans ? "kmeans" : "random";
    r.get("netvlad_init", init);
    if (init == "kmeans") {
      t.netvlad_init = NetVladInit::kmeans;
    } else if (init == "random") {
      t.netvlad_init = NetVladInit::random;
    } else {
      throw ValidationError("config: unknown classifier.netvlad_init '" + init + "'");
    }
    r.get("focal_gamma", t.focal.gamma);
    r.get("focal_lambda_negative", t.focal.lambda_negative);
    r.get("focal_lambda_positive", t.focal.lambda_positive);
  });
  root.section("explain", [&](Reader& r) {
    auto& o = c.explain.options;
    r.get("alpha", o.rules.alpha);
    r.get("beta", o.rules.beta);
    r.get("low", o.rules.low);
    r.get("high", o.rules.high);
    r.get("epsilon", o.rules.epsilon);
    r.get("smooth", o.smooth);
    r.get("smooth_sigma", o.smooth_sigma);
    r.get("use_mask", o.use_mask);
    r.get("colormap_quantile", c.explain.colormap_quantile);
  });
  root.section("metrics", [&](Reader& r) {
    r.get("threshold", c.metrics.threshold);
    r.get("tpr_target", c.metrics.tpr_target);
    r.get("bootstrap_iterations", c.metrics.bootstrap.iterations);
    r.get("bootstrap_level", c.metrics.bootstrap.level);
    r.get("bootstrap_seed", c.metrics.bootstrap.seed);
  });
  root.finish();
  return c;
}

RunConfig load_config(const std::string& path) {
  const std::string text = read_file(path);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ValidationError("config: cannot parse '" + path + "': " + e.what());
  }
  RunConfig c = config_from_json(j);
  c.validate();
  return c;
}

void save_config(const RunConfig& cfg, const std::string& path) {
  write_file(path, to_json(cfg).dump(2) + "\n");
}

RunConfig apply_overrides(const RunConfig& cfg, const std::vector<std::string>& assignments) {
  json j = to_json(cfg);
  for (const std::string& a : assignments) {
    const auto eq = a.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ValidationError("override '" + a + "' is not of the form key=value");
    }
    const std::string key = a.substr(0, eq), text = a.substr(eq + 1);
    json* node = &j;
    std::stringstream parts(key);
    std::string part;
    while (std::getline(parts, part, '.')) {
      if (!node->is_object() || !node->contains(part)) {
        throw ValidationError("override: unknown key '" + key + "'");
      }
      node = &(*node)[part];
    }
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    *node = value;
  }
  RunConfig out = config_from_json(j);
  out.validate();
  return out;
}

RunConfig with_seed(RunConfig cfg, std::uint64_t seed) {
  cfg.seed = seed;
  cfg.phantom.generator.seed = seed;
  cfg.cvae.train.seed = seed;
  cfg.classifier.train.seed = seed;
  cfg.metrics.bootstrap.seed = seed;
  return cfg;
}

std::string config_hash(const RunConfig& cfg) { return sha1_hex(to_json(cfg).dump()); }

}  // namespace xcvae
