// pball: command-line front end for the perceptual-ball toolkit.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <functional>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include <pball.hpp>

namespace fs = std::filesystem;
using namespace pball;

namespace {

constexpr const char* kVersion = "0.1.0";

json default_config() {
  return {
      {"seed", 0},
      {"workers", default_workers()},
      {"out", "out"},
      {"limit", 0},
      {"explainer", "perturbation"},
      {"data", {{"path", ""}, {"count", 2000}, {"size", 32}, {"num_classes", 4}, {"difficult_fraction", 0.3}}},
      {"model",
       {{"path", ""}, {"arch", "mini_vgg"}, {"epochs", 3}, {"lr", 0.01}, {"momentum", 0.9}, {"batch_size", 32}}},
      {"perturb",
       {{"target", -2.0},
        {"lambda", 1.0},
        {"lambda_prime", 0.0},
        {"layers", ""},
        {"step_size", 0.1},
        {"max_iters", 2000},
        {"stop_tol", 1e-2},
        {"max_halvings", 20},
        {"clamp", false},
        {"suppress_all_regions", true}}},
      {"saliency", {{"sigma", 0.0}, {"guided", false}, {"normalize", false}}},
      {"localization", {{"alpha_step", 0.05}, {"iou_threshold", 0.5}, {"strategies", {"value", "percent", "mean"}}}},
      {"insdel", {{"steps", 100}, {"sigma_base", 10.0}, {"deletion", true}, {"insertion", true}}},
      {"pointing", {{"tolerance_px", 15}, {"resize", "none"}, {"primary_only", false}, {"difficult_area", 0.25}}},
      {"ablate", {{"game", "localization"}, {"relus", "0:5"}, {"sigmas", "0"}, {"robust_bar", 0.82}}},
      {"sanity", {{"checkpoints", json::array()}, {"tolerance_px", 0}}},
  };
}

// Flag values are JSON when they parse as JSON, plain strings otherwise.
json parse_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception&) {
    return text;
  }
}

// Merges `patch` into `base`, rejecting keys the defaults do not know.
void merge_known(json& base, const json& patch, const std::string& where) {
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string path = where.empty() ? it.key() : where + "." + it.key();
    if (!base.contains(it.key())) throw ValidationError("config: unknown key '" + path + "'");
    json& slot = base[it.key()];
    if (slot.is_object() && it.value().is_object()) {
      merge_known(slot, it.value(), path);
    } else {
      slot = it.value();
    }
  }
}

void set_dotted(json& config, const std::string& path, const json& value) {
  json patch = value;
  std::string rest = path;
  std::vector<std::string> keys;
  for (std::size_t pos; (pos = rest.find('.')) != std::string::npos; rest = rest.substr(pos + 1)) {
    keys.push_back(rest.substr(0, pos));
  }
  keys.push_back(rest);
  for (auto k = keys.rbegin(); k != keys.rend(); ++k) patch = json{{*k, patch}};
  merge_known(config, patch, "");
}

template <typename T>
T get(const json& config, const std::string& path) {
  const json* node = &config;
  std::string rest = path;
  for (std::size_t pos; (pos = rest.find('.')) != std::string::npos; rest = rest.substr(pos + 1)) {
    node = &node->at(rest.substr(0, pos));
  }
  try {
    return node->at(rest).get<T>();
  } catch (const json::exception&) {
    throw ValidationError("config: '" + path + "' has the wrong type (" + node->at(rest).dump() + ")");
  }
}

LayerSet parse_layers(const json& v) {
  if (v.is_array()) return LayerSet{v.get<std::vector<std::size_t>>()};
  const std::string s = v.get<std::string>();
  if (s.empty()) return LayerSet::none();
  const auto colon = s.find(':');
  try {
    if (colon != std::string::npos) {
      return LayerSet::range(std::stoul(s.substr(0, colon)), std::stoul(s.substr(colon + 1)));
    }
    LayerSet out;
    std::stringstream ss(s);
    for (std::string part; std::getline(ss, part, ',');) out.ordinals.push_back(std::stoul(part));
    return out;
  } catch (const std::exception&) {
    throw ValidationError("config: perturb.layers must look like 'i:j' or 'a,b,c', got '" + s + "'");
  }
}

std::vector<std::size_t> parse_ordinal_grid(const std::string& text) {
  std::vector<std::size_t> out;
  for (double v : parse_grid(text)) {
    if (v < 0 || v != std::floor(v)) throw ValidationError("ablate.relus must hold non-negative integers");
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Typed views of the resolved configuration

PerturbConfig perturb_config(const json& c) {
  PerturbConfig p;
  p.target = get<double>(c, "perturb.target");
  p.lambda = get<double>(c, "perturb.lambda");
  p.lambda_prime = get<double>(c, "perturb.lambda_prime");
  p.layers = parse_layers(c.at("perturb").at("layers"));
  p.step_size = get<double>(c, "perturb.step_size");
  p.max_iters = get<int>(c, "perturb.max_iters");
  p.stop_tol = get<double>(c, "perturb.stop_tol");
  p.max_halvings = get<int>(c, "perturb.max_halvings");
  p.clamp = get<bool>(c, "perturb.clamp");
  p.seed = get<std::uint64_t>(c, "seed");
  p.validate();
  return p;
}

SaliencyOptions saliency_options(const json& c) {
  SaliencyOptions s{get<double>(c, "saliency.sigma"), get<bool>(c, "saliency.guided"), get<bool>(c, "saliency.normalize")};
  if (!(s.sigma >= 0)) throw ValidationError("config: saliency.sigma must be non-negative");
  return s;
}

LocalizationOptions localization_options(const json& c) {
  LocalizationOptions o;
  o.alpha_step = get<double>(c, "localization.alpha_step");
  o.iou_threshold = get<double>(c, "localization.iou_threshold");
  o.strategies.clear();
  for (const auto& name : get<std::vector<std::string>>(c, "localization.strategies")) {
    if (name == "value") o.strategies.push_back(ThresholdKind::value);
    else if (name == "percent") o.strategies.push_back(ThresholdKind::percent);
    else if (name == "mean") o.strategies.push_back(ThresholdKind::mean_scaled);
    else throw ValidationError("config: unknown threshold strategy '" + name + "' (value, percent, mean)");
  }
  if (!(o.alpha_step > 0)) throw ValidationError("config: localization.alpha_step must be positive");
  o.workers = get<std::size_t>(c, "workers");
  return o;
}

InsDelOptions insdel_options(const json& c) {
  InsDelOptions o;
  o.steps = get<int>(c, "insdel.steps");
  o.sigma_base = get<double>(c, "insdel.sigma_base");
  o.deletion = get<bool>(c, "insdel.deletion");
  o.insertion = get<bool>(c, "insdel.insertion");
  o.workers = get<std::size_t>(c, "workers");
  if (o.steps < 2) throw ValidationError("config: insdel.steps must be at least 2");
  return o;
}

PointingOptions pointing_options(const json& c) {
  PointingOptions o;
  o.tolerance_px = get<int>(c, "pointing.tolerance_px");
  const auto resize = get<std::string>(c, "pointing.resize");
  if (resize == "none") o.resize = ResizeMode::none;
  else if (resize == "bilinear_1_5x") o.resize = ResizeMode::bilinear_1_5x;
  else throw ValidationError("config: pointing.resize must be 'none' or 'bilinear_1_5x'");
  o.primary_only = get<bool>(c, "pointing.primary_only");
  o.difficult_area = get<double>(c, "pointing.difficult_area");
  o.workers = get<std::size_t>(c, "workers");
  if (o.tolerance_px < 0) throw ValidationError("config: pointing.tolerance_px must be non-negative");
  return o;
}

// ---------------------------------------------------------------------------

struct Run {
  std::string command;
  json config;  // fully resolved
  std::string hash;
  fs::path out;

  json hashed() const {
    json c = config;
    c.erase("out");
    c.erase("workers");
    return c;
  }

  void write_csv(const std::string& name, const CsvWriter& w) const { w.save(out / name); }
  void write_summary(const json& aggregates) const {
    pball::write_summary(out / "summary.json", json{{"command", command}, {"settings", hashed()}}, hash, aggregates);
  }
};

void require_path(const json& config, const std::string& key, const std::string& what) {
  const auto p = get<std::string>(config, key);
  if (p.empty()) throw ValidationError(what + " not given (set " + key + " or pass the flag)");
  if (!fs::exists(p)) throw ValidationError(what + " '" + p + "' does not exist");
}

Dataset load_data(const Run& run) {
  require_path(run.config, "data.path", "dataset directory");
  Dataset d = load_dataset(get<std::string>(run.config, "data.path"));
  const auto limit = get<std::size_t>(run.config, "limit");
  if (limit > 0 && d.size() > limit) d.resize(limit);
  if (d.empty()) throw ValidationError("dataset is empty");
  return d;
}

Network load_model(const Run& run) {
  require_path(run.config, "model.path", "model file");
  return load_weights(get<std::string>(run.config, "model.path"));
}

// Saliency source per the "explainer" setting; the explainer must outlive it.
SaliencyFn saliency_source(const Run& run, const PerturbationExplainer& ex, SaliencyOptions so) {
  const auto kind = get<std::string>(run.config, "explainer");
  if (kind == "perturbation") return ex.fn(so);
  if (kind == "center") {
    return [so](const SaliencyRequest& r) { return gaussian_blur(center_saliency(r.image.dim(1), r.image.dim(2)), so.sigma); };
  }
  throw ValidationError("config: explainer must be 'perturbation' or 'center'");
}

void cmd_gen_data(const Run& run) {
  const auto& c = run.config;
  const Dataset d = gen_shapes(get<int>(c, "data.count"), get<int>(c, "data.size"), get<int>(c, "data.num_classes"),
                               get<double>(c, "data.difficult_fraction"), get<std::uint64_t>(c, "seed"));
  save_dataset(d, run.out, {{"config_hash", run.hash}});
  std::size_t difficult = 0;
  for (const auto& s : d) difficult += s.difficult ? 1 : 0;
  std::printf("wrote %zu samples (%zu difficult) to %s\n", d.size(), difficult, run.out.string().c_str());
}

void cmd_train(const Run& run) {
  const auto& c = run.config;
  const Dataset d = load_data(run);
  const auto arch = get<std::string>(c, "model.arch");
  const auto k = get<std::size_t>(c, "data.num_classes");
  NetworkSpec spec;
  if (arch == "mini_vgg") spec = mini_vgg(k, static_cast<std::size_t>(d.front().height()));
  else if (arch == "detector") spec = mini_vgg_detector(k);
  else throw ValidationError("config: model.arch must be 'mini_vgg' or 'detector'");
  TrainOptions opt;
  opt.epochs = get<int>(c, "model.epochs");
  opt.lr = get<double>(c, "model.lr");
  opt.momentum = get<double>(c, "model.momentum");
  opt.batch_size = get<std::size_t>(c, "model.batch_size");
  opt.seed = get<std::uint64_t>(c, "seed");
  const Network net = train(spec, d, opt);
  save_weights(net, run.out / "weights.pbw", {{"config_hash", run.hash}});
  run.write_summary({{"train_accuracy", net.train_accuracy.value_or(0.0)}, {"samples", d.size()}});
  std::printf("train accuracy %.4f\n", net.train_accuracy.value_or(0.0));
}

void cmd_perturb(const Run& run) {
  const Dataset d = load_data(run);
  const Network net = load_model(run);
  const PerturbationExplainer ex(net, perturb_config(run.config), get<bool>(run.config, "perturb.suppress_all_regions"));
  std::vector<std::shared_ptr<const PerturbResult>> results(d.size());
  parallel_for(d.size(), get<std::size_t>(run.config, "workers"),
               [&](std::size_t i) { results[i] = ex.perturb({d[i], d[i].image, d[i].label}); });
  CsvWriter w({"image_id", "config_hash", "class", "iterations", "converged", "final_margin", "final_objective",
               "squared_distance", "out_of_range_pixels"});
  std::size_t flipped = 0, converged = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto& r = *results[i];
    w.row({std::to_string(d[i].id), run.hash, std::to_string(d[i].label), std::to_string(r.iterations_used),
           r.converged ? "1" : "0", fmt_num(r.final_margin), fmt_num(r.final_objective),
           fmt_num(PerceptualObjective::squared_distance(r.x_prime, d[i].image)), std::to_string(r.out_of_range_pixels)});
    Container tc;
    tc.header = {{"config_hash", run.hash}, {"image_id", d[i].id}, {"class", d[i].label}};
    tc.tensors.push_back({"x_prime", r.x_prime});
    save_container(run.out / "x_prime" / sample_file_name(d[i].id).substr(8), tc);
    flipped += r.final_margin < 0 ? 1 : 0;
    converged += r.converged ? 1 : 0;
  }
  run.write_csv("perturb.csv", w);
  run.write_summary({{"images", d.size()}, {"label_flipped", flipped}, {"converged", converged}});
  std::printf("%zu images, %zu flipped, %zu converged\n", d.size(), flipped, converged);
}

void cmd_saliency(const Run& run) {
  const Dataset d = load_data(run);
  const Network net = load_model(run);
  const PerturbConfig pc = perturb_config(run.config);
  const PerturbationExplainer ex(net, pc, get<bool>(run.config, "perturb.suppress_all_regions"));
  const SaliencyOptions so = saliency_options(run.config);
  std::vector<SaliencyMap> maps(d.size());
  parallel_for(d.size(), get<std::size_t>(run.config, "workers"), [&](std::size_t i) {
    const auto p = ex.perturb({d[i], d[i].image, d[i].label});
    maps[i] = build(d[i].image, p->x_prime, &net, static_cast<std::size_t>(d[i].label), so, pc.layers);
  });
  CsvWriter w({"image_id", "config_hash", "class", "sigma", "max", "mass_in_object"});
  for (std::size_t i = 0; i < d.size(); ++i) {
    save_saliency(maps[i], run.out / "saliency" / sample_file_name(d[i].id).substr(8, 4),
                  {{"config_hash", run.hash}, {"image_id", d[i].id}, {"class", d[i].label}});
    w.row({std::to_string(d[i].id), run.hash, std::to_string(d[i].label), fmt_num(so.sigma), fmt_num(maps[i].values.max()),
           fmt_num(mass_inside(maps[i].values, d[i].class_mask(d[i].label)))});
  }
  run.write_csv("saliency.csv", w);
  run.write_summary({{"images", d.size()}});
  std::printf("wrote %zu saliency maps\n", d.size());
}

void cmd_eval_localization(const Run& run) {
  const Dataset d = load_data(run);
  const Network net = load_model(run);
  const PerturbationExplainer ex(net, perturb_config(run.config), get<bool>(run.config, "perturb.suppress_all_regions"));
  SaliencyOptions so = saliency_options(run.config);
  so.normalize_first = true;  // thresholds assume [0,1] maps
  const auto res = weak_localization(d, saliency_source(run, ex, so), localization_options(run.config));
  run.write_csv("localization.csv", localization_csv(res, run.hash));
  const json summary = localization_summary(res);
  run.write_summary(summary);
  std::printf("best error %.4f (%s, alpha %.2f)\n", res.best().error, summary["best"]["strategy"].get<std::string>().c_str(),
              res.best().alpha);
}

void cmd_eval_insdel(const Run& run) {
  const Dataset d = load_data(run);
  const Network net = load_model(run);
  const PerturbationExplainer ex(net, perturb_config(run.config), get<bool>(run.config, "perturb.suppress_all_regions"));
  const auto res = insertion_deletion(d, net, saliency_source(run, ex, saliency_options(run.config)), insdel_options(run.config));
  run.write_csv("insdel.csv", insdel_csv(res, run.hash));
  run.write_summary(insdel_summary(res));
  std::printf("deletion %.4f insertion %.4f\n", res.mean_deletion(), res.mean_insertion());
}

void cmd_eval_pointing(const Run& run) {
  const Dataset d = load_data(run);
  const Network net = load_model(run);
  const PerturbationExplainer ex(net, perturb_config(run.config), get<bool>(run.config, "perturb.suppress_all_regions"));
  const auto res = pointing_game(d, saliency_source(run, ex, saliency_options(run.config)), pointing_options(run.config));
  run.write_csv("pointing.csv", pointing_csv(res, run.hash));
  run.write_summary(pointing_summary(res));
  if (res.skipped) std::fprintf(stderr, "skipped %zu trials whose class is absent from the image\n", res.skipped);
  std::printf("accuracy %.4f (difficult %.4f)\n", res.accuracy(), res.accuracy(true));
}

void cmd_ablate(const Run& run) {
  const auto& c = run.config;
  const Dataset d = load_data(run);
  const Network net = load_model(run);
  AblationOptions opt;
  opt.game = parse_game(get<std::string>(c, "ablate.game"));
  opt.relu_grid = parse_ordinal_grid(get<std::string>(c, "ablate.relus"));
  const json& sig = c.at("ablate").at("sigmas");
  opt.sigmas = sig.is_string() ? parse_grid(sig.get<std::string>()) : parse_grid(sig.dump());
  opt.perturb = perturb_config(c);
  opt.guided = get<bool>(c, "saliency.guided");
  opt.suppress_all_regions = get<bool>(c, "perturb.suppress_all_regions");
  opt.localization = localization_options(c);
  opt.insdel = insdel_options(c);
  opt.pointing = pointing_options(c);
  opt.robust_bar = get<double>(c, "ablate.robust_bar");
  opt.workers = get<std::size_t>(c, "workers");
  const auto res = ablation_sweep(d, net, opt);
  run.write_csv("ablation_cells.csv", ablation_cells_csv(res, run.hash));
  run.write_csv("ablation_best.csv", ablation_matrix_csv(res, run.hash, [](const AblationCell& x) { return fmt_num(x.best); }));
  run.write_csv("ablation_best_sigma.csv",
                ablation_matrix_csv(res, run.hash, [](const AblationCell& x) { return fmt_num(x.best_sigma); }));
  run.write_csv("ablation_robust.csv",
                ablation_matrix_csv(res, run.hash, [](const AblationCell& x) { return std::to_string(x.robust_count); }));
  run.write_summary(ablation_summary(res));
  std::printf("%zu cells x %zu sigmas\n", res.cells.size(), opt.sigmas.size());
}

void cmd_sanity(const Run& run) {
  const auto& c = run.config;
  const Dataset d = load_data(run);
  const Network net = load_model(run);
  SanityOptions opt;
  opt.checkpoints = get<std::vector<std::size_t>>(c, "sanity.checkpoints");
  opt.seed = get<std::uint64_t>(c, "seed");
  opt.perturb = perturb_config(c);
  opt.saliency = saliency_options(c);
  opt.pointing = pointing_options(c);
  opt.pointing.tolerance_px = get<int>(c, "sanity.tolerance_px");
  opt.suppress_all_regions = get<bool>(c, "perturb.suppress_all_regions");
  const auto res = progressive_randomization(d, net, opt);
  CsvWriter w({"step", "config_hash", "randomized_from", "pointing_accuracy", "mass_in_object"});
  for (std::size_t k = 0; k < res.steps.size(); ++k) {
    const auto& s = res.steps[k];
    w.row({std::to_string(k), run.hash, std::to_string(s.randomized_from), fmt_num(s.pointing_accuracy),
           fmt_num(s.mass_in_object)});
    std::printf("step %zu from layer %zu: accuracy %.4f mass %.4f\n", k, s.randomized_from, s.pointing_accuracy,
                s.mass_in_object);
  }
  run.write_csv("sanity.csv", w);
  run.write_summary({{"chance_rate", res.chance_rate}, {"accuracy_slope", res.accuracy_slope()}});
  std::printf("chance %.4f slope %.4f\n", res.chance_rate, res.accuracy_slope());
}

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Perceptual-ball perturbations, saliency maps and explanation benchmarks"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::pair<std::string, json>> overrides;
  auto flag = [&](CLI::App* sub, const std::string& name, const std::string& path, const std::string& help) {
    sub->add_option_function<std::string>(name, [&overrides, path](const std::string& v) { overrides.emplace_back(path, parse_value(v)); }, help);
  };

  using Handler = std::function<void(const Run&)>;
  std::vector<std::pair<CLI::App*, Handler>> commands;
  auto command = [&](const std::string& name, const std::string& help, Handler h) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
    flag(sub, "--out", "out", "output directory");
    flag(sub, "--seed", "seed", "random seed");
    flag(sub, "--workers", "workers", "worker threads (default: $PBALL_WORKERS or 1)");
    sub->add_option_function<std::vector<std::string>>(
        "--set",
        [&overrides](const std::vector<std::string>& items) {
          for (const auto& kv : items) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) throw CLI::ValidationError("--set", "expected dotted.path=value, got '" + kv + "'");
            overrides.emplace_back(kv.substr(0, eq), parse_value(kv.substr(eq + 1)));
          }
        },
        "override a config field, e.g. --set perturb.max_iters=200");
    commands.emplace_back(sub, std::move(h));
    return sub;
  };
  auto data_flags = [&](CLI::App* sub) {
    flag(sub, "--data", "data.path", "dataset directory");
    flag(sub, "--limit", "limit", "use only the first N samples (0 = all)");
  };
  auto perturb_flags = [&](CLI::App* sub) {
    data_flags(sub);
    flag(sub, "--model", "model.path", "weight file");
    flag(sub, "--target", "perturb.target", "target margin T (< 0)");
    flag(sub, "--lambda", "perturb.lambda", "pixel-space weight");
    flag(sub, "--lambda-prime", "perturb.lambda_prime", "perceptual weight");
    flag(sub, "--layers", "perturb.layers", "ReLU ordinals, 'i:j' (i..j-1) or 'a,b,c'");
    flag(sub, "--max-iters", "perturb.max_iters", "iteration cap");
    flag(sub, "--step-size", "perturb.step_size", "initial line-search step");
    flag(sub, "--explainer", "explainer", "perturbation | center");
  };
  auto saliency_flags = [&](CLI::App* sub) {
    flag(sub, "--sigma", "saliency.sigma", "Gaussian blur sigma");
    flag(sub, "--guided", "saliency.guided", "multiply by the normalised input gradient (true/false)");
  };

  CLI::App* gen = command("gen-data", "generate the synthetic shapes dataset", cmd_gen_data);
  flag(gen, "--count", "data.count", "number of samples");
  flag(gen, "--size", "data.size", "image size (>= 32)");
  flag(gen, "--classes", "data.num_classes", "number of classes (2..8)");
  flag(gen, "--difficult", "data.difficult_fraction", "fraction of difficult items");

  CLI::App* tr = command("train", "train a classifier", cmd_train);
  data_flags(tr);
  flag(tr, "--arch", "model.arch", "mini_vgg | detector");
  flag(tr, "--classes", "data.num_classes", "number of classes");
  flag(tr, "--epochs", "model.epochs", "training epochs");
  flag(tr, "--lr", "model.lr", "learning rate");

  perturb_flags(command("perturb", "find perturbations for each sample's label", cmd_perturb));
  CLI::App* sal = command("saliency", "write saliency maps", cmd_saliency);
  perturb_flags(sal);
  saliency_flags(sal);
  flag(sal, "--normalize", "saliency.normalize", "normalise to [0,1] before blurring (true/false)");

  CLI::App* loc = command("eval-localization", "weak localisation game", cmd_eval_localization);
  perturb_flags(loc);
  saliency_flags(loc);
  flag(loc, "--alpha-step", "localization.alpha_step", "threshold grid spacing");

  CLI::App* ins = command("eval-insdel", "insertion / deletion game", cmd_eval_insdel);
  perturb_flags(ins);
  saliency_flags(ins);
  flag(ins, "--steps", "insdel.steps", "curve steps");
  flag(ins, "--sigma-base", "insdel.sigma_base", "blur of the insertion baseline");

  CLI::App* pt = command("eval-pointing", "pointing game", cmd_eval_pointing);
  perturb_flags(pt);
  saliency_flags(pt);
  flag(pt, "--tolerance", "pointing.tolerance_px", "hit tolerance in pixels");
  flag(pt, "--resize", "pointing.resize", "none | bilinear_1_5x");

  CLI::App* ab = command("ablate", "layer-range x sigma sweep", cmd_ablate);
  perturb_flags(ab);
  flag(ab, "--game", "ablate.game", "localization | insdel | pointing");
  flag(ab, "--relus", "ablate.relus", "ReLU ordinal grid, e.g. 0:5");
  flag(ab, "--sigma", "ablate.sigmas", "sigma grid, 'a:b:step' or 'a,b,c'");
  flag(ab, "--robust-bar", "ablate.robust_bar", "bar for the sigma robustness count");
  flag(ab, "--guided", "saliency.guided", "guided variant (true/false)");
  flag(ab, "--alpha-step", "localization.alpha_step", "threshold grid spacing");
  flag(ab, "--tolerance", "pointing.tolerance_px", "pointing hit tolerance");

  CLI::App* san = command("sanity-check", "progressive weight randomization", cmd_sanity);
  perturb_flags(san);
  saliency_flags(san);
  flag(san, "--tolerance", "sanity.tolerance_px", "pointing hit tolerance");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << " (see --help)\n";
    return 1;
  }

  for (const auto& [sub, handler] : commands) {
    if (!sub->parsed()) continue;
    const auto started = std::chrono::steady_clock::now();
    Run run;
    run.command = sub->get_name();
    try {
      run.config = default_config();
      if (!config_path.empty()) {
        json file;
        try {
          file = json::parse(read_file(config_path));
        } catch (const json::exception& e) {
          throw ValidationError("config file " + config_path + " is not valid JSON: " + e.what());
        }
        if (!file.is_object()) throw ValidationError("config file must hold a JSON object");
        merge_known(run.config, file, "");
      }
      for (const auto& [path, value] : overrides) set_dotted(run.config, path, value);
      if (get<int>(run.config, "workers") < 1) throw ValidationError("workers must be at least 1");
      run.hash = config_hash(run.config);
      run.out = get<std::string>(run.config, "out");
      fs::create_directories(run.out);
      handler(run);
      const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
      write_file(run.out / "run.json", json{{"command", run.command},
                                            {"config", run.config},
                                            {"config_hash", run.hash},
                                            {"seed", run.config["seed"]},
                                            {"version", kVersion},
                                            {"started_utc", utc_now()},
                                            {"wall_time_s", wall}}
                                           .dump(2) + "\n");
      return 0;
    } catch (const ValidationError& e) {
      std::cerr << "error: " << e.what() << "\n";
      return 1;
    } catch (const std::exception& e) {
      std::cerr << "failed: " << e.what() << "\n";
      return 2;
    }
  }
  return 1;
}
