// pcvd: dataset generation, training, evaluation, inference and ablation from one config.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "pcvd/checkpoint.hpp"
#include "pcvd/config.hpp"
#include "pcvd/errors.hpp"
#include "pcvd/eval.hpp"
#include "pcvd/train.hpp"

namespace fs = std::filesystem;
using namespace pcvd;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};

RunConfig resolve(const Common& c) {
  RunConfig cfg = load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (c.out) cfg.out = *c.out;
  cfg.validate();
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("write failed for " + path.string());
}

std::vector<std::string> class_names(const RunConfig& c) {
  std::vector<std::string> out;
  for (const auto& k : c.data.scene.classes) out.push_back(k.name);
  return out;
}

Model load_model(const RunConfig& cfg, const std::string& checkpoint) {
  const fs::path path = checkpoint.empty() ? cfg.out / "model.ckpt" : fs::path(checkpoint);
  return model_from_archive(cfg, read_checkpoint(path));
}

int run_generate(const Common& c) {
  const RunConfig cfg = resolve(c);
  const Data d = Data::generate(cfg);
  d.write(cfg.data.dir);
  std::printf("wrote %zu train and %zu eval scenes to %s\n", d.train.scenes.size(), d.eval.scenes.size(),
              cfg.data.dir.string().c_str());
  return 0;
}

int run_train(const Common& c, bool resume) {
  const RunConfig cfg = resolve(c);
  const Data d = Data::load(cfg);
  fs::create_directories(cfg.out);
  write_text(cfg.out / "config.json", config_to_json(cfg).dump(2) + "\n");
  TrainOptions o;
  o.out = cfg.out;
  o.resume = resume;
  o.on_epoch = [](const TrainingState&, const EpochRecord& r) {
    std::printf("stage %d epoch %d  loss %.4f  heatmap %.4f  regression %.4f  (%.1f s)\n", r.stage, r.epoch + 1, r.loss,
                r.heatmap, r.regression, r.seconds);
    std::fflush(stdout);
  };
  const TrainResult r = train(cfg, d, o);
  std::printf("wrote %s (%lld parameters)\n", (cfg.out / "model.ckpt").string().c_str(),
              static_cast<long long>(r.model.parameter_count()));
  return 0;
}

int run_eval(const Common& c, const std::string& checkpoint, const std::string& report) {
  const RunConfig cfg = resolve(c);
  const Data d = Data::load(cfg);
  const Evaluation e = evaluate(cfg, load_model(cfg, checkpoint), d);
  const nlohmann::json j = e.report.to_json();
  validate_eval_report(j);
  const fs::path path = report.empty() ? cfg.out / "eval.json" : fs::path(report);
  write_text(path, j.dump(2) + "\n");
  std::cout << e.report.to_table();
  if (e.occluded_actors > 0)
    std::printf("occluded-actor recall %.3f over %d actors\n", e.occluded_recall, e.occluded_actors);
  std::printf("wrote %s\n", path.string().c_str());
  return 0;
}

int run_infer(const Common& c, const std::string& checkpoint, const std::string& output) {
  const RunConfig cfg = resolve(c);
  const Data d = Data::load(cfg);
  const auto dets = infer(cfg, load_model(cfg, checkpoint), d);
  const fs::path path = output.empty() ? cfg.out / "detections.json" : fs::path(output);
  write_text(path, detections_to_json(dets, class_names(cfg)).dump() + "\n");
  std::printf("wrote %zu frames to %s\n", dets.size(), path.string().c_str());
  return 0;
}

int run_ablate(const Common& c) {
  const RunConfig cfg = resolve(c);
  const Data d = Data::load(cfg);
  const AblationResult r = ablate(cfg, d, default_ablation(cfg.ablate_variants), [](const std::string& s) {
    std::printf("%s\n", s.c_str());
    std::fflush(stdout);
  });
  write_text(cfg.out / "ablation.json", r.to_json().dump(2) + "\n");
  std::cout << r.to_table();
  return 0;
}

int exit_code(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::Config: return 2;
    case ErrorCategory::Io: return 3;
    case ErrorCategory::Format: return 4;
    case ErrorCategory::Numeric: return 5;
    case ErrorCategory::Contract: return 6;
    case ErrorCategory::Dimension: return 7;
  }
  return 1;
}

void report_error(const std::string& category, const std::string& message) {
  std::cerr << nlohmann::json{{"error", category}, {"message", message}}.dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"3D video object detection on simulated LiDAR"};
  app.require_subcommand(1);
  Common common;
  bool resume = false;
  std::string checkpoint, report, output;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "run config (pcvd-cfg-1)")->required();
    sub->add_option("--seed", common.seed, "override the run seed");
    sub->add_option("--out", common.out, "override the output directory");
  };
  CLI::App* gen = app.add_subcommand("generate", "simulate the train and eval scenes into data.dir");
  CLI::App* tr = app.add_subcommand("train", "two-stage training; writes model.ckpt, state.ckpt, train_log.jsonl");
  CLI::App* ev = app.add_subcommand("eval", "center-distance mAP on the eval scenes");
  CLI::App* inf = app.add_subcommand("infer", "detections for every evaluable eval keyframe");
  CLI::App* abl = app.add_subcommand("ablate", "variant comparison over the configured seeds");
  for (CLI::App* s : {gen, tr, ev, inf, abl}) add_common(s);
  tr->add_flag("--resume", resume, "continue from <out>/state.ckpt");
  for (CLI::App* s : {ev, inf}) s->add_option("--checkpoint", checkpoint, "model archive (default <out>/model.ckpt)");
  ev->add_option("--report", report, "report path (default <out>/eval.json)");
  inf->add_option("--output", output, "detections path (default <out>/detections.json)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    report_error("usage", e.what());
    return 64;
  }

  try {
    if (*gen) return run_generate(common);
    if (*tr) return run_train(common, resume);
    if (*ev) return run_eval(common, checkpoint, report);
    if (*inf) return run_infer(common, checkpoint, output);
    if (*abl) return run_ablate(common);
  } catch (const Error& e) {
    report_error(category_name(e.category()), e.what());
    return exit_code(e.category());
  } catch (const std::exception& e) {
    report_error("internal", e.what());
    return 1;
  }
  return 1;
}
