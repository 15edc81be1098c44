// Command-line entry point: synth-data, train, evaluate, generate, ablate,
// benchmark, gradcheck, config.

#include <cmath>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "jambatalk/config.hpp"
#include "jambatalk/experiments.hpp"

using namespace jambatalk;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
};

RunConfig resolve(const Common& c) {
  RunConfig cfg = default_run_config();
  if (!c.config_path.empty()) apply_ini(cfg, c.config_path);
  for (const auto& o : c.overrides) apply_override(cfg, o);
  if (c.seed) cfg.seed = *c.seed;
  cfg.sync();
  return cfg;
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty()) return;
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write " + path);
  out << text << '\n';
}

VertexMask mask_for(const Dataset& data, const std::string& lip, const std::string& upper) {
  VertexMask mask = data.mask;
  if (!lip.empty()) mask.lip_indices = load_index_file(lip);
  if (!upper.empty()) mask.upper_indices = load_index_file(upper);
  return mask;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"speech-driven 3D facial motion with a hybrid Mamba/Transformer decoder"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", common.config_path, "INI config file")->check(CLI::ExistingFile);
    sub->add_option("--set", common.overrides, "override, section.key=value (repeatable)");
    sub->add_option("--seed", common.seed, "seed for every random stream");
  };

  auto* synth = app.add_subcommand("synth-data", "write a synthetic dataset directory");
  std::string synth_out;
  synth->add_option("-o,--out", synth_out, "output directory")->required();
  add_common(synth);

  auto* train_cmd = app.add_subcommand("train", "train a model and save a checkpoint");
  std::string ckpt_out, csv_out;
  train_cmd->add_option("-o,--out", ckpt_out, "checkpoint path")->required();
  train_cmd->add_option("--loss-csv", csv_out, "loss curve CSV (step, train_loss, val_loss)");
  add_common(train_cmd);

  auto* eval_cmd = app.add_subcommand("evaluate", "LVE / FDD of a checkpoint on one split");
  std::string eval_ckpt, split_name_arg = "test", json_out, lip_file, upper_file;
  bool teacher = false;
  eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint path")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--split", split_name_arg, "train, val or test");
  eval_cmd->add_flag("--teacher-forced", teacher, "feed ground-truth history instead of the model's own outputs");
  eval_cmd->add_option("--json", json_out, "write metric records as JSON");
  eval_cmd->add_option("--lip-mask", lip_file, "lip vertex index file");
  eval_cmd->add_option("--upper-mask", upper_file, "upper-face vertex index file");
  add_common(eval_cmd);

  auto* gen_cmd = app.add_subcommand("generate", "animate one audio file");
  std::string gen_ckpt, audio_file, motion_out, obj_dir, template_file;
  std::size_t subject = 0, frames = 0;
  gen_cmd->add_option("--checkpoint", gen_ckpt, "checkpoint path")->required()->check(CLI::ExistingFile);
  gen_cmd->add_option("--audio", audio_file, "16 kHz mono .wav or .feat features")->required()->check(CLI::ExistingFile);
  gen_cmd->add_option("--subject", subject, "speaking-style id");
  gen_cmd->add_option("--frames", frames, "frame count (default: audio duration x fps)");
  gen_cmd->add_option("-o,--out", motion_out, "motion output (.jtms)")->required();
  gen_cmd->add_option("--obj-dir", obj_dir, "also write one .obj per frame here");
  gen_cmd->add_option("--template", template_file, "neutral mesh for --obj-dir");
  add_common(gen_cmd);

  auto* ablate_cmd = app.add_subcommand("ablate", "train and score all four arrangements");
  std::string ablate_json_out;
  ablate_cmd->add_option("--json", ablate_json_out, "write the table as JSON");
  add_common(ablate_cmd);

  auto* bench_cmd = app.add_subcommand("benchmark", "incremental decoding throughput and state memory");
  std::string bench_ckpt, bench_json_out;
  std::vector<std::size_t> lengths{64, 128, 256, 512};
  bench_cmd->add_option("--checkpoint", bench_ckpt, "checkpoint (default: freshly initialised model)");
  bench_cmd->add_option("--lengths", lengths, "sequence lengths")->delimiter(',');
  bench_cmd->add_option("--json", bench_json_out, "write the report as JSON");
  add_common(bench_cmd);

  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of the full toy model");
  std::size_t grad_frames = 4;
  double grad_tol = 1e-4;
  grad_cmd->add_option("--frames", grad_frames, "sequence length");
  grad_cmd->add_option("--tol", grad_tol, "pass threshold on the max relative error");
  add_common(grad_cmd);

  auto* config_cmd = app.add_subcommand("config", "print the effective configuration");
  add_common(config_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const RunConfig cfg = resolve(common);
    auto log = [](const std::string& s) { std::cerr << s << '\n'; };

    if (*config_cmd) {
      std::cout << to_ini(cfg);
      return 0;
    }
    if (*synth) {
      const Dataset data = synth_dataset(cfg.data.synth);
      save_dataset_layout(synth_out, data);
      std::cout << fmt::format("wrote {} records ({} subjects, V = {}) to {}\n", data.records.size(),
                               data.subjects.size(), data.vertex_count(), synth_out);
      return 0;
    }
    if (*train_cmd) {
      cfg.validate();
      const Dataset data = load_data(cfg);
      Model model(fit_model_to_data(cfg.model, data), cfg.seed);
      TrainConfig tc = cfg.train;
      if (!csv_out.empty()) tc.loss_csv = csv_out;
      const TrainResult res = train(model, data, tc, [&](const EpochLog& e) {
        log(fmt::format("epoch {:>4}  step {:>6}  train {:.6g}  val {:.6g}  {:.2f}s", e.epoch, e.step,
                        e.train_loss, e.val_loss, e.seconds));
      });
      save_model(ckpt_out, model, cfg.seed);
      std::string routing;
      for (auto c : res.routing_counts) routing += fmt::format(" {}", c);
      if (!routing.empty()) log("expert selections:" + routing);
      std::cout << fmt::format("trained {} steps; checkpoint {}\n", res.steps, ckpt_out);
      return 0;
    }
    if (*eval_cmd) {
      const Model model = load_model(eval_ckpt);
      const Dataset data = load_data(cfg);
      const EvalReport rep =
          evaluate(model, data, parse_split(split_name_arg), mask_for(data, lip_file, upper_file), !teacher);
      std::cout << rep.table();
      write_text(json_out, metric_records_json(rep.records()));
      return 0;
    }
    if (*gen_cmd) {
      const Model model = load_model(gen_ckpt);
      const std::filesystem::path ap(audio_file);
      SpeechFeatures feats =
          ap.extension() == ".wav" ? model.features_from_waveform(read_wav(ap)) : load_features(ap);
      const double fps = model.config().fps;
      if (frames == 0) {
        frames = static_cast<std::size_t>(std::lround(feats.length() / feats.source_rate * fps));
      }
      const MotionSequence motion = model.generate(feats, subject, frames);
      save_motion(motion_out, motion);
      if (!obj_dir.empty()) {
        if (template_file.empty()) throw ConfigError("--obj-dir needs --template");
        export_obj_frames(obj_dir, ap.stem().string(), motion, load_obj(template_file));
      }
      std::cout << fmt::format("wrote {} frames to {}\n", motion.frames, motion_out);
      return 0;
    }
    if (*ablate_cmd) {
      cfg.validate();
      const Dataset data = load_data(cfg);
      const auto rows = ablate(cfg, data, log);
      std::cout << ablation_table(rows);
      write_text(ablate_json_out, ablation_json(rows));
      bool all_ok = true;
      for (const auto& r : rows) all_ok = all_ok && r.ok;
      return all_ok ? 0 : 1;
    }
    if (*bench_cmd) {
      Model model = bench_ckpt.empty() ? Model(cfg.model, cfg.seed) : load_model(bench_ckpt);
      const BenchmarkReport rep = benchmark(model, lengths);
      std::cout << benchmark_table(rep);
      write_text(bench_json_out, benchmark_json(rep));
      return 0;
    }
    if (*grad_cmd) {
      Model model(toy_model_config(cfg.model.decoder.arrangement), cfg.seed);
      const GradCheckResult r = gradcheck_model(model, grad_frames, cfg.seed);
      std::cout << fmt::format("max relative error {:.3e} at {}[{}] over {} coordinates\n", r.max_error,
                               r.worst_key, r.worst_index, r.coordinates);
      return r.max_error < grad_tol ? 0 : 1;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
