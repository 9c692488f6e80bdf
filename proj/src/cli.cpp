#include "ddrn/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "ddrn/checkpoint.hpp"
#include "ddrn/config.hpp"
#include "ddrn/data.hpp"
#include "ddrn/embedding_space.hpp"
#include "ddrn/model.hpp"
#include "ddrn/retrieval.hpp"
#include "ddrn/trainer.hpp"

namespace ddrn {

namespace {

namespace fs = std::filesystem;

struct CommonArgs {
  std::string config;
  std::string checkpoint;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string ablation;
};

// Usage-level failures detected after CLI11 accepted the flags.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

RunConfig resolve_config(const CommonArgs& a) {
  RunConfig cfg = a.config.empty() ? RunConfig{} : load_config(a.config);
  if (a.seed) cfg.train.seed = *a.seed;
  if (!a.ablation.empty()) apply_ablation(cfg, a.ablation);
  cfg.validate();
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write '" + path.string() + "'");
  f << text;
  if (!f) throw std::runtime_error("write failed for '" + path.string() + "'");
}

SynthDataset make_data(const RunConfig& cfg) {
  return synth_dataset(cfg.synth, cfg.model.image_height, cfg.model.image_width, SubSeeds::from(cfg).data);
}

int cmd_train(const CommonArgs& a, std::ostream& out, std::ostream& err) {
  if (a.out.empty()) throw UsageError("train requires --out DIR");
  RunConfig cfg = resolve_config(a);
  std::optional<Checkpoint> resume;
  if (!a.checkpoint.empty()) resume = load_checkpoint(a.checkpoint);

  const fs::path dir(a.out);
  fs::create_directories(dir);
  write_text(dir / "config.txt", format_config(cfg));
  const SynthDataset data = make_data(cfg);

  std::ofstream log(dir / "metrics.log", resume ? std::ios::app : std::ios::trunc);
  if (!log) throw std::runtime_error("cannot write '" + (dir / "metrics.log").string() + "'");
  TrainHooks hooks;
  hooks.log = &log;
  const std::string ckpt_path = (dir / "checkpoint.ddrn").string();
  hooks.on_epoch = [&](const EpochMetrics& m) {
    err << "epoch " << m.epoch << " loss " << m.loss_total << " mAP " << m.mAP << "\n";
  };
  hooks.on_epoch_state = [&](const Model<float>& model, const AdamState& adam, std::uint64_t step,
                             std::size_t epoch) { save_checkpoint(ckpt_path, make_checkpoint(model, cfg, step, epoch, &adam)); };
  TrainResult result = train(cfg, data, hooks, resume ? &*resume : nullptr);
  save_checkpoint(ckpt_path, make_checkpoint(result.model, cfg, result.step, result.epochs_done, &result.adam));
  if (!result.metrics.empty()) out << format_metrics(result.metrics.back()) << "\n";
  return kExitOk;
}

EvalResult eval_on(Model<float>& model, const SynthDataset& data, const std::string& split) {
  if (split == "occluded") return evaluate_split(model, data.query, data.gallery);
  if (split == "holistic") return evaluate_split(model, data.query_holistic, data.gallery);
  if (split == "train") {
    std::vector<Sample> query, gallery;
    for (const auto& s : data.train) (s.camera == 0 ? query : gallery).push_back(s);
    return evaluate_split(model, query, gallery);
  }
  throw UsageError("unknown split '" + split + "' (occluded|holistic|train)");
}

int cmd_eval(const CommonArgs& a, const std::string& split, const std::string& format, std::ostream& out,
             std::ostream& err) {
  if (a.checkpoint.empty()) throw UsageError("eval requires --checkpoint PATH");
  if (format != "text" && format != "kv") throw UsageError("unknown format '" + format + "' (text|kv)");
  const Checkpoint ckpt = load_checkpoint(a.checkpoint);
  RunConfig cfg = ckpt.config;
  if (!a.config.empty()) {
    const RunConfig given = load_config(a.config);
    RunConfig probe = cfg;
    probe.model = given.model;
    if (format_config(probe) != format_config(cfg)) {
      throw CheckpointError("checkpoint model configuration does not match --config '" + a.config + "'");
    }
    cfg.synth = given.synth;
  }
  if (a.seed) cfg.train.seed = *a.seed;
  Model<float> model = restore_model(ckpt);
  const SynthDataset data = make_data(cfg);
  const EvalResult r = eval_on(model, data, split);
  if (r.skipped_queries > 0) err << "ddrn: " << r.skipped_queries << " queries had no valid gallery match\n";
  out << (format == "kv" ? format_report_kv(r) : format_report(r));
  return kExitOk;
}

int cmd_inspect(const CommonArgs& a, std::size_t bins, std::ostream& out) {
  Tensor<float> codebook;
  if (!a.checkpoint.empty()) {
    const Checkpoint ckpt = load_checkpoint(a.checkpoint);
    if (!ckpt.config.model.embedding_space) {
      throw CheckpointError("checkpoint was trained with embedding_space=off; its codebook is unused");
    }
    auto it = ckpt.tensors.find("codebook");
    if (it == ckpt.tensors.end()) throw CheckpointError("checkpoint lacks tensor 'codebook'");
    if (it->second.rank() != 2 || it->second.rows() != ckpt.config.model.codebook_size ||
        it->second.cols() != ckpt.config.model.embed_dim) {
      throw CheckpointError("codebook shape " + shape_str(it->second.shape()) + " does not match the checkpoint config");
    }
    codebook = it->second;
  } else {
    const RunConfig cfg = resolve_config(a);
    Rng rng(SubSeeds::from(cfg).init);
    codebook = Model<float>(cfg.model, rng).codebook();
  }
  const CosineHistogram h = cosine_histogram(codebook, bins);
  char buf[96];
  for (std::size_t i = 0; i < h.counts.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.6f %zu\n", h.bin_centers[i], h.counts[i]);
    out << buf;
  }
  std::snprintf(buf, sizeof(buf), "pairs %zu\nmax_abs_cos %.6f\nmean_abs_cos %.6f\n", h.pairs, h.max_abs_cos,
                h.mean_abs_cos);
  out << buf;
  return kExitOk;
}

void write_ppm(const fs::path& path, const Tensor<float>& image) {
  const std::size_t h = image.dim(1), w = image.dim(2);
  std::string bytes = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const float v = std::clamp(image.data()[(c * h + y) * w + x], 0.0f, 1.0f);
        bytes.push_back(static_cast<char>(std::lround(v * 255.0f)));
      }
    }
  }
  write_text(path, bytes);
}

int cmd_synth(const CommonArgs& a, std::ostream& out) {
  if (a.out.empty()) throw UsageError("synth requires --out DIR");
  const RunConfig cfg = resolve_config(a);
  const SynthDataset data = make_data(cfg);
  const fs::path dir(a.out);
  fs::create_directories(dir / "images");
  std::ostringstream index;
  index << "split\tfile\tid\tcamera\toccluded_fraction\n";
  auto dump = [&](const char* split, const std::vector<Sample>& set) {
    for (std::size_t i = 0; i < set.size(); ++i) {
      const std::string file = std::string("images/") + split + "_" + std::to_string(i) + ".ppm";
      write_ppm(dir / file, set[i].image);
      index << split << '\t' << file << '\t' << set[i].id << '\t' << set[i].camera << '\t' << set[i].occluded_fraction
            << '\n';
    }
  };
  dump("train", data.train);
  dump("query", data.query);
  dump("query_holistic", data.query_holistic);
  dump("gallery", data.gallery);
  write_text(dir / "index.tsv", index.str());
  out << "train " << data.train.size() << "\nquery " << data.query.size() << "\ngallery " << data.gallery.size()
      << "\n";
  return kExitOk;
}

}  // namespace

int run_gradcheck(const std::vector<GradCheckCase>& cases, std::ostream& out, std::ostream& err) {
  const auto rows = run_gradcheck_suite(cases);
  print_gradcheck_table(rows, out);
  const auto failed = std::count_if(rows.begin(), rows.end(), [](const auto& r) { return !r.pass; });
  if (failed > 0) {
    err << "gradcheck: " << failed << " of " << rows.size() << " checks failed\n";
    return kExitRuntime;
  }
  return kExitOk;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Occlusion-robust re-identification with a discrete embedding space", "ddrn"};
  app.require_subcommand(1);
  CommonArgs common;
  std::string split = "occluded", format = "text";
  std::size_t bins = 20;

  auto add_common = [&](CLI::App* sub, bool checkpoint, bool out_dir) {
    sub->add_option("--config", common.config, "Run configuration (key = value lines)");
    if (checkpoint) sub->add_option("--checkpoint", common.checkpoint, "Checkpoint file");
    if (out_dir) sub->add_option("--out", common.out, "Output directory");
    sub->add_option("--seed", common.seed, "Master seed override");
    sub->add_option("--ablation", common.ablation,
                    "embedding_space=on|off,orthogonal_loss=on|off,hs_arcface=on|off");
  };
  CLI::App* train_cmd = app.add_subcommand("train", "Train on the synthetic benchmark");
  add_common(train_cmd, true, true);
  CLI::App* eval_cmd = app.add_subcommand("eval", "Score a checkpoint on a split");
  eval_cmd->add_option("--config", common.config, "Dataset configuration; its model section must match");
  eval_cmd->add_option("--checkpoint", common.checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--seed", common.seed, "Master seed override (changes the data seed)");
  eval_cmd->add_option("--split", split, "occluded|holistic|train (camera-0 training images against camera-1)");
  eval_cmd->add_option("--format", format, "text|kv");
  CLI::App* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every registered op");
  grad_cmd->add_option("--seed", common.seed, "Seed for the check points");
  CLI::App* inspect_cmd = app.add_subcommand("inspect-codebook", "Pairwise cosine histogram of the codebook");
  add_common(inspect_cmd, true, false);
  inspect_cmd->add_option("--bins", bins, "Histogram bins on [-1, 1]")->check(CLI::PositiveNumber);
  CLI::App* synth_cmd = app.add_subcommand("synth", "Render the synthetic dataset to PPM files");
  add_common(synth_cmd, false, true);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(common, out, err);
    if (eval_cmd->parsed()) return cmd_eval(common, split, format, out, err);
    if (grad_cmd->parsed()) return run_gradcheck(gradcheck_registry(common.seed.value_or(42)), out, err);
    if (inspect_cmd->parsed()) return cmd_inspect(common, bins, out);
    if (synth_cmd->parsed()) return cmd_synth(common, out);
  } catch (const UsageError& e) {
    err << "ddrn: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "ddrn: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace ddrn
