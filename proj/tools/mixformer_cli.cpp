// SPDX-License-Identifier: Apache-2.0
// Command-line front end: train, track, eval, inspect, cost, generate.
#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>

#include "mixformer/checkpoint.hpp"
#include "mixformer/config.hpp"
#include "mixformer/cost.hpp"
#include "mixformer/io.hpp"

namespace fs = std::filesystem;
using namespace mixformer;

namespace {

RunConfig config_or_default(const std::string& path) { return path.empty() ? RunConfig{} : load_run_config(path); }

Model<float> load_model(const RunConfig& config, const std::string& checkpoint) {
  Model<float> model(config.model_config(), config.train.seed);
  load_checkpoint(model, checkpoint);
  return model;
}

void cmd_train(const std::string& config_path, const std::string& out, const std::string& loss_dir, bool quiet) {
  const RunConfig config = load_run_config(config_path);
  auto report = [quiet](const char* stage, std::size_t total) {
    return [=](const LossRecord& r) {
      if (quiet || (r.iteration + 1) % 100 != 0) return;
      std::fprintf(stderr, "%s %zu/%zu loss %.5f\n", stage, r.iteration + 1, total, r.loss);
    };
  };
  const TrainingRun run = train_from_config(config, report("stage1", config.train.stage1_iterations),
                                            report("stage2", config.train.stage2_iterations));
  save_checkpoint(run.model, out);
  if (!loss_dir.empty()) {
    fs::create_directories(loss_dir);
    write_file_atomic(fs::path(loss_dir) / "stage1_loss.csv", loss_csv(run.stage1));
    write_file_atomic(fs::path(loss_dir) / "stage2_loss.csv", loss_csv(run.stage2));
  }
}

void cmd_track(const std::string& config_path, const std::string& checkpoint, const std::string& sequence_dir,
               const std::string& out) {
  const RunConfig config = config_or_default(config_path);
  const Model<float> model = load_model(config, checkpoint);
  const Sequence seq = load_sequence(sequence_dir);
  write_file_atomic(out, track_csv(track_sequence(model, config.tracker, seq)));
}

void cmd_eval(const std::vector<std::string>& boxes, const std::vector<std::string>& sequences,
              const std::string& out) {
  if (boxes.size() != sequences.size()) throw UsageError("--boxes and --sequence must be given the same number of times");
  std::string csv = "sequence,auc,precision\n";
  char buf[160];
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const Sequence seq = load_sequence(sequences[i]);
    const std::vector<TrackResult> results = parse_track_csv(read_text_file(boxes[i]));
    if (results.size() != seq.boxes.size()) {
      throw ConfigError(boxes[i] + " has " + std::to_string(results.size()) + " rows but " + sequences[i] + " has " +
                        std::to_string(seq.boxes.size()) + " ground-truth boxes");
    }
    std::vector<PixelBox> pred;
    for (const auto& r : results) pred.push_back(r.box);
    std::snprintf(buf, sizeof buf, ",%.6f,%.6f\n", success_auc(pred, seq.boxes), precision(pred, seq.boxes));
    csv += fs::path(sequences[i]).filename().string() + buf;
  }
  write_file_atomic(out, csv);
}

void cmd_inspect(const std::string& config_path, const std::string& checkpoint, const std::string& sequence_dir,
                 std::size_t frame, std::size_t stage, std::optional<std::size_t> block, const std::string& out_dir) {
  const RunConfig config = config_or_default(config_path);
  const Model<float> model = load_model(config, checkpoint);
  const Sequence seq = load_sequence(sequence_dir);
  if (frame < 1 || frame > seq.frames.size()) {
    throw UsageError("--frame must lie in 1.." + std::to_string(seq.frames.size()));
  }
  if (stage < 1 || stage > kStageCount) throw UsageError("--stage must lie in 1..3");
  const std::size_t blocks = model.config().backbone.stages[stage - 1].blocks;
  const std::size_t b = block.value_or(blocks);
  if (b < 1 || b > blocks) throw UsageError("--block must lie in 1.." + std::to_string(blocks));

  // Templates from the first frame; search crop around the frame's box (or
  // the initial box when only one box is recorded).
  Tracker tracker(model, config.tracker);
  tracker.init(seq.frames[0], seq.boxes[0]);
  const PixelBox& around = seq.boxes.size() == seq.frames.size() ? seq.boxes[frame - 1] : seq.boxes[0];
  const Tensor<float> search = to_input<float>(tracker.crop_search(seq.frames[frame - 1], around));
  NoGradGuard no_grad;
  const AttentionDump dump = model.attention_dump(tracker.template_inputs(), search, stage - 1, b - 1);

  fs::create_directories(out_dir);
  const fs::path dir(out_dir);
  write_file_atomic(dir / "search_to_template.csv", attention_map_csv(dump.search_to_template));
  write_file_atomic(dir / "search_to_search.csv", attention_map_csv(dump.search_to_search));
  if (dump.search_to_online) write_file_atomic(dir / "search_to_online.csv", attention_map_csv(*dump.search_to_online));
  if (dump.online_to_template) {
    write_file_atomic(dir / "online_to_template.csv", attention_map_csv(*dump.online_to_template));
  }
}

void cmd_cost(const std::string& config_path, const std::string& preset, const std::string& head,
              const std::string& attention, std::size_t templates) {
  ModelConfig mc;
  if (!config_path.empty()) {
    mc = load_run_config(config_path).model_config();
  } else {
    mc = ModelConfig::make(parse_preset(preset), parse_head_type(head), parse_attention_mode(attention), templates);
    mc.validate();
  }
  std::cout << count_params_flops(mc).table();
}

void cmd_generate(const std::string& config_path, std::uint64_t seed, const std::string& out) {
  const RunConfig config = config_or_default(config_path);
  save_sequence(generate_synthetic(config.synthetic, seed), out);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixed-attention single-object tracker"};
  app.require_subcommand(1);

  std::string config, checkpoint, sequence, out, loss_dir;
  bool quiet = false;

  auto* train = app.add_subcommand("train", "Train both stages from a run config and write a checkpoint");
  train->add_option("--config", config, "Run config file")->required()->check(CLI::ExistingFile);
  train->add_option("--out", out, "Checkpoint to write")->required();
  train->add_option("--loss-dir", loss_dir, "Directory for stage1_loss.csv and stage2_loss.csv");
  train->add_flag("--quiet", quiet, "No progress output");

  auto* track = app.add_subcommand("track", "Track a sequence and write frame,x,y,w,h,score rows");
  track->add_option("--config", config, "Run config (defaults when omitted)")->check(CLI::ExistingFile);
  track->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  track->add_option("--sequence", sequence, "Sequence directory")->required()->check(CLI::ExistingDirectory);
  track->add_option("--out", out, "Box file to write")->required();

  std::vector<std::string> eval_boxes, eval_sequences;
  auto* eval = app.add_subcommand("eval", "Score box files against ground truth");
  eval->add_option("--boxes", eval_boxes, "Box file (repeatable)")->required()->check(CLI::ExistingFile);
  eval->add_option("--sequence", eval_sequences, "Sequence directory (repeatable, same order)")
      ->required()
      ->check(CLI::ExistingDirectory);
  eval->add_option("--out", out, "Metrics CSV to write")->required();

  std::size_t frame = 1, stage = kStageCount;
  std::optional<std::size_t> block;
  auto* inspect = app.add_subcommand("inspect", "Write attention maps of one block as CSV files");
  inspect->add_option("--config", config, "Run config (defaults when omitted)")->check(CLI::ExistingFile);
  inspect->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  inspect->add_option("--sequence", sequence, "Sequence directory")->required()->check(CLI::ExistingDirectory);
  inspect->add_option("--frame", frame, "1-based search frame")->capture_default_str();
  inspect->add_option("--stage", stage, "1-based stage")->capture_default_str();
  inspect->add_option("--block", block, "1-based block (default: last)");
  inspect->add_option("--out-dir", out, "Directory for the CSV files")->required();

  std::string preset = "mixformer", head = "corner", attention = "full";
  std::size_t templates = 2;
  auto* cost = app.add_subcommand("cost", "Print parameter and FLOP counts");
  cost->add_option("--config", config, "Run config (overrides the flags below)")->check(CLI::ExistingFile);
  cost->add_option("--preset", preset, "mixformer | mixformer_l | tiny")->capture_default_str();
  cost->add_option("--head", head, "corner | query")->capture_default_str();
  cost->add_option("--attention", attention, "full | asymmetric")->capture_default_str();
  cost->add_option("--templates", templates)->capture_default_str();

  std::uint64_t seed = 1;
  auto* generate = app.add_subcommand("generate", "Write a synthetic sequence (frames + groundtruth.txt)");
  generate->add_option("--config", config, "Run config supplying synthetic_* keys")->check(CLI::ExistingFile);
  generate->add_option("--seed", seed)->capture_default_str();
  generate->add_option("--out", out, "Sequence directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) cmd_train(config, out, loss_dir, quiet);
    if (*track) cmd_track(config, checkpoint, sequence, out);
    if (*eval) cmd_eval(eval_boxes, eval_sequences, out);
    if (*inspect) cmd_inspect(config, checkpoint, sequence, frame, stage, block, out);
    if (*cost) cmd_cost(config, preset, head, attention, templates);
    if (*generate) cmd_generate(config, seed, out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
