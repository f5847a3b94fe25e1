// SPDX-License-Identifier: Apache-2.0
#include "mixformer/config.hpp"

#include <charconv>
#include <functional>
#include <set>
#include <sstream>

#include "mixformer/io.hpp"

namespace mixformer {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

double to_double(const std::string& v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("expected a number, got '" + v + "'");
  return out;
}

std::uint64_t to_u64(const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError("expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

bool to_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("expected true or false, got '" + v + "'");
}

std::string from_double(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

std::string from_bool(bool v) { return v ? "true" : "false"; }

struct Key {
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define MIXFORMER_SIZE_KEY(name, field)                                                 \
  Key {                                                                                 \
    name, [](RunConfig& c, const std::string& v) { c.field = to_u64(v); },              \
        [](const RunConfig& c) { return std::to_string(c.field); }                      \
  }
#define MIXFORMER_DOUBLE_KEY(name, field)                                               \
  Key {                                                                                 \
    name, [](RunConfig& c, const std::string& v) { c.field = to_double(v); },           \
        [](const RunConfig& c) { return from_double(c.field); }                         \
  }
#define MIXFORMER_BOOL_KEY(name, field)                                                 \
  Key {                                                                                 \
    name, [](RunConfig& c, const std::string& v) { c.field = to_bool(v); },             \
        [](const RunConfig& c) { return from_bool(c.field); }                           \
  }

const std::vector<Key>& keys() {
  static const std::vector<Key> table = {
      Key{"preset", [](RunConfig& c, const std::string& v) { c.preset = parse_preset(v); },
          [](const RunConfig& c) { return to_string(c.preset); }},
      Key{"head", [](RunConfig& c, const std::string& v) { c.head = parse_head_type(v); },
          [](const RunConfig& c) { return to_string(c.head); }},
      Key{"attention", [](RunConfig& c, const std::string& v) { c.attention = parse_attention_mode(v); },
          [](const RunConfig& c) { return to_string(c.attention); }},
      // tracking
      MIXFORMER_SIZE_KEY("update_interval", tracker.update_interval),
      MIXFORMER_DOUBLE_KEY("score_threshold", tracker.score_threshold),
      MIXFORMER_DOUBLE_KEY("search_factor", tracker.search_factor),
      MIXFORMER_DOUBLE_KEY("template_factor", tracker.template_factor),
      MIXFORMER_DOUBLE_KEY("min_search_side", tracker.min_search_side),
      MIXFORMER_SIZE_KEY("online_templates", tracker.online_templates),
      MIXFORMER_BOOL_KEY("cache_templates", tracker.cache_templates),
      // loss
      MIXFORMER_DOUBLE_KEY("lambda_l1", loss.lambda_l1),
      MIXFORMER_DOUBLE_KEY("lambda_giou", loss.lambda_giou),
      // training
      MIXFORMER_SIZE_KEY("seed", train.seed),
      MIXFORMER_SIZE_KEY("stage1_iterations", train.stage1_iterations),
      MIXFORMER_SIZE_KEY("stage2_iterations", train.stage2_iterations),
      MIXFORMER_SIZE_KEY("batch_size", train.batch_size),
      MIXFORMER_DOUBLE_KEY("learning_rate", train.learning_rate),
      MIXFORMER_DOUBLE_KEY("spm_learning_rate", train.spm_learning_rate),
      MIXFORMER_DOUBLE_KEY("lr_decay_fraction", train.lr_decay_fraction),
      MIXFORMER_DOUBLE_KEY("lr_decay_factor", train.lr_decay_factor),
      MIXFORMER_DOUBLE_KEY("weight_decay", train.weight_decay),
      MIXFORMER_DOUBLE_KEY("clip_norm", train.clip_norm),
      MIXFORMER_BOOL_KEY("flip", train.flip),
      MIXFORMER_BOOL_KEY("brightness", train.brightness),
      MIXFORMER_DOUBLE_KEY("brightness_amount", train.brightness_amount),
      MIXFORMER_DOUBLE_KEY("center_jitter", train.center_jitter),
      MIXFORMER_DOUBLE_KEY("scale_jitter", train.scale_jitter),
      MIXFORMER_SIZE_KEY("max_frame_gap", train.max_frame_gap),
      // synthetic corpus
      MIXFORMER_SIZE_KEY("synthetic_sequences", synthetic_sequences),
      MIXFORMER_SIZE_KEY("synthetic_seed", synthetic_seed),
      MIXFORMER_SIZE_KEY("synthetic_frames", synthetic.frames),
      MIXFORMER_SIZE_KEY("synthetic_width", synthetic.width),
      MIXFORMER_SIZE_KEY("synthetic_height", synthetic.height),
      MIXFORMER_DOUBLE_KEY("synthetic_object_w", synthetic.object_w),
      MIXFORMER_DOUBLE_KEY("synthetic_object_h", synthetic.object_h),
      MIXFORMER_DOUBLE_KEY("synthetic_motion", synthetic.motion),
      MIXFORMER_DOUBLE_KEY("synthetic_scale_jitter", synthetic.scale_jitter),
      MIXFORMER_DOUBLE_KEY("synthetic_brightness_jitter", synthetic.brightness_jitter),
      MIXFORMER_DOUBLE_KEY("synthetic_noise", synthetic.noise),
      MIXFORMER_SIZE_KEY("synthetic_distractors", synthetic.distractors),
  };
  return table;
}

#undef MIXFORMER_SIZE_KEY
#undef MIXFORMER_DOUBLE_KEY
#undef MIXFORMER_BOOL_KEY

}  // namespace

SyntheticConfig RunConfig::default_synthetic() {
  SyntheticConfig s;
  s.frames = 30;
  s.motion = 2.0;
  s.scale_jitter = 0.02;
  return s;
}

ModelConfig RunConfig::model_config() const {
  return ModelConfig::make(preset, head, attention, 1 + tracker.online_templates);
}

void RunConfig::validate() const {
  model_config().validate();
  tracker.validate();
  train.validate();
  loss.validate();
  synthetic.validate();
  if (synthetic_sequences == 0) throw ConfigError("synthetic_sequences must be >= 1");
  if (synthetic.frames < 2) throw ConfigError("synthetic_frames must be >= 2 for training pairs");
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& k : keys()) out += k.name + " = " + k.get(*this) + "\n";
  return out;
}

std::vector<std::string> run_config_keys() {
  std::vector<std::string> out;
  for (const auto& k : keys()) out.push_back(k.name);
  return out;
}

RunConfig parse_run_config(std::string_view text) {
  RunConfig config;
  std::set<std::string> seen;
  std::istringstream in{std::string(text)};
  std::string raw;
  std::size_t line_number = 0;
  while (std::getline(in, raw)) {
    ++line_number;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const std::string where = "config line " + std::to_string(line_number) + ": ";
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value', got '" + line + "'");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    const auto& table = keys();
    const auto it = std::find_if(table.begin(), table.end(), [&](const Key& k) { return k.name == key; });
    if (it == table.end()) throw ConfigError(where + "unknown key '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError(where + "duplicate key '" + key + "'");
    if (value.empty()) throw ConfigError(where + "missing value for '" + key + "'");
    try {
      it->set(config, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + key + ": " + e.what());
    }
  }
  config.validate();
  return config;
}

RunConfig load_run_config(const std::filesystem::path& path) { return parse_run_config(read_text_file(path)); }

TrainingRun train_from_config(const RunConfig& config, const ProgressFn& stage1_progress,
                              const ProgressFn& stage2_progress) {
  config.validate();
  const ModelConfig mc = config.model_config();
  TrainingRun run{Model<float>(mc, config.train.seed), {}, {}};
  const std::vector<Sequence> corpus =
      synthetic_corpus(config.synthetic, config.synthetic_sequences, config.synthetic_seed);
  const CropSettings crops = CropSettings::from(mc, config.tracker);
  run.stage1 = train_stage1(run.model, corpus, config.train, crops, config.loss, stage1_progress);
  run.stage2 = train_stage2_spm(run.model, corpus, config.train, crops, false, stage2_progress);
  return run;
}

}  // namespace mixformer
