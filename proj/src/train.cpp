// SPDX-License-Identifier: Apache-2.0
#include "mixformer/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace mixformer {

void TrainConfig::validate() const {
  if (stage1_iterations == 0 || stage2_iterations == 0 || batch_size == 0) {
    throw ConfigError("iteration counts and batch size must be positive");
  }
  if (!(learning_rate > 0.0) || !(spm_learning_rate > 0.0)) throw ConfigError("learning rates must be positive");
  if (!(lr_decay_fraction > 0.0 && lr_decay_fraction < 1.0)) {
    throw ConfigError("lr_decay_fraction must lie in (0,1) so the decay happens before the last iteration");
  }
  if (!(lr_decay_factor > 0.0) || !(weight_decay >= 0.0) || !(clip_norm > 0.0)) {
    throw ConfigError("lr_decay_factor and clip_norm must be positive, weight_decay non-negative");
  }
  if (!(brightness_amount >= 0.0 && brightness_amount < 1.0)) throw ConfigError("brightness_amount must lie in [0,1)");
  if (!(center_jitter >= 0.0) || !(scale_jitter >= 0.0)) throw ConfigError("jitter amplitudes must be non-negative");
}

std::size_t TrainConfig::decay_iteration() const {
  return static_cast<std::size_t>(std::floor(lr_decay_fraction * double(stage1_iterations)));
}

template <typename T>
AdamW<T>::AdamW(std::vector<Tensor<T>> params, double weight_decay, double beta1, double beta2, double eps)
    : params_(std::move(params)), weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

template <typename T>
void AdamW<T>::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

template <typename T>
void AdamW<T>::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, double(t_));
  const double c2 = 1.0 - std::pow(beta2_, double(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor<T>& p = params_[i];
    if (!p.has_grad()) continue;
    const std::vector<T> g = p.grad();
    auto w = p.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = double(g[k]);
      m[k] = beta1_ * m[k] + (1.0 - beta1_) * gk;
      v[k] = beta2_ * v[k] + (1.0 - beta2_) * gk * gk;
      double wk = double(w[k]) * (1.0 - lr * weight_decay_);
      wk -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
      w[k] = static_cast<T>(wk);
    }
  }
}

template <typename T>
double global_grad_norm(const std::vector<Tensor<T>>& params) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    for (T g : p.grad()) sq += double(g) * double(g);
  }
  return std::sqrt(sq);
}

template <typename T>
std::pair<double, double> clip_grad_norm(const std::vector<Tensor<T>>& params, double max_norm) {
  const double before = global_grad_norm(params);
  if (before > max_norm) {
    const double coef = max_norm / (before + 1e-6);
    for (auto p : params) {
      if (!p.has_grad()) continue;
      for (T& g : p.mutable_grad()) g = static_cast<T>(double(g) * coef);
    }
  }
  return {before, global_grad_norm(params)};
}

template class AdamW<float>;
template class AdamW<double>;
template double global_grad_norm(const std::vector<Tensor<float>>&);
template double global_grad_norm(const std::vector<Tensor<double>>&);
template std::pair<double, double> clip_grad_norm(const std::vector<Tensor<float>>&, double);
template std::pair<double, double> clip_grad_norm(const std::vector<Tensor<double>>&, double);

CropSettings CropSettings::from(const ModelConfig& model, const TrackerConfig& tracker) {
  CropSettings c;
  c.search_factor = tracker.search_factor;
  c.template_factor = tracker.template_factor;
  c.templates = model.backbone.templates;
  c.template_w = model.backbone.template_w;
  c.template_h = model.backbone.template_h;
  c.search_w = model.backbone.search_w;
  c.search_h = model.backbone.search_h;
  return c;
}

namespace {

constexpr std::size_t kMaxSampleAttempts = 100;
constexpr std::uint64_t kStage1Stream = 0x5100000;
constexpr std::uint64_t kStage2Stream = 0x5200000;

void check_sequence(const Sequence& s) {
  if (s.frames.size() < 2 || s.boxes.size() != s.frames.size()) {
    throw ConfigError("training sequence '" + s.name + "' needs >= 2 labelled frames");
  }
}

std::size_t near_frame(std::size_t center, std::size_t gap, std::size_t n, Rng& rng) {
  const std::size_t lo = center >= gap ? center - gap : 0;
  const std::size_t hi = std::min(n - 1, center + gap);
  return lo + rng.index(hi - lo + 1);
}

Patch template_crop(const Sequence& seq, std::size_t frame, const CropSettings& crops) {
  const PixelBox& b = seq.boxes[frame];
  const double side = std::max(1.0, crop_side(b, crops.template_factor));
  return crop_square(seq.frames[frame], b.center_x(), b.center_y(), side, crops.template_w, crops.template_h);
}

bool inside_unit(const BoundingBox& b) {
  return b.x0 >= 0.0 && b.y0 >= 0.0 && b.x1 <= 1.0 && b.y1 <= 1.0 && b.x0 < b.x1 && b.y0 < b.y1;
}

std::vector<Patch> sample_templates(const Sequence& seq, std::size_t search_frame, std::size_t gap,
                                    const CropSettings& crops, Rng& rng) {
  std::vector<Patch> out;
  for (std::size_t i = 0; i < crops.templates; ++i) {
    out.push_back(template_crop(seq, near_frame(search_frame, gap, seq.frames.size(), rng), crops));
  }
  return out;
}

}  // namespace

TrainingPair make_training_pair(const Sequence& sequence, Rng& rng, const TrainConfig& config,
                                const CropSettings& crops, bool augment) {
  check_sequence(sequence);
  const std::size_t n = sequence.frames.size();
  for (std::size_t attempt = 0; attempt < kMaxSampleAttempts; ++attempt) {
    const std::size_t s = rng.index(n);
    const PixelBox& gt = sequence.boxes[s];
    if (!(gt.area() > 0.0)) continue;
    TrainingPair pair;
    pair.templates = sample_templates(sequence, s, config.max_frame_gap, crops, rng);
    const double size = std::sqrt(gt.w * gt.h);
    double cx = gt.center_x(), cy = gt.center_y();
    double side = crop_side(gt, crops.search_factor);
    if (augment) {
      cx += config.center_jitter * size * rng.uniform(-1.0, 1.0);
      cy += config.center_jitter * size * rng.uniform(-1.0, 1.0);
      side *= std::exp(rng.uniform(-config.scale_jitter, config.scale_jitter));
    }
    pair.search = crop_square(sequence.frames[s], cx, cy, side, crops.search_w, crops.search_h);
    pair.target = pair.search.transform.normalize(gt);
    if (!inside_unit(pair.target)) continue;
    if (augment && config.flip && rng.bernoulli(0.5)) {
      for (auto& t : pair.templates) t = flip_horizontal(t);
      pair.search = flip_horizontal(pair.search);
      pair.target = {1.0 - pair.target.x1, pair.target.y0, 1.0 - pair.target.x0, pair.target.y1};
    }
    if (augment && config.brightness) {
      const double factor = rng.uniform(1.0 - config.brightness_amount, 1.0 + config.brightness_amount);
      for (auto& t : pair.templates) t = scale_brightness(t, factor);
      pair.search = scale_brightness(pair.search, factor);
    }
    return pair;
  }
  throw ConfigError("sequence '" + sequence.name + "' yields no valid training pair");
}

namespace {

std::vector<Tensor<float>> inputs_of(const std::vector<Patch>& patches) {
  std::vector<Tensor<float>> out;
  for (const auto& p : patches) out.push_back(to_input<float>(p));
  return out;
}

void check_finite(double loss, std::size_t iteration, const char* stage) {
  if (!std::isfinite(loss)) {
    throw NumericError(std::string(stage) + ": non-finite loss at iteration " + std::to_string(iteration));
  }
}

}  // namespace

std::vector<LossRecord> train_stage1(Model<float>& model, const std::vector<Sequence>& data,
                                     const TrainConfig& config, const CropSettings& crops, const LossConfig& loss,
                                     const ProgressFn& progress) {
  config.validate();
  loss.validate();
  if (data.empty()) throw ConfigError("stage 1 needs training sequences");
  const std::vector<Tensor<float>> params = trainable_tensors(model.localization_parameters());
  AdamW<float> optimizer(params, config.weight_decay);
  const float inv_batch = 1.0f / float(config.batch_size);
  std::vector<LossRecord> records;
  for (std::size_t it = 0; it < config.stage1_iterations; ++it) {
    Rng rng(derive_seed(config.seed, kStage1Stream + it));
    optimizer.zero_grad();
    double total = 0.0;
    for (std::size_t b = 0; b < config.batch_size; ++b) {
      const Sequence& seq = data[rng.index(data.size())];
      const TrainingPair pair = make_training_pair(seq, rng, config, crops);
      const Prediction<float> pred = model.forward(inputs_of(pair.templates), to_input<float>(pair.search));
      Tensor<float> l = scale(loc_loss(pred.box, pair.target, loss), inv_batch);
      total += double(l.item());
      l.backward();
    }
    check_finite(total, it, "stage 1");
    const auto [before, after] = clip_grad_norm(params, config.clip_norm);
    (void)before;
    const double lr = it < config.decay_iteration() ? config.learning_rate : config.learning_rate * config.lr_decay_factor;
    optimizer.step(lr);
    records.push_back({it, total, after});
    if (progress) progress(records.back());
  }
  optimizer.zero_grad();
  return records;
}

ScoreSample make_score_sample(const Sequence& sequence, Rng& rng, const CropSettings& crops, int label) {
  check_sequence(sequence);
  const std::size_t n = sequence.frames.size();
  for (std::size_t attempt = 0; attempt < kMaxSampleAttempts; ++attempt) {
    const std::size_t s = rng.index(n);
    const PixelBox& gt = sequence.boxes[s];
    if (!(gt.area() > 0.0)) continue;
    ScoreSample sample;
    sample.label = label >= 0 ? label : (rng.bernoulli(0.5) ? 1 : 0);
    sample.templates = sample_templates(sequence, s, n, crops, rng);
    const double size = std::sqrt(gt.w * gt.h);
    const double side = crop_side(gt, crops.search_factor);
    const bool away = sample.label == 0 && rng.bernoulli(0.5);
    double cx = gt.center_x() + 0.25 * size * rng.uniform(-1.0, 1.0);
    double cy = gt.center_y() + 0.25 * size * rng.uniform(-1.0, 1.0);
    if (away) {
      const double angle = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
      const double dist = side * rng.uniform(0.3, 0.8);
      cx = gt.center_x() + dist * std::cos(angle);
      cy = gt.center_y() + dist * std::sin(angle);
    }
    sample.search = crop_square(sequence.frames[s], cx, cy, side, crops.search_w, crops.search_h);
    const BoundingBox target = sample.search.transform.normalize(gt);
    if (sample.label == 1) {
      if (!inside_unit(target)) continue;
      sample.box = target;
      return sample;
    }
    const double w = target.width(), h = target.height();
    for (std::size_t k = 0; k < kMaxSampleAttempts; ++k) {
      const double bx = away ? 0.5 : rng.uniform(0.5 * w, 1.0 - 0.5 * w);
      const double by = away ? 0.5 : rng.uniform(0.5 * h, 1.0 - 0.5 * h);
      const BoundingBox box = BoundingBox::from_center(bx, by, w, h);
      if (inside_unit(box) && iou(box, target) < kNegativeIouCutoff) {
        sample.box = box;
        return sample;
      }
      if (away) break;
    }
  }
  throw ConfigError("sequence '" + sequence.name + "' yields no valid score sample");
}

std::vector<LossRecord> train_stage2_spm(Model<float>& model, const std::vector<Sequence>& data,
                                         const TrainConfig& config, const CropSettings& crops, bool flip_labels,
                                         const ProgressFn& progress) {
  config.validate();
  if (data.empty()) throw ConfigError("stage 2 needs training sequences");
  const std::vector<Tensor<float>> params = trainable_tensors(model.spm_parameters());
  AdamW<float> optimizer(params, config.weight_decay);
  const float inv_batch = 1.0f / float(config.batch_size);
  std::vector<LossRecord> records;
  for (std::size_t it = 0; it < config.stage2_iterations; ++it) {
    Rng rng(derive_seed(config.seed, kStage2Stream + it));
    optimizer.zero_grad();
    double total = 0.0;
    for (std::size_t b = 0; b < config.batch_size; ++b) {
      const Sequence& seq = data[rng.index(data.size())];
      const ScoreSample sample = make_score_sample(seq, rng, crops);
      BackboneOutput<float> features;
      {
        NoGradGuard frozen;
        features = model.forward(inputs_of(sample.templates), to_input<float>(sample.search)).features;
      }
      const int label = flip_labels ? 1 - sample.label : sample.label;
      Tensor<float> l = scale(score_loss(model.score(features, sample.box), label), inv_batch);
      total += double(l.item());
      l.backward();
    }
    check_finite(total, it, "stage 2");
    const auto [before, after] = clip_grad_norm(params, config.clip_norm);
    (void)before;
    optimizer.step(config.spm_learning_rate);
    records.push_back({it, total, after});
    if (progress) progress(records.back());
  }
  optimizer.zero_grad();
  return records;
}

double spm_accuracy(const Model<float>& model, const std::vector<Sequence>& data, const CropSettings& crops,
                    std::size_t count, std::uint64_t seed) {
  if (data.empty() || count == 0) throw ConfigError("accuracy needs sequences and a positive sample count");
  NoGradGuard no_grad;
  Rng rng(seed);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < count; ++i) {
    const Sequence& seq = data[rng.index(data.size())];
    const ScoreSample sample = make_score_sample(seq, rng, crops, int(i % 2));
    const auto features = model.forward(inputs_of(sample.templates), to_input<float>(sample.search)).features;
    const double p = double(model.score(features, sample.box).item());
    correct += (p >= 0.5 ? 1 : 0) == sample.label ? 1 : 0;
  }
  return double(correct) / double(count);
}

std::string loss_csv(const std::vector<LossRecord>& records) {
  std::string out = "iter,loss,grad_norm\n";
  char line[96];
  for (const auto& r : records) {
    std::snprintf(line, sizeof line, "%zu,%.9g,%.9g\n", r.iteration, r.loss, r.grad_norm);
    out += line;
  }
  return out;
}

double smoothed_loss(const std::vector<LossRecord>& records, bool head, std::size_t window) {
  if (records.empty()) return 0.0;
  const std::size_t w = std::min(window, records.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < w; ++i) sum += records[head ? i : records.size() - w + i].loss;
  return sum / double(w);
}

std::vector<TrackResult> track_sequence(const Model<float>& model, const TrackerConfig& config,
                                        const Sequence& sequence) {
  sequence.validate();
  Tracker tracker(model, config);
  tracker.init(sequence.frames[0], sequence.boxes[0]);
  std::vector<TrackResult> out{{tracker.previous_box(), 1.0}};
  for (std::size_t i = 1; i < sequence.frames.size(); ++i) out.push_back(tracker.step(sequence.frames[i]));
  return out;
}

std::vector<Sequence> synthetic_corpus(const SyntheticConfig& config, std::size_t count, std::uint64_t seed) {
  std::vector<Sequence> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_synthetic(config, derive_seed(seed, i)));
  return out;
}

}  // namespace mixformer
