// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mixformer/data.hpp"
#include "mixformer/losses.hpp"
#include "mixformer/model.hpp"
#include "mixformer/tracker.hpp"

namespace mixformer {

struct TrainConfig {
  std::size_t stage1_iterations = 2000;
  std::size_t stage2_iterations = 500;
  std::size_t batch_size = 8;
  double learning_rate = 1e-4;
  double spm_learning_rate = 1e-4;
  /// Stage-1 learning rate drops by lr_decay_factor after this fraction.
  double lr_decay_fraction = 0.8;
  double lr_decay_factor = 0.1;
  double weight_decay = 1e-4;
  double clip_norm = 0.1;
  bool flip = true;
  bool brightness = true;
  double brightness_amount = 0.2;
  /// Search-crop centre shift, in units of the target size (uniform per axis).
  double center_jitter = 0.5;
  /// Search-crop side multiplied by exp(U(-a, a)).
  double scale_jitter = 0.25;
  std::size_t max_frame_gap = 10;
  std::uint64_t seed = 1;

  void validate() const;
  std::size_t decay_iteration() const;
};

/// AdamW: Adam moments with weight decay applied directly to the weights.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<Tensor<T>> params, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8);
  void step(double lr);
  void zero_grad();
  std::size_t steps() const { return t_; }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<double>> m_, v_;
  double weight_decay_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns {norm before, norm after}.
template <typename T>
std::pair<double, double> clip_grad_norm(const std::vector<Tensor<T>>& params, double max_norm);

template <typename T>
double global_grad_norm(const std::vector<Tensor<T>>& params);

struct TrainingPair {
  std::vector<Patch> templates;
  Patch search;
  BoundingBox target;  // normalised in the (augmented) search patch
};

struct CropSettings {
  double search_factor = 5.0;
  double template_factor = 2.0;
  std::size_t templates = 2;
  std::size_t template_w = 32, template_h = 32;
  std::size_t search_w = 64, search_h = 64;

  static CropSettings from(const ModelConfig& model, const TrackerConfig& tracker);
};

/// Samples a search frame and `templates` template frames within
/// max_frame_gap of it, crops them around the ground truth (search crop
/// jittered), and applies flip and brightness jitter consistently.
TrainingPair make_training_pair(const Sequence& sequence, Rng& rng, const TrainConfig& config,
                                const CropSettings& crops, bool augment = true);

struct LossRecord {
  std::size_t iteration = 0;
  double loss = 0.0;
  double grad_norm = 0.0;  // after clipping
};

using ProgressFn = std::function<void(const LossRecord&)>;

/// Localisation training of backbone and head. Aborts with NumericError on
/// a non-finite loss.
std::vector<LossRecord> train_stage1(Model<float>& model, const std::vector<Sequence>& data,
                                     const TrainConfig& config, const CropSettings& crops,
                                     const LossConfig& loss = {}, const ProgressFn& progress = {});

struct ScoreSample {
  std::vector<Patch> templates;
  Patch search;
  BoundingBox box;  // region to score, normalised in the search patch
  int label = 0;
};

constexpr double kNegativeIouCutoff = 0.3;

/// Positive: box on the target. Negative: box with IoU < 0.3 against the
/// target, either shifted inside a target crop or in a crop centred away
/// from the target. A negative `label` draws it uniformly.
ScoreSample make_score_sample(const Sequence& sequence, Rng& rng, const CropSettings& crops, int label = -1);

/// Score-predictor training on frozen backbone features. Only score
/// predictor parameters change. `flip_labels` trains on inverted labels.
std::vector<LossRecord> train_stage2_spm(Model<float>& model, const std::vector<Sequence>& data,
                                         const TrainConfig& config, const CropSettings& crops,
                                         bool flip_labels = false, const ProgressFn& progress = {});

/// Accuracy at threshold 0.5 on `count` balanced samples.
double spm_accuracy(const Model<float>& model, const std::vector<Sequence>& data, const CropSettings& crops,
                    std::size_t count, std::uint64_t seed);

std::string loss_csv(const std::vector<LossRecord>& records);

/// Mean of the first / last `window` losses.
double smoothed_loss(const std::vector<LossRecord>& records, bool head, std::size_t window);

std::vector<TrackResult> track_sequence(const Model<float>& model, const TrackerConfig& config,
                                        const Sequence& sequence);

/// Synthetic training corpus: `count` sequences from consecutive seeds.
std::vector<Sequence> synthetic_corpus(const SyntheticConfig& config, std::size_t count, std::uint64_t seed);

}  // namespace mixformer
