#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "dcaunet/data.hpp"
#include "dcaunet/metrics.hpp"
#include "dcaunet/net.hpp"

namespace dcaunet {

struct LossWeights {
  double ce = 0.4;
  double dice = 0.6;
};

struct LossTerms {
  Tensor total;  // scalar, differentiable
  double ce = 0.0;
  double dice = 0.0;  // 1 - mean foreground soft Dice
};

inline constexpr double kSoftDiceSmooth = 1e-5;

// (B,H,W,K) one-hot targets; throws ConfigError for labels outside [0, K).
Tensor one_hot(const std::vector<LabelMask>& masks, std::size_t num_classes);

// Soft Dice per foreground class, computed over the whole batch.
Tensor soft_dice_per_class(const Tensor& probs, const Tensor& target, double smooth = kSoftDiceSmooth);

LossTerms segmentation_loss(const Tensor& logits, const std::vector<LabelMask>& masks,
                            const LossWeights& w = {}, double smooth = kSoftDiceSmooth);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

class AdamW {
 public:
  AdamW(ParamList params, AdamWConfig cfg);

  // One decoupled-decay update using the gradients currently held by the
  // parameters. Throws NumericError naming the first non-finite gradient
  // before any parameter is touched.
  void step(double lr);
  void zero_grad();

  std::size_t steps() const { return step_; }
  const AdamWConfig& config() const { return cfg_; }
  const std::vector<NamedParam>& params() const { return params_; }
  // Names of parameters that receive weight decay.
  std::vector<std::string> decayed_names() const;

 private:
  AdamWConfig cfg_;
  std::vector<NamedParam> params_;  // buffers excluded
  std::vector<std::vector<double>> m_, v_;
  std::size_t step_ = 0;
};

// Cosine decay from lr to floor_fraction * lr over total_steps.
double cosine_lr(double lr, std::size_t step, std::size_t total_steps, double floor_fraction = 1e-2);

struct TrainConfig {
  std::size_t epochs = 400;
  std::size_t batch_size = 24;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double ce_weight = 0.4;
  double dice_weight = 0.6;
  std::uint64_t seed = 0;
  std::string lr_schedule = "cosine";  // "cosine" or "constant"
  double min_lr_fraction = 1e-2;
  AugmentConfig augment;
  std::size_t eval_every = 1;  // epochs between validation passes

  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;  // optimizer steps taken so far
  double loss = 0.0, ce = 0.0, dice = 0.0;
  double lr = 0.0;
  double val_dsc = -1.0;  // -1 when not evaluated this epoch
};

std::string to_json_line(const EpochRecord& r);

struct FitResult {
  std::vector<EpochRecord> log;
  double best_val_dsc = -1.0;
  std::size_t best_epoch = 0;
  bool halted = false;
  std::string halt_reason;
};

struct FitOutputs {
  std::filesystem::path dir;  // empty: no files written
  std::string checkpoint_extra_json = "{}";
};

// Trains in the serial, fixed-order mode. Validation uses `val` when non-empty,
// otherwise the training set without augmentation.
FitResult fit(Network& net, const std::vector<Sample>& train, const std::vector<Sample>& val,
              const TrainConfig& cfg, const FitOutputs& outputs = {},
              const std::function<void(const EpochRecord&)>& on_epoch = {});

// Eval-mode argmax masks, processed in chunks of `batch`.
std::vector<LabelMask> predict(Network& net, const std::vector<Sample>& samples, std::size_t batch = 8);
// Mean over samples of mean foreground hard Dice.
double mean_dice(Network& net, const std::vector<Sample>& samples, std::size_t batch = 8);
// Mean foreground soft Dice on eval-mode softmax probabilities, whole set.
double mean_soft_dice(Network& net, const std::vector<Sample>& samples, std::size_t batch = 8);

}  // namespace dcaunet
