#include "dcaunet/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <tuple>

#include <nlohmann/json.hpp>

#include "dcaunet/archive.hpp"
#include "dcaunet/autograd.hpp"
#include "dcaunet/errors.hpp"
#include "dcaunet/random.hpp"

namespace dcaunet {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kAugmentSeedStream = 0x747261;

std::vector<NamedParam> trainable(const ParamList& list) {
  std::vector<NamedParam> out;
  for (const auto& p : list.entries())
    if (p.kind != ParamKind::buffer) out.push_back(p);
  return out;
}

std::vector<std::vector<std::size_t>> chunks(std::size_t n, std::size_t batch) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch) {
    out.emplace_back();
    for (std::size_t j = i; j < std::min(n, i + batch); ++j) out.back().push_back(j);
  }
  return out;
}

template <typename Fn>
void for_each_eval_batch(Network& net, const std::vector<Sample>& samples, std::size_t batch, Fn fn) {
  ForwardContext ctx;
  ctx.mode = Mode::eval;
  for (const auto& idx : chunks(samples.size(), std::max<std::size_t>(batch, 1))) {
    const SampleBatch b = make_batch(samples, idx);
    fn(b, net.forward(b.images, ctx).detach());
  }
}

}  // namespace

Tensor one_hot(const std::vector<LabelMask>& masks, std::size_t num_classes) {
  if (masks.empty()) throw UsageError("one_hot: no masks");
  const std::size_t h = masks[0].height, w = masks[0].width;
  std::vector<double> v(masks.size() * h * w * num_classes, 0.0);
  for (std::size_t b = 0; b < masks.size(); ++b) {
    if (masks[b].height != h || masks[b].width != w) throw DimensionError("one_hot: mask extents differ");
    masks[b].validate(num_classes);
    for (std::size_t i = 0; i < h * w; ++i)
      v[(b * h * w + i) * num_classes + static_cast<std::size_t>(masks[b].labels[i])] = 1.0;
  }
  return Tensor({masks.size(), h, w, num_classes}, std::move(v));
}

Tensor soft_dice_per_class(const Tensor& probs, const Tensor& target, double smooth) {
  if (probs.shape() != target.shape() || probs.rank() != 4) {
    throw DimensionError("soft dice: probs " + to_string(probs.shape()) + " vs target " +
                         to_string(target.shape()));
  }
  const std::size_t k = probs.dim(3);
  const Tensor p = slice(probs, 3, 1, k), t = slice(target, 3, 1, k);
  const Tensor inter = sum(mul(p, t), {0, 1, 2});
  const Tensor denom = add(sum(p, {0, 1, 2}), sum(t, {0, 1, 2}));
  return div(add_scalar(scale(inter, 2.0), smooth), add_scalar(denom, smooth));
}

LossTerms segmentation_loss(const Tensor& logits, const std::vector<LabelMask>& masks,
                            const LossWeights& w, double smooth) {
  if (logits.rank() != 4) throw DimensionError("loss expects (B,H,W,K) logits, got " + to_string(logits.shape()));
  const std::size_t k = logits.dim(3);
  if (k < 2) throw ConfigError("loss: need at least two classes");
  if (masks.size() != logits.dim(0) || masks[0].height != logits.dim(1) || masks[0].width != logits.dim(2)) {
    throw DimensionError("loss: masks do not match logits " + to_string(logits.shape()));
  }
  const Tensor target = one_hot(masks, k);
  const double pixels = static_cast<double>(logits.numel() / k);
  const Tensor ce = scale(sum(mul(log_softmax_lastdim(logits), target)), -1.0 / pixels);
  const Tensor dice_loss = add_scalar(neg(mean(soft_dice_per_class(softmax_lastdim(logits), target, smooth))), 1.0);
  LossTerms out;
  out.total = add(scale(ce, w.ce), scale(dice_loss, w.dice));
  out.ce = ce.item();
  out.dice = dice_loss.item();
  return out;
}

AdamW::AdamW(ParamList params, AdamWConfig cfg) : cfg_(cfg), params_(trainable(params)) {
  if (!(cfg_.beta1 >= 0 && cfg_.beta1 < 1 && cfg_.beta2 >= 0 && cfg_.beta2 < 1)) {
    throw ConfigError("adamw: betas must lie in [0, 1)");
  }
  if (!(cfg_.eps > 0) || !(cfg_.weight_decay >= 0)) throw ConfigError("adamw: need eps > 0 and weight_decay >= 0");
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
}

std::vector<std::string> AdamW::decayed_names() const {
  std::vector<std::string> out;
  for (const auto& p : params_)
    if (p.kind == ParamKind::weight) out.push_back(p.name);
  return out;
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

void AdamW::step(double lr) {
  for (const auto& p : params_) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw NumericError("adamw: non-finite gradient in parameter " + p.name);
    }
  }
  ++step_;
  const double t = static_cast<double>(step_);
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t), bc2 = 1.0 - std::pow(cfg_.beta2, t);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.tensor.has_grad()) continue;
    const auto g = p.tensor.grad();
    auto w = p.tensor.mutable_values();
    auto& m = m_[i];
    auto& v = v_[i];
    const double decay = p.kind == ParamKind::weight ? lr * cfg_.weight_decay : 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      w[j] -= decay * w[j];
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
      w[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
    }
  }
}

double cosine_lr(double lr, std::size_t step, std::size_t total_steps, double floor_fraction) {
  if (total_steps <= 1) return lr;
  const double progress = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps - 1));
  const double lo = lr * floor_fraction;
  return lo + (lr - lo) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("train: epochs must be positive");
  if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("train: lr must be finite and >= 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("train: weight_decay must be >= 0");
  if (!(ce_weight >= 0.0 && dice_weight >= 0.0) || std::abs(ce_weight + dice_weight - 1.0) > 1e-12) {
    throw ConfigError("train: ce_weight + dice_weight must equal 1");
  }
  if (lr_schedule != "cosine" && lr_schedule != "constant") {
    throw ConfigError("train: lr_schedule must be 'cosine' or 'constant', got '" + lr_schedule + "'");
  }
  if (!(min_lr_fraction >= 0.0 && min_lr_fraction <= 1.0)) throw ConfigError("train: min_lr_fraction must lie in [0,1]");
  if (eval_every == 0) throw ConfigError("train: eval_every must be positive");
  if (augment.max_angle_deg < 0.0 || augment.max_angle_deg > 45.0) {
    throw ConfigError("train: augment.max_angle_deg must lie in [0, 45]");
  }
}

std::string to_json_line(const EpochRecord& r) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["step"] = r.step;
  j["loss"] = r.loss;
  j["ce"] = r.ce;
  j["dice"] = r.dice;
  j["lr"] = r.lr;
  if (r.val_dsc >= 0.0) j["val_dsc"] = r.val_dsc;
  return j.dump();
}

FitResult fit(Network& net, const std::vector<Sample>& train, const std::vector<Sample>& val,
              const TrainConfig& cfg, const FitOutputs& outputs,
              const std::function<void(const EpochRecord&)>& on_epoch) {
  cfg.validate();
  if (train.empty()) throw UsageError("fit: empty training set");
  AdamWConfig ac;
  ac.weight_decay = cfg.weight_decay;
  AdamW opt(net.parameters(), ac);
  const LossWeights lw{cfg.ce_weight, cfg.dice_weight};
  const std::vector<Sample>& val_set = val.empty() ? train : val;
  const std::size_t n = train.size();
  const std::size_t per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = per_epoch * cfg.epochs;

  std::ofstream log;
  const bool write = !outputs.dir.empty();
  if (write) {
    fs::create_directories(outputs.dir);
    log.open(outputs.dir / "train_log.jsonl", std::ios::trunc);
    if (!log) throw FormatError("cannot write " + (outputs.dir / "train_log.jsonl").string());
    save_checkpoint(outputs.dir / "last.ckpt", net, outputs.checkpoint_extra_json);
  }

  ForwardContext ctx;
  ctx.mode = Mode::train;
  ctx.update_running_stats = cfg.lr > 0.0;  // lr = 0 freezes everything, BN stats included

  FitResult result;
  for (std::size_t epoch = 1; epoch <= cfg.epochs && !result.halted; ++epoch) {
    const auto order = shuffle_order(n, epoch, cfg.seed);
    EpochRecord rec;
    rec.epoch = epoch;
    double weighted = 0.0, wce = 0.0, wdice = 0.0;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      std::vector<Sample> batch;
      for (std::size_t j = b * cfg.batch_size; j < std::min(n, (b + 1) * cfg.batch_size); ++j) {
        Sample s = train[order[j]];
        if (cfg.augment.enabled) {
          const auto seed = derive_seed(cfg.seed, kAugmentSeedStream, (epoch - 1) * n + j);
          std::tie(s.image, s.mask) = augment(s.image, s.mask, seed, cfg.augment);
        }
        batch.push_back(std::move(s));
      }
      std::vector<std::size_t> idx(batch.size());
      for (std::size_t j = 0; j < idx.size(); ++j) idx[j] = j;
      const SampleBatch sb = make_batch(batch, idx);
      const double lr = cfg.lr_schedule == "cosine"
                            ? cosine_lr(cfg.lr, opt.steps(), total_steps, cfg.min_lr_fraction)
                            : cfg.lr;
      try {
        const LossTerms terms = segmentation_loss(net.forward(sb.images, ctx), sb.masks, lw);
        const double loss = terms.total.item();
        if (!std::isfinite(loss)) throw NumericError("non-finite loss " + std::to_string(loss));
        opt.zero_grad();
        backward(terms.total);
        opt.step(lr);
        const auto bs = static_cast<double>(batch.size());
        weighted += bs * loss;
        wce += bs * terms.ce;
        wdice += bs * terms.dice;
      } catch (const NumericError& e) {
        result.halted = true;
        result.halt_reason = "epoch " + std::to_string(epoch) + ": " + e.what();
        break;
      }
      rec.lr = lr;
    }
    if (result.halted) break;
    rec.step = opt.steps();
    rec.loss = weighted / static_cast<double>(n);
    rec.ce = wce / static_cast<double>(n);
    rec.dice = wdice / static_cast<double>(n);
    if (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) {
      try {
        rec.val_dsc = mean_dice(net, val_set, cfg.batch_size);
      } catch (const NumericError& e) {
        result.halted = true;
        result.halt_reason = "epoch " + std::to_string(epoch) + " validation: " + e.what();
        break;
      }
      if (rec.val_dsc > result.best_val_dsc) {
        result.best_val_dsc = rec.val_dsc;
        result.best_epoch = epoch;
        if (write) save_checkpoint(outputs.dir / "best.ckpt", net, outputs.checkpoint_extra_json);
      }
    }
    if (write) {
      save_checkpoint(outputs.dir / "last.ckpt", net, outputs.checkpoint_extra_json);
      log << to_json_line(rec) << '\n';
      log.flush();
    }
    result.log.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  if (write && result.halted) {
    nlohmann::ordered_json j;
    j["halted"] = true;
    j["reason"] = result.halt_reason;
    log << j.dump() << '\n';
  }
  return result;
}

std::vector<LabelMask> predict(Network& net, const std::vector<Sample>& samples, std::size_t batch) {
  std::vector<LabelMask> out;
  for_each_eval_batch(net, samples, batch, [&](const SampleBatch& b, const Tensor& logits) {
    const std::size_t bn = logits.dim(0), h = logits.dim(1), w = logits.dim(2), k = logits.dim(3);
    const auto v = logits.values();
    for (std::size_t i = 0; i < bn; ++i) {
      LabelMask m(h, w);
      m.spacing = b.masks[i].spacing;
      for (std::size_t p = 0; p < h * w; ++p) {
        const double* row = v.data() + (i * h * w + p) * k;
        m.labels[p] = static_cast<std::int32_t>(std::max_element(row, row + k) - row);
      }
      out.push_back(std::move(m));
    }
  });
  return out;
}

double mean_dice(Network& net, const std::vector<Sample>& samples, std::size_t batch) {
  const auto preds = predict(net, samples, batch);
  const std::size_t k = net.config().num_classes;
  double acc = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) acc += mean_foreground_dice(preds[i], samples[i].mask, k);
  return preds.empty() ? 0.0 : acc / static_cast<double>(preds.size());
}

double mean_soft_dice(Network& net, const std::vector<Sample>& samples, std::size_t batch) {
  const std::size_t k = net.config().num_classes;
  std::vector<double> inter(k, 0.0), denom(k, 0.0);
  for_each_eval_batch(net, samples, batch, [&](const SampleBatch& b, const Tensor& logits) {
    const Tensor probs = softmax_lastdim(logits);
    const Tensor t = one_hot(b.masks, k);
    const auto pv = probs.values(), tv = t.values();
    for (std::size_t i = 0; i < pv.size(); ++i) {
      inter[i % k] += pv[i] * tv[i];
      denom[i % k] += pv[i] + tv[i];
    }
  });
  double acc = 0.0;
  for (std::size_t c = 1; c < k; ++c) acc += (2.0 * inter[c] + kSoftDiceSmooth) / (denom[c] + kSoftDiceSmooth);
  return acc / static_cast<double>(k - 1);
}

}  // namespace dcaunet
