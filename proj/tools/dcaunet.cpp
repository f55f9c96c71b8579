// dcaunet: generate / train / eval / check / summarize / dump-attention.
// Exit codes: 0 success, 1 verification or training failure, 2 usage/config error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <iterator>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dcaunet/archive.hpp"
#include "dcaunet/config_io.hpp"
#include "dcaunet/data.hpp"
#include "dcaunet/errors.hpp"
#include "dcaunet/metrics.hpp"
#include "dcaunet/net.hpp"
#include "dcaunet/train.hpp"
#include "dcaunet/verify.hpp"

namespace fs = std::filesystem;
using namespace dcaunet;

namespace {

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::vector<std::string> overrides;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON run config")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "Seed for initialization, order and augmentation");
  cmd->add_option("--override", c.overrides, "key=value override, dotted keys (repeatable)")->allow_extra_args(false);
  cmd->add_option("--out", c.out, "Output directory");
}

RunConfig resolve(const Common& c, CLI::App* cmd) {
  const bool has_seed = cmd->count("--seed") > 0;
  RunConfig rc = load_run_config(c.config, c.overrides, has_seed ? &c.seed : nullptr);
  if (!c.out.empty()) rc.out_dir = c.out;
  return rc;
}

struct Splits {
  std::vector<Sample> train, val, test;
  const std::vector<Sample>& by_name(const std::string& s) const {
    return s == "val" ? val : s == "test" ? test : train;
  }
};

Splits load_data(const RunConfig& rc) {
  Splits s;
  const std::size_t k = rc.network.num_classes;
  if (!rc.data.manifest.empty()) {
    s.train = load_split(rc.data.manifest, "train", k);
    s.val = load_split(rc.data.manifest, "val", k);
    s.test = load_split(rc.data.manifest, "test", k);
    return s;
  }
  const auto& d = rc.data;
  s.train = generate_dataset(rc.synth, d.train_count, 0);
  s.val = generate_dataset(rc.synth, d.val_count, d.train_count);
  s.test = generate_dataset(rc.synth, d.test_count, d.train_count + d.val_count);
  return s;
}

std::uint64_t file_checksum(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::vector<std::uint8_t> b((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return fnv1a64(b);
}

std::string hex(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw FormatError("cannot write " + p.string());
  out << text;
}

int cmd_generate(const RunConfig& rc, const std::string& out_flag) {
  const fs::path dir = out_flag.empty() ? fs::path(rc.out_dir) / "data" : fs::path(out_flag);
  const auto& d = rc.data;
  std::vector<ManifestEntry> entries;
  const std::size_t total = d.train_count + d.val_count + d.test_count;
  for (std::size_t i = 0; i < total; ++i) {
    const auto g = generate(rc.synth, i);
    const std::string split = i < d.train_count ? "train" : i < d.train_count + d.val_count ? "val" : "test";
    const std::string img = "images/" + g.sample.id + ".pgm", msk = "masks/" + g.sample.id + ".pgm";
    write_image(dir / img, g.sample.image, 16);
    write_mask(dir / msk, g.sample.mask);
    entries.push_back({img, msk, split});
  }
  write_manifest(dir / "manifest.tsv", entries);
  std::cout << "wrote " << total << " samples and " << (dir / "manifest.tsv").string() << "\n";
  return 0;
}

nlohmann::ordered_json run_info(const RunConfig& rc) {
  nlohmann::ordered_json j;
  j["config_hash"] = config_hash(rc);
  j["seed"] = rc.seed;
  return j;
}

int cmd_train(const RunConfig& rc) {
  const Splits data = load_data(rc);
  Network net(rc.network);
  const fs::path dir = rc.out_dir;
  fs::create_directories(dir);
  auto resolved = run_config_to_json(rc);
  write_text(dir / "config.json", resolved.dump(2) + "\n");
  FitOutputs outs;
  outs.dir = dir;
  outs.checkpoint_extra_json = run_info(rc).dump();
  const auto res = fit(net, data.train, data.val, rc.train, outs, [](const EpochRecord& r) {
    std::cout << to_json_line(r) << "\n";
  });
  if (res.halted) {
    std::cerr << "training halted: " << res.halt_reason << " (last good checkpoint: "
              << (dir / "last.ckpt").string() << ")\n";
    return 1;
  }
  std::cout << "best val DSC " << res.best_val_dsc << " at epoch " << res.best_epoch << "; checkpoints in "
            << dir.string() << "\n";
  return 0;
}

int cmd_eval(const RunConfig& rc, const std::string& checkpoint, const std::string& predictions,
             const std::string& split, double percentile) {
  if (checkpoint.empty() == predictions.empty()) {
    throw UsageError("eval needs exactly one of --checkpoint or --predictions");
  }
  const Splits data = load_data(rc);
  const auto& samples = data.by_name(split.empty() ? rc.data.eval_split : split);
  if (samples.empty()) throw ConfigError("eval: split '" + (split.empty() ? rc.data.eval_split : split) + "' is empty");
  std::vector<LabelMask> refs, preds;
  for (const auto& s : samples) refs.push_back(s.mask);
  auto info = run_info(rc);
  std::size_t k = rc.network.num_classes;
  if (!checkpoint.empty()) {
    if (!fs::exists(checkpoint)) throw FormatError("checkpoint not found: " + checkpoint);
    auto loaded = load_checkpoint(checkpoint);
    k = loaded.network.config().num_classes;
    preds = predict(loaded.network, samples, rc.train.batch_size);
    info["checkpoint_fnv1a64"] = hex(file_checksum(checkpoint));
  } else {
    for (const auto& s : samples) {
      const fs::path p = fs::path(predictions) / (s.id + ".pgm");
      if (!fs::exists(p)) throw FormatError("prediction missing: " + p.string());
      preds.push_back(read_mask(p, k));
    }
    info["predictions"] = "mask files";
  }
  HausdorffOptions ho;
  ho.percentile = percentile;
  const MetricReport rep = evaluate_masks(preds, refs, k, ho);
  const fs::path dir = fs::path(rc.out_dir) / "eval";
  const std::string tsv = report_to_tsv(rep);
  write_text(dir / "metrics.tsv", tsv);
  write_text(dir / "metrics.json", report_to_json(rep, info.dump()));
  std::cout << tsv;
  return 0;
}

int cmd_check(std::uint64_t seed, std::size_t samples) {
  VerifyOptions o;
  o.seed = seed;
  o.network_samples_per_tensor = samples;
  bool ok = true;
  run_verification_suite(o, [&](const CheckResult& r) {
    ok = ok && r.passed;
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << " [" << std::fixed
              << std::setprecision(1) << r.seconds << "s]\n"
              << std::flush;
  });
  std::cout << (ok ? "all checks passed\n" : "verification FAILED\n");
  return ok ? 0 : 1;
}

int cmd_summarize(const RunConfig& rc) {
  const Network net(rc.network);
  const auto s = net.summarize();
  std::cout << std::left << std::setw(28) << "module" << std::right << std::setw(12) << "params" << std::setw(16)
            << "MACs" << "\n";
  for (const auto& m : s.modules)
    std::cout << std::left << std::setw(28) << m.name << std::right << std::setw(12) << m.params << std::setw(16)
              << m.flops << "\n";
  std::cout << std::left << std::setw(28) << "total" << std::right << std::setw(12) << s.param_count
            << std::setw(16) << s.flops_per_forward << "\n";
  std::cout << "params (M): " << std::fixed << std::setprecision(3) << s.param_count / 1e6
            << "  MACs (G): " << s.flops_per_forward / 1e9 << "\n";
  std::cout << "attention score MACs: windowed " << s.attention_score_flops << ", pixel-wise "
            << s.pixelwise_attention_score_flops << ", ratio " << std::setprecision(2)
            << static_cast<double>(s.pixelwise_attention_score_flops) / static_cast<double>(s.attention_score_flops)
            << "\n";
  return 0;
}

// Min-max scaled 16-bit graymap of a 2-D slice.
void dump_map(const fs::path& p, const double* v, std::size_t rows, std::size_t cols) {
  double lo = v[0], hi = v[0];
  for (std::size_t i = 0; i < rows * cols; ++i) {
    lo = std::min(lo, v[i]);
    hi = std::max(hi, v[i]);
  }
  std::vector<double> scaled(rows * cols);
  for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] = hi > lo ? (v[i] - lo) / (hi - lo) : 0.0;
  write_image(p, Tensor({rows, cols, 1}, std::move(scaled)), 16);
}

int cmd_dump_attention(const RunConfig& rc, const std::string& checkpoint, std::size_t index) {
  const Splits data = load_data(rc);
  const auto& samples = data.by_name(rc.data.eval_split);
  if (index >= samples.size()) {
    throw ConfigError("sample index " + std::to_string(index) + " outside split of size " + std::to_string(samples.size()));
  }
  std::optional<Network> net;
  if (!checkpoint.empty()) {
    if (!fs::exists(checkpoint)) throw FormatError("checkpoint not found: " + checkpoint);
    net.emplace(std::move(load_checkpoint(checkpoint).network));
  } else {
    net.emplace(rc.network);
  }
  Probe probe;
  ForwardContext ctx;
  ctx.probe = &probe;
  net->forward(samples[index].image, ctx);

  const fs::path dir = fs::path(rc.out_dir) / "attention";
  Archive arc;
  nlohmann::ordered_json meta = run_info(rc);
  meta["sample"] = samples[index].id;
  auto& layers = meta["layers"];
  layers = nlohmann::ordered_json::array();
  std::size_t files = 0;
  for (const auto& a : probe.attention) {
    layers.push_back({{"layer", a.layer}, {"block_index", a.block_index}, {"lambda", a.lambda}});
    const std::size_t heads = a.s1.dim(1), rows = a.s1.dim(2), cols = a.s1.dim(3);
    std::vector<std::pair<std::string, Tensor>> maps{{"s1", a.s1}};
    if (a.s2.defined()) {
      maps.emplace_back("s2", a.s2);
      maps.emplace_back("diff", a.diff);
    }
    for (const auto& [tag, t] : maps) {
      arc.records.push_back(to_record(a.layer + "." + tag, t));
      for (std::size_t h = 0; h < heads; ++h) {
        dump_map(dir / (a.layer + ".h" + std::to_string(h) + "." + tag + ".pgm"),
                 t.values().data() + h * rows * cols, rows, cols);
        ++files;
      }
    }
  }
  for (const auto& g : probe.gates) {
    if (g.channel_gate.defined()) {
      arc.records.push_back(to_record(g.layer + ".channel_gate", g.channel_gate));
      dump_map(dir / (g.layer + ".channel_gate.pgm"), g.channel_gate.values().data(), 1, g.channel_gate.dim(3));
      ++files;
    }
    if (g.spatial_gate.defined()) {
      arc.records.push_back(to_record(g.layer + ".spatial_gate", g.spatial_gate));
      dump_map(dir / (g.layer + ".spatial_gate.pgm"), g.spatial_gate.values().data(), g.spatial_gate.dim(1),
               g.spatial_gate.dim(2));
      ++files;
    }
  }
  arc.metadata = meta.dump();
  write_archive(dir / "maps.dca", arc);
  std::cout << "wrote " << files << " graymaps and " << (dir / "maps.dca").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Differential cross attention U-Net: data, training, evaluation and verification"};
  app.require_subcommand(1);

  Common gen_c, train_c, eval_c, check_c, sum_c, dump_c;
  auto* gen = app.add_subcommand("generate", "Write a synthetic dataset (graymaps + manifest)");
  add_common(gen, gen_c);
  auto* train = app.add_subcommand("train", "Train and write log + checkpoints");
  add_common(train, train_c);
  auto* eval = app.add_subcommand("eval", "Per-class DSC / HD report");
  add_common(eval, eval_c);
  std::string eval_ckpt, eval_preds, eval_split;
  double percentile = 95.0;
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint to run");
  eval->add_option("--predictions", eval_preds, "Directory of predicted <id>.pgm masks");
  eval->add_option("--split", eval_split, "train, val or test (default: data.eval_split)");
  eval->add_option("--percentile", percentile, "Hausdorff percentile (95 or 100)")->check(CLI::Range(1.0, 100.0));
  auto* check = app.add_subcommand("check", "Run the verification suite");
  add_common(check, check_c);
  std::size_t samples = 6;
  check->add_option("--samples", samples, "Sampled entries per tensor in the network gradient check (0: all)");
  auto* summ = app.add_subcommand("summarize", "Parameter / MAC table per module");
  add_common(summ, sum_c);
  auto* dump = app.add_subcommand("dump-attention", "Export S1, S2, S1 - lambda S2 and CSFF gates");
  add_common(dump, dump_c);
  std::string dump_ckpt;
  std::size_t dump_index = 0;
  dump->add_option("--checkpoint", dump_ckpt, "Checkpoint (default: freshly initialized network)");
  dump->add_option("--sample", dump_index, "Sample index within data.eval_split");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*gen) return cmd_generate(resolve(gen_c, gen), gen_c.out);
    if (*train) return cmd_train(resolve(train_c, train));
    if (*eval) return cmd_eval(resolve(eval_c, eval), eval_ckpt, eval_preds, eval_split, percentile);
    if (*check) return cmd_check(check->count("--seed") ? check_c.seed : 0, samples);
    if (*summ) return cmd_summarize(resolve(sum_c, summ));
    if (*dump) return cmd_dump_attention(resolve(dump_c, dump), dump_ckpt, dump_index);
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
