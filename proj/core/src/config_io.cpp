#include "dcaunet/config_io.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "dcaunet/archive.hpp"
#include "dcaunet/errors.hpp"

namespace dcaunet {

using nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

// Reads fields from one JSON object and reports keys nobody asked for.
class Section {
 public:
  Section(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
        if (!it->is_number_unsigned()) throw ConfigError("");
      }
      out = it->template get<T>();
    } catch (const std::exception&) {
      throw ConfigError(path(key) + ": invalid value " + it->dump());
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string path(const char* key) const { return where_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(where_ + ": unknown key '" + it.key() + "'");
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

ShapeFamily family_from(const std::string& s) {
  if (s == "ellipse") return ShapeFamily::ellipse;
  if (s == "rectangle") return ShapeFamily::rectangle;
  if (s == "annulus") return ShapeFamily::annulus;
  throw ConfigError("unknown shape family '" + s + "' (ellipse, rectangle, annulus)");
}

NetworkConfig network_from(const json& j, const std::string& where) {
  NetworkConfig c;
  Section s(j, where);
  s.get("input_size", c.input_size);
  s.get("in_channels", c.in_channels);
  s.get("num_classes", c.num_classes);
  s.get("base_width", c.base_width);
  s.get("stage_depths", c.stage_depths);
  s.get("decoder_depth", c.decoder_depth);
  s.get("head_dim", c.head_dim);
  s.get("window", c.window);
  std::string att = to_string(c.attention);
  s.get("attention", att);
  if (att == "standard") {
    c.attention = AttentionKind::standard;
  } else if (att == "differential") {
    c.attention = AttentionKind::differential;
  } else {
    throw ConfigError(s.path("attention") + ": expected 'standard' or 'differential', got '" + att + "'");
  }
  std::string lam = c.lambda.kind == LambdaStrategy::Kind::fixed ? "fixed" : "dynamic";
  double lam_value = c.lambda.value;
  s.get("lambda", lam);
  s.get("lambda_value", lam_value);
  if (lam == "dynamic") {
    c.lambda = LambdaStrategy::dynamic();
  } else if (lam == "fixed") {
    c.lambda = LambdaStrategy::fixed(lam_value);
  } else {
    throw ConfigError(s.path("lambda") + ": expected 'dynamic' or 'fixed', got '" + lam + "'");
  }
  s.get("use_channel_attn", c.use_channel_attn);
  s.get("use_spatial_attn", c.use_spatial_attn);
  s.get("init_seed", c.init_seed);
  s.finish();
  return c;
}

}  // namespace

std::string to_string(ShapeFamily f) {
  switch (f) {
    case ShapeFamily::ellipse: return "ellipse";
    case ShapeFamily::rectangle: return "rectangle";
    default: return "annulus";
  }
}

std::string to_string(AttentionKind k) { return k == AttentionKind::standard ? "standard" : "differential"; }

void RunConfig::apply_seed() {
  network.init_seed = seed;
  train.seed = seed;
}

void RunConfig::validate() const {
  network.validate();
  train.validate();
  synth.validate();
  if (synth.num_classes != network.num_classes) {
    throw ConfigError("synth.num_classes (" + std::to_string(synth.num_classes) +
                      ") must equal network.num_classes (" + std::to_string(network.num_classes) + ")");
  }
  if (data.manifest.empty()) {
    if (synth.size != network.input_size) {
      throw ConfigError("synth.size (" + std::to_string(synth.size) + ") must equal network.input_size (" +
                        std::to_string(network.input_size) + ")");
    }
    if (network.in_channels != 1) throw ConfigError("synthetic data is single-channel; network.in_channels must be 1");
    if (data.train_count == 0) throw ConfigError("data.train_count must be positive");
  }
  if (data.eval_split != "train" && data.eval_split != "val" && data.eval_split != "test") {
    throw ConfigError("data.eval_split must be train, val or test");
  }
}

ojson network_config_to_json(const NetworkConfig& c) {
  ojson j;
  j["input_size"] = c.input_size;
  j["in_channels"] = c.in_channels;
  j["num_classes"] = c.num_classes;
  j["base_width"] = c.base_width;
  j["stage_depths"] = c.stage_depths;
  j["decoder_depth"] = c.decoder_depth;
  j["head_dim"] = c.head_dim;
  j["window"] = c.window;
  j["attention"] = to_string(c.attention);
  j["lambda"] = c.lambda.kind == LambdaStrategy::Kind::fixed ? "fixed" : "dynamic";
  j["lambda_value"] = c.lambda.value;
  j["use_channel_attn"] = c.use_channel_attn;
  j["use_spatial_attn"] = c.use_spatial_attn;
  j["init_seed"] = c.init_seed;
  return j;
}

NetworkConfig network_config_from_json(const json& j) { return network_from(j, "network"); }

ojson run_config_to_json(const RunConfig& c) {
  ojson j;
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir;
  ojson net = network_config_to_json(c.network);
  net.erase("init_seed");
  j["network"] = net;

  const TrainConfig& t = c.train;
  ojson tr;
  tr["epochs"] = t.epochs;
  tr["batch_size"] = t.batch_size;
  tr["lr"] = t.lr;
  tr["weight_decay"] = t.weight_decay;
  tr["ce_weight"] = t.ce_weight;
  tr["dice_weight"] = t.dice_weight;
  tr["lr_schedule"] = t.lr_schedule;
  tr["min_lr_fraction"] = t.min_lr_fraction;
  tr["eval_every"] = t.eval_every;
  tr["augment"] = {{"enabled", t.augment.enabled},
                   {"rotate90", t.augment.rotate90},
                   {"max_angle_deg", t.augment.max_angle_deg},
                   {"flips", t.augment.flips}};
  j["train"] = tr;

  const SynthSpec& s = c.synth;
  ojson sy;
  sy["seed"] = s.seed;
  sy["size"] = s.size;
  sy["num_classes"] = s.num_classes;
  std::vector<std::string> fam;
  for (auto f : s.families) fam.push_back(to_string(f));
  sy["families"] = fam;
  sy["background"] = s.background;
  sy["foreground_max"] = s.foreground_max;
  sy["noise_std"] = s.noise_std;
  sy["min_count"] = s.min_count;
  sy["max_count"] = s.max_count;
  sy["min_extent"] = s.min_extent;
  sy["max_extent"] = s.max_extent;
  sy["max_attempts"] = s.max_attempts;
  j["synth"] = sy;

  j["data"] = {{"manifest", c.data.manifest},
               {"train_count", c.data.train_count},
               {"val_count", c.data.val_count},
               {"test_count", c.data.test_count},
               {"eval_split", c.data.eval_split}};
  return j;
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  Section top(j, "config");
  top.get("seed", c.seed);
  top.get("out_dir", c.out_dir);
  if (const json* n = top.child("network")) c.network = network_from(*n, "network");
  if (const json* t = top.child("train")) {
    Section s(*t, "train");
    TrainConfig& tc = c.train;
    s.get("epochs", tc.epochs);
    s.get("batch_size", tc.batch_size);
    s.get("lr", tc.lr);
    s.get("weight_decay", tc.weight_decay);
    s.get("ce_weight", tc.ce_weight);
    s.get("dice_weight", tc.dice_weight);
    s.get("lr_schedule", tc.lr_schedule);
    s.get("min_lr_fraction", tc.min_lr_fraction);
    s.get("eval_every", tc.eval_every);
    if (const json* a = s.child("augment")) {
      Section as(*a, "train.augment");
      as.get("enabled", tc.augment.enabled);
      as.get("rotate90", tc.augment.rotate90);
      as.get("max_angle_deg", tc.augment.max_angle_deg);
      as.get("flips", tc.augment.flips);
      as.finish();
    }
    s.finish();
  }
  // Canvas size and class count follow the network unless set explicitly.
  c.synth.size = c.network.input_size;
  c.synth.num_classes = c.network.num_classes;
  if (const json* sj = top.child("synth")) {
    Section s(*sj, "synth");
    SynthSpec& sp = c.synth;
    s.get("seed", sp.seed);
    s.get("size", sp.size);
    s.get("num_classes", sp.num_classes);
    std::vector<std::string> fam;
    s.get("families", fam);
    if (!fam.empty()) {
      sp.families.clear();
      for (const auto& f : fam) sp.families.push_back(family_from(f));
    }
    s.get("background", sp.background);
    s.get("foreground_max", sp.foreground_max);
    s.get("noise_std", sp.noise_std);
    s.get("min_count", sp.min_count);
    s.get("max_count", sp.max_count);
    s.get("min_extent", sp.min_extent);
    s.get("max_extent", sp.max_extent);
    s.get("max_attempts", sp.max_attempts);
    s.finish();
  }
  if (const json* d = top.child("data")) {
    Section s(*d, "data");
    s.get("manifest", c.data.manifest);
    s.get("train_count", c.data.train_count);
    s.get("val_count", c.data.val_count);
    s.get("test_count", c.data.test_count);
    s.get("eval_split", c.data.eval_split);
    s.finish();
  }
  top.finish();
  c.apply_seed();
  return c;
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' is not of the form key=value");
  }
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json* cur = &j;
  std::size_t start = 0;
  for (;;) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
    if (!cur->is_object()) {
      if (!cur->is_null()) throw ConfigError("override key '" + key + "' descends into a non-object");
      *cur = json::object();
    }
    cur = &(*cur)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  *cur = std::move(value);
}

RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides,
                          const std::uint64_t* seed) {
  json j = json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    j = json::parse(in, nullptr, false, true);
    if (j.is_discarded()) throw ConfigError("config file " + path.string() + " is not valid JSON");
  }
  for (const auto& o : overrides) apply_override(j, o);
  if (seed) j["seed"] = *seed;
  RunConfig c = run_config_from_json(j);
  c.validate();
  return c;
}

std::string config_hash(const RunConfig& c) {
  json j = json::parse(run_config_to_json(c).dump());
  j.erase("out_dir");  // where results land is not part of the experiment
  const std::string canon = j.dump();
  const auto h = fnv1a64({reinterpret_cast<const std::uint8_t*>(canon.data()), canon.size()});
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace dcaunet
