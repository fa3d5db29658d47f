#include "blab/config.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include "blab/rng.hpp"

namespace blab {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t");
  return s.substr(a, b - a + 1);
}

std::string fmt_full(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  // canonicalize integral doubles so serialization is stable
  double r;
  if (std::sscanf(buf, "%lf", &r) == 1 && r == static_cast<long long>(r) &&
      std::fabs(r) < 1e15)
    std::snprintf(buf, sizeof(buf), "%lld", static_cast<long long>(r));
  return buf;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <class T>
std::string join_list(const std::vector<T>& v, std::string (*fmt)(const T&)) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += fmt(v[i]);
  }
  return out;
}

class KeyMap {
 public:
  explicit KeyMap(const std::string& text) {
    std::stringstream ss(text);
    std::string line;
    int lineno = 0;
    while (std::getline(ss, line)) {
      ++lineno;
      size_t hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      line = trim(line);
      if (line.empty()) continue;
      size_t eq = line.find('=');
      if (eq == std::string::npos)
        fail("config: line " + std::to_string(lineno) + " is not 'key = value'");
      std::string key = trim(line.substr(0, eq));
      std::string value = trim(line.substr(eq + 1));
      if (key.empty()) fail("config: empty key at line " + std::to_string(lineno));
      map_[key] = value;
    }
  }

  bool take(const std::string& key, std::string& out) {
    auto it = map_.find(key);
    if (it == map_.end()) return false;
    out = it->second;
    map_.erase(it);
    return true;
  }

  void get(const std::string& key, std::string& field) {
    std::string v;
    if (take(key, v)) field = v;
  }
  void get(const std::string& key, int& field) {
    std::string v;
    if (take(key, v)) field = std::stoi(v);
  }
  void get(const std::string& key, uint64_t& field) {
    std::string v;
    if (take(key, v)) field = std::stoull(v);
  }
  void get(const std::string& key, double& field) {
    std::string v;
    if (take(key, v)) field = std::stod(v);
  }
  void get(const std::string& key, bool& field) {
    std::string v;
    if (take(key, v)) {
      if (v == "true" || v == "1") field = true;
      else if (v == "false" || v == "0") field = false;
      else fail("config: expected boolean for " + key + ", got '" + v + "'");
    }
  }
  void get(const std::string& key, std::vector<std::string>& field) {
    std::string v;
    if (take(key, v)) field = split_list(v);
  }
  void get(const std::string& key, std::vector<int>& field) {
    std::string v;
    if (take(key, v)) {
      field.clear();
      for (const auto& s : split_list(v)) field.push_back(std::stoi(s));
    }
  }
  void get(const std::string& key, std::vector<double>& field) {
    std::string v;
    if (take(key, v)) {
      field.clear();
      for (const auto& s : split_list(v)) field.push_back(std::stod(s));
    }
  }
  void get(const std::string& key, std::vector<std::pair<int, double>>& field) {
    std::string v;
    if (take(key, v)) {
      field.clear();
      for (const auto& s : split_list(v)) {
        size_t colon = s.find(':');
        if (colon == std::string::npos)
          fail("config: expected N:ratio entries for " + key);
        field.emplace_back(std::stoi(s.substr(0, colon)),
                           std::stod(s.substr(colon + 1)));
      }
    }
  }

  void finish() const {
    if (!map_.empty()) fail("config: unknown key '" + map_.begin()->first + "'");
  }

 private:
  std::map<std::string, std::string> map_;
};

std::string fmt_str(const std::string& s) { return s; }
std::string fmt_int(const int& v) { return std::to_string(v); }
std::string fmt_dbl(const double& v) { return fmt_full(v); }
std::string fmt_grid(const std::pair<int, double>& p) {
  return std::to_string(p.first) + ":" + fmt_full(p.second);
}

}  // namespace

ExperimentConfig ExperimentConfig::parse(const std::string& text) {
  ExperimentConfig c;
  KeyMap km(text);
  km.get("seed", c.master_seed);
  km.get("seed_index", c.seed_index);
  km.get("out.dir", c.out_dir);
  km.get("dataset.source", c.dataset_source);
  km.get("dataset.n_per_class", c.dataset_n_per_class);
  km.get("dataset.path", c.dataset_path);
  km.get("attack.kind", c.attack_kind);
  km.get("attack.target", c.attack_target);
  km.get("attack.ratio", c.attack_ratio);
  km.get("attack.patch_size", c.attack_patch_size);
  km.get("attack.alpha", c.attack_alpha);
  km.get("attack.sig_delta", c.attack_sig_delta);
  km.get("attack.sig_freq", c.attack_sig_freq);
  km.get("attack.warp_grid", c.attack_warp_grid);
  km.get("attack.warp_strength", c.attack_warp_strength);
  km.get("model.family", c.model_family);
  km.get("model.width", c.model_width);
  km.get("train.epochs", c.train_epochs);
  km.get("train.batch", c.train_batch);
  km.get("train.lr", c.train_lr);
  km.get("train.drop_epochs", c.train_drop_epochs);
  km.get("train.drop_factor", c.train_drop_factor);
  km.get("train.lambda", c.train_lambda);
  km.get("train.levels", c.train_levels);
  km.get("train.kernel", c.train_kernel);
  km.get("train.median_scale", c.train_median_scale);
  km.get("measure.metrics", c.measure_metrics);
  km.get("measure.levels", c.measure_levels);
  km.get("measure.kernel", c.measure_kernel);
  km.get("measure.median_scale", c.measure_median_scale);
  km.get("measure.sample_size", c.measure_sample_size);
  km.get("measure.repeats", c.measure_repeats);
  km.get("measure.swd_projections", c.measure_swd_projections);
  km.get("measure.pool_per_class", c.measure_pool_per_class);
  km.get("measure.use_gap", c.measure_use_gap);
  km.get("defend.defenses", c.defend_defenses);
  km.get("defend.levels", c.defend_levels);
  km.get("defend.grid", c.defend_grid);
  km.get("defend.validation", c.defend_validation);
  km.get("nc.gamma", c.nc_gamma);
  km.get("nc.steps", c.nc_steps);
  km.get("nc.lr", c.nc_lr);
  km.get("nc.batch", c.nc_batch);
  km.get("prune.fractions", c.prune_fractions);
  km.get("sweep.methods", c.sweep_methods);
  km.get("sweep.lambdas", c.sweep_lambdas);
  km.get("sweep.attacks", c.sweep_attacks);
  km.get("sweep.seeds", c.sweep_seeds);
  km.finish();
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail("config: cannot open: " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse(ss.str());
}

std::string ExperimentConfig::serialize() const {
  std::ostringstream os;
  os << "seed = " << master_seed << "\n";
  os << "seed_index = " << seed_index << "\n";
  os << "out.dir = " << out_dir << "\n";
  os << "dataset.source = " << dataset_source << "\n";
  os << "dataset.n_per_class = " << dataset_n_per_class << "\n";
  os << "dataset.path = " << dataset_path << "\n";
  os << "attack.kind = " << attack_kind << "\n";
  os << "attack.target = " << attack_target << "\n";
  os << "attack.ratio = " << fmt_full(attack_ratio) << "\n";
  os << "attack.patch_size = " << attack_patch_size << "\n";
  os << "attack.alpha = " << fmt_full(attack_alpha) << "\n";
  os << "attack.sig_delta = " << fmt_full(attack_sig_delta) << "\n";
  os << "attack.sig_freq = " << attack_sig_freq << "\n";
  os << "attack.warp_grid = " << attack_warp_grid << "\n";
  os << "attack.warp_strength = " << fmt_full(attack_warp_strength) << "\n";
  os << "model.family = " << model_family << "\n";
  os << "model.width = " << model_width << "\n";
  os << "train.epochs = " << train_epochs << "\n";
  os << "train.batch = " << train_batch << "\n";
  os << "train.lr = " << fmt_full(train_lr) << "\n";
  os << "train.drop_epochs = " << join_list<int>(train_drop_epochs, fmt_int) << "\n";
  os << "train.drop_factor = " << fmt_full(train_drop_factor) << "\n";
  os << "train.lambda = " << fmt_full(train_lambda) << "\n";
  os << "train.levels = " << join_list<std::string>(train_levels, fmt_str) << "\n";
  os << "train.kernel = " << train_kernel << "\n";
  os << "train.median_scale = " << (train_median_scale ? "true" : "false") << "\n";
  os << "measure.metrics = " << join_list<std::string>(measure_metrics, fmt_str) << "\n";
  os << "measure.levels = " << join_list<std::string>(measure_levels, fmt_str) << "\n";
  os << "measure.kernel = " << measure_kernel << "\n";
  os << "measure.median_scale = " << (measure_median_scale ? "true" : "false") << "\n";
  os << "measure.sample_size = " << measure_sample_size << "\n";
  os << "measure.repeats = " << measure_repeats << "\n";
  os << "measure.swd_projections = " << measure_swd_projections << "\n";
  os << "measure.pool_per_class = " << measure_pool_per_class << "\n";
  os << "measure.use_gap = " << (measure_use_gap ? "true" : "false") << "\n";
  os << "defend.defenses = " << join_list<std::string>(defend_defenses, fmt_str) << "\n";
  os << "defend.levels = " << join_list<std::string>(defend_levels, fmt_str) << "\n";
  os << "defend.grid = " << join_list<std::pair<int, double>>(defend_grid, fmt_grid) << "\n";
  os << "defend.validation = " << defend_validation << "\n";
  os << "nc.gamma = " << fmt_full(nc_gamma) << "\n";
  os << "nc.steps = " << nc_steps << "\n";
  os << "nc.lr = " << fmt_full(nc_lr) << "\n";
  os << "nc.batch = " << nc_batch << "\n";
  os << "prune.fractions = " << join_list<double>(prune_fractions, fmt_dbl) << "\n";
  os << "sweep.methods = " << join_list<std::string>(sweep_methods, fmt_str) << "\n";
  os << "sweep.lambdas = " << join_list<double>(sweep_lambdas, fmt_dbl) << "\n";
  os << "sweep.attacks = " << join_list<std::string>(sweep_attacks, fmt_str) << "\n";
  os << "sweep.seeds = " << sweep_seeds << "\n";
  return os.str();
}

std::string ExperimentConfig::hash() const {
  uint64_t h = fnv1a(serialize());
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void ExperimentConfig::validate() const {
  if (dataset_source != "synth" && dataset_source != "file" && dataset_source != "cifar10")
    fail("config: unknown dataset.source '" + dataset_source + "'");
  if (model_family != "plain" && model_family != "residual")
    fail("config: unknown model.family '" + model_family + "'");
  trigger_kind_from_string(attack_kind);
  if (attack_ratio <= 0.0 || attack_ratio >= 1.0)
    fail("config: attack.ratio must lie in (0,1)");
  KernelSpec::parse(train_kernel, train_median_scale).validate();
  KernelSpec::parse(measure_kernel, measure_median_scale).validate();
  parse_levels(train_levels);
  parse_levels(measure_levels);
  parse_levels(defend_levels);
  if (train_lambda < 0.0) fail("config: train.lambda must be non-negative");
  if (train_lambda > 0.0 && train_levels.empty())
    fail("config: train.levels must be non-empty when train.lambda > 0");
  for (const auto& m : sweep_methods)
    if (m != "rbt" && m != "sl" && m != "ml")
      fail("config: unknown sweep method '" + m + "'");
  for (const auto& a : sweep_attacks) trigger_kind_from_string(a);
  for (const auto& d : defend_defenses)
    if (d != "ac" && d != "ss" && d != "sr")
      fail("config: unknown defense '" + d + "'");
  if (sweep_seeds < 1) fail("config: sweep.seeds must be positive");
}

std::string ExperimentConfig::resolved_out_dir() const {
  if (!out_dir.empty()) return out_dir;
  const char* env = std::getenv("BLAB_OUT");
  if (env != nullptr && env[0] != '\0') return env;
  return "out";
}

std::vector<int> parse_levels(const std::vector<std::string>& names) {
  std::vector<int> out;
  for (const auto& n : names) {
    if (n == "s1") out.push_back(0);
    else if (n == "s2") out.push_back(1);
    else if (n == "s3") out.push_back(2);
    else fail("config: unknown level '" + n + "' (expected s1,s2,s3)");
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

SynthConfig ExperimentConfig::synth_config() const {
  SynthConfig s;
  s.seed = derive_seed(master_seed, "dataset");
  s.n_per_class = dataset_n_per_class;
  return s;
}

ModelConfig ExperimentConfig::model_config() const {
  ModelConfig m;
  m.family = model_family == "plain" ? Family::PlainConv : Family::Residual;
  m.width = model_width;
  return m;
}

TriggerSpec::Params ExperimentConfig::trigger_params() const {
  TriggerSpec::Params p;
  p.patch_size = attack_patch_size;
  p.alpha = attack_alpha;
  p.sig_delta = attack_sig_delta;
  p.sig_freq = attack_sig_freq;
  p.warp_grid = attack_warp_grid;
  p.warp_strength = attack_warp_strength;
  return p;
}

TriggerSpec ExperimentConfig::make_trigger(int h, int w, int c) const {
  return TriggerSpec::make(trigger_kind_from_string(attack_kind), h, w, c,
                           derive_seed(master_seed, "trigger:" + attack_kind),
                           trigger_params());
}

TrainConfig ExperimentConfig::train_config() const {
  TrainConfig t;
  t.epochs = train_epochs;
  t.batch = train_batch;
  t.lr = train_lr;
  t.drop_epochs = train_drop_epochs;
  t.drop_factor = train_drop_factor;
  t.lambda = train_lambda;
  t.levels = parse_levels(train_levels);
  t.kernel = KernelSpec::parse(train_kernel, train_median_scale);
  t.target = attack_target;
  t.seed = derive_seed(master_seed, "train:" + attack_kind,
                       static_cast<uint64_t>(seed_index));
  return t;
}

DistanceOptions ExperimentConfig::distance_options() const {
  DistanceOptions d;
  d.levels = parse_levels(measure_levels);
  d.metrics = measure_metrics;
  d.kernel = KernelSpec::parse(measure_kernel, measure_median_scale);
  d.sample_size = measure_sample_size;
  d.repeats = measure_repeats;
  d.swd_projections = measure_swd_projections;
  d.use_gap = measure_use_gap;
  d.target = attack_target;
  d.seed = derive_seed(master_seed, "measure", static_cast<uint64_t>(seed_index));
  return d;
}

}  // namespace blab
