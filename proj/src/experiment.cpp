#include "blab/experiment.hpp"

#include <json.hpp>

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <thread>

#include "blab/checkpoint.hpp"
#include "blab/csv.hpp"
#include "blab/defense.hpp"
#include "blab/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace blab {

namespace {

double now_sec() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

std::vector<const Tensor*> ptrs_of(const std::vector<LabeledImage>& items) {
  std::vector<const Tensor*> out;
  out.reserve(items.size());
  for (const auto& it : items) out.push_back(&it.pixels);
  return out;
}

// Benign samples of one class from an independent pool stream, for synth
// sources; file-backed sources fall back to the test split.
std::vector<LabeledImage> class_pool(const ExperimentConfig& cfg, const char* stage,
                                     int cls, int count) {
  SynthConfig proto = cfg.synth_config();
  return synth_class_samples(derive_seed(cfg.master_seed, stage), cls, count, proto);
}

Dataset balanced_pool(const ExperimentConfig& cfg, const char* stage, int per_class,
                      const Dataset& like) {
  Dataset pool;
  pool.num_classes = like.num_classes;
  pool.height = like.height;
  pool.width = like.width;
  pool.channels = like.channels;
  for (int cls = 0; cls < like.num_classes; ++cls) {
    auto items = class_pool(cfg, stage, cls, per_class);
    for (auto& it : items) pool.items.push_back(std::move(it));
  }
  return pool;
}

}  // namespace

DataBundle build_data(const ExperimentConfig& cfg) {
  DataBundle b;
  if (cfg.dataset_source == "synth") {
    auto [train, test] = synth_dataset(cfg.synth_config());
    b.train = std::move(train);
    b.test = std::move(test);
  } else if (cfg.dataset_source == "file") {
    if (cfg.dataset_path.empty()) fail("dataset.path required for file source");
    b.train = load_dataset(cfg.dataset_path + "/train.bdat");
    b.test = load_dataset(cfg.dataset_path + "/test.bdat");
  } else {
    if (cfg.dataset_path.empty()) fail("dataset.path required for cifar10 source");
    std::vector<std::string> train_paths;
    for (int i = 1; i <= 5; ++i)
      train_paths.push_back(cfg.dataset_path + "/data_batch_" + std::to_string(i) + ".bin");
    b.train = load_cifar10(train_paths);
    b.test = load_cifar10({cfg.dataset_path + "/test_batch.bin"});
    if (cfg.dataset_n_per_class > 0) {
      auto clip = [&](Dataset& ds, int per_class) {
        std::vector<int> counts(static_cast<size_t>(ds.num_classes), 0);
        Dataset out = ds;
        out.items.clear();
        for (auto& it : ds.items)
          if (counts[static_cast<size_t>(it.label)]++ < per_class)
            out.items.push_back(std::move(it));
        ds = std::move(out);
      };
      clip(b.train, cfg.dataset_n_per_class);
      clip(b.test, std::max(1, cfg.dataset_n_per_class / 5));
    }
  }
  b.trigger = cfg.make_trigger(b.train.height, b.train.width, b.train.channels);
  b.split = poison_split(b.train, b.trigger, cfg.attack_target, cfg.attack_ratio,
                         derive_seed(cfg.master_seed, "poison:" + cfg.attack_kind,
                                     static_cast<uint64_t>(cfg.seed_index)));
  b.asr_test = build_asr_testset(b.test, b.trigger, cfg.attack_target);
  return b;
}

void write_manifest(const StageContext& ctx) {
  json j;
  j["version"] = "blab 0.1.0";
  j["config_hash"] = ctx.cfg.hash();
  j["master_seed"] = ctx.cfg.master_seed;
  j["seed_index"] = ctx.cfg.seed_index;
  j["attack"] = ctx.cfg.attack_kind;
  j["method"] = ctx.method;
  j["lambda"] = ctx.cfg.train_lambda;
  j["stage_seeds"] = {
      {"dataset", derive_seed(ctx.cfg.master_seed, "dataset")},
      {"trigger", derive_seed(ctx.cfg.master_seed, "trigger:" + ctx.cfg.attack_kind)},
      {"train", ctx.cfg.train_config().seed},
      {"measure", ctx.cfg.distance_options().seed},
  };
  j["artifacts"] = {
      {"config", "config.txt"},         {"checkpoint", "checkpoint.blab"},
      {"trainlog", "trainlog.csv"},     {"eval", "eval.csv"},
      {"distances", "distances.csv"},   {"detection", "detection.csv"},
  };
  fs::create_directories(ctx.dir);
  std::ofstream(ctx.dir + "/manifest.json") << j.dump(2) << "\n";
  std::ofstream(ctx.dir + "/config.txt") << ctx.cfg.serialize();
}

void finalize_manifest(const StageContext& ctx,
                       const std::vector<std::pair<std::string, double>>& timings) {
  std::ifstream is(ctx.dir + "/manifest.json");
  if (!is) fail("manifest missing in " + ctx.dir);
  json j = json::parse(is);
  for (const auto& [stage, sec] : timings) j["timings_sec"][stage] = sec;
  std::ofstream(ctx.dir + "/manifest.json") << j.dump(2) << "\n";
}

void stage_gen_data(const ExperimentConfig& cfg) {
  if (cfg.dataset_source != "synth")
    fail("gen-data only generates the synthetic dataset");
  auto [train, test] = synth_dataset(cfg.synth_config());
  std::string dir = cfg.resolved_out_dir() + "/data";
  fs::create_directories(dir);
  save_dataset(dir + "/train.bdat", train);
  save_dataset(dir + "/test.bdat", test);
}

void stage_train(const StageContext& ctx) {
  DataBundle data = build_data(ctx.cfg);
  TappedModel model = TappedModel::build(ctx.cfg.model_config(), ctx.cfg.train_config().seed);
  TrainLog log = train(model, data.split, data.test, data.asr_test, ctx.cfg.train_config());
  fs::create_directories(ctx.dir);
  save_checkpoint(ctx.dir + "/checkpoint.blab", model.named_state());
  write_trainlog_csv(ctx.dir + "/trainlog.csv", log);
  const EpochLog& last = log.epochs.back();
  CsvWriter csv(ctx.dir + "/eval.csv", {"ba", "asr"});
  csv.row({fmt_g9(last.ba), fmt_g9(last.asr)});
}

TappedModel load_model(const StageContext& ctx) {
  TappedModel model = TappedModel::build(ctx.cfg.model_config(), ctx.cfg.train_config().seed);
  model.load_state(load_checkpoint(ctx.dir + "/checkpoint.blab"));
  return model;
}

std::pair<double, double> stage_eval(const StageContext& ctx) {
  DataBundle data = build_data(ctx.cfg);
  TappedModel model = load_model(ctx);
  return evaluate(model, data.test, data.asr_test, ctx.cfg.attack_target);
}

namespace {

// Measurement pools: a balanced benign pool and its triggered counterpart
// (non-target origins only). File-backed sources reuse the test split.
std::pair<Dataset, Dataset> measurement_pools(const ExperimentConfig& cfg,
                                              const DataBundle& data) {
  Dataset benign;
  if (cfg.dataset_source == "synth")
    benign = balanced_pool(cfg, "pool-measure", cfg.measure_pool_per_class, data.test);
  else
    benign = data.test;
  Dataset malicious = build_asr_testset(benign, data.trigger, cfg.attack_target);
  return {std::move(benign), std::move(malicious)};
}

}  // namespace

void stage_distances(const StageContext& ctx) {
  DataBundle data = build_data(ctx.cfg);
  TappedModel model = load_model(ctx);
  auto [benign, malicious] = measurement_pools(ctx.cfg, data);
  DistanceOptions opts = ctx.cfg.distance_options();
  DistanceReport report =
      difference_report(model, ptrs_of(benign.items), ptrs_of(malicious.items), opts);
  write_distance_csv(ctx.dir + "/distances.csv", report);

  // 2-D projections per level over the predicted-target populations.
  FeatureExtraction ft = extract_features(model, ptrs_of(benign.items), opts.levels,
                                          opts.use_gap);
  FeatureExtraction fv = extract_features(model, ptrs_of(malicious.items), opts.levels,
                                          opts.use_gap);
  Rng rng(derive_seed(opts.seed, "projection"));
  for (int level : opts.levels) {
    std::vector<int> bt, mt;
    for (size_t i = 0; i < ft.predicted.size(); ++i)
      if (ft.predicted[i] == opts.target) bt.push_back(static_cast<int>(i));
    for (size_t i = 0; i < fv.predicted.size(); ++i)
      if (fv.predicted[i] == opts.target) mt.push_back(static_cast<int>(i));
    auto cap = [&](std::vector<int>& v) {
      if (static_cast<int>(v.size()) > opts.sample_size) {
        std::vector<int> keep = rng.sample_without_replacement(
            static_cast<int>(v.size()), opts.sample_size);
        std::vector<int> out;
        for (int k : keep) out.push_back(v[static_cast<size_t>(k)]);
        std::sort(out.begin(), out.end());
        v = std::move(out);
      }
    };
    cap(bt);
    cap(mt);
    Mat zb = ft.features[static_cast<size_t>(level)].take_rows(bt);
    Mat zm = fv.features[static_cast<size_t>(level)].take_rows(mt);
    write_projection_csv(ctx.dir + "/projection_s" + std::to_string(level + 1) + ".csv",
                         zb, zm);
  }
}

void stage_defend(const StageContext& ctx) {
  const ExperimentConfig& cfg = ctx.cfg;
  DataBundle data = build_data(cfg);
  TappedModel model = load_model(ctx);
  const int t = cfg.attack_target;
  std::vector<int> levels = parse_levels(cfg.defend_levels);

  // Pool sizing: enough predicted-target members for the largest grid cell.
  int max_benign = 0, max_mal = 0;
  for (auto [n, rp] : cfg.defend_grid) {
    int nb = static_cast<int>(std::lround(n / (1.0 + rp)));
    max_benign = std::max(max_benign, nb);
    max_mal = std::max(max_mal, n - nb);
  }
  Dataset benign_pool, mal_source;
  if (cfg.dataset_source == "synth") {
    SynthConfig proto = cfg.synth_config();
    auto items = synth_class_samples(derive_seed(cfg.master_seed, "pool-detect-benign"),
                                     t, max_benign + max_benign / 2 + 20, proto);
    benign_pool.num_classes = data.test.num_classes;
    benign_pool.height = data.test.height;
    benign_pool.width = data.test.width;
    benign_pool.channels = data.test.channels;
    for (auto& it : items) benign_pool.items.push_back(std::move(it));
    int per_class = (max_mal + max_mal / 2 + 20) / (data.test.num_classes - 1) + 1;
    mal_source = balanced_pool(cfg, "pool-detect-mal", per_class, data.test);
  } else {
    benign_pool = data.test;
    mal_source = data.test;
  }
  Dataset mal_pool = build_asr_testset(mal_source, data.trigger, t);

  FeatureExtraction fb =
      extract_features(model, ptrs_of(benign_pool.items), levels, cfg.measure_use_gap);
  FeatureExtraction fm =
      extract_features(model, ptrs_of(mal_pool.items), levels, cfg.measure_use_gap);
  std::vector<int> benign_rows, mal_rows;
  for (size_t i = 0; i < fb.predicted.size(); ++i)
    if (fb.predicted[i] == t && benign_pool.items[i].label == t)
      benign_rows.push_back(static_cast<int>(i));
  for (size_t i = 0; i < fm.predicted.size(); ++i)
    if (fm.predicted[i] == t) mal_rows.push_back(static_cast<int>(i));

  // SR validation: benign samples across classes, features per level.
  Dataset validation;
  if (cfg.dataset_source == "synth") {
    validation = balanced_pool(cfg, "pool-validation",
                               cfg.defend_validation / data.test.num_classes + 1, data.test);
    validation.items.resize(static_cast<size_t>(cfg.defend_validation));
  } else {
    validation = data.test;
  }
  FeatureExtraction fval =
      extract_features(model, ptrs_of(validation.items), levels, cfg.measure_use_gap);

  CsvWriter csv(ctx.dir + "/detection.csv",
                {"defense", "level", "n", "r_prime", "precision", "recall", "f1", "flags"});
  int cell_idx = 0;
  for (const std::string& defense : cfg.defend_defenses) {
    for (int level : levels) {
      for (auto [n, rp] : cfg.defend_grid) {
        ++cell_idx;
        int nb = static_cast<int>(std::lround(n / (1.0 + rp)));
        int nm = n - nb;
        if (static_cast<int>(benign_rows.size()) < nb ||
            static_cast<int>(mal_rows.size()) < nm)
          fail("defend: predicted-target pool too small for N=" + std::to_string(n) +
               " r'=" + fmt_g9(rp) + " (benign " + std::to_string(benign_rows.size()) +
               ", malicious " + std::to_string(mal_rows.size()) + ")");
        uint64_t cell_seed = derive_seed(cfg.master_seed, "defend:" + defense,
                                         static_cast<uint64_t>(cell_idx) * 131 +
                                             static_cast<uint64_t>(cfg.seed_index));
        Rng rng(cell_seed);
        std::vector<int> bsel = rng.sample_without_replacement(
            static_cast<int>(benign_rows.size()), nb);
        std::vector<int> msel = rng.sample_without_replacement(
            static_cast<int>(mal_rows.size()), nm);
        const Mat& fbl = fb.features[static_cast<size_t>(level)];
        const Mat& fml = fm.features[static_cast<size_t>(level)];
        DetectionInput input;
        input.features = Mat(nb + nm, fbl.cols);
        input.truth.assign(static_cast<size_t>(nb + nm), 0);
        input.r_prime = rp;
        for (int i = 0; i < nb; ++i)
          std::copy(fbl.row(benign_rows[static_cast<size_t>(bsel[static_cast<size_t>(i)])]),
                    fbl.row(benign_rows[static_cast<size_t>(bsel[static_cast<size_t>(i)])]) + fbl.cols,
                    input.features.row(i));
        for (int i = 0; i < nm; ++i) {
          std::copy(fml.row(mal_rows[static_cast<size_t>(msel[static_cast<size_t>(i)])]),
                    fml.row(mal_rows[static_cast<size_t>(msel[static_cast<size_t>(i)])]) + fml.cols,
                    input.features.row(nb + i));
          input.truth[static_cast<size_t>(nb + i)] = 1;
        }
        DetectionReport rep;
        if (defense == "ac") rep = activation_clustering(input, cell_seed);
        else if (defense == "ss") rep = spectral_signatures(input);
        else rep = subspace_reconstruction(input, fval.features[static_cast<size_t>(level)]);
        csv.row({defense, "s" + std::to_string(level + 1), std::to_string(n), fmt_g9(rp),
                 fmt_g9(rep.precision), fmt_g9(rep.recall), fmt_g9(rep.f1), rep.flags});
      }
    }
  }
}

void stage_synthesize(const StageContext& ctx, int jobs) {
  const ExperimentConfig& cfg = ctx.cfg;
  DataBundle data = build_data(cfg);
  TappedModel model = load_model(ctx);
  Dataset validation;
  if (cfg.dataset_source == "synth") {
    validation = balanced_pool(cfg, "pool-validation",
                               cfg.defend_validation / data.test.num_classes + 1, data.test);
    validation.items.resize(static_cast<size_t>(cfg.defend_validation));
  } else {
    validation = data.test;
  }
  TriggerScan scan =
      nc_scan(model, ptrs_of(validation.items), cfg.nc_gamma, cfg.nc_steps,
              derive_seed(cfg.master_seed, "nc", static_cast<uint64_t>(cfg.seed_index)),
              cfg.nc_lr, cfg.nc_batch, jobs);
  fs::create_directories(ctx.dir + "/triggers");
  std::ofstream jl(ctx.dir + "/triggers.jsonl");
  for (int cls = 0; cls < model.num_classes(); ++cls) {
    const SynthesizedTrigger& st = scan.per_class[static_cast<size_t>(cls)];
    std::string mask_path = "triggers/mask_c" + std::to_string(cls) + ".bdat";
    std::string pattern_path = "triggers/pattern_c" + std::to_string(cls) + ".bdat";
    Dataset one;
    one.num_classes = model.num_classes();
    one.height = st.pattern.dim(1);
    one.width = st.pattern.dim(2);
    one.channels = st.pattern.dim(0);
    LabeledImage img;
    img.pixels = st.pattern;
    img.label = cls;
    one.items.push_back(img);
    save_dataset(ctx.dir + "/" + pattern_path, one);
    // mask replicated across channels so it rides the same format
    img.pixels = Tensor({one.channels, one.height, one.width});
    for (int ch = 0; ch < one.channels; ++ch)
      for (int i = 0; i < one.height; ++i)
        for (int j = 0; j < one.width; ++j)
          img.pixels.at3(ch, i, j) = st.mask.at2(i, j);
    one.items[0] = img;
    save_dataset(ctx.dir + "/" + mask_path, one);
    json j;
    j["class"] = cls;
    j["l1"] = st.l1;
    j["flagged"] = scan.flagged[static_cast<size_t>(cls)] != 0;
    j["converged"] = st.converged;
    j["final_ce"] = st.final_ce;
    j["mask"] = mask_path;
    j["pattern"] = pattern_path;
    jl << j.dump() << "\n";
  }
}

void stage_prune(const StageContext& ctx) {
  DataBundle data = build_data(ctx.cfg);
  TappedModel model = load_model(ctx);
  auto curve = neuron_prune(model, data.trigger, data.test, data.asr_test,
                            ctx.cfg.attack_target, ctx.cfg.prune_fractions);
  CsvWriter csv(ctx.dir + "/prune.csv", {"fraction", "ba", "asr"});
  for (const auto& p : curve) csv.row({fmt_g9(p.fraction), fmt_g9(p.ba), fmt_g9(p.asr)});
}

std::string SweepCell::name() const {
  std::string n = attack + "_" + method;
  if (method != "rbt") n += "-lam" + fmt_g9(lambda);
  n += "_s" + std::to_string(seed_index);
  return n;
}

std::vector<SweepCell> sweep_cells(const ExperimentConfig& cfg) {
  std::vector<SweepCell> cells;
  for (const auto& attack : cfg.sweep_attacks)
    for (const auto& method : cfg.sweep_methods) {
      std::vector<double> lambdas =
          method == "rbt" ? std::vector<double>{0.0} : cfg.sweep_lambdas;
      for (double lam : lambdas)
        for (int s = 0; s < cfg.sweep_seeds; ++s)
          cells.push_back({attack, method, lam, s});
    }
  return cells;
}

ExperimentConfig cell_config(const ExperimentConfig& base, const SweepCell& cell) {
  ExperimentConfig cfg = base;
  cfg.attack_kind = cell.attack;
  cfg.train_lambda = cell.lambda;
  cfg.seed_index = cell.seed_index;
  if (cell.method == "sl") cfg.train_levels = {"s3"};
  else cfg.train_levels = {"s1", "s2", "s3"};
  return cfg;
}

void run_sweep(const ExperimentConfig& cfg, int jobs, bool overwrite) {
  std::vector<SweepCell> cells = sweep_cells(cfg);
  std::string root = cfg.resolved_out_dir() + "/sweep";
  fs::create_directories(root);
  if (jobs < 1) jobs = 1;
  std::atomic_int next{0};
  std::mutex err_mutex;
  std::vector<std::string> errors;
  auto work = [&]() {
    for (;;) {
      int i = next.fetch_add(1);
      if (i >= static_cast<int>(cells.size())) return;
      const SweepCell& cell = cells[static_cast<size_t>(i)];
      StageContext ctx{cell_config(cfg, cell), root + "/" + cell.name(), cell.method};
      try {
        std::string manifest_path = ctx.dir + "/manifest.json";
        if (!overwrite && fs::exists(manifest_path)) {
          std::ifstream is(manifest_path);
          json j = json::parse(is, nullptr, false);
          if (!j.is_discarded() && j.value("config_hash", "") == ctx.cfg.hash() &&
              fs::exists(ctx.dir + "/detection.csv"))
            continue;  // reuse finished cell
        }
        write_manifest(ctx);
        std::vector<std::pair<std::string, double>> timings;
        double t0 = now_sec();
        stage_train(ctx);
        timings.emplace_back("train", now_sec() - t0);
        t0 = now_sec();
        stage_distances(ctx);
        timings.emplace_back("distances", now_sec() - t0);
        t0 = now_sec();
        stage_defend(ctx);
        timings.emplace_back("defend", now_sec() - t0);
        finalize_manifest(ctx, timings);
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(err_mutex);
        errors.push_back(cell.name() + ": " + e.what());
      }
    }
  };
  if (jobs == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < jobs; ++i) pool.emplace_back(work);
    for (auto& th : pool) th.join();
  }
  if (!errors.empty()) {
    std::string msg = "sweep: " + std::to_string(errors.size()) + " cell(s) failed:";
    for (const auto& e : errors) msg += "\n  " + e;
    fail(msg);
  }
}

void run_report(const ExperimentConfig& cfg) {
  std::string root = cfg.resolved_out_dir();
  std::string sweep_dir = root + "/sweep";
  if (!fs::exists(sweep_dir)) fail("report: no sweep directory at " + sweep_dir);
  std::vector<std::string> cell_dirs;
  for (const auto& entry : fs::directory_iterator(sweep_dir))
    if (entry.is_directory() && fs::exists(entry.path() / "manifest.json"))
      cell_dirs.push_back(entry.path().string());
  std::sort(cell_dirs.begin(), cell_dirs.end());
  if (cell_dirs.empty()) fail("report: no finished cells under " + sweep_dir);

  std::string report_dir = root + "/report";
  fs::create_directories(report_dir + "/projections");

  // header: fixed columns + one F1 column per (defense, level, grid cell)
  std::vector<std::string> header = {"attack", "method", "lambda", "seed_index",
                                     "ba",     "asr",    "aro_s1", "aro_s2",
                                     "aro_s3"};
  std::vector<std::string> f1_cols;
  std::vector<int> levels = parse_levels(cfg.defend_levels);
  for (const auto& defense : cfg.defend_defenses)
    for (int level : levels)
      for (auto [n, rp] : cfg.defend_grid)
        f1_cols.push_back("f1_" + defense + "_s" + std::to_string(level + 1) + "_n" +
                          std::to_string(n) + "_r" + fmt_g9(rp));
  header.insert(header.end(), f1_cols.begin(), f1_cols.end());

  CsvWriter csv(report_dir + "/summary.csv", header);
  for (const auto& dir : cell_dirs) {
    std::ifstream is(dir + "/manifest.json");
    json manifest = json::parse(is);
    std::vector<std::string> row = {
        manifest.value("attack", ""), manifest.value("method", ""),
        fmt_g9(manifest.value("lambda", 0.0)),
        std::to_string(manifest.value("seed_index", 0))};
    CsvTable eval = read_csv(dir + "/eval.csv");
    row.push_back(eval.rows.at(0).at(static_cast<size_t>(eval.col("ba"))));
    row.push_back(eval.rows.at(0).at(static_cast<size_t>(eval.col("asr"))));
    std::array<std::string, 3> aro = {"", "", ""};
    CsvTable dist = read_csv(dir + "/distances.csv");
    int mcol = dist.col("metric"), lcol = dist.col("level"), acol = dist.col("aro");
    for (const auto& r : dist.rows)
      if (r.at(static_cast<size_t>(mcol)) == "ARO")
        for (int lv = 0; lv < 3; ++lv)
          if (r.at(static_cast<size_t>(lcol)) == "s" + std::to_string(lv + 1))
            aro[static_cast<size_t>(lv)] = r.at(static_cast<size_t>(acol));
    for (auto& a : aro) row.push_back(a);
    CsvTable det = read_csv(dir + "/detection.csv");
    int dcol = det.col("defense"), dlcol = det.col("level"), ncol = det.col("n"),
        rcol = det.col("r_prime"), fcol = det.col("f1");
    for (const auto& defense : cfg.defend_defenses)
      for (int level : levels)
        for (auto [n, rp] : cfg.defend_grid) {
          std::string found;
          for (const auto& r : det.rows)
            if (r.at(static_cast<size_t>(dcol)) == defense &&
                r.at(static_cast<size_t>(dlcol)) == "s" + std::to_string(level + 1) &&
                r.at(static_cast<size_t>(ncol)) == std::to_string(n) &&
                r.at(static_cast<size_t>(rcol)) == fmt_g9(rp))
              found = r.at(static_cast<size_t>(fcol));
          row.push_back(found);
        }
    csv.row(row);
    std::string cell_name = fs::path(dir).filename().string();
    for (int lv = 0; lv < 3; ++lv) {
      std::string src = dir + "/projection_s" + std::to_string(lv + 1) + ".csv";
      if (fs::exists(src))
        fs::copy_file(src,
                      report_dir + "/projections/" + cell_name + "_s" +
                          std::to_string(lv + 1) + ".csv",
                      fs::copy_options::overwrite_existing);
    }
  }
}

}  // namespace blab
