// Command-line front end: dataset generation, training, evaluation under
// corruptions and attacks, defenses, map rendering, sweeps, and a codec
// self-test. Every command takes --config pointing at a JSON file whose keys
// match the long flag names; explicit flags win over config values.
//
// Exit codes: 0 success, 1 bad usage or invalid arguments, 2 runtime failure
// (I/O, malformed files, numeric trouble).

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "entro/checkpoint.hpp"
#include "entro/coder.hpp"
#include "entro/data.hpp"
#include "entro/defense.hpp"
#include "entro/model.hpp"
#include "entro/perturb.hpp"
#include "entro/pipeline.hpp"
#include "entro/train.hpp"

namespace {

using entro::Rng;

nlohmann::json load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw entro::FormatError("cannot open config '" + path + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw entro::FormatError(std::string("config is not valid JSON: ") + e.what());
  }
}

// Pre-scan for --config so its values become defaults that explicit flags
// then override during the real parse.
nlohmann::json peek_config(int argc, char** argv) {
  for (int i = 1; i + 1 < argc; ++i)
    if (std::string(argv[i]) == "--config") return load_config_file(argv[i + 1]);
  return nlohmann::json::object();
}

template <typename T>
void from_config(const nlohmann::json& cfg, const char* key, T& out) {
  if (cfg.contains(key)) out = cfg.at(key).get<T>();
}

void print_summary(const entro::EvalSummary& s) {
  std::printf(
      "metrics: samples=%d acc_pct=%.3f size_kb_mean=%.4f size_kb_std=%.4f "
      "est_bits_mean=%.3f latency_s_mean=%.6f\n",
      s.samples, s.acc_pct, s.size_kb_mean, s.size_kb_std, s.est_bits_mean, s.latency_s_mean);
}

void append_csv_row(const std::string& path, const std::string& row) {
  const bool fresh = !std::filesystem::exists(path);
  std::ofstream out(path, std::ios::app);
  if (!out) throw entro::FormatError("cannot write '" + path + "'");
  if (fresh) out << entro::kGridCsvHeader << "\n";
  out << row << "\n";
}

entro::EvalOptions eval_options_from(const nlohmann::json& cfg) {
  entro::EvalOptions opt;
  from_config(cfg, "samples", opt.sample_limit);
  from_config(cfg, "seed", opt.seed);
  from_config(cfg, "bandwidth-mbps", opt.bandwidth_mbps);
  from_config(cfg, "rtt-ms", opt.rtt_ms);
  return opt;
}

void add_eval_options(CLI::App* cmd, entro::EvalOptions& opt) {
  cmd->add_option("--samples", opt.sample_limit, "test samples to run (0 = all)");
  cmd->add_option("--seed", opt.seed, "evaluation seed");
  cmd->add_option("--bandwidth-mbps", opt.bandwidth_mbps, "uplink bandwidth for latency model");
  cmd->add_option("--rtt-ms", opt.rtt_ms, "round trip time for latency model");
}

int codec_selftest(int trials, uint64_t seed) {
  Rng rng(seed);
  int failures = 0;
  for (int t = 0; t < trials; ++t) {
    const int n = 2 + static_cast<int>(rng.below(300));
    std::vector<double> pmf(static_cast<size_t>(n));
    for (auto& p : pmf) p = rng.uniform(1e-9, 1.0);
    const entro::CdfTable table = entro::table_from_pmf(pmf);
    const int len = static_cast<int>(rng.below(500));
    std::vector<int> syms(static_cast<size_t>(len));
    for (auto& s : syms) s = static_cast<int>(rng.below(static_cast<uint64_t>(n)));
    entro::RangeEncoder enc;
    for (int s : syms) enc.encode(table, s);
    const std::vector<uint8_t> bytes = enc.finish();
    entro::RangeDecoder dec(bytes.data(), bytes.size());
    for (int s : syms)
      if (dec.decode(table) != s) {
        ++failures;
        break;
      }
    if (len > 0 && bytes.size() > 4) {  // truncation must throw
      bool threw = false;
      try {
        entro::RangeDecoder d2(bytes.data(), bytes.size() - 5 < 1 ? 1 : bytes.size() - 5);
        for (int i = 0; i < len; ++i) d2.decode(table);
      } catch (const entro::DecodeError&) {
        threw = true;
      }
      if (!threw) ++failures;
    }
  }
  std::printf("codec self-test: %d trials, %d failures\n", trials, failures);
  return failures == 0 ? 0 : 2;
}

void nearest_upsample(const std::vector<float>& in, int h, int w, int factor,
                      std::vector<float>& out) {
  out.resize(static_cast<size_t>(h) * w * factor * factor);
  for (int y = 0; y < h * factor; ++y)
    for (int x = 0; x < w * factor; ++x)
      out[static_cast<size_t>(y) * w * factor + x] =
          in[static_cast<size_t>(y / factor) * w + x / factor];
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"split-model entropy bottleneck toolkit"};
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("--config", config_path, "JSON file with defaults for the chosen command")
      ->expected(1);
  const nlohmann::json cfg = peek_config(argc, argv);

  // ---- make-dataset
  auto* mk = app.add_subcommand("make-dataset", "generate the synthetic shape corpus");
  std::string mk_dir = "artifacts/dataset";
  uint64_t mk_seed = 7;
  int mk_train = 50000, mk_test = 10000;
  from_config(cfg, "dir", mk_dir);
  from_config(cfg, "seed", mk_seed);
  from_config(cfg, "train-count", mk_train);
  from_config(cfg, "test-count", mk_test);
  mk->add_option("--dir", mk_dir, "output directory");
  mk->add_option("--seed", mk_seed, "generator seed");
  mk->add_option("--train-count", mk_train, "training records");
  mk->add_option("--test-count", mk_test, "test records");

  // ---- train
  auto* tr = app.add_subcommand("train", "train a split model");
  std::string tr_data = "artifacts/dataset", tr_out = "artifacts/model.entc";
  std::string tr_prior = "mean_scale_hyper";
  float tr_beta = 0.08f;
  entro::TrainConfig tc;
  from_config(cfg, "data", tr_data);
  from_config(cfg, "out", tr_out);
  from_config(cfg, "prior", tr_prior);
  from_config(cfg, "beta", tr_beta);
  from_config(cfg, "epochs", tc.epochs);
  from_config(cfg, "batch-size", tc.batch_size);
  from_config(cfg, "lr", tc.lr);
  from_config(cfg, "optimizer", tc.optimizer);
  from_config(cfg, "sample-limit", tc.sample_limit);
  from_config(cfg, "seed", tc.seed);
  from_config(cfg, "augment", tc.augment);
  from_config(cfg, "rate-warmup", tc.rate_warmup_epochs);
  tr->add_option("--data", tr_data, "dataset directory");
  tr->add_option("--out", tr_out, "checkpoint path to write");
  tr->add_option("--prior", tr_prior, "factorized | mean_scale_hyper");
  tr->add_option("--beta", tr_beta, "rate weight");
  tr->add_option("--epochs", tc.epochs);
  tr->add_option("--batch-size", tc.batch_size);
  tr->add_option("--lr", tc.lr);
  tr->add_option("--optimizer", tc.optimizer, "adam | sgdm");
  tr->add_option("--sample-limit", tc.sample_limit, "cap on training samples (0 = all)");
  tr->add_option("--seed", tc.seed);
  tr->add_option("--rate-warmup", tc.rate_warmup_epochs,
                 "epochs to ramp the rate weight from zero (0 = off)");
  tr->add_flag("--no-augment", [&tc](int64_t) { tc.augment = false; }, "disable augmentation");

  // ---- eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint over coded inference");
  std::string ev_ckpt, ev_data = "artifacts/dataset", ev_corruption = "none", ev_defense = "none";
  int ev_severity = 3;
  entro::EvalOptions ev_opt = eval_options_from(cfg);
  from_config(cfg, "ckpt", ev_ckpt);
  from_config(cfg, "data", ev_data);
  from_config(cfg, "corruption", ev_corruption);
  from_config(cfg, "severity", ev_severity);
  from_config(cfg, "defense", ev_defense);
  std::string ev_csv;
  from_config(cfg, "csv", ev_csv);
  ev->add_option("--ckpt,--checkpoint", ev_ckpt, "checkpoint to evaluate")->required();
  ev->add_option("--data,--dataset", ev_data, "dataset directory");
  ev->add_option("--corruption", ev_corruption, "corruption name or none");
  ev->add_option("--severity", ev_severity, "corruption severity 1..5");
  ev->add_option("--defense", ev_defense, "none | tv | masked_tv");
  ev->add_option("--csv", ev_csv, "append the result as a row to this CSV");
  add_eval_options(ev, ev_opt);

  // ---- attack
  auto* at = app.add_subcommand("attack", "evaluate under PGD or the random-sign baseline");
  std::string at_ckpt, at_data = "artifacts/dataset", at_loss = "entropy", at_defense = "none";
  entro::AttackConfig ac;
  bool at_random = false;
  entro::EvalOptions at_opt = eval_options_from(cfg);
  from_config(cfg, "ckpt", at_ckpt);
  from_config(cfg, "data", at_data);
  from_config(cfg, "loss", at_loss);
  from_config(cfg, "epsilon", ac.epsilon);
  from_config(cfg, "steps", ac.steps);
  from_config(cfg, "defense", at_defense);
  at->add_option("--ckpt,--checkpoint", at_ckpt, "checkpoint to attack")->required();
  at->add_option("--data,--dataset", at_data, "dataset directory");
  at->add_option("--loss", at_loss, "entropy | accuracy | regional_entropy");
  at->add_option("--epsilon", ac.epsilon, "L-inf budget in [0,1] pixel units");
  at->add_option("--steps", ac.steps);
  at->add_option("--alpha-frac", ac.alpha_frac, "step size = alpha-frac * epsilon / steps");
  at->add_flag("--random-start", ac.random_start);
  at->add_flag("--low-freq", ac.low_freq, "filter gradients to low DCT frequencies");
  at->add_option("--freq-cutoff", ac.freq_cutoff, "zero DCT coefficients with u+v >= cutoff");
  at->add_flag("--random-baseline", at_random, "random sign noise instead of PGD");
  at->add_option("--defense", at_defense, "none | tv | masked_tv");
  add_eval_options(at, at_opt);

  // ---- defend (single image, before/after render)
  auto* df = app.add_subcommand("defend", "denoise one test image and write before/after PPMs");
  std::string df_ckpt, df_data = "artifacts/dataset", df_defense = "masked_tv";
  std::string df_corruption = "none", df_prefix = "defend";
  int df_index = 0, df_severity = 3;
  uint64_t df_seed = 0;
  from_config(cfg, "ckpt", df_ckpt);
  from_config(cfg, "data", df_data);
  from_config(cfg, "index", df_index);
  df->add_option("--ckpt,--checkpoint", df_ckpt, "checkpoint (for the masked variant)")->required();
  df->add_option("--data,--dataset", df_data, "dataset directory");
  df->add_option("--index", df_index, "test image index");
  df->add_option("--corruption", df_corruption, "corruption applied first, or none");
  df->add_option("--severity", df_severity);
  df->add_option("--defense", df_defense, "tv | masked_tv");
  df->add_option("--out-prefix", df_prefix, "writes <prefix>_before.ppm and <prefix>_after.ppm");
  df->add_option("--seed", df_seed);

  // ---- corrupt (single image render)
  auto* co = app.add_subcommand("corrupt", "corrupt one test image and write a PPM");
  std::string co_data = "artifacts/dataset", co_name = "gaussian_noise", co_out = "corrupt.ppm";
  int co_index = 0, co_severity = 3;
  uint64_t co_seed = 0;
  co->add_option("--data,--dataset", co_data, "dataset directory");
  co->add_option("--index", co_index, "test image index");
  co->add_option("--name", co_name, "corruption name");
  co->add_option("--severity", co_severity);
  co->add_option("--out", co_out, "output PPM path");
  co->add_option("--seed", co_seed);

  // ---- maps
  auto* mp = app.add_subcommand("maps", "render input, bitrate, and variation maps");
  std::string mp_ckpt, mp_data = "artifacts/dataset", mp_prefix = "maps";
  int mp_index = 0;
  double mp_compare_eps = 0.0;
  mp->add_option("--ckpt,--checkpoint", mp_ckpt, "checkpoint")->required();
  mp->add_option("--data,--dataset", mp_data, "dataset directory");
  mp->add_option("--index", mp_index, "test image index");
  mp->add_option("--out-prefix", mp_prefix,
                 "writes <prefix>_input.ppm, <prefix>_bits.pgm, <prefix>_tv.pgm");
  mp->add_option("--compare-eps", mp_compare_eps,
                 "also attack with both PGD objectives at this epsilon and write "
                 "<prefix>_diff.ppm of the bitrate maps (entropy minus accuracy)");

  // ---- grid
  auto* gr = app.add_subcommand("grid", "run the sweep described by a JSON spec");
  std::string gr_config, gr_out = "results.csv";
  gr->add_option("--spec,--config", gr_config, "grid spec JSON")->required();
  gr->add_option("--out", gr_out, "CSV to append to");

  // ---- codec-selftest
  auto* cs = app.add_subcommand("codec-selftest", "randomized range coder roundtrips");
  int cs_trials = 500;
  uint64_t cs_seed = 1;
  cs->add_option("--trials", cs_trials);
  cs->add_option("--seed", cs_seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  if (*mk) {
    entro::generate_dataset_dir(mk_dir, mk_seed, mk_train, mk_test);
    std::printf("wrote %d train and %d test records under %s\n", mk_train, mk_test,
                mk_dir.c_str());
    return 0;
  }

  if (*tr) {
    entro::ModelConfig mc;
    mc.prior = entro::prior_from_name(tr_prior);
    mc.beta = tr_beta;
    entro::SplitModel model(mc);
    Rng init_rng(entro::derive_seed(tc.seed, 0x1717));
    model.init(init_rng);
    const entro::Dataset data = entro::load_cifar_train(tr_data);
    const entro::TrainStats stats = entro::train_model(model, data, tc, &std::cout);
    nlohmann::json meta;
    meta["epochs"] = tc.epochs;
    meta["seed"] = tc.seed;
    meta["final_loss"] = stats.epoch_loss.back();
    meta["final_acc_pct"] = stats.epoch_acc_pct.back();
    meta["final_bits"] = stats.epoch_bits.back();
    if (const auto dir = std::filesystem::path(tr_out).parent_path(); !dir.empty())
      std::filesystem::create_directories(dir);
    entro::save_checkpoint(tr_out, model, meta);
    std::printf("saved %s\n", tr_out.c_str());
    return 0;
  }

  if (*ev) {
    entro::SplitModel model = entro::load_checkpoint(ev_ckpt);
    const entro::Dataset test = entro::load_cifar_test(ev_data);
    entro::ImageHook hook;
    std::string label = "none";
    if (ev_corruption != "none") {
      hook = entro::make_corruption_hook(entro::corruption_from_name(ev_corruption), ev_severity,
                                         entro::derive_seed(ev_opt.seed, 0xc0));
      label = ev_corruption + ":s" + std::to_string(ev_severity);
    }
    hook = entro::chain_hooks(hook, entro::make_defense_hook(ev_defense, model, {}));
    const entro::EvalSummary s = entro::evaluate_model(model, test, ev_opt, hook);
    print_summary(s);
    if (!ev_csv.empty()) {
      const std::string id = std::filesystem::path(ev_ckpt).stem().string();
      append_csv_row(ev_csv, entro::grid_csv_row(id, label, ev_defense, s));
    }
    return 0;
  }

  if (*at) {
    entro::SplitModel model = entro::load_checkpoint(at_ckpt);
    const entro::Dataset test = entro::load_cifar_test(at_data);
    entro::ImageHook hook;
    if (at_random) {
      hook = entro::make_random_sign_hook(ac.epsilon, entro::derive_seed(at_opt.seed, 0x51));
    } else {
      ac.loss = entro::attack_loss_from_name(at_loss);
      ac.seed = entro::derive_seed(at_opt.seed, 0xadf);
      hook = entro::make_attack_hook(model, test, ac);
    }
    hook = entro::chain_hooks(hook, entro::make_defense_hook(at_defense, model, {}));
    print_summary(entro::evaluate_model(model, test, at_opt, hook));
    return 0;
  }

  if (*df) {
    entro::SplitModel model = entro::load_checkpoint(df_ckpt);
    const entro::Dataset test = entro::load_cifar_test(df_data);
    if (df_index < 0 || df_index >= test.count())
      throw entro::ValueError("--index outside the test set");
    std::vector<float> img(test.image(df_index), test.image(df_index) + entro::kImageFloats);
    if (df_corruption != "none") {
      Rng rng(entro::derive_seed(df_seed, static_cast<uint64_t>(df_index)));
      entro::corrupt_image(img.data(), entro::corruption_from_name(df_corruption), df_severity,
                           rng);
    }
    entro::write_ppm(df_prefix + "_before.ppm", img.data(), entro::kImageDim, entro::kImageDim);
    const entro::ImageHook hook = entro::make_defense_hook(df_defense, model, {});
    if (!hook) throw entro::ValueError("defend: pick tv or masked_tv");
    hook(img.data(), df_index);
    entro::write_ppm(df_prefix + "_after.ppm", img.data(), entro::kImageDim, entro::kImageDim);
    std::printf("wrote %s_before.ppm and %s_after.ppm\n", df_prefix.c_str(), df_prefix.c_str());
    return 0;
  }

  if (*co) {
    const entro::Dataset test = entro::load_cifar_test(co_data);
    if (co_index < 0 || co_index >= test.count())
      throw entro::ValueError("--index outside the test set");
    std::vector<float> img(test.image(co_index), test.image(co_index) + entro::kImageFloats);
    Rng rng(entro::derive_seed(co_seed, static_cast<uint64_t>(co_index)));
    entro::corrupt_image(img.data(), entro::corruption_from_name(co_name), co_severity, rng);
    entro::write_ppm(co_out, img.data(), entro::kImageDim, entro::kImageDim);
    std::printf("wrote %s\n", co_out.c_str());
    return 0;
  }

  if (*mp) {
    entro::SplitModel model = entro::load_checkpoint(mp_ckpt);
    const entro::Dataset test = entro::load_cifar_test(mp_data);
    if (mp_index < 0 || mp_index >= test.count())
      throw entro::ValueError("--index outside the test set");
    const float* img = test.image(mp_index);
    entro::write_ppm(mp_prefix + "_input.ppm", img, entro::kImageDim, entro::kImageDim);
    int h = 0, w = 0;
    const std::vector<float> bits = entro::bitrate_map(model, img, &h, &w);
    std::vector<float> big;
    nearest_upsample(bits, h, w, entro::kImageDim / h, big);
    entro::write_pgm(mp_prefix + "_bits.pgm", big.data(), entro::kImageDim, entro::kImageDim);
    const std::vector<float> tv = entro::tv_patch_map(img, entro::kImageChannels,
                                                      entro::kImageDim, entro::kImageDim,
                                                      entro::kImageDim / h);
    nearest_upsample(tv, h, w, entro::kImageDim / h, big);
    entro::write_pgm(mp_prefix + "_tv.pgm", big.data(), entro::kImageDim, entro::kImageDim);
    const std::vector<double> da(bits.begin(), bits.end()), db(tv.begin(), tv.end());
    std::printf("pearson(tv, bits) = %.4f\n", entro::pearson(da, db));
    if (mp_compare_eps > 0.0) {
      entro::AttackConfig acmp;
      acmp.epsilon = mp_compare_eps;
      acmp.loss = entro::AttackLoss::kEntropy;
      const std::vector<float> xe =
          entro::pgd_attack(model, img, test.labels[static_cast<size_t>(mp_index)], acmp);
      acmp.loss = entro::AttackLoss::kAccuracy;
      const std::vector<float> xa =
          entro::pgd_attack(model, img, test.labels[static_cast<size_t>(mp_index)], acmp);
      const std::vector<float> me = entro::bitrate_map(model, xe.data(), nullptr, nullptr);
      const std::vector<float> ma = entro::bitrate_map(model, xa.data(), nullptr, nullptr);
      entro::write_comparison_ppm(mp_prefix + "_diff.ppm", me, ma, h, w);
      std::printf("wrote %s_diff.ppm\n", mp_prefix.c_str());
    }
    std::printf("wrote %s_input.ppm, %s_bits.pgm, %s_tv.pgm\n", mp_prefix.c_str(),
                mp_prefix.c_str(), mp_prefix.c_str());
    return 0;
  }

  if (*gr) {
    const int ran = entro::run_grid(gr_config, gr_out, std::cout);
    std::printf("grid: %d cells run, results in %s\n", ran, gr_out.c_str());
    return 0;
  }

  if (*cs) return codec_selftest(cs_trials, cs_seed);

  return 0;
}

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const entro::ValueError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
