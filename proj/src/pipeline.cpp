#include "entro/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

#include "entro/checkpoint.hpp"

namespace entro {

namespace {

TensorT<float> image_tensor(const float* img) {
  return TensorT<float>::from_data(Shape{1, kImageChannels, kImageDim, kImageDim},
                                   std::vector<float>(img, img + kImageFloats));
}

std::vector<float> to_floats(const QuantizedLatent& q) {
  std::vector<float> out(q.values.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(q.values[i]);
  return out;
}

int argmax10(const std::vector<float>& logits) {
  int best = 0;
  for (int k = 1; k < kNumClasses; ++k)
    if (logits[static_cast<size_t>(k)] > logits[static_cast<size_t>(best)]) best = k;
  return best;
}

void check_same(const QuantizedLatent& a, const QuantizedLatent& b, const char* what) {
  if (a.shape != b.shape || a.values != b.values)
    throw DecodeError(std::string("split inference: decoded ") + what +
                      " differs from what was encoded");
}

}  // namespace

CoderTables build_coder_tables(const SplitModel& model) {
  CoderTables t;
  if (model.config().prior == PriorKind::kFactorized)
    t.z = logistic_channel_tables(model.fp_mu_values(), model.fp_scale_values());
  else
    t.h = logistic_channel_tables(model.hp_mu_values(), model.hp_scale_values());
  return t;
}

InferenceResult run_split_inference(const SplitModel& model, const CoderTables& tables,
                                    const float* img) {
  InferenceResult res;
  TensorT<float> x = image_tensor(img);
  TensorT<float> z = model.head_forward(x);

  if (model.config().prior == PriorKind::kFactorized) {
    const QuantizedLatent q = quantize_values(z.shape(), z.values().data());

    TensorT<float> zq = TensorT<float>::from_data(z.shape(), to_floats(q));
    res.est_bits = static_cast<double>(model.neg_log2_bits(model.fp_likelihood(zq)).item());

    res.bitstream = serialize(encode_factorized(q, tables.z));
    const std::vector<uint8_t>& blob = res.bitstream;
    res.coded_bytes = blob.size();
    const Bitstream parsed = parse_bitstream(blob.data(), blob.size());
    const QuantizedLatent dec = decode_factorized(parsed, tables.z);
    check_same(dec, q, "latent");

    TensorT<float> tail_in = TensorT<float>::from_data(z.shape(), to_floats(dec));
    res.predicted = argmax10(model.tail_forward(tail_in).values());
    return res;
  }

  // hyperprior: code h, predict (mu, sigma) from the quantized h, then code
  // the integer residual of z around mu under sigma-binned gaussians
  TensorT<float> h = model.hyper_encode(z);
  const QuantizedLatent hq = quantize_values(h.shape(), h.values().data());
  TensorT<float> hqf = TensorT<float>::from_data(h.shape(), to_floats(hq));
  auto [mu, sigma] = model.hyper_decode(hqf);

  std::vector<float> resid(z.values().size());
  for (size_t i = 0; i < resid.size(); ++i) resid[i] = z.values()[i] - mu.values()[i];
  const QuantizedLatent rq = quantize_values(z.shape(), resid.data());

  {
    TensorT<float> zt = TensorT<float>::from_data(z.shape(), [&] {
      std::vector<float> v(rq.values.size());
      for (size_t i = 0; i < v.size(); ++i)
        v[i] = mu.values()[i] + static_cast<float>(rq.values[i]);
      return v;
    }());
    const double zbits =
        static_cast<double>(model.neg_log2_bits(gaussian_box(zt, mu, sigma)).item());
    const double hbits = static_cast<double>(model.neg_log2_bits(model.fp_h_likelihood(hqf)).item());
    res.est_bits = zbits + hbits;
  }

  res.bitstream = serialize(encode_hyper(hq, tables.h, rq, sigma.values()));
  const std::vector<uint8_t>& blob = res.bitstream;
  res.coded_bytes = blob.size();
  const Bitstream parsed = parse_bitstream(blob.data(), blob.size());

  std::vector<float> dec_mu;  // captured from the decode callback's model pass
  const HyperDecoded dec = decode_hyper(
      parsed, tables.h, [&model, &dec_mu](const QuantizedLatent& hdec) {
        TensorT<float> hf = TensorT<float>::from_data(hdec.shape, to_floats(hdec));
        auto [m, s] = model.hyper_decode(hf);
        dec_mu = m.values();
        return s.values();
      });
  check_same(dec.h, hq, "side latent");
  check_same(dec.residual, rq, "latent residual");

  std::vector<float> tail_vals(dec.residual.values.size());
  for (size_t i = 0; i < tail_vals.size(); ++i)
    tail_vals[i] = dec_mu[i] + static_cast<float>(dec.residual.values[i]);
  TensorT<float> tail_in = TensorT<float>::from_data(z.shape(), tail_vals);
  res.predicted = argmax10(model.tail_forward(tail_in).values());
  return res;
}

// ---------------------------------------------------------------------------

ImageHook chain_hooks(ImageHook first, ImageHook second) {
  if (!first) return second;
  if (!second) return first;
  return [a = std::move(first), b = std::move(second)](float* img, int i) {
    a(img, i);
    b(img, i);
  };
}

ImageHook make_corruption_hook(CorruptionKind kind, int severity, uint64_t seed) {
  return [kind, severity, seed](float* img, int i) {
    Rng rng(derive_seed(seed, static_cast<uint64_t>(i)));
    corrupt_image(img, kind, severity, rng);
  };
}

ImageHook make_random_sign_hook(double eps, uint64_t seed) {
  return [eps, seed](float* img, int i) {
    Rng rng(derive_seed(seed, static_cast<uint64_t>(i)));
    random_sign_noise(img, eps, rng);
  };
}

ImageHook make_attack_hook(const SplitModel& model, const Dataset& data, const AttackConfig& cfg) {
  return [&model, &data, cfg](float* img, int i) {
    AttackConfig per = cfg;
    per.seed = derive_seed(cfg.seed, static_cast<uint64_t>(i));
    const std::vector<float> adv =
        pgd_attack(model, img, data.labels[static_cast<size_t>(i)], per);
    std::copy(adv.begin(), adv.end(), img);
  };
}

ImageHook make_defense_hook(const std::string& name, const SplitModel& model,
                            const DenoiseConfig& cfg) {
  if (name == "none" || name.empty()) return {};
  if (name == "tv")
    return [cfg](float* img, int) { tv_denoise(img, kImageChannels, kImageDim, kImageDim, cfg); };
  if (name == "masked_tv")
    return [&model, cfg](float* img, int) {
      const std::vector<float> mask = prior_soft_mask(model, img);
      masked_tv_denoise(img, kImageChannels, kImageDim, kImageDim, mask.data(), cfg);
    };
  throw ValueError("unknown defense '" + name + "', expected none, tv or masked_tv");
}

EvalSummary evaluate_model(const SplitModel& model, const Dataset& test, const EvalOptions& opt,
                           const ImageHook& hook) {
  if (test.count() == 0) throw ValueError("evaluate_model: empty dataset");
  if (!(opt.bandwidth_mbps > 0.0)) throw ValueError("evaluate_model: bandwidth must be positive");
  const int n = opt.sample_limit > 0 ? std::min(opt.sample_limit, test.count()) : test.count();

  const CoderTables tables = build_coder_tables(model);
  std::vector<float> img(static_cast<size_t>(kImageFloats));
  std::vector<double> sizes_kb(static_cast<size_t>(n));
  int64_t correct = 0;
  double est_sum = 0.0, latency_sum = 0.0;
  for (int i = 0; i < n; ++i) {
    const float* src = test.image(i);
    std::copy(src, src + kImageFloats, img.begin());
    if (hook) hook(img.data(), i);
    const InferenceResult r = run_split_inference(model, tables, img.data());
    correct += r.predicted == test.labels[static_cast<size_t>(i)];
    sizes_kb[static_cast<size_t>(i)] = static_cast<double>(r.coded_bytes) / 1000.0;
    est_sum += r.est_bits;
    latency_sum += static_cast<double>(r.coded_bytes) * 8.0 / (opt.bandwidth_mbps * 1e6) +
                   opt.rtt_ms / 1000.0;
  }

  EvalSummary s;
  s.samples = n;
  s.acc_pct = 100.0 * static_cast<double>(correct) / n;
  double mean = 0.0;
  for (double v : sizes_kb) mean += v;
  mean /= n;
  s.size_kb_mean = mean;
  if (n > 1) {
    double ss = 0.0;
    for (double v : sizes_kb) ss += (v - mean) * (v - mean);
    s.size_kb_std = std::sqrt(ss / (n - 1));
  }
  s.est_bits_mean = est_sum / n;
  s.latency_s_mean = latency_sum / n;
  return s;
}

// ---------------------------------------------------------------------------

const char* const kGridCsvHeader =
    "config_id, perturbation, defense, acc_pct, size_kb_mean, size_kb_std, est_bits_mean, "
    "latency_s_mean, error";

namespace {

struct GridCell {
  std::string perturbation;  // label
  ImageHook hook;
};

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  size_t e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(trim(field));
  return out;
}

GridCell parse_perturbation(const nlohmann::json& spec, const SplitModel& model,
                            const Dataset& data, uint64_t seed) {
  const std::string name = spec.at("name").get<std::string>();
  GridCell cell;
  if (name == "none") {
    cell.perturbation = "none";
    return cell;
  }
  if (name == "random_sign") {
    const double eps = spec.at("epsilon").get<double>();
    cell.perturbation = "random_sign:e" + std::to_string(static_cast<int>(std::lround(eps * 255)));
    cell.hook = make_random_sign_hook(eps, derive_seed(seed, 0x51));
    return cell;
  }
  if (name == "pgd") {
    AttackConfig cfg;
    cfg.loss = attack_loss_from_name(spec.value("loss", "entropy"));
    cfg.epsilon = spec.at("epsilon").get<double>();
    cfg.steps = spec.value("steps", 20);
    cfg.alpha_frac = spec.value("alpha_frac", 2.5);
    cfg.random_start = spec.value("random_start", false);
    cfg.low_freq = spec.value("low_freq", false);
    cfg.freq_cutoff = spec.value("freq_cutoff", 8);
    cfg.seed = derive_seed(seed, 0xadf);
    std::string label = std::string("pgd_") + attack_loss_name(cfg.loss) + ":e" +
                        std::to_string(static_cast<int>(std::lround(cfg.epsilon * 255)));
    if (cfg.low_freq) label += ":lf" + std::to_string(cfg.freq_cutoff);
    cell.perturbation = label;
    cell.hook = make_attack_hook(model, data, cfg);
    return cell;
  }
  // common corruptions
  const CorruptionKind kind = corruption_from_name(name);
  const int severity = spec.at("severity").get<int>();
  if (severity < 1 || severity > 5) throw ValueError("severity outside 1..5 in grid spec");
  cell.perturbation = name + ":s" + std::to_string(severity);
  cell.hook = make_corruption_hook(kind, severity, derive_seed(seed, 0xc0));
  return cell;
}

}  // namespace

std::string grid_csv_row(const std::string& config_id, const std::string& perturbation,
                         const std::string& defense, const EvalSummary& s) {
  char row[512];
  std::snprintf(row, sizeof row, "%s, %s, %s, %.3f, %.4f, %.4f, %.3f, %.6f, ", config_id.c_str(),
                perturbation.c_str(), defense.c_str(), s.acc_pct, s.size_kb_mean, s.size_kb_std,
                s.est_bits_mean, s.latency_s_mean);
  return row;
}

int run_grid(const std::string& config_path, const std::string& csv_path, std::ostream& log) {
  std::ifstream cf(config_path);
  if (!cf) throw FormatError("cannot open grid config '" + config_path + "'");
  nlohmann::json spec;
  try {
    spec = nlohmann::json::parse(cf);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("grid config is not valid JSON: ") + e.what());
  }

  const std::string dataset_dir = spec.at("dataset_dir").get<std::string>();
  EvalOptions opt;
  opt.sample_limit = spec.value("sample_limit", 500);
  opt.seed = spec.value("seed", 0);
  opt.bandwidth_mbps = spec.value("bandwidth_mbps", 10.0);
  opt.rtt_ms = spec.value("rtt_ms", 20.0);
  DenoiseConfig dn;
  dn.lambda = spec.value("defense_lambda", 0.1f);
  dn.alpha = spec.value("defense_alpha", 0.05f);
  dn.steps = spec.value("defense_steps", 100);

  const Dataset test = load_cifar_test(dataset_dir);

  // resume support: collect keys of rows already present
  std::map<std::string, bool> done;
  bool have_file = std::filesystem::exists(csv_path);
  if (have_file) {
    std::ifstream in(csv_path);
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
      if (first) {
        first = false;
        if (trim(line) != trim(kGridCsvHeader))
          throw FormatError("existing '" + csv_path + "' has a different header; refusing to mix");
        continue;
      }
      const auto fields = split_csv(line);
      if (fields.size() >= 3) done[fields[0] + "|" + fields[1] + "|" + fields[2]] = true;
    }
  }

  std::ofstream out(csv_path, std::ios::app);
  if (!out) throw FormatError("cannot write '" + csv_path + "'");
  if (!have_file) out << kGridCsvHeader << "\n";

  int ran = 0;
  for (const auto& jc : spec.at("configs")) {
    const std::string config_id = jc.at("id").get<std::string>();
    const std::string ckpt_path = jc.at("checkpoint").get<std::string>();
    SplitModel model = load_checkpoint(ckpt_path);

    for (const auto& jp : spec.at("perturbations")) {
      GridCell cell = parse_perturbation(jp, model, test, opt.seed);
      for (const auto& jd : spec.at("defenses")) {
        const std::string defense = jd.get<std::string>();
        const std::string key = config_id + "|" + cell.perturbation + "|" + defense;
        if (done.count(key)) continue;

        log << "[grid] " << config_id << " / " << cell.perturbation << " / " << defense
            << std::endl;
        std::string row;
        try {
          const ImageHook hook = chain_hooks(cell.hook, make_defense_hook(defense, model, dn));
          const EvalSummary s = evaluate_model(model, test, opt, hook);
          row = grid_csv_row(config_id, cell.perturbation, defense, s);
        } catch (const std::exception& e) {
          std::string msg = e.what();
          std::replace(msg.begin(), msg.end(), ',', ';');
          row = config_id + ", " + cell.perturbation + ", " + defense + ", , , , , , " + msg;
        }
        out << row << "\n";
        out.flush();
        ++ran;
      }
    }
  }
  return ran;
}

// ---------------------------------------------------------------------------

std::vector<float> bitrate_map(const SplitModel& model, const float* img, int* out_h, int* out_w) {
  TensorT<float> x = image_tensor(img);
  auto po = model.prior_forward(x, QuantMode::kRoundSte);
  const auto& lik = po.z_lik.values();
  const int c = po.z_lik.dim(1), h = po.z_lik.dim(2), w = po.z_lik.dim(3);
  const double floor = static_cast<double>(model.config().likelihood_floor);
  std::vector<float> map(static_cast<size_t>(h) * w, 0.0f);
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < h * w; ++i)
      map[static_cast<size_t>(i)] -= static_cast<float>(
          std::log2(std::max(floor, static_cast<double>(lik[static_cast<size_t>(ch) * h * w + i]))));
  if (out_h) *out_h = h;
  if (out_w) *out_w = w;
  return map;
}

void write_pgm(const std::string& path, const float* vals, int h, int w) {
  float lo = vals[0], hi = vals[0];
  for (int i = 0; i < h * w; ++i) {
    lo = std::min(lo, vals[i]);
    hi = std::max(hi, vals[i]);
  }
  const float span = hi > lo ? hi - lo : 1.0f;
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path + "'");
  out << "P5\n" << w << " " << h << "\n255\n";
  for (int i = 0; i < h * w; ++i)
    out.put(static_cast<char>(std::lround((vals[i] - lo) / span * 255.0f)));
  if (!out) throw FormatError("short write on '" + path + "'");
}

void write_ppm(const std::string& path, const float* img, int h, int w) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path + "'");
  out << "P6\n" << w << " " << h << "\n255\n";
  for (int i = 0; i < h * w; ++i)
    for (int c = 0; c < 3; ++c) {
      const float v = std::clamp(img[c * h * w + i], 0.0f, 1.0f);
      out.put(static_cast<char>(std::lround(v * 255.0f)));
    }
  if (!out) throw FormatError("short write on '" + path + "'");
}

void write_comparison_ppm(const std::string& path, const std::vector<float>& a,
                          const std::vector<float>& b, int h, int w) {
  if (a.size() != b.size() || static_cast<size_t>(h) * w != a.size())
    throw ValueError("write_comparison_ppm: size mismatch");
  float peak = 0.0f;
  for (size_t i = 0; i < a.size(); ++i) peak = std::max(peak, std::abs(a[i] - b[i]));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path + "'");
  out << "P6\n" << w << " " << h << "\n255\n";
  for (size_t i = 0; i < a.size(); ++i) {
    const float d = peak > 0.0f ? (a[i] - b[i]) / peak : 0.0f;
    const int fade = 255 - static_cast<int>(std::lround(std::abs(d) * 255.0f));
    const int r = d >= 0.0f ? 255 : fade;
    const int g = fade;
    const int bl = d <= 0.0f ? 255 : fade;
    out.put(static_cast<char>(r));
    out.put(static_cast<char>(g));
    out.put(static_cast<char>(bl));
  }
  if (!out) throw FormatError("short write on '" + path + "'");
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw ValueError("pearson: need two equal-length series");
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) throw ValueError("pearson: zero variance series");
  return sab / std::sqrt(saa * sbb);
}

}  // namespace entro
