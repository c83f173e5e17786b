// Coded split inference end to end, the evaluator, the sweep runner, maps,
// and attack mechanics that need a live model.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "entro/checkpoint.hpp"
#include "entro/data.hpp"
#include "entro/perturb.hpp"
#include "entro/pipeline.hpp"

using entro::Dataset;
using entro::ModelConfig;
using entro::PriorKind;
using entro::Rng;
using entro::SplitModel;

namespace {

SplitModel fresh_model(PriorKind prior, uint64_t seed) {
  ModelConfig cfg;
  cfg.prior = prior;
  SplitModel m{cfg};
  Rng rng(seed);
  m.init(rng);
  return m;
}

}  // namespace

TEST_CASE("split inference round-trips the bitstream for both priors") {
  Dataset d = entro::make_shape_dataset(4, 61);
  for (PriorKind prior : {PriorKind::kFactorized, PriorKind::kMeanScaleHyper}) {
    SplitModel m = fresh_model(prior, 62);
    const entro::CoderTables tables = entro::build_coder_tables(m);
    for (int i = 0; i < d.count(); ++i) {
      const entro::InferenceResult r = entro::run_split_inference(m, tables, d.image(i));
      CHECK(r.coded_bytes > 8);
      CHECK(r.predicted >= 0);
      CHECK(r.predicted < 10);
      CHECK(r.est_bits > 0.0);
      // the serialized stream parses back to the same payload sizes
      const entro::Bitstream bs = entro::parse_bitstream(r.bitstream.data(), r.bitstream.size());
      CHECK(bs.total_bytes() == r.coded_bytes);
      CHECK((prior == PriorKind::kMeanScaleHyper) == !bs.h_payload.empty());
    }
  }
}

TEST_CASE("inference is deterministic") {
  Dataset d = entro::make_shape_dataset(2, 63);
  SplitModel m = fresh_model(PriorKind::kMeanScaleHyper, 64);
  const entro::CoderTables tables = entro::build_coder_tables(m);
  const auto a = entro::run_split_inference(m, tables, d.image(0));
  const auto b = entro::run_split_inference(m, tables, d.image(0));
  CHECK(a.bitstream == b.bitstream);
  CHECK(a.predicted == b.predicted);
  CHECK(a.est_bits == b.est_bits);
}

TEST_CASE("estimated bits track coded bits on in-distribution data") {
  Dataset d = entro::make_shape_dataset(16, 65);
  for (PriorKind prior : {PriorKind::kFactorized, PriorKind::kMeanScaleHyper}) {
    SplitModel m = fresh_model(prior, 66);
    const entro::CoderTables tables = entro::build_coder_tables(m);
    double est = 0.0, coded = 0.0;
    for (int i = 0; i < d.count(); ++i) {
      const auto r = entro::run_split_inference(m, tables, d.image(i));
      est += r.est_bits;
      coded += 8.0 * static_cast<double>(r.coded_bytes);
    }
    // container adds a fixed header; tables add quantization slack
    CHECK(coded > 0.5 * est);
    CHECK(coded < 2.0 * est);
  }
}

TEST_CASE("pgd stays inside the ball and the value range") {
  Dataset d = entro::make_shape_dataset(1, 67);
  SplitModel m = fresh_model(PriorKind::kMeanScaleHyper, 68);
  entro::AttackConfig cfg;
  cfg.epsilon = 8.0 / 255.0;
  cfg.steps = 4;
  for (entro::AttackLoss loss : {entro::AttackLoss::kEntropy, entro::AttackLoss::kAccuracy,
                                 entro::AttackLoss::kRegionalEntropy}) {
    cfg.loss = loss;
    const auto adv = entro::pgd_attack(m, d.image(0), d.labels[0], cfg);
    REQUIRE(adv.size() == static_cast<size_t>(entro::kImageFloats));
    bool moved = false;
    for (size_t i = 0; i < adv.size(); ++i) {
      const float x0 = d.image(0)[i];
      CHECK(adv[i] >= std::max(0.0f, x0 - static_cast<float>(cfg.epsilon)) - 1e-6f);
      CHECK(adv[i] <= std::min(1.0f, x0 + static_cast<float>(cfg.epsilon)) + 1e-6f);
      moved = moved || adv[i] != x0;
    }
    CHECK(moved);
  }
}

TEST_CASE("pgd is deterministic given a seed") {
  Dataset d = entro::make_shape_dataset(1, 69);
  SplitModel m = fresh_model(PriorKind::kMeanScaleHyper, 70);
  entro::AttackConfig cfg;
  cfg.steps = 3;
  cfg.random_start = true;
  cfg.seed = 123;
  const auto a = entro::pgd_attack(m, d.image(0), d.labels[0], cfg);
  const auto b = entro::pgd_attack(m, d.image(0), d.labels[0], cfg);
  CHECK(a == b);
  cfg.seed = 124;
  const auto c = entro::pgd_attack(m, d.image(0), d.labels[0], cfg);
  CHECK(a != c);
}

TEST_CASE("low frequency filter reshapes the pgd gradient") {
  Dataset d = entro::make_shape_dataset(1, 71);
  SplitModel m = fresh_model(PriorKind::kMeanScaleHyper, 72);
  entro::AttackConfig plain;
  plain.steps = 3;

  // a cutoff above every index sum keeps all coefficients: same trajectory
  entro::AttackConfig wide = plain;
  wide.low_freq = true;
  wide.freq_cutoff = 2 * entro::kImageDim;
  CHECK(entro::pgd_attack(m, d.image(0), d.labels[0], wide) ==
        entro::pgd_attack(m, d.image(0), d.labels[0], plain));

  // a real cutoff changes it
  entro::AttackConfig narrow = plain;
  narrow.low_freq = true;
  narrow.freq_cutoff = 8;
  CHECK(entro::pgd_attack(m, d.image(0), d.labels[0], narrow) !=
        entro::pgd_attack(m, d.image(0), d.labels[0], plain));

  // cutoff 1 keeps only the DC coefficient, so the filtered gradient is
  // constant per channel and one clipped sign step moves each channel as a
  // block by exactly epsilon (interior pixels, so no [0,1] clamping)
  std::vector<float> interior(d.image(0), d.image(0) + entro::kImageFloats);
  for (float& v : interior) v = 0.3f + 0.4f * v;
  entro::AttackConfig dc = plain;
  dc.steps = 1;
  dc.low_freq = true;
  dc.freq_cutoff = 1;
  const auto adv = entro::pgd_attack(m, interior.data(), d.labels[0], dc);
  const int pix = entro::kImagePixels;
  for (int c = 0; c < 3; ++c) {
    const float d0 = adv[static_cast<size_t>(c) * pix] - interior[static_cast<size_t>(c) * pix];
    CHECK(std::abs(std::abs(d0) - static_cast<float>(dc.epsilon)) < 1e-6f);
    for (int i = 1; i < pix; ++i) {
      const float di =
          adv[static_cast<size_t>(c) * pix + i] - interior[static_cast<size_t>(c) * pix + i];
      CHECK(std::abs(di - d0) < 1e-6f);
    }
  }
}

TEST_CASE("hooks compose left to right") {
  float order[2] = {0, 0};
  int calls = 0;
  entro::ImageHook first = [&](float* img, int) {
    order[0] = static_cast<float>(++calls);
    img[0] = 0.25f;
  };
  entro::ImageHook second = [&](float* img, int) {
    order[1] = static_cast<float>(++calls);
    CHECK(img[0] == 0.25f);
  };
  auto chained = entro::chain_hooks(first, second);
  std::vector<float> img(entro::kImageFloats, 0.5f);
  chained(img.data(), 0);
  CHECK(order[0] == 1.0f);
  CHECK(order[1] == 2.0f);
  // chaining with empties keeps the other side
  auto only = entro::chain_hooks({}, first);
  CHECK(only != nullptr);
  auto none = entro::chain_hooks({}, {});
  CHECK(!none);
}

TEST_CASE("an untrained model predicts at chance on balanced labels") {
  Dataset d = entro::make_shape_dataset(500, 73);
  SplitModel m = fresh_model(PriorKind::kMeanScaleHyper, 74);
  entro::EvalOptions opt;
  opt.sample_limit = 500;
  const auto s = entro::evaluate_model(m, d, opt);
  CHECK(s.samples == 500);
  CHECK(s.acc_pct > 2.0);
  CHECK(s.acc_pct < 22.0);
  CHECK(s.size_kb_mean > 0.0);
  CHECK(s.size_kb_std >= 0.0);
}

TEST_CASE("latency follows bytes over bandwidth plus rtt") {
  Dataset d = entro::make_shape_dataset(1, 75);
  SplitModel m = fresh_model(PriorKind::kFactorized, 76);
  entro::EvalOptions opt;
  opt.sample_limit = 1;
  opt.bandwidth_mbps = 8.0;  // 1e6 bytes per second
  opt.rtt_ms = 10.0;
  const auto s = entro::evaluate_model(m, d, opt);
  const double bytes = s.size_kb_mean * 1000.0;
  CHECK(s.latency_s_mean == doctest::Approx(bytes * 8.0 / 8e6 + 0.01).epsilon(1e-9));
  // doubling bandwidth halves the transmission component
  opt.bandwidth_mbps = 16.0;
  const auto s2 = entro::evaluate_model(m, d, opt);
  CHECK(s2.latency_s_mean - 0.01 == doctest::Approx((s.latency_s_mean - 0.01) / 2).epsilon(1e-6));
}

TEST_CASE("grid runs, resumes, and reproduces byte-identical csvs") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "entro_grid_test";
  fs::remove_all(dir);
  fs::create_directories(dir);

  entro::generate_dataset_dir((dir / "data").string(), 81, 40, 24);
  SplitModel m = fresh_model(PriorKind::kMeanScaleHyper, 82);
  entro::save_checkpoint((dir / "m.entc").string(), m);

  nlohmann::json spec;
  spec["dataset_dir"] = (dir / "data").string();
  spec["sample_limit"] = 12;
  spec["seed"] = 5;
  spec["configs"] = nlohmann::json::array(
      {nlohmann::json{{"id", "rnd"}, {"checkpoint", (dir / "m.entc").string()}}});
  spec["perturbations"] = nlohmann::json::array(
      {nlohmann::json{{"name", "none"}},
       nlohmann::json{{"name", "gaussian_noise"}, {"severity", 2}}});
  spec["defenses"] = nlohmann::json::array({"none"});
  std::ofstream((dir / "spec.json").string()) << spec.dump(2);

  std::ostringstream log;
  const std::string csv1 = (dir / "a.csv").string();
  int ran = entro::run_grid((dir / "spec.json").string(), csv1, log);
  CHECK(ran == 2);

  // resume: nothing left to do
  ran = entro::run_grid((dir / "spec.json").string(), csv1, log);
  CHECK(ran == 0);

  // a fresh run is byte-identical
  const std::string csv2 = (dir / "b.csv").string();
  entro::run_grid((dir / "spec.json").string(), csv2, log);
  std::ifstream f1(csv1), f2(csv2);
  std::stringstream s1, s2;
  s1 << f1.rdbuf();
  s2 << f2.rdbuf();
  CHECK(s1.str() == s2.str());
  REQUIRE(!s1.str().empty());
  CHECK(s1.str().substr(0, std::string(entro::kGridCsvHeader).size()) == entro::kGridCsvHeader);

  // and the rows carry the exact field count
  std::string line;
  std::getline(s1, line);
  int rows = 0;
  while (std::getline(s1, line)) {
    CHECK(std::count(line.begin(), line.end(), ',') == 8);
    ++rows;
  }
  CHECK(rows == 2);
  fs::remove_all(dir);
}

TEST_CASE("grid records failures as rows and keeps going") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "entro_grid_fail";
  fs::remove_all(dir);
  fs::create_directories(dir);
  entro::generate_dataset_dir((dir / "data").string(), 83, 20, 12);
  SplitModel m = fresh_model(PriorKind::kFactorized, 84);
  entro::save_checkpoint((dir / "m.entc").string(), m);

  nlohmann::json spec;
  spec["dataset_dir"] = (dir / "data").string();
  spec["sample_limit"] = 6;
  spec["configs"] = nlohmann::json::array(
      {nlohmann::json{{"id", "ok"}, {"checkpoint", (dir / "m.entc").string()}}});
  spec["perturbations"] = nlohmann::json::array({nlohmann::json{{"name", "none"}}});
  spec["defenses"] = nlohmann::json::array({"bogus_defense", "none"});
  std::ofstream((dir / "spec.json").string()) << spec.dump(2);

  std::ostringstream log;
  const std::string csv = (dir / "out.csv").string();
  const int ran = entro::run_grid((dir / "spec.json").string(), csv, log);
  CHECK(ran == 2);  // the broken cell still produced a row

  std::ifstream in(csv);
  std::string line;
  std::getline(in, line);  // header
  int error_rows = 0, clean_rows = 0;
  while (std::getline(in, line)) {
    if (line.find(", , , , , , ") != std::string::npos) {
      ++error_rows;
      CHECK(line.find("bogus_defense") != std::string::npos);
      CHECK(line.find(',') != std::string::npos);
      CHECK(line.substr(line.rfind(", ") + 2).find(',') == std::string::npos);
    } else {
      ++clean_rows;
    }
  }
  CHECK(error_rows == 1);
  CHECK(clean_rows == 1);

  // an out-of-range severity is a spec mistake, failed loudly up front
  spec["perturbations"] =
      nlohmann::json::array({nlohmann::json{{"name", "gaussian_noise"}, {"severity", 9}}});
  std::ofstream((dir / "spec2.json").string()) << spec.dump(2);
  CHECK_THROWS_AS(entro::run_grid((dir / "spec2.json").string(), csv, log), entro::ValueError);
  fs::remove_all(dir);
}

TEST_CASE("bitrate map has latent resolution and strictly positive mass") {
  Dataset d = entro::make_shape_dataset(1, 85);
  SplitModel m = fresh_model(PriorKind::kMeanScaleHyper, 86);
  int h = 0, w = 0;
  const auto map = entro::bitrate_map(m, d.image(0), &h, &w);
  CHECK(h == 8);
  CHECK(w == 8);
  REQUIRE(map.size() == 64u);
  double total = 0.0;
  for (float v : map) {
    CHECK(v >= 0.0f);
    total += v;
  }
  CHECK(total > 0.0);
}

TEST_CASE("map files are valid binary netpbm") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "entro_map_test";
  fs::create_directories(dir);
  std::vector<float> vals(64);
  for (int i = 0; i < 64; ++i) vals[static_cast<size_t>(i)] = static_cast<float>(i);
  entro::write_pgm((dir / "m.pgm").string(), vals.data(), 8, 8);
  std::ifstream in((dir / "m.pgm").string(), std::ios::binary);
  std::string magic;
  int w = 0, h = 0, maxv = 0;
  in >> magic >> w >> h >> maxv;
  CHECK(magic == "P5");
  CHECK(w == 8);
  CHECK(h == 8);
  CHECK(maxv == 255);
  in.get();
  std::vector<uint8_t> pix(64);
  in.read(reinterpret_cast<char*>(pix.data()), 64);
  CHECK(in.gcount() == 64);
  CHECK(pix[0] == 0);    // min-max normalized
  CHECK(pix[63] == 255);

  // identical inputs render an all-white comparison
  entro::write_comparison_ppm((dir / "c.ppm").string(), vals, vals, 8, 8);
  std::ifstream cin((dir / "c.ppm").string(), std::ios::binary);
  cin >> magic >> w >> h >> maxv;
  CHECK(magic == "P6");
  cin.get();
  std::vector<uint8_t> rgb(192);
  cin.read(reinterpret_cast<char*>(rgb.data()), 192);
  CHECK(cin.gcount() == 192);
  for (uint8_t v : rgb) CHECK(v == 255);
  fs::remove_all(dir);
}

TEST_CASE("pearson oracle") {
  CHECK(entro::pearson({1, 2, 3}, {2, 4, 6}) == doctest::Approx(1.0));
  CHECK(entro::pearson({1, 2, 3}, {-1, -2, -3}) == doctest::Approx(-1.0));
  CHECK(entro::pearson({1, 2, 3, 4}, {1, -1, 1, -1}) == doctest::Approx(-0.4472136).epsilon(1e-5));
  CHECK_THROWS_AS(entro::pearson({1, 1, 1}, {1, 2, 3}), entro::ValueError);
  CHECK_THROWS_AS(entro::pearson({1, 2}, {1, 2, 3}), entro::ValueError);
}
