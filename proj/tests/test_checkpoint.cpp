// Checkpoint container: exact round-trips and strict header validation.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "entro/checkpoint.hpp"

using entro::ModelConfig;
using entro::PriorKind;
using entro::Rng;
using entro::SplitModel;

namespace {

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

std::vector<uint8_t> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::vector<uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void spit(const std::string& path, const std::vector<uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("checkpoint round-trips weights, config, and meta bit-exactly") {
  for (PriorKind prior : {PriorKind::kFactorized, PriorKind::kMeanScaleHyper}) {
    ModelConfig cfg;
    cfg.prior = prior;
    cfg.beta = 0.32f;
    SplitModel m{cfg};
    Rng rng(31);
    m.init(rng);
    const std::string path = temp_path("entro_ckpt_test.entc");
    nlohmann::json meta;
    meta["note"] = "roundtrip";
    meta["epoch"] = 12;
    entro::save_checkpoint(path, m, meta);

    nlohmann::json meta_back;
    SplitModel back = entro::load_checkpoint(path, &meta_back);
    CHECK(meta_back["meta"]["note"] == "roundtrip");
    CHECK(meta_back["meta"]["epoch"] == 12);
    CHECK(meta_back["config"]["beta"] == 0.32f);
    CHECK(back.config().prior == prior);
    CHECK(back.config().beta == cfg.beta);

    auto pa = m.named_parameters();
    auto pb = back.named_parameters();
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); ++i) {
      CHECK(pa[i].first == pb[i].first);
      REQUIRE(pa[i].second->shape() == pb[i].second->shape());
      CHECK(pa[i].second->values() == pb[i].second->values());  // bitwise via f32 storage
    }
    std::filesystem::remove(path);
  }
}

TEST_CASE("saving twice produces identical bytes") {
  SplitModel m{ModelConfig{}};
  Rng rng(32);
  m.init(rng);
  const std::string p1 = temp_path("entro_ckpt_a.entc");
  const std::string p2 = temp_path("entro_ckpt_b.entc");
  entro::save_checkpoint(p1, m);
  entro::save_checkpoint(p2, m);
  CHECK(slurp(p1) == slurp(p2));
  std::filesystem::remove(p1);
  std::filesystem::remove(p2);
}

TEST_CASE("checkpoint validation rejects damage") {
  SplitModel m{ModelConfig{}};
  Rng rng(33);
  m.init(rng);
  const std::string path = temp_path("entro_ckpt_bad.entc");
  entro::save_checkpoint(path, m);
  const auto clean = slurp(path);

  SUBCASE("missing file") {
    CHECK_THROWS_AS(entro::load_checkpoint(temp_path("entro_no_such.entc")), entro::FormatError);
  }
  SUBCASE("bad magic") {
    auto bad = clean;
    bad[0] = 'x';
    spit(path, bad);
    CHECK_THROWS_AS(entro::load_checkpoint(path), entro::FormatError);
  }
  SUBCASE("bad version") {
    auto bad = clean;
    bad[4] = 42;
    spit(path, bad);
    CHECK_THROWS_AS(entro::load_checkpoint(path), entro::FormatError);
  }
  SUBCASE("truncated tensor data") {
    auto bad = clean;
    bad.resize(bad.size() - 17);
    spit(path, bad);
    CHECK_THROWS_AS(entro::load_checkpoint(path), entro::FormatError);
  }
  SUBCASE("trailing garbage") {
    auto bad = clean;
    bad.push_back(0);
    spit(path, bad);
    CHECK_THROWS_AS(entro::load_checkpoint(path), entro::FormatError);
  }
  std::filesystem::remove(path);
}
