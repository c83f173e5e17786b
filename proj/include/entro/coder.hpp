#pragma once

// Range coder and the latent bitstream format. The coder is a carry-less
// 64-bit-state byte renormalizer over 16-bit cumulative frequency tables.
// Streams are self-delimiting given the symbol count, and the decoder
// detects truncation deterministically.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "entro/common.hpp"
#include "entro/tensor.hpp"

namespace entro {

constexpr uint32_t kCdfBits = 16;
constexpr uint32_t kCdfTotal = 1u << kCdfBits;

// Codable value support for quantized latents.
constexpr int kCodeMin = -127;
constexpr int kCodeMax = 127;
constexpr int kCodeSymbols = kCodeMax - kCodeMin + 1;

struct CdfTable {
  std::vector<uint32_t> cdf;  // size n+1, cdf[0] = 0, cdf[n] = kCdfTotal, strictly increasing
  int size() const { return static_cast<int>(cdf.size()) - 1; }
};

// Scales a pmf to integer frequencies summing to kCdfTotal with every symbol
// kept codable (frequency >= 1). Largest-remainder apportionment; excess mass
// is taken from the currently largest frequency.
CdfTable table_from_pmf(const std::vector<double>& pmf);

class RangeEncoder {
 public:
  void encode(const CdfTable& table, int sym);
  // Emits the final 4 bytes and hands the stream over. One-shot.
  std::vector<uint8_t> finish();
  size_t pending_bytes() const { return bytes_.size(); }

 private:
  uint64_t low_ = 0;
  uint64_t range_ = ~0ull;
  std::vector<uint8_t> bytes_;
  bool finished_ = false;
};

class RangeDecoder {
 public:
  RangeDecoder(const uint8_t* data, size_t len);
  int decode(const CdfTable& table);

 private:
  uint8_t next_byte();

  const uint8_t* data_;
  size_t len_;
  size_t pos_ = 0;
  int virtual_reads_ = 0;
  uint64_t low_ = 0;
  uint64_t range_ = ~0ull;
  uint64_t code_ = 0;
};

// ---------------------------------------------------------------------------
// Latent streams

struct QuantizedLatent {
  Shape shape;
  std::vector<int16_t> values;
};

// round half away from zero, clamp to the codable support; throws
// NumericError on non-finite input
QuantizedLatent quantize_values(const Shape& shape, const float* vals);

// pmf over the codable support for a logistic with the given location/scale
std::vector<double> logistic_pmf(double mu, double scale);
// zero-mean gaussian pmf over the codable support
std::vector<double> gaussian_pmf(double sigma);

std::vector<CdfTable> logistic_channel_tables(const std::vector<float>& mu,
                                              const std::vector<float>& scale);

// Gaussian scales are quantized to log-spaced bins so encoder and decoder
// agree on tables built from float sigma fields.
constexpr int kSigmaBins = 64;
constexpr double kSigmaLo = 1e-3;
constexpr double kSigmaHi = 64.0;

int sigma_bin_index(double sigma);
double sigma_bin_value(int bin);
const CdfTable& gaussian_bin_table(int bin);

// Per-channel coding: element i of an [N,C,H,W] latent uses tables[channel(i)].
std::vector<uint8_t> encode_channels(const QuantizedLatent& q, const std::vector<CdfTable>& tables);
QuantizedLatent decode_channels(const uint8_t* data, size_t len, const Shape& shape,
                                const std::vector<CdfTable>& tables);

// Per-element sigma-binned coding for hyperprior residuals.
std::vector<uint8_t> encode_gaussian(const QuantizedLatent& q, const std::vector<float>& sigma);
QuantizedLatent decode_gaussian(const uint8_t* data, size_t len, const Shape& shape,
                                const std::vector<float>& sigma);

// ---------------------------------------------------------------------------
// Container

struct Bitstream {
  uint8_t prior = 0;  // 0 factorized, 1 mean-scale hyperprior
  Shape z_shape;      // [N,C,H,W]
  Shape h_shape;      // [N,C,H,W], all zeros when prior == 0
  std::vector<uint8_t> h_payload;
  std::vector<uint8_t> z_payload;

  size_t total_bytes() const;
};

std::vector<uint8_t> serialize(const Bitstream& bs);
Bitstream parse_bitstream(const uint8_t* data, size_t len);

Bitstream encode_factorized(const QuantizedLatent& z, const std::vector<CdfTable>& z_tables);
QuantizedLatent decode_factorized(const Bitstream& bs, const std::vector<CdfTable>& z_tables);

// h is coded first under its own channel tables; the z residual follows under
// sigma-binned zero-mean tables derived from the decoded h.
Bitstream encode_hyper(const QuantizedLatent& h, const std::vector<CdfTable>& h_tables,
                       const QuantizedLatent& residual, const std::vector<float>& sigma);

struct HyperDecoded {
  QuantizedLatent h;
  QuantizedLatent residual;
};

HyperDecoded decode_hyper(
    const Bitstream& bs, const std::vector<CdfTable>& h_tables,
    const std::function<std::vector<float>(const QuantizedLatent&)>& sigma_from_h);

}  // namespace entro
