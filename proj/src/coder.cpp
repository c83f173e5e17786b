#include "entro/coder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "entro/wire.hpp"

namespace entro {

namespace {

constexpr uint64_t kTop = 1ull << 56;
constexpr uint64_t kBot = 1ull << 32;

// CDF boxes around integer support points, mirrored so the small tail is
// always computed from the negative side. Same math the model uses.
double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double logistic_box(double zm, double s) {
  if (zm > 0.0) return sigmoid((0.5 - zm) / s) - sigmoid((-0.5 - zm) / s);
  return sigmoid((zm + 0.5) / s) - sigmoid((zm - 0.5) / s);
}

double normal_cdf(double v) { return 0.5 * std::erfc(-v * 0.7071067811865475244); }

double gaussian_box(double zm, double sigma) {
  const double hi = (zm + 0.5) / sigma, lo = (zm - 0.5) / sigma;
  if (zm > 0.0) return normal_cdf(-lo) - normal_cdf(-hi);
  return normal_cdf(hi) - normal_cdf(lo);
}

int channel_count(const Shape& shape) {
  if (shape.size() != 4) throw ShapeError("latent shape must have rank 4, got " + shape_str(shape));
  for (int d : shape)
    if (d < 1) throw ShapeError("latent shape has empty extent: " + shape_str(shape));
  return shape[1];
}

void put_shape4(std::vector<uint8_t>& out, const Shape& shape) {
  for (int d : shape) {
    if (d < 0 || d > 0xFFFF) throw ValueError("shape extent " + std::to_string(d) + " not serializable");
    wire::put_u16(out, static_cast<uint16_t>(d));
  }
}

}  // namespace

CdfTable table_from_pmf(const std::vector<double>& pmf) {
  const int n = static_cast<int>(pmf.size());
  if (n < 1) throw ValueError("table_from_pmf: empty pmf");
  if (static_cast<uint32_t>(n) > kCdfTotal)
    throw ValueError("table_from_pmf: alphabet larger than code space");
  double total = 0.0;
  for (double p : pmf) {
    if (!(p >= 0.0)) throw ValueError("table_from_pmf: negative or non-finite mass");
    total += p;
  }
  if (!(total > 0.0)) throw ValueError("table_from_pmf: zero total mass");

  std::vector<uint32_t> freq(static_cast<size_t>(n));
  std::vector<double> remainder(static_cast<size_t>(n));
  int64_t assigned = 0;
  for (int i = 0; i < n; ++i) {
    const double ideal = pmf[static_cast<size_t>(i)] / total * kCdfTotal;
    const double fl = std::floor(ideal);
    freq[static_cast<size_t>(i)] = static_cast<uint32_t>(std::max(1.0, fl));
    remainder[static_cast<size_t>(i)] = ideal - fl;
    assigned += freq[static_cast<size_t>(i)];
  }
  int64_t deficit = static_cast<int64_t>(kCdfTotal) - assigned;
  if (deficit > 0) {
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      if (remainder[static_cast<size_t>(a)] != remainder[static_cast<size_t>(b)])
        return remainder[static_cast<size_t>(a)] > remainder[static_cast<size_t>(b)];
      return a < b;
    });
    for (int64_t i = 0; i < deficit; ++i) ++freq[static_cast<size_t>(order[i % n])];
  }
  while (deficit < 0) {
    auto it = std::max_element(freq.begin(), freq.end());
    if (*it <= 1) throw ValueError("table_from_pmf: cannot renormalize");
    --*it;
    ++deficit;
  }

  CdfTable t;
  t.cdf.resize(static_cast<size_t>(n) + 1);
  t.cdf[0] = 0;
  for (int i = 0; i < n; ++i) t.cdf[static_cast<size_t>(i) + 1] = t.cdf[static_cast<size_t>(i)] + freq[static_cast<size_t>(i)];
  return t;
}

void RangeEncoder::encode(const CdfTable& table, int sym) {
  if (finished_) throw ValueError("RangeEncoder: encode after finish");
  if (sym < 0 || sym >= table.size())
    throw ValueError("RangeEncoder: symbol " + std::to_string(sym) + " outside table of size " +
                     std::to_string(table.size()));
  const uint32_t lo = table.cdf[static_cast<size_t>(sym)];
  const uint32_t hi = table.cdf[static_cast<size_t>(sym) + 1];
  low_ += lo * (range_ /= kCdfTotal);
  range_ *= hi - lo;
  while ((low_ ^ (low_ + range_)) < kTop ||
         (range_ < kBot && ((range_ = (0 - low_) & (kBot - 1)), true))) {
    bytes_.push_back(static_cast<uint8_t>(low_ >> 56));
    low_ <<= 8;
    range_ <<= 8;
  }
}

std::vector<uint8_t> RangeEncoder::finish() {
  if (finished_) throw ValueError("RangeEncoder: finish called twice");
  finished_ = true;
  // Smallest multiple of 2^32 in [low, low+range). range >= 2^32 holds
  // between symbols, so one exists and its low half is all zero: only the
  // top 4 bytes need to be written, the decoder supplies the rest.
  const uint64_t v = (low_ + (kBot - 1)) & ~(kBot - 1);
  for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<uint8_t>(v >> (56 - 8 * i)));
  return std::move(bytes_);
}

RangeDecoder::RangeDecoder(const uint8_t* data, size_t len) : data_(data), len_(len) {
  for (int i = 0; i < 8; ++i) code_ = code_ << 8 | next_byte();
}

uint8_t RangeDecoder::next_byte() {
  if (pos_ < len_) return data_[pos_++];
  // The encoder leaves exactly four implicit zero bytes; needing a fifth
  // means the stream lost bytes.
  if (++virtual_reads_ > 4) throw DecodeError("truncated stream");
  return 0;
}

int RangeDecoder::decode(const CdfTable& table) {
  range_ /= kCdfTotal;
  const uint64_t off = (code_ - low_) / range_;
  if (off >= kCdfTotal) throw DecodeError("corrupt stream: value outside code space");
  const auto it = std::upper_bound(table.cdf.begin(), table.cdf.end(), static_cast<uint32_t>(off));
  const int sym = static_cast<int>(it - table.cdf.begin()) - 1;
  const uint32_t lo = table.cdf[static_cast<size_t>(sym)];
  const uint32_t hi = table.cdf[static_cast<size_t>(sym) + 1];
  low_ += lo * range_;
  range_ *= hi - lo;
  while ((low_ ^ (low_ + range_)) < kTop ||
         (range_ < kBot && ((range_ = (0 - low_) & (kBot - 1)), true))) {
    code_ = code_ << 8 | next_byte();
    low_ <<= 8;
    range_ <<= 8;
  }
  return sym;
}

// ---------------------------------------------------------------------------

QuantizedLatent quantize_values(const Shape& shape, const float* vals) {
  QuantizedLatent q;
  q.shape = shape;
  const int64_t n = numel(shape);
  q.values.resize(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const float v = vals[i];
    if (!std::isfinite(v)) throw NumericError("quantize_values: non-finite latent");
    const double r = std::round(static_cast<double>(v));
    q.values[static_cast<size_t>(i)] =
        static_cast<int16_t>(std::clamp(r, static_cast<double>(kCodeMin), static_cast<double>(kCodeMax)));
  }
  return q;
}

std::vector<double> logistic_pmf(double mu, double scale) {
  if (!(scale > 0.0)) throw ValueError("logistic_pmf: non-positive scale");
  std::vector<double> pmf(static_cast<size_t>(kCodeSymbols));
  for (int v = kCodeMin; v <= kCodeMax; ++v)
    pmf[static_cast<size_t>(v - kCodeMin)] = logistic_box(static_cast<double>(v) - mu, scale);
  return pmf;
}

std::vector<double> gaussian_pmf(double sigma) {
  if (!(sigma > 0.0)) throw ValueError("gaussian_pmf: non-positive scale");
  std::vector<double> pmf(static_cast<size_t>(kCodeSymbols));
  for (int v = kCodeMin; v <= kCodeMax; ++v)
    pmf[static_cast<size_t>(v - kCodeMin)] = gaussian_box(static_cast<double>(v), sigma);
  return pmf;
}

std::vector<CdfTable> logistic_channel_tables(const std::vector<float>& mu,
                                              const std::vector<float>& scale) {
  if (mu.size() != scale.size())
    throw ShapeError("logistic_channel_tables: mu and scale length mismatch");
  std::vector<CdfTable> tables;
  tables.reserve(mu.size());
  for (size_t c = 0; c < mu.size(); ++c)
    tables.push_back(table_from_pmf(logistic_pmf(static_cast<double>(mu[c]), static_cast<double>(scale[c]))));
  return tables;
}

int sigma_bin_index(double sigma) {
  if (!(sigma > 0.0)) throw ValueError("sigma_bin_index: non-positive scale");
  const double lo = std::log(kSigmaLo), hi = std::log(kSigmaHi);
  const double t = (std::log(sigma) - lo) / (hi - lo) * (kSigmaBins - 1);
  return std::clamp(static_cast<int>(std::lround(t)), 0, kSigmaBins - 1);
}

double sigma_bin_value(int bin) {
  if (bin < 0 || bin >= kSigmaBins) throw ValueError("sigma_bin_value: bin out of range");
  const double lo = std::log(kSigmaLo), hi = std::log(kSigmaHi);
  return std::exp(lo + (hi - lo) * bin / (kSigmaBins - 1));
}

const CdfTable& gaussian_bin_table(int bin) {
  // Built on first use; the process is single-threaded by design.
  static std::vector<CdfTable> cache(kSigmaBins);
  if (bin < 0 || bin >= kSigmaBins) throw ValueError("gaussian_bin_table: bin out of range");
  if (cache[static_cast<size_t>(bin)].cdf.empty())
    cache[static_cast<size_t>(bin)] = table_from_pmf(gaussian_pmf(sigma_bin_value(bin)));
  return cache[static_cast<size_t>(bin)];
}

std::vector<uint8_t> encode_channels(const QuantizedLatent& q, const std::vector<CdfTable>& tables) {
  const int c = channel_count(q.shape);
  if (static_cast<int>(tables.size()) != c)
    throw ShapeError("encode_channels: " + std::to_string(tables.size()) + " tables for " +
                     std::to_string(c) + " channels");
  if (static_cast<int64_t>(q.values.size()) != numel(q.shape))
    throw ShapeError("encode_channels: value count does not match shape");
  const int64_t hw = static_cast<int64_t>(q.shape[2]) * q.shape[3];
  RangeEncoder enc;
  for (size_t i = 0; i < q.values.size(); ++i) {
    const int v = q.values[i];
    if (v < kCodeMin || v > kCodeMax) throw ValueError("encode_channels: value outside support");
    const int ch = static_cast<int>(static_cast<int64_t>(i) / hw % c);
    enc.encode(tables[static_cast<size_t>(ch)], v - kCodeMin);
  }
  return enc.finish();
}

QuantizedLatent decode_channels(const uint8_t* data, size_t len, const Shape& shape,
                                const std::vector<CdfTable>& tables) {
  const int c = channel_count(shape);
  if (static_cast<int>(tables.size()) != c)
    throw ShapeError("decode_channels: " + std::to_string(tables.size()) + " tables for " +
                     std::to_string(c) + " channels");
  const int64_t n = numel(shape);
  const int64_t hw = static_cast<int64_t>(shape[2]) * shape[3];
  QuantizedLatent q;
  q.shape = shape;
  q.values.resize(static_cast<size_t>(n));
  RangeDecoder dec(data, len);
  for (int64_t i = 0; i < n; ++i) {
    const int ch = static_cast<int>(i / hw % c);
    q.values[static_cast<size_t>(i)] =
        static_cast<int16_t>(dec.decode(tables[static_cast<size_t>(ch)]) + kCodeMin);
  }
  return q;
}

std::vector<uint8_t> encode_gaussian(const QuantizedLatent& q, const std::vector<float>& sigma) {
  if (q.values.size() != sigma.size())
    throw ShapeError("encode_gaussian: sigma count does not match values");
  RangeEncoder enc;
  for (size_t i = 0; i < q.values.size(); ++i) {
    const int v = q.values[i];
    if (v < kCodeMin || v > kCodeMax) throw ValueError("encode_gaussian: value outside support");
    enc.encode(gaussian_bin_table(sigma_bin_index(static_cast<double>(sigma[i]))), v - kCodeMin);
  }
  return enc.finish();
}

QuantizedLatent decode_gaussian(const uint8_t* data, size_t len, const Shape& shape,
                                const std::vector<float>& sigma) {
  const int64_t n = numel(shape);
  if (static_cast<int64_t>(sigma.size()) != n)
    throw ShapeError("decode_gaussian: sigma count does not match shape");
  QuantizedLatent q;
  q.shape = shape;
  q.values.resize(static_cast<size_t>(n));
  RangeDecoder dec(data, len);
  for (int64_t i = 0; i < n; ++i)
    q.values[static_cast<size_t>(i)] = static_cast<int16_t>(
        dec.decode(gaussian_bin_table(sigma_bin_index(static_cast<double>(sigma[static_cast<size_t>(i)])))) +
        kCodeMin);
  return q;
}

// ---------------------------------------------------------------------------

size_t Bitstream::total_bytes() const {
  // header: magic + version + prior + two shapes + one length per payload
  size_t n = 4 + 1 + 1 + 8 + 8 + 4 + z_payload.size();
  if (prior == 1) n += 4 + h_payload.size();
  return n;
}

std::vector<uint8_t> serialize(const Bitstream& bs) {
  if (bs.prior > 1) throw ValueError("serialize: unknown prior id");
  if (bs.z_shape.size() != 4) throw ShapeError("serialize: z shape must have rank 4");
  std::vector<uint8_t> out;
  out.reserve(bs.total_bytes());
  for (char c : {'E', 'N', 'T', 'S'}) out.push_back(static_cast<uint8_t>(c));
  wire::put_u8(out, 1);
  wire::put_u8(out, bs.prior);
  put_shape4(out, bs.z_shape);
  if (bs.prior == 1) {
    if (bs.h_shape.size() != 4) throw ShapeError("serialize: h shape must have rank 4");
    put_shape4(out, bs.h_shape);
  } else {
    for (int i = 0; i < 4; ++i) wire::put_u16(out, 0);
  }
  if (bs.prior == 1) {
    wire::put_u32(out, static_cast<uint32_t>(bs.h_payload.size()));
    wire::put_u32(out, static_cast<uint32_t>(bs.z_payload.size()));
    out.insert(out.end(), bs.h_payload.begin(), bs.h_payload.end());
  } else {
    wire::put_u32(out, static_cast<uint32_t>(bs.z_payload.size()));
  }
  out.insert(out.end(), bs.z_payload.begin(), bs.z_payload.end());
  return out;
}

Bitstream parse_bitstream(const uint8_t* data, size_t len) {
  wire::Reader r(data, len);
  const uint8_t* magic = r.bytes(4);
  if (std::memcmp(magic, "ENTS", 4) != 0) throw FormatError("bad magic, not a latent bitstream");
  const uint8_t version = r.u8();
  if (version != 1) throw FormatError("unsupported bitstream version " + std::to_string(version));
  Bitstream bs;
  bs.prior = r.u8();
  if (bs.prior > 1) throw FormatError("unknown prior id " + std::to_string(bs.prior));
  bs.z_shape.resize(4);
  for (int i = 0; i < 4; ++i) bs.z_shape[static_cast<size_t>(i)] = r.u16();
  Shape hs(4);
  for (int i = 0; i < 4; ++i) hs[static_cast<size_t>(i)] = r.u16();
  for (int d : bs.z_shape)
    if (d < 1) throw FormatError("empty z shape in header");
  if (bs.prior == 1) {
    for (int d : hs)
      if (d < 1) throw FormatError("empty h shape in header");
    bs.h_shape = hs;
    const uint32_t hlen = r.u32();
    const uint32_t zlen = r.u32();
    if (r.remaining() != static_cast<size_t>(hlen) + zlen)
      throw FormatError("payload length fields disagree with data size");
    const uint8_t* hp = r.bytes(hlen);
    bs.h_payload.assign(hp, hp + hlen);
    const uint8_t* zp = r.bytes(zlen);
    bs.z_payload.assign(zp, zp + zlen);
  } else {
    for (int d : hs)
      if (d != 0) throw FormatError("factorized stream carries a side latent shape");
    const uint32_t zlen = r.u32();
    if (r.remaining() != zlen) throw FormatError("payload length fields disagree with data size");
    const uint8_t* zp = r.bytes(zlen);
    bs.z_payload.assign(zp, zp + zlen);
  }
  return bs;
}

Bitstream encode_factorized(const QuantizedLatent& z, const std::vector<CdfTable>& z_tables) {
  Bitstream bs;
  bs.prior = 0;
  bs.z_shape = z.shape;
  bs.z_payload = encode_channels(z, z_tables);
  return bs;
}

QuantizedLatent decode_factorized(const Bitstream& bs, const std::vector<CdfTable>& z_tables) {
  if (bs.prior != 0) throw FormatError("decode_factorized: stream was coded with a hyperprior");
  return decode_channels(bs.z_payload.data(), bs.z_payload.size(), bs.z_shape, z_tables);
}

Bitstream encode_hyper(const QuantizedLatent& h, const std::vector<CdfTable>& h_tables,
                       const QuantizedLatent& residual, const std::vector<float>& sigma) {
  Bitstream bs;
  bs.prior = 1;
  bs.z_shape = residual.shape;
  bs.h_shape = h.shape;
  bs.h_payload = encode_channels(h, h_tables);
  bs.z_payload = encode_gaussian(residual, sigma);
  return bs;
}

HyperDecoded decode_hyper(
    const Bitstream& bs, const std::vector<CdfTable>& h_tables,
    const std::function<std::vector<float>(const QuantizedLatent&)>& sigma_from_h) {
  if (bs.prior != 1) throw FormatError("decode_hyper: stream was coded with the factorized prior");
  HyperDecoded out;
  out.h = decode_channels(bs.h_payload.data(), bs.h_payload.size(), bs.h_shape, h_tables);
  const std::vector<float> sigma = sigma_from_h(out.h);
  out.residual = decode_gaussian(bs.z_payload.data(), bs.z_payload.size(), bs.z_shape, sigma);
  return out;
}

}  // namespace entro
