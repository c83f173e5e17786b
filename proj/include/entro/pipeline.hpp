#pragma once

// End-to-end split inference over real bitstreams, dataset evaluation with
// pluggable perturbation/defense hooks, the sweep runner with resumable CSV
// output, and map rendering for visual inspection.

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"

#include "entro/coder.hpp"
#include "entro/data.hpp"
#include "entro/defense.hpp"
#include "entro/model.hpp"
#include "entro/perturb.hpp"

namespace entro {

struct CoderTables {
  std::vector<CdfTable> z;  // factorized prior over the main latent
  std::vector<CdfTable> h;  // factorized prior over the side latent (hyperprior only)
};

CoderTables build_coder_tables(const SplitModel& model);

struct InferenceResult {
  int predicted = -1;
  size_t coded_bytes = 0;          // full serialized container
  double est_bits = 0.0;           // model's own estimate, all streams
  std::vector<uint8_t> bitstream;  // the container itself
};

// Head -> quantize -> range-encode -> serialize -> parse -> decode -> tail.
// The decoded symbols are checked against the encoded ones; any mismatch
// throws DecodeError since it would mean encoder and decoder disagree.
InferenceResult run_split_inference(const SplitModel& model, const CoderTables& tables,
                                    const float* img);

// Mutates one [3,32,32] image in place; the index seeds per-sample randomness.
using ImageHook = std::function<void(float* img, int index)>;

ImageHook chain_hooks(ImageHook first, ImageHook second);
ImageHook make_corruption_hook(CorruptionKind kind, int severity, uint64_t seed);
ImageHook make_random_sign_hook(double eps, uint64_t seed);
// data supplies the true labels the accuracy objective needs
ImageHook make_attack_hook(const SplitModel& model, const Dataset& data, const AttackConfig& cfg);
ImageHook make_defense_hook(const std::string& name, const SplitModel& model,
                            const DenoiseConfig& cfg);

struct EvalOptions {
  int sample_limit = 1000;
  uint64_t seed = 0;
  double bandwidth_mbps = 10.0;
  double rtt_ms = 20.0;
};

struct EvalSummary {
  double acc_pct = 0.0;
  double size_kb_mean = 0.0;
  double size_kb_std = 0.0;
  double est_bits_mean = 0.0;
  double latency_s_mean = 0.0;
  int samples = 0;
};

EvalSummary evaluate_model(const SplitModel& model, const Dataset& test, const EvalOptions& opt,
                           const ImageHook& hook = {});

// Sweep over configs x perturbations x defenses from a JSON spec, appending
// one CSV row per cell. Existing rows are kept and their cells skipped, so
// an interrupted sweep resumes where it stopped. Returns the number of cells
// actually run.
int run_grid(const std::string& config_path, const std::string& csv_path, std::ostream& log);

extern const char* const kGridCsvHeader;

// One CSV row in the grid format, empty error column.
std::string grid_csv_row(const std::string& config_id, const std::string& perturbation,
                         const std::string& defense, const EvalSummary& s);

// Estimated bits per latent grid cell (channel sum, main stream only).
// Returned row-major at the latent resolution.
std::vector<float> bitrate_map(const SplitModel& model, const float* img, int* out_h, int* out_w);

void write_pgm(const std::string& path, const float* vals, int h, int w);  // min-max normalized
void write_ppm(const std::string& path, const float* img, int h, int w);  // [3,h,w] in [0,1]

// Signed difference a - b rendered red (positive) / blue (negative) / white
// (zero), scaled by the largest absolute difference.
void write_comparison_ppm(const std::string& path, const std::vector<float>& a,
                          const std::vector<float>& b, int h, int w);

double pearson(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace entro
