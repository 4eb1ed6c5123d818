#pragma once

#include <map>
#include <string>
#include <vector>

#include "railnet/model.hpp"
#include "railnet/quant.hpp"
#include "railnet/tensor.hpp"

namespace railnet {

// On-chip buffer budget the tiled executor models by default: 230.5 BRAM
// blocks of 36 Kbit each, in bytes (230.5 * 36864 / 8).
inline constexpr long long kDefaultBudgetBytes = 1'062'144;

// Per-layer tile sizes along output channels, input channels, output rows
// and output columns. Edge tiles clamp, so sizes need not divide the dims.
struct TileConfig {
  int t_oc = 1;
  int t_ic = 1;
  int t_oh = 1;
  int t_ow = 1;

  friend bool operator==(const TileConfig&, const TileConfig&) = default;
};

struct PerfCounters {
  long long macs = 0;
  long long bytes_loaded = 0;
  long long bytes_stored = 0;
  long long tiles_executed = 0;

  PerfCounters& operator+=(const PerfCounters& o) {
    macs += o.macs;
    bytes_loaded += o.bytes_loaded;
    bytes_stored += o.bytes_stored;
    tiles_executed += o.tiles_executed;
    return *this;
  }
};

// Storage width of one element, rounded up to a power-of-two byte count the
// way a hardware buffer would be laid out (12 bit -> 2 bytes, 22 -> 4).
int bytes_per_element(int total_bits);

// Buffer footprint of one tile of a convolution:
//   weights  kh*kw*t_ic*t_oc * weight_bytes
//   input    (t_oh*stride+kh-1)*(t_ow*stride+kw-1)*t_ic * act_bytes
//   output   t_oh*t_ow*t_oc * 4   (partial sums held wide)
//   bias     t_oc * 4
long long footprint_bytes(int kh, int kw, int stride, const TileConfig& cfg,
                          int weight_bytes, int act_bytes);

// Tiling plan for a model: one config per conv/dense layer plus the budget
// it was sized against.
struct TilePlan {
  long long budget_bytes = kDefaultBudgetBytes;
  std::map<int, TileConfig> layers;  // by layer id
};

struct TilingViolation {
  int id = 0;
  long long footprint = 0;
  long long budget = 0;
};

// Check every conv/dense layer's tile footprint against the plan's budget
// (inclusive: footprint == budget passes). The quant plan supplies element
// widths. Throws DataError when a layer has no tile config.
std::vector<TilingViolation> validate_tiling(const ModelGraph& model,
                                             const QuantPlan& qplan,
                                             const TilePlan& tplan);

// Pick, per layer, the config maximizing t_oc*t_oh*t_ow under the budget;
// ties go to larger t_ic, then to the lexicographically greatest
// (t_oc, t_oh, t_ow). Deterministic. Throws DataError when even a
// (1,1,1,1) tile exceeds the budget somewhere.
TilePlan search_tilings(const ModelGraph& model, const QuantPlan& qplan,
                        long long budget_bytes);

// Total multiply-accumulates of one forward pass: conv layers contribute
// n*oh*ow*oc*ic*kh*kw, dense layers in*out; pooling/activation excluded.
long long mac_count(const ModelGraph& model);

struct TiledResult {
  FxForwardResult fx;
  PerfCounters counters;
};

// Loop-tiled executor, bitwise identical to fx_forward_naive by contract:
// partial sums stay in exact 64-bit accumulators across input-channel tiles
// and requantization happens only after the full reduction. Loop order is
// oc -> oh -> ow -> ic. Validates the plan against its budget first.
TiledResult run_tiled(const FxModel& fxm, const Tensor& image,
                      const TilePlan& tplan);

// Layer-level tiled conv kernel (the unit under test for bit-exactness
// against fx_conv2d_naive). Counters accumulate into `pc`.
FxTensor fx_conv2d_tiled(const FxTensor& input, const FxTensor& weights,
                         const std::vector<int32_t>& bias_raw,
                         const QFormat& bias_q, int stride, Padding pad,
                         Activation act, const QFormat& out_q,
                         const TileConfig& cfg, PerfCounters& pc,
                         long long* saturations);

void save_tile_plan(const TilePlan& plan, const std::string& path);
TilePlan load_tile_plan(const std::string& path);

}  // namespace railnet
