#pragma once

#include <map>
#include <string>
#include <vector>

#include "railnet/fixed_point.hpp"
#include "railnet/model.hpp"
#include "railnet/tensor.hpp"

namespace railnet {

// Per-layer calibration record: running max |.| of the tensors around the
// layer. weight_max/bias_max are data independent; in_max/out_max come from
// running the float reference over the calibration images.
struct TensorStats {
  double weight_max = 0.0;
  double bias_max = 0.0;
  double in_max = 0.0;
  double out_max = 0.0;
};

struct CalibStats {
  double input_max = 0.0;            // model input (the image itself)
  std::map<int, TensorStats> layers; // by layer id
  int images_seen = 0;
};

// Run forward_ref over every image, recording per-tensor running maxima.
// Throws DataError on an empty image list.
CalibStats calibrate(const ModelGraph& model, const std::vector<Tensor>& images);

// Format choice for one tensor: integer bits i = 0 if m <= 0 else
// max(0, floor(log2 m) + 1), clamped to total-1; frac = total-1-i. A small
// headroom factor is applied to m first, and frac is lowered further while
// the representable max still falls short of m (values just under a power of
// two would otherwise land outside the range). The returned format always
// satisfies value_max >= m.
QFormat format_for(double max_abs, int total_bits);

// Quantization plan entry for one layer. act_q always set (the format the
// layer's output is carried in); weight_q/bias_q/acc_frac only meaningful
// when has_weights. acc_frac = weight_q.frac + input activation frac.
struct LayerQ {
  int id = 0;
  bool has_weights = false;
  QFormat weight_q{12, 0};
  QFormat bias_q{22, 0};
  QFormat act_q{12, 0};
  int acc_frac = 0;
};

struct QuantPlan {
  QFormat input_q{12, 0};
  std::vector<LayerQ> layers;  // one per model layer, execution order

  const LayerQ* find(int id) const;
  const LayerQ& at(int id) const;  // throws if absent
};

// Assign formats from calibration stats: weights/activations 12 bits, biases
// 22 bits. Formats propagate through the graph: ReLU / max pool / GAP reuse
// the incoming activation format (they operate on raws and never requantize);
// a residual add gets a format wide enough for both operands and its own
// output, so requantizing the operands cannot clip calibration-range data.
QuantPlan plan_formats(const ModelGraph& model, const CalibStats& stats);

void save_plan(const QuantPlan& plan, const std::string& path);
QuantPlan load_plan(const std::string& path);

// Quantized parameters of one conv/dense layer. Dense weights are stored as
// a (1, 1, in, out) tensor so both layer kinds share kernels.
struct FxLayerParams {
  FxTensor weights;
  std::vector<int32_t> bias_raw;
  QFormat bias_q{22, 0};
};

struct FxModel {
  ModelGraph graph;
  QuantPlan plan;
  std::map<int, FxLayerParams> params;  // by layer id
  long long saturation_count = 0;       // clamps while quantizing parameters
};

// Quantize all parameters per the plan. The graph keeps its float tensors
// (handy for parity reporting); fixed-point execution reads only `params`.
FxModel quantize_model(const ModelGraph& model, const QuantPlan& plan);

struct FxForwardResult {
  std::vector<int32_t> logit_raw;     // pre-softmax raws
  QFormat logit_q{12, 0};
  std::vector<double> logits;         // dequantized
  std::vector<double> probabilities;  // float softmax over dequantized logits
  int class_id = 0;
  double confidence = 0.0;
  long long saturation_count = 0;     // runtime requantization clamps
};

// Bit-exact reference executor: exact 64-bit MACs at acc_frac, bias brought
// into acc_frac and added once per output element, one requantization to the
// layer's act_q. ReLU/max-pool act on raws; the residual add requantizes both
// operands then saturating-adds; GAP sums exactly and divides by h*w with
// round-half-away-from-zero. Softmax runs in float on dequantized logits.
// BatchNorm layers are rejected (fuse first). Accumulator overflow is a hard
// error (std::overflow_error).
FxForwardResult fx_forward_naive(const FxModel& fxm, const Tensor& image);

// Layer-level conv kernel of the naive executor, exposed so the tiled
// executor can be checked against it case by case. `input` raws are at the
// layer's input activation format; output at out_q. Accumulation runs at
// weights.q.frac_bits + input.q.frac_bits.
FxTensor fx_conv2d_naive(const FxTensor& input, const FxTensor& weights,
                         const std::vector<int32_t>& bias_raw,
                         const QFormat& bias_q, int stride, Padding pad,
                         Activation act, const QFormat& out_q,
                         long long* saturations);

// Raw-domain layer helpers shared by the naive and tiled executors (only
// the conv kernels differ between the two routes).
FxTensor fx_relu(const FxTensor& input);
FxTensor fx_maxpool(const FxTensor& input, const MaxPool& mp);
FxTensor fx_residual_add(const FxTensor& a, const FxTensor& b,
                         const QFormat& to, long long* saturations);
FxTensor fx_global_avg_pool(const FxTensor& input);

struct ParityReport {
  double top1_match_rate = 0.0;
  double mean_abs_logit_err = 0.0;
  double max_abs_logit_err = 0.0;
  long long saturation_count = 0;  // parameter + runtime clamps, all images
};

// Float reference vs fixed point, image by image.
ParityReport parity_report(const ModelGraph& model, const FxModel& fxm,
                           const std::vector<Tensor>& images);

}  // namespace railnet
