#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "railnet/tensor.hpp"

namespace railnet {

enum class Padding { Same, Valid };
enum class Activation { None, Relu };

// Layer kinds. Conv2D carries an activation flag so the fusion pass can
// absorb a following ReLU without introducing a new node type.
struct Conv2D {
  int out_ch = 0;
  int kh = 0, kw = 0;
  int stride = 1;
  Padding pad = Padding::Same;
  Tensor weights;            // axes (kh, kw, in_ch, out_ch)
  std::vector<float> bias;   // [out_ch]
  Activation activation = Activation::None;

  int in_ch() const { return weights.shape.w; }
};

struct BatchNorm {
  std::vector<float> gamma, beta, mean, var;  // per channel
  float eps = 1e-5f;
};

struct Relu {};

struct MaxPool {
  int size = 2;
  int stride = 2;
};

// Elementwise sum of the previous layer's output with the stored output of
// an earlier layer (identity shortcut; shapes must match).
struct ResidualAdd {
  int source = -1;  // layer id
};

struct GlobalAvgPool {};

struct Dense {
  int in = 0, out = 0;
  std::vector<float> weights;  // row-major [in][out]
  std::vector<float> bias;     // [out]
};

struct Softmax {};

using LayerOp = std::variant<Conv2D, BatchNorm, Relu, MaxPool, ResidualAdd,
                             GlobalAvgPool, Dense, Softmax>;

const char* layer_kind_name(const LayerOp& op);

struct Layer {
  int id = 0;
  LayerOp op;
};

struct ModelGraph {
  Shape4 input_shape;
  std::vector<Layer> layers;  // execution order; ids strictly increasing
  std::vector<std::string> class_names;

  // Position in `layers` of the layer with this id; -1 if absent.
  int index_of(int id) const;

  // Structural checks: ids strictly increasing, exactly one Softmax and it
  // is last, shortcut sources exist and are earlier, parameter shapes are
  // consistent. Shape agreement along the chain is checked by infer_shapes.
  void validate() const;
};

// ---------------------------------------------------------------------------
// Float32 reference executor. Semantic ground truth for fusion, quantization
// and tiling. Accumulation is done in double; stored activations are float.
// ---------------------------------------------------------------------------

Tensor conv2d_ref(const Tensor& input, const Conv2D& layer);
Tensor batchnorm_ref(const Tensor& input, const BatchNorm& layer);
Tensor relu_ref(const Tensor& input);
Tensor maxpool_ref(const Tensor& input, const MaxPool& layer);
Tensor global_avg_pool_ref(const Tensor& input);  // -> [n,1,1,c]
std::vector<float> dense_ref(const std::vector<float>& x, const Dense& layer);

// Numerically stable softmax (max subtraction), computed in double.
std::vector<double> softmax_ref(const std::vector<float>& logits);
std::vector<double> softmax_ref_d(const std::vector<double>& logits);

struct ForwardResult {
  std::vector<float> logits;          // pre-softmax
  std::vector<double> probabilities;  // softmax output
  int class_id = 0;                   // argmax, ties -> lowest id
  double confidence = 0.0;            // max probability
};

ForwardResult forward_ref(const ModelGraph& model, const Tensor& image);

// Per-layer outputs in execution order (softmax layer stores probabilities).
std::vector<Tensor> forward_ref_trace(const ModelGraph& model, const Tensor& image);

// Output shape of every layer, given the model input shape. Throws on any
// shape inconsistency (mismatched residual operands, pool window too large,
// dense fed a non-flattened tensor, ...).
std::vector<Shape4> infer_shapes(const ModelGraph& model);

// Argmax with ties broken toward the lowest index.
int argmax_lowest(const std::vector<double>& v);

// Spatial output size and top/left padding for a conv axis.
struct ConvAxis {
  int out = 0;
  int pad_begin = 0;
};
ConvAxis conv_axis(int in, int k, int stride, Padding pad);

// ---------------------------------------------------------------------------
// Canonical inspection network: 128x128x3 input, residual stages at
// 16/32/64 channels, GAP, Dense(64->2), Softmax. Weights are seeded
// pseudo-random (the artifact ships no trained parameters); the layer
// geometry is fixed so operation counts are stable.
// ---------------------------------------------------------------------------
ModelGraph canonical_railnet(uint64_t seed);

// Model file I/O (.rnet): one-line JSON header describing the geometry,
// then a little-endian float32 blob of all parameters in declaration order,
// then the CRC32 of the blob (4 bytes little-endian).
void save_model(const ModelGraph& model, const std::string& path);
ModelGraph load_model(const std::string& path);

}  // namespace railnet
