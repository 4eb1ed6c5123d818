#include "railnet/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <stdexcept>

#include "railnet/errors.hpp"

namespace railnet {

const char* layer_kind_name(const LayerOp& op) {
  struct Namer {
    const char* operator()(const Conv2D&) const { return "conv2d"; }
    const char* operator()(const BatchNorm&) const { return "batchnorm"; }
    const char* operator()(const Relu&) const { return "relu"; }
    const char* operator()(const MaxPool&) const { return "maxpool"; }
    const char* operator()(const ResidualAdd&) const { return "residual_add"; }
    const char* operator()(const GlobalAvgPool&) const { return "global_avg_pool"; }
    const char* operator()(const Dense&) const { return "dense"; }
    const char* operator()(const Softmax&) const { return "softmax"; }
  };
  return std::visit(Namer{}, op);
}

int ModelGraph::index_of(int id) const {
  for (size_t i = 0; i < layers.size(); ++i)
    if (layers[i].id == id) return int(i);
  return -1;
}

void ModelGraph::validate() const {
  input_shape.check_positive();
  if (layers.empty()) throw std::invalid_argument("model has no layers");

  int prev_id = -1;
  int softmax_count = 0;
  for (size_t i = 0; i < layers.size(); ++i) {
    const Layer& l = layers[i];
    if (l.id <= prev_id)
      throw std::invalid_argument("layer ids must be strictly increasing");
    prev_id = l.id;

    if (const auto* conv = std::get_if<Conv2D>(&l.op)) {
      if (conv->kh < 1 || conv->kw < 1 || conv->stride < 1 || conv->out_ch < 1)
        throw std::invalid_argument("conv2d: bad geometry at layer " +
                                    std::to_string(l.id));
      const Shape4& ws = conv->weights.shape;
      if (ws.n != conv->kh || ws.h != conv->kw || ws.c != conv->out_ch)
        throw std::invalid_argument("conv2d: weight shape " + ws.to_string() +
                                    " inconsistent at layer " + std::to_string(l.id));
      if (int(conv->bias.size()) != conv->out_ch)
        throw std::invalid_argument("conv2d: bias size mismatch at layer " +
                                    std::to_string(l.id));
    } else if (const auto* bn = std::get_if<BatchNorm>(&l.op)) {
      const size_t c = bn->gamma.size();
      if (c == 0 || bn->beta.size() != c || bn->mean.size() != c || bn->var.size() != c)
        throw std::invalid_argument("batchnorm: parameter size mismatch at layer " +
                                    std::to_string(l.id));
      if (bn->eps <= 0.0f)
        throw std::invalid_argument("batchnorm: eps must be > 0");
      for (float v : bn->var)
        if (v < 0.0f) throw std::invalid_argument("batchnorm: negative variance");
    } else if (const auto* add = std::get_if<ResidualAdd>(&l.op)) {
      const int src = index_of(add->source);
      if (src < 0 || size_t(src) >= i)
        throw std::invalid_argument("residual_add: source " +
                                    std::to_string(add->source) +
                                    " must be an earlier layer");
    } else if (const auto* dense = std::get_if<Dense>(&l.op)) {
      if (dense->in < 1 || dense->out < 1 ||
          dense->weights.size() != size_t(dense->in) * size_t(dense->out) ||
          dense->bias.size() != size_t(dense->out))
        throw std::invalid_argument("dense: parameter size mismatch at layer " +
                                    std::to_string(l.id));
    } else if (std::holds_alternative<Softmax>(l.op)) {
      ++softmax_count;
    }
  }
  if (softmax_count != 1 || !std::holds_alternative<Softmax>(layers.back().op))
    throw std::invalid_argument("model must end with its single Softmax layer");
}

ConvAxis conv_axis(int in, int k, int stride, Padding pad) {
  if (pad == Padding::Valid) {
    if (in < k)
      throw std::invalid_argument("conv/pool window larger than input");
    return {(in - k) / stride + 1, 0};
  }
  const int out = (in + stride - 1) / stride;  // ceil(in / stride)
  const int total = std::max((out - 1) * stride + k - in, 0);
  return {out, total / 2};
}

Tensor conv2d_ref(const Tensor& input, const Conv2D& layer) {
  const Shape4& is = input.shape;
  if (is.c != layer.in_ch())
    throw std::invalid_argument("conv2d: input channels " + std::to_string(is.c) +
                                " != weight in_ch " + std::to_string(layer.in_ch()));
  const ConvAxis ah = conv_axis(is.h, layer.kh, layer.stride, layer.pad);
  const ConvAxis aw = conv_axis(is.w, layer.kw, layer.stride, layer.pad);

  Tensor out(Shape4{is.n, ah.out, aw.out, layer.out_ch});
  for (int n = 0; n < is.n; ++n) {
    for (int oh = 0; oh < ah.out; ++oh) {
      for (int ow = 0; ow < aw.out; ++ow) {
        for (int oc = 0; oc < layer.out_ch; ++oc) {
          double acc = layer.bias[oc];
          for (int kh = 0; kh < layer.kh; ++kh) {
            const int ih = oh * layer.stride - ah.pad_begin + kh;
            if (ih < 0 || ih >= is.h) continue;
            for (int kw = 0; kw < layer.kw; ++kw) {
              const int iw = ow * layer.stride - aw.pad_begin + kw;
              if (iw < 0 || iw >= is.w) continue;
              for (int ic = 0; ic < is.c; ++ic) {
                acc += double(input.at(n, ih, iw, ic)) *
                       double(layer.weights.at(kh, kw, ic, oc));
              }
            }
          }
          if (layer.activation == Activation::Relu && acc < 0.0) acc = 0.0;
          out.at(n, oh, ow, oc) = float(acc);
        }
      }
    }
  }
  return out;
}

Tensor batchnorm_ref(const Tensor& input, const BatchNorm& layer) {
  if (size_t(input.shape.c) != layer.gamma.size())
    throw std::invalid_argument("batchnorm: channel count mismatch");
  Tensor out(input.shape);
  const int c = input.shape.c;
  std::vector<double> scale(c), shift(c);
  for (int i = 0; i < c; ++i) {
    scale[i] = double(layer.gamma[i]) / std::sqrt(double(layer.var[i]) + double(layer.eps));
    shift[i] = double(layer.beta[i]) - double(layer.mean[i]) * scale[i];
  }
  for (size_t i = 0; i < input.data.size(); ++i) {
    const int ch = int(i % c);
    out.data[i] = float(double(input.data[i]) * scale[ch] + shift[ch]);
  }
  return out;
}

Tensor relu_ref(const Tensor& input) {
  Tensor out(input.shape);
  for (size_t i = 0; i < input.data.size(); ++i)
    out.data[i] = input.data[i] < 0.0f ? 0.0f : input.data[i];
  return out;
}

Tensor maxpool_ref(const Tensor& input, const MaxPool& layer) {
  const Shape4& is = input.shape;
  if (layer.size < 1 || layer.stride < 1)
    throw std::invalid_argument("maxpool: bad geometry");
  if (is.h < layer.size || is.w < layer.size)
    throw std::invalid_argument("maxpool: window larger than input");
  const int oh = (is.h - layer.size) / layer.stride + 1;
  const int ow = (is.w - layer.size) / layer.stride + 1;
  Tensor out(Shape4{is.n, oh, ow, is.c});
  for (int n = 0; n < is.n; ++n)
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x)
        for (int c = 0; c < is.c; ++c) {
          float m = input.at(n, y * layer.stride, x * layer.stride, c);
          for (int dy = 0; dy < layer.size; ++dy)
            for (int dx = 0; dx < layer.size; ++dx)
              m = std::max(m, input.at(n, y * layer.stride + dy,
                                       x * layer.stride + dx, c));
          out.at(n, y, x, c) = m;
        }
  return out;
}

Tensor global_avg_pool_ref(const Tensor& input) {
  const Shape4& is = input.shape;
  Tensor out(Shape4{is.n, 1, 1, is.c});
  const double inv = 1.0 / (double(is.h) * double(is.w));
  for (int n = 0; n < is.n; ++n)
    for (int c = 0; c < is.c; ++c) {
      double sum = 0.0;
      for (int y = 0; y < is.h; ++y)
        for (int x = 0; x < is.w; ++x) sum += double(input.at(n, y, x, c));
      out.at(n, 0, 0, c) = float(sum * inv);
    }
  return out;
}

std::vector<float> dense_ref(const std::vector<float>& x, const Dense& layer) {
  if (x.size() != size_t(layer.in))
    throw std::invalid_argument("dense: input length " + std::to_string(x.size()) +
                                " != " + std::to_string(layer.in));
  std::vector<float> out(size_t(layer.out));
  for (int o = 0; o < layer.out; ++o) {
    double acc = layer.bias[size_t(o)];
    for (int i = 0; i < layer.in; ++i)
      acc += double(x[size_t(i)]) * double(layer.weights[size_t(i) * layer.out + o]);
    out[size_t(o)] = float(acc);
  }
  return out;
}

std::vector<double> softmax_ref_d(const std::vector<double>& logits) {
  if (logits.empty()) throw std::invalid_argument("softmax: empty input");
  for (double v : logits)
    if (std::isnan(v)) throw std::invalid_argument("softmax: NaN input");
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double sum = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

std::vector<double> softmax_ref(const std::vector<float>& logits) {
  return softmax_ref_d(std::vector<double>(logits.begin(), logits.end()));
}

int argmax_lowest(const std::vector<double>& v) {
  int best = 0;
  for (size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[size_t(best)]) best = int(i);
  return best;
}

namespace {

std::vector<float> flatten_vec(const Tensor& t) {
  if (t.shape.h != 1 || t.shape.w != 1)
    throw std::invalid_argument("dense expects a flattened [n,1,1,c] input, got " +
                                t.shape.to_string());
  return t.data;
}

}  // namespace

std::vector<Tensor> forward_ref_trace(const ModelGraph& model, const Tensor& image) {
  model.validate();
  if (!(image.shape == model.input_shape))
    throw std::invalid_argument("input shape " + image.shape.to_string() +
                                " != model input " + model.input_shape.to_string());

  std::vector<Tensor> outputs;
  outputs.reserve(model.layers.size());
  const Tensor* cur = &image;

  for (size_t i = 0; i < model.layers.size(); ++i) {
    const Layer& l = model.layers[i];
    Tensor out;
    if (const auto* conv = std::get_if<Conv2D>(&l.op)) {
      out = conv2d_ref(*cur, *conv);
    } else if (const auto* bn = std::get_if<BatchNorm>(&l.op)) {
      out = batchnorm_ref(*cur, *bn);
    } else if (std::holds_alternative<Relu>(l.op)) {
      out = relu_ref(*cur);
    } else if (const auto* mp = std::get_if<MaxPool>(&l.op)) {
      out = maxpool_ref(*cur, *mp);
    } else if (const auto* add = std::get_if<ResidualAdd>(&l.op)) {
      const Tensor& src = outputs[size_t(model.index_of(add->source))];
      if (!(src.shape == cur->shape))
        throw std::invalid_argument("residual_add: operand shapes differ: " +
                                    src.shape.to_string() + " vs " +
                                    cur->shape.to_string());
      out = Tensor(cur->shape);
      for (size_t k = 0; k < out.data.size(); ++k)
        out.data[k] = cur->data[k] + src.data[k];
    } else if (std::holds_alternative<GlobalAvgPool>(l.op)) {
      out = global_avg_pool_ref(*cur);
    } else if (const auto* dense = std::get_if<Dense>(&l.op)) {
      const std::vector<float> y = dense_ref(flatten_vec(*cur), *dense);
      out = Tensor(Shape4{cur->shape.n, 1, 1, dense->out});
      out.data = y;
    } else {  // Softmax
      const std::vector<double> p = softmax_ref(flatten_vec(*cur));
      out = Tensor(Shape4{cur->shape.n, 1, 1, int(p.size())});
      for (size_t k = 0; k < p.size(); ++k) out.data[k] = float(p[k]);
    }
    outputs.push_back(std::move(out));
    cur = &outputs.back();
  }
  return outputs;
}

ForwardResult forward_ref(const ModelGraph& model, const Tensor& image) {
  const std::vector<Tensor> trace = forward_ref_trace(model, image);
  // logits are the input of the final softmax layer
  const Tensor& pre = trace.size() >= 2 ? trace[trace.size() - 2] : image;
  ForwardResult r;
  r.logits = pre.data;
  r.probabilities = softmax_ref(r.logits);
  r.class_id = argmax_lowest(r.probabilities);
  r.confidence = r.probabilities[size_t(r.class_id)];
  return r;
}

std::vector<Shape4> infer_shapes(const ModelGraph& model) {
  model.validate();
  std::vector<Shape4> shapes;
  shapes.reserve(model.layers.size());
  Shape4 cur = model.input_shape;

  for (size_t i = 0; i < model.layers.size(); ++i) {
    const Layer& l = model.layers[i];
    if (const auto* conv = std::get_if<Conv2D>(&l.op)) {
      if (cur.c != conv->in_ch())
        throw std::invalid_argument("conv2d: input channels mismatch at layer " +
                                    std::to_string(l.id));
      const ConvAxis ah = conv_axis(cur.h, conv->kh, conv->stride, conv->pad);
      const ConvAxis aw = conv_axis(cur.w, conv->kw, conv->stride, conv->pad);
      cur = Shape4{cur.n, ah.out, aw.out, conv->out_ch};
    } else if (const auto* bn = std::get_if<BatchNorm>(&l.op)) {
      if (size_t(cur.c) != bn->gamma.size())
        throw std::invalid_argument("batchnorm: channel mismatch at layer " +
                                    std::to_string(l.id));
    } else if (const auto* mp = std::get_if<MaxPool>(&l.op)) {
      if (cur.h < mp->size || cur.w < mp->size)
        throw std::invalid_argument("maxpool: window larger than input at layer " +
                                    std::to_string(l.id));
      cur = Shape4{cur.n, (cur.h - mp->size) / mp->stride + 1,
                   (cur.w - mp->size) / mp->stride + 1, cur.c};
    } else if (const auto* add = std::get_if<ResidualAdd>(&l.op)) {
      const Shape4& src = shapes[size_t(model.index_of(add->source))];
      if (!(src == cur))
        throw std::invalid_argument("residual_add: operand shapes differ at layer " +
                                    std::to_string(l.id));
    } else if (std::holds_alternative<GlobalAvgPool>(l.op)) {
      cur = Shape4{cur.n, 1, 1, cur.c};
    } else if (const auto* dense = std::get_if<Dense>(&l.op)) {
      if (cur.h != 1 || cur.w != 1 || cur.c != dense->in)
        throw std::invalid_argument("dense: expects [n,1,1," +
                                    std::to_string(dense->in) + "], got " +
                                    cur.to_string());
      cur = Shape4{cur.n, 1, 1, dense->out};
    }
    // Relu and Softmax keep the shape
    shapes.push_back(cur);
  }
  return shapes;
}

// ---------------------------------------------------------------------------
// Canonical network
// ---------------------------------------------------------------------------

namespace {

struct Builder {
  std::mt19937_64 rng;
  std::vector<Layer> layers;
  int next_id = 0;

  explicit Builder(uint64_t seed) : rng(seed) {}

  int add(LayerOp op) {
    layers.push_back(Layer{next_id, std::move(op)});
    return next_id++;
  }

  float gauss(double stdev) {
    std::normal_distribution<double> d(0.0, stdev);
    return float(d(rng));
  }
  float uniform(double lo, double hi) {
    std::uniform_real_distribution<double> d(lo, hi);
    return float(d(rng));
  }

  // He-style init; `gain` scales the branch down where residual sums would
  // otherwise grow the activation range with depth.
  Conv2D conv(int in_ch, int out_ch, int k, int stride, double gain) {
    Conv2D c;
    c.out_ch = out_ch;
    c.kh = c.kw = k;
    c.stride = stride;
    c.pad = Padding::Same;
    c.weights = Tensor(Shape4{k, k, in_ch, out_ch});
    const double stdev = gain * std::sqrt(2.0 / (double(k) * k * in_ch));
    for (float& w : c.weights.data) w = gauss(stdev);
    c.bias.resize(size_t(out_ch));
    for (float& b : c.bias) b = uniform(-0.05, 0.05);
    return c;
  }

  BatchNorm bn(int ch) {
    BatchNorm b;
    b.gamma.resize(size_t(ch));
    b.beta.resize(size_t(ch));
    b.mean.resize(size_t(ch));
    b.var.resize(size_t(ch));
    for (int i = 0; i < ch; ++i) {
      b.gamma[size_t(i)] = uniform(0.9, 1.1);
      b.beta[size_t(i)] = uniform(-0.05, 0.05);
      b.mean[size_t(i)] = uniform(-0.05, 0.05);
      b.var[size_t(i)] = uniform(0.9, 1.1);
    }
    b.eps = 1e-5f;
    return b;
  }

  // Conv3x3+BN+ReLU -> Conv3x3+BN, identity shortcut add, ReLU.
  void residual_block(int ch, int tap_id) {
    add(conv(ch, ch, 3, 1, 1.0));
    add(bn(ch));
    add(Relu{});
    add(conv(ch, ch, 3, 1, 0.5));
    add(bn(ch));
    add(ResidualAdd{tap_id});
    add(Relu{});
  }
};

}  // namespace

ModelGraph canonical_railnet(uint64_t seed) {
  Builder b(seed);

  // Stem: downsample 128 -> 32 and lift to 16 channels.
  b.add(b.conv(3, 16, 3, 2, 1.0));  // -> 64x64x16
  b.add(b.bn(16));
  int tap = b.add(Relu{});
  tap = b.add(MaxPool{2, 2});  // -> 32x32x16

  // Stage 1: 16 channels at 32x32.
  b.residual_block(16, tap);
  tap = b.layers.back().id;
  b.residual_block(16, tap);
  tap = b.add(MaxPool{2, 2});  // -> 16x16x16

  // Stage 2: 32 channels at 16x16 (1x1 channel-lift entry).
  b.add(b.conv(16, 32, 1, 1, 1.0));
  b.add(b.bn(32));
  tap = b.add(Relu{});
  b.residual_block(32, tap);
  tap = b.layers.back().id;
  b.residual_block(32, tap);
  tap = b.add(MaxPool{2, 2});  // -> 8x8x32

  // Stage 3: 64 channels at 4x4 (strided 1x1 channel-lift entry).
  b.add(b.conv(32, 64, 1, 2, 1.0));  // -> 4x4x64
  b.add(b.bn(64));
  tap = b.add(Relu{});
  b.residual_block(64, tap);
  tap = b.layers.back().id;
  b.residual_block(64, tap);

  b.add(GlobalAvgPool{});

  Dense d;
  d.in = 64;
  d.out = 2;
  d.weights.resize(size_t(d.in) * d.out);
  const double stdev = std::sqrt(2.0 / d.in);
  for (float& w : d.weights) w = b.gauss(stdev);
  d.bias = {0.0f, 0.0f};
  b.add(std::move(d));
  b.add(Softmax{});

  ModelGraph m;
  m.input_shape = Shape4{1, 128, 128, 3};
  m.layers = std::move(b.layers);
  m.class_names = {"defective", "healthy"};
  m.validate();
  return m;
}

}  // namespace railnet
