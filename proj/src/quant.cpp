#include "railnet/quant.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "railnet/errors.hpp"

namespace railnet {

using json = nlohmann::json;

namespace {

// Headroom applied to observed maxima before choosing a format. The float
// calibration pass cannot see fixed-point rounding noise, so a value that
// lands exactly on the observed max can still overshoot it slightly once the
// whole chain runs in integers. Requantization drift compounds over the
// deepest path (~23 requantizing layers at up to half a 12-bit ulp each),
// so 2% keeps calibration-range data clamp-free; it only costs a fraction
// bit when the observed max sits within 2% of a power of two.
constexpr double kRangeHeadroom = 1.02;

double tensor_abs_max(const std::vector<float>& v) {
  double m = 0.0;
  for (float x : v) m = std::max(m, std::abs(double(x)));
  return m;
}

}  // namespace

CalibStats calibrate(const ModelGraph& model, const std::vector<Tensor>& images) {
  model.validate();
  if (images.empty()) throw DataError("calibrate: empty calibration set");

  CalibStats stats;
  for (const Layer& l : model.layers) {
    TensorStats ts;
    if (const auto* conv = std::get_if<Conv2D>(&l.op)) {
      ts.weight_max = tensor_abs_max(conv->weights.data);
      ts.bias_max = tensor_abs_max(conv->bias);
    } else if (const auto* dense = std::get_if<Dense>(&l.op)) {
      ts.weight_max = tensor_abs_max(dense->weights);
      ts.bias_max = tensor_abs_max(dense->bias);
    }
    stats.layers[l.id] = ts;
  }

  for (const Tensor& img : images) {
    stats.input_max = std::max(stats.input_max, tensor_abs_max(img.data));
    const std::vector<Tensor> trace = forward_ref_trace(model, img);
    const Tensor* prev = &img;
    for (size_t i = 0; i < model.layers.size(); ++i) {
      TensorStats& ts = stats.layers[model.layers[i].id];
      ts.in_max = std::max(ts.in_max, tensor_abs_max(prev->data));
      ts.out_max = std::max(ts.out_max, tensor_abs_max(trace[i].data));
      prev = &trace[i];
    }
    ++stats.images_seen;
  }
  return stats;
}

QFormat format_for(double max_abs, int total_bits) {
  if (!(max_abs >= 0.0) || std::isinf(max_abs))
    throw std::invalid_argument("format_for: max_abs must be finite and >= 0");
  const double m = max_abs * kRangeHeadroom;
  int int_bits = 0;
  if (m > 0.0) int_bits = std::max(0, std::ilogb(m) + 1);
  int_bits = std::min(int_bits, total_bits - 1);
  QFormat q{total_bits, total_bits - 1 - int_bits};
  // Just under a power of two the formula's range can still fall short of m
  // (value_max is one ulp shy of 2^int_bits); widen until it covers.
  while (q.frac_bits > 0 && m > q.value_max()) --q.frac_bits;
  return q;
}

const LayerQ* QuantPlan::find(int id) const {
  for (const LayerQ& lq : layers)
    if (lq.id == id) return &lq;
  return nullptr;
}

const LayerQ& QuantPlan::at(int id) const {
  const LayerQ* lq = find(id);
  if (lq == nullptr)
    throw std::invalid_argument("quant plan has no entry for layer " +
                                std::to_string(id));
  return *lq;
}

QuantPlan plan_formats(const ModelGraph& model, const CalibStats& stats) {
  model.validate();
  if (stats.images_seen < 1)
    throw DataError("plan_formats: calibration stats are empty");

  auto stat_of = [&](int id) -> const TensorStats& {
    auto it = stats.layers.find(id);
    if (it == stats.layers.end())
      throw DataError("plan_formats: no calibration stats for layer " +
                      std::to_string(id));
    return it->second;
  };

  QuantPlan plan;
  plan.input_q = format_for(stats.input_max, 12);
  QFormat cur = plan.input_q;

  for (const Layer& l : model.layers) {
    const TensorStats& ts = stat_of(l.id);
    LayerQ lq;
    lq.id = l.id;

    if (std::holds_alternative<Conv2D>(l.op) || std::holds_alternative<Dense>(l.op)) {
      lq.has_weights = true;
      lq.weight_q = format_for(ts.weight_max, 12);
      lq.bias_q = format_for(ts.bias_max, 22);
      lq.act_q = format_for(ts.out_max, 12);
      lq.acc_frac = lq.weight_q.frac_bits + cur.frac_bits;
      cur = lq.act_q;
    } else if (std::holds_alternative<BatchNorm>(l.op)) {
      // Informational only: the fixed-point executors require a fused model.
      lq.act_q = format_for(ts.out_max, 12);
      cur = lq.act_q;
    } else if (const auto* add = std::get_if<ResidualAdd>(&l.op)) {
      // Both operands get requantized into this format, so it must span the
      // shortcut branch, the main branch, and the sum.
      const double m =
          std::max({ts.out_max, ts.in_max, stat_of(add->source).out_max});
      lq.act_q = format_for(m, 12);
      cur = lq.act_q;
    } else {
      // ReLU, max pool, GAP, softmax: raws pass through unscaled.
      lq.act_q = cur;
    }
    plan.layers.push_back(lq);
  }
  return plan;
}

// ---------------------------------------------------------------------------
// .qplan serialization
// ---------------------------------------------------------------------------

namespace {

json qformat_to_json(const QFormat& q) {
  return json{{"total_bits", q.total_bits}, {"frac_bits", q.frac_bits}};
}

QFormat qformat_from_json(const json& j, const char* what) {
  if (!j.is_object() || !j.contains("total_bits") || !j.contains("frac_bits") ||
      !j["total_bits"].is_number_integer() || !j["frac_bits"].is_number_integer())
    throw DataError(std::string("quant plan: malformed format object for ") + what);
  QFormat q{j["total_bits"].get<int>(), j["frac_bits"].get<int>()};
  if (!q.valid())
    throw DataError(std::string("quant plan: invalid format for ") + what);
  return q;
}

}  // namespace

void save_plan(const QuantPlan& plan, const std::string& path) {
  json j;
  j["format"] = "qplan";
  j["version"] = 1;
  j["input_q"] = qformat_to_json(plan.input_q);
  json layers = json::array();
  for (const LayerQ& lq : plan.layers) {
    json e;
    e["id"] = lq.id;
    e["act_q"] = qformat_to_json(lq.act_q);
    if (lq.has_weights) {
      e["weight_q"] = qformat_to_json(lq.weight_q);
      e["bias_q"] = qformat_to_json(lq.bias_q);
      e["acc_frac"] = lq.acc_frac;
    }
    layers.push_back(std::move(e));
  }
  j["layers"] = std::move(layers);

  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot write quant plan: " + path);
  f << j.dump(2) << '\n';
  if (!f) throw DataError("short write to quant plan: " + path);
}

QuantPlan load_plan(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open quant plan: " + path);
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw DataError(std::string("quant plan: malformed JSON: ") + e.what());
  }
  if (j.value("format", "") != "qplan")
    throw DataError("quant plan: not a qplan file");
  if (j.value("version", -1) != 1)
    throw DataError("quant plan: unsupported version");
  if (!j.contains("input_q") || !j.contains("layers") || !j["layers"].is_array())
    throw DataError("quant plan: missing input_q or layers");

  QuantPlan plan;
  plan.input_q = qformat_from_json(j["input_q"], "input_q");
  for (const json& e : j["layers"]) {
    if (!e.is_object() || !e.contains("id") || !e["id"].is_number_integer())
      throw DataError("quant plan: layer entry without id");
    LayerQ lq;
    lq.id = e["id"].get<int>();
    lq.act_q = qformat_from_json(e.at("act_q"), "act_q");
    if (e.contains("weight_q")) {
      lq.has_weights = true;
      lq.weight_q = qformat_from_json(e["weight_q"], "weight_q");
      if (!e.contains("bias_q") || !e.contains("acc_frac") ||
          !e["acc_frac"].is_number_integer())
        throw DataError("quant plan: weighted layer entry missing bias_q/acc_frac");
      lq.bias_q = qformat_from_json(e["bias_q"], "bias_q");
      lq.acc_frac = e["acc_frac"].get<int>();
      if (lq.acc_frac < 0 || lq.acc_frac > 62)
        throw DataError("quant plan: acc_frac out of range");
    }
    plan.layers.push_back(lq);
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Model quantization
// ---------------------------------------------------------------------------

FxModel quantize_model(const ModelGraph& model, const QuantPlan& plan) {
  model.validate();
  FxModel fxm;
  fxm.graph = model;
  fxm.plan = plan;

  auto quantize_into = [&fxm](const std::vector<float>& src,
                              std::vector<int32_t>& dst, const QFormat& q) {
    dst.resize(src.size());
    for (size_t i = 0; i < src.size(); ++i) {
      bool sat = false;
      dst[i] = quantize(double(src[i]), q, &sat);
      if (sat) ++fxm.saturation_count;
    }
  };

  for (const Layer& l : model.layers) {
    const LayerQ& lq = plan.at(l.id);
    if (const auto* conv = std::get_if<Conv2D>(&l.op)) {
      if (!lq.has_weights)
        throw DataError("quant plan: layer " + std::to_string(l.id) +
                        " has weights but the plan entry does not");
      FxLayerParams p;
      p.weights = FxTensor(conv->weights.shape, lq.weight_q);
      quantize_into(conv->weights.data, p.weights.raw, lq.weight_q);
      p.bias_q = lq.bias_q;
      quantize_into(conv->bias, p.bias_raw, lq.bias_q);
      fxm.params[l.id] = std::move(p);
    } else if (const auto* dense = std::get_if<Dense>(&l.op)) {
      if (!lq.has_weights)
        throw DataError("quant plan: layer " + std::to_string(l.id) +
                        " has weights but the plan entry does not");
      FxLayerParams p;
      p.weights = FxTensor(Shape4{1, 1, dense->in, dense->out}, lq.weight_q);
      quantize_into(dense->weights, p.weights.raw, lq.weight_q);
      p.bias_q = lq.bias_q;
      quantize_into(dense->bias, p.bias_raw, lq.bias_q);
      fxm.params[l.id] = std::move(p);
    }
  }
  return fxm;
}

// ---------------------------------------------------------------------------
// Naive fixed-point executor
// ---------------------------------------------------------------------------

namespace {

// Bias raw brought from its own frac to the accumulator's frac. Wide shifts
// stay exact in 64 bits (|bias raw| < 2^21, frac deltas < 42).
int64_t bias_to_acc(int32_t bias_raw, int bias_frac, int acc_frac) {
  const int d = acc_frac - bias_frac;
  if (d >= 0) return int64_t(bias_raw) << d;
  return round_shift_right(bias_raw, -d);
}

// Round-half-away-from-zero division by a positive divisor.
int64_t div_round_half_away(int64_t num, int64_t den) {
  const int64_t q = std::abs(num) * 2 + den;
  const int64_t mag = q / (2 * den);
  return num < 0 ? -mag : mag;
}

// True when every possible |accumulator| for this reduction provably fits
// well inside int64, letting the MAC loop skip per-step overflow checks.
bool acc_provably_safe(long long n_terms, const QFormat& a, const QFormat& b,
                       int64_t bias_bound) {
  const double prod = std::ldexp(1.0, a.total_bits - 1) *
                      std::ldexp(1.0, b.total_bits - 1);
  const double bound = double(n_terms) * prod + double(bias_bound);
  return bound < std::ldexp(1.0, 62);
}

}  // namespace

FxTensor fx_conv2d_naive(const FxTensor& input, const FxTensor& weights,
                         const std::vector<int32_t>& bias_raw,
                         const QFormat& bias_q, int stride, Padding pad,
                         Activation act, const QFormat& out_q,
                         long long* saturations) {
  const Shape4& is = input.shape;
  const int kh = weights.shape.n, kw = weights.shape.h;
  const int ic_n = weights.shape.w, oc_n = weights.shape.c;
  if (is.c != ic_n)
    throw std::invalid_argument("fx conv: input channels mismatch");
  if (int(bias_raw.size()) != oc_n)
    throw std::invalid_argument("fx conv: bias size mismatch");

  const int acc_frac = weights.q.frac_bits + input.q.frac_bits;
  const ConvAxis ah = conv_axis(is.h, kh, stride, pad);
  const ConvAxis aw = conv_axis(is.w, kw, stride, pad);

  int64_t bias_bound = 0;
  std::vector<int64_t> bias_acc(static_cast<size_t>(oc_n), 0);
  for (int oc = 0; oc < oc_n; ++oc) {
    bias_acc[size_t(oc)] = bias_to_acc(bias_raw[size_t(oc)], bias_q.frac_bits, acc_frac);
    bias_bound = std::max(bias_bound, std::abs(bias_acc[size_t(oc)]));
  }
  const bool fast = acc_provably_safe(1ll * kh * kw * ic_n, input.q, weights.q,
                                      bias_bound);

  FxTensor out(Shape4{is.n, ah.out, aw.out, oc_n}, out_q);
  long long sat_count = 0;
  for (int n = 0; n < is.n; ++n)
    for (int oh = 0; oh < ah.out; ++oh)
      for (int ow = 0; ow < aw.out; ++ow)
        for (int oc = 0; oc < oc_n; ++oc) {
          int64_t acc = bias_acc[size_t(oc)];
          for (int y = 0; y < kh; ++y) {
            const int ih = oh * stride - ah.pad_begin + y;
            if (ih < 0 || ih >= is.h) continue;
            for (int x = 0; x < kw; ++x) {
              const int iw = ow * stride - aw.pad_begin + x;
              if (iw < 0 || iw >= is.w) continue;
              if (fast) {
                for (int ic = 0; ic < ic_n; ++ic)
                  acc += int64_t(input.at(n, ih, iw, ic)) *
                         int64_t(weights.at(y, x, ic, oc));
              } else {
                for (int ic = 0; ic < ic_n; ++ic) {
                  int64_t prod;
                  if (__builtin_mul_overflow(int64_t(input.at(n, ih, iw, ic)),
                                             int64_t(weights.at(y, x, ic, oc)),
                                             &prod) ||
                      __builtin_add_overflow(acc, prod, &acc))
                    throw std::overflow_error("fx conv: accumulator overflow");
                }
              }
            }
          }
          // A fused ReLU runs on the accumulator: requantization maps
          // non-positives to non-positives (and clamps them), so the result
          // is bit-identical to relu-after-requant but negative overshoot
          // does not show up as saturation.
          if (act == Activation::Relu && acc < 0) acc = 0;
          bool sat = false;
          int32_t v = rescale_raw(acc, acc_frac, out_q, &sat);
          if (sat) ++sat_count;
          out.at(n, oh, ow, oc) = v;
        }
  if (saturations) *saturations += sat_count;
  return out;
}

FxTensor fx_relu(const FxTensor& input) {
  FxTensor out = input;
  for (int32_t& r : out.raw) r = std::max(r, 0);
  return out;
}

FxTensor fx_maxpool(const FxTensor& input, const MaxPool& mp) {
  const Shape4& is = input.shape;
  if (is.h < mp.size || is.w < mp.size)
    throw std::invalid_argument("fx maxpool: window larger than input");
  const int oh = (is.h - mp.size) / mp.stride + 1;
  const int ow = (is.w - mp.size) / mp.stride + 1;
  FxTensor out(Shape4{is.n, oh, ow, is.c}, input.q);
  for (int n = 0; n < is.n; ++n)
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x)
        for (int c = 0; c < is.c; ++c) {
          int32_t m = input.at(n, y * mp.stride, x * mp.stride, c);
          for (int dy = 0; dy < mp.size; ++dy)
            for (int dx = 0; dx < mp.size; ++dx)
              m = std::max(m, input.at(n, y * mp.stride + dy, x * mp.stride + dx, c));
          out.at(n, y, x, c) = m;
        }
  return out;
}

FxTensor fx_residual_add(const FxTensor& a, const FxTensor& b, const QFormat& to,
                         long long* saturations) {
  if (!(a.shape == b.shape))
    throw std::invalid_argument("fx residual add: operand shapes differ");
  FxTensor out(a.shape, to);
  for (size_t i = 0; i < out.raw.size(); ++i) {
    bool sat = false;
    const int64_t av = requantize(a.raw[i], a.q, to, &sat);
    const int64_t bv = requantize(b.raw[i], b.q, to, &sat);
    int64_t sum = av + bv;
    if (sum > to.raw_max()) {
      sum = to.raw_max();
      sat = true;
    } else if (sum < to.raw_min()) {
      sum = to.raw_min();
      sat = true;
    }
    if (sat) ++*saturations;
    out.raw[i] = int32_t(sum);
  }
  return out;
}

FxTensor fx_global_avg_pool(const FxTensor& input) {
  const Shape4& is = input.shape;
  FxTensor out(Shape4{is.n, 1, 1, is.c}, input.q);
  const int64_t den = int64_t(is.h) * is.w;
  for (int n = 0; n < is.n; ++n)
    for (int c = 0; c < is.c; ++c) {
      int64_t sum = 0;
      for (int y = 0; y < is.h; ++y)
        for (int x = 0; x < is.w; ++x) sum += input.at(n, y, x, c);
      out.at(n, 0, 0, c) = int32_t(div_round_half_away(sum, den));
    }
  return out;
}

FxForwardResult fx_forward_naive(const FxModel& fxm, const Tensor& image) {
  const ModelGraph& g = fxm.graph;
  g.validate();
  if (!(image.shape == g.input_shape))
    throw std::invalid_argument("fx forward: input shape " +
                                image.shape.to_string() + " != model input " +
                                g.input_shape.to_string());

  FxForwardResult res;

  FxTensor input_fx(image.shape, fxm.plan.input_q);
  for (size_t i = 0; i < image.data.size(); ++i) {
    bool sat = false;
    input_fx.raw[i] = quantize(double(image.data[i]), fxm.plan.input_q, &sat);
    if (sat) ++res.saturation_count;
  }

  std::vector<FxTensor> outputs;
  outputs.reserve(g.layers.size());
  const FxTensor* cur = &input_fx;
  bool saw_softmax = false;

  for (size_t i = 0; i < g.layers.size(); ++i) {
    const Layer& l = g.layers[i];
    const LayerQ& lq = fxm.plan.at(l.id);
    FxTensor out;

    if (const auto* conv = std::get_if<Conv2D>(&l.op)) {
      const FxLayerParams& p = fxm.params.at(l.id);
      if (lq.acc_frac != p.weights.q.frac_bits + cur->q.frac_bits)
        throw std::invalid_argument(
            "quant plan: acc_frac inconsistent at layer " + std::to_string(l.id));
      out = fx_conv2d_naive(*cur, p.weights, p.bias_raw, p.bias_q, conv->stride,
                            conv->pad, conv->activation, lq.act_q,
                            &res.saturation_count);
    } else if (std::holds_alternative<BatchNorm>(l.op)) {
      throw DataError("fixed-point execution requires a fused model (layer " +
                      std::to_string(l.id) + " is batchnorm)");
    } else if (std::holds_alternative<Relu>(l.op)) {
      out = fx_relu(*cur);
    } else if (const auto* mp = std::get_if<MaxPool>(&l.op)) {
      out = fx_maxpool(*cur, *mp);
    } else if (const auto* add = std::get_if<ResidualAdd>(&l.op)) {
      const FxTensor& src = outputs[size_t(g.index_of(add->source))];
      out = fx_residual_add(*cur, src, lq.act_q, &res.saturation_count);
    } else if (std::holds_alternative<GlobalAvgPool>(l.op)) {
      out = fx_global_avg_pool(*cur);
    } else if (const auto* dense = std::get_if<Dense>(&l.op)) {
      if (cur->shape.h != 1 || cur->shape.w != 1 || cur->shape.c != dense->in)
        throw std::invalid_argument("fx dense: expects [n,1,1," +
                                    std::to_string(dense->in) + "], got " +
                                    cur->shape.to_string());
      const FxLayerParams& p = fxm.params.at(l.id);
      if (lq.acc_frac != p.weights.q.frac_bits + cur->q.frac_bits)
        throw std::invalid_argument(
            "quant plan: acc_frac inconsistent at layer " + std::to_string(l.id));
      out = *cur;
      out.shape = Shape4{cur->shape.n, 1, 1, dense->in};
      out = fx_conv2d_naive(out, p.weights, p.bias_raw, p.bias_q, 1,
                            Padding::Valid, Activation::None, lq.act_q,
                            &res.saturation_count);
    } else {  // Softmax
      saw_softmax = true;
      res.logit_raw = cur->raw;
      res.logit_q = cur->q;
      res.logits.resize(cur->raw.size());
      for (size_t k = 0; k < cur->raw.size(); ++k)
        res.logits[k] = dequantize(cur->raw[k], cur->q);
      res.probabilities = softmax_ref_d(res.logits);
      out = *cur;  // placeholder; probabilities live in the result
    }
    outputs.push_back(std::move(out));
    cur = &outputs.back();
  }

  if (!saw_softmax)
    throw std::invalid_argument("fx forward: model has no softmax layer");
  res.class_id = argmax_lowest(res.probabilities);
  res.confidence = res.probabilities[size_t(res.class_id)];
  return res;
}

ParityReport parity_report(const ModelGraph& model, const FxModel& fxm,
                           const std::vector<Tensor>& images) {
  if (images.empty()) throw DataError("parity_report: empty image set");

  ParityReport rep;
  rep.saturation_count = fxm.saturation_count;
  long long matches = 0;
  double err_sum = 0.0;
  long long err_n = 0;

  for (const Tensor& img : images) {
    const ForwardResult fr = forward_ref(model, img);
    const FxForwardResult xr = fx_forward_naive(fxm, img);
    if (fr.class_id == xr.class_id) ++matches;
    rep.saturation_count += xr.saturation_count;
    for (size_t i = 0; i < fr.logits.size() && i < xr.logits.size(); ++i) {
      const double e = std::abs(double(fr.logits[i]) - xr.logits[i]);
      err_sum += e;
      rep.max_abs_logit_err = std::max(rep.max_abs_logit_err, e);
      ++err_n;
    }
  }
  rep.top1_match_rate = double(matches) / double(images.size());
  rep.mean_abs_logit_err = err_n ? err_sum / double(err_n) : 0.0;
  return rep;
}

}  // namespace railnet
