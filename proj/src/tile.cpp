#include "railnet/tile.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "railnet/errors.hpp"

namespace railnet {

using json = nlohmann::json;

int bytes_per_element(int total_bits) {
  if (total_bits < 1 || total_bits > 32)
    throw std::invalid_argument("bytes_per_element: width out of range");
  if (total_bits <= 8) return 1;
  if (total_bits <= 16) return 2;
  return 4;
}

long long footprint_bytes(int kh, int kw, int stride, const TileConfig& cfg,
                          int weight_bytes, int act_bytes) {
  if (cfg.t_oc < 1 || cfg.t_ic < 1 || cfg.t_oh < 1 || cfg.t_ow < 1)
    throw std::invalid_argument("footprint: tile sizes must be >= 1");
  const long long weights = 1ll * kh * kw * cfg.t_ic * cfg.t_oc * weight_bytes;
  const long long input = 1ll * (cfg.t_oh * stride + kh - 1) *
                          (cfg.t_ow * stride + kw - 1) * cfg.t_ic * act_bytes;
  const long long output = 1ll * cfg.t_oh * cfg.t_ow * cfg.t_oc * 4;
  const long long bias = 1ll * cfg.t_oc * 4;
  return weights + input + output + bias;
}

namespace {

// Everything the buffer model needs to know about one conv/dense layer.
struct LayerGeom {
  int id = 0;
  int kh = 1, kw = 1, stride = 1;
  int oc = 1, ic = 1, oh = 1, ow = 1;
  int weight_bytes = 2;
  int act_bytes = 2;  // input activations
};

std::vector<LayerGeom> layer_geometries(const ModelGraph& model,
                                        const QuantPlan& qplan) {
  const std::vector<Shape4> shapes = infer_shapes(model);
  std::vector<LayerGeom> out;
  QFormat cur = qplan.input_q;
  Shape4 cur_shape = model.input_shape;

  for (size_t i = 0; i < model.layers.size(); ++i) {
    const Layer& l = model.layers[i];
    const LayerQ& lq = qplan.at(l.id);
    if (const auto* conv = std::get_if<Conv2D>(&l.op)) {
      LayerGeom g;
      g.id = l.id;
      g.kh = conv->kh;
      g.kw = conv->kw;
      g.stride = conv->stride;
      g.oc = conv->out_ch;
      g.ic = conv->in_ch();
      g.oh = shapes[i].h;
      g.ow = shapes[i].w;
      g.weight_bytes = bytes_per_element(lq.weight_q.total_bits);
      g.act_bytes = bytes_per_element(cur.total_bits);
      out.push_back(g);
    } else if (const auto* dense = std::get_if<Dense>(&l.op)) {
      LayerGeom g;
      g.id = l.id;
      g.oc = dense->out;
      g.ic = dense->in;
      g.weight_bytes = bytes_per_element(lq.weight_q.total_bits);
      g.act_bytes = bytes_per_element(cur.total_bits);
      out.push_back(g);
    }
    cur = lq.act_q;
    cur_shape = shapes[i];
  }
  (void)cur_shape;
  return out;
}

}  // namespace

std::vector<TilingViolation> validate_tiling(const ModelGraph& model,
                                             const QuantPlan& qplan,
                                             const TilePlan& tplan) {
  std::vector<TilingViolation> violations;
  for (const LayerGeom& g : layer_geometries(model, qplan)) {
    auto it = tplan.layers.find(g.id);
    if (it == tplan.layers.end())
      throw DataError("tile plan: no config for layer " + std::to_string(g.id));
    const long long fp = footprint_bytes(g.kh, g.kw, g.stride, it->second,
                                         g.weight_bytes, g.act_bytes);
    if (fp > tplan.budget_bytes)
      violations.push_back({g.id, fp, tplan.budget_bytes});
  }
  return violations;
}

TilePlan search_tilings(const ModelGraph& model, const QuantPlan& qplan,
                        long long budget_bytes) {
  TilePlan plan;
  plan.budget_bytes = budget_bytes;

  for (const LayerGeom& g : layer_geometries(model, qplan)) {
    bool found = false;
    TileConfig best;
    long long best_vol = -1;

    const auto key = [](const TileConfig& c) {
      return std::array<int, 3>{c.t_oc, c.t_oh, c.t_ow};
    };
    for (int t_oc = 1; t_oc <= g.oc; ++t_oc)
      for (int t_oh = 1; t_oh <= g.oh; ++t_oh)
        for (int t_ow = 1; t_ow <= g.ow; ++t_ow) {
          // footprint = a*t_ic + b; take the largest t_ic that still fits.
          const long long a =
              1ll * g.kh * g.kw * t_oc * g.weight_bytes +
              1ll * (t_oh * g.stride + g.kh - 1) * (t_ow * g.stride + g.kw - 1) *
                  g.act_bytes;
          const long long b = 1ll * t_oh * t_ow * t_oc * 4 + 1ll * t_oc * 4;
          const long long t_ic_max = (budget_bytes - b) / a;
          if (t_ic_max < 1) continue;
          const TileConfig cand{t_oc, int(std::min<long long>(t_ic_max, g.ic)),
                                t_oh, t_ow};
          const long long vol = 1ll * t_oc * t_oh * t_ow;
          if (!found || vol > best_vol ||
              (vol == best_vol && (cand.t_ic > best.t_ic ||
                                   (cand.t_ic == best.t_ic &&
                                    key(cand) > key(best))))) {
            best = cand;
            best_vol = vol;
            found = true;
          }
        }
    if (!found)
      throw DataError("tiling search: no tile of layer " + std::to_string(g.id) +
                      " fits in " + std::to_string(budget_bytes) + " bytes");
    plan.layers[g.id] = best;
  }
  return plan;
}

long long mac_count(const ModelGraph& model) {
  const std::vector<Shape4> shapes = infer_shapes(model);
  long long total = 0;
  for (size_t i = 0; i < model.layers.size(); ++i) {
    const Layer& l = model.layers[i];
    if (const auto* conv = std::get_if<Conv2D>(&l.op)) {
      total += 1ll * shapes[i].n * shapes[i].h * shapes[i].w * conv->out_ch *
               conv->in_ch() * conv->kh * conv->kw;
    } else if (const auto* dense = std::get_if<Dense>(&l.op)) {
      total += 1ll * dense->in * dense->out;
    }
  }
  return total;
}

// ---------------------------------------------------------------------------
// Tiled conv kernel
// ---------------------------------------------------------------------------

FxTensor fx_conv2d_tiled(const FxTensor& input, const FxTensor& weights,
                         const std::vector<int32_t>& bias_raw,
                         const QFormat& bias_q, int stride, Padding pad,
                         Activation act, const QFormat& out_q,
                         const TileConfig& cfg, PerfCounters& pc,
                         long long* saturations) {
  const Shape4& is = input.shape;
  const int kh = weights.shape.n, kw = weights.shape.h;
  const int ic_n = weights.shape.w, oc_n = weights.shape.c;
  if (is.c != ic_n)
    throw std::invalid_argument("tiled conv: input channels mismatch");
  if (int(bias_raw.size()) != oc_n)
    throw std::invalid_argument("tiled conv: bias size mismatch");
  if (cfg.t_oc < 1 || cfg.t_ic < 1 || cfg.t_oh < 1 || cfg.t_ow < 1)
    throw std::invalid_argument("tiled conv: tile sizes must be >= 1");

  const int acc_frac = weights.q.frac_bits + input.q.frac_bits;
  const ConvAxis ah = conv_axis(is.h, kh, stride, pad);
  const ConvAxis aw = conv_axis(is.w, kw, stride, pad);
  const int act_bytes = bytes_per_element(input.q.total_bits);
  const int weight_bytes = bytes_per_element(weights.q.total_bits);

  const int t_oc = std::min(cfg.t_oc, oc_n);
  const int t_ic = std::min(cfg.t_ic, ic_n);
  const int t_oh = std::min(cfg.t_oh, ah.out);
  const int t_ow = std::min(cfg.t_ow, aw.out);

  // Weights rearranged once to [oc][kh][kw][ic] so the reduction over ic is
  // contiguous on both operands.
  std::vector<int32_t> wt(size_t(oc_n) * kh * kw * ic_n);
  for (int y = 0; y < kh; ++y)
    for (int x = 0; x < kw; ++x)
      for (int ic = 0; ic < ic_n; ++ic)
        for (int oc = 0; oc < oc_n; ++oc)
          wt[((size_t(oc) * kh + y) * kw + x) * ic_n + ic] =
              weights.at(y, x, ic, oc);

  std::vector<int64_t> bias_acc(static_cast<size_t>(oc_n), 0);
  int64_t bias_bound = 0;
  for (int oc = 0; oc < oc_n; ++oc) {
    const int d = acc_frac - bias_q.frac_bits;
    bias_acc[size_t(oc)] = d >= 0 ? (int64_t(bias_raw[size_t(oc)]) << d)
                                  : round_shift_right(bias_raw[size_t(oc)], -d);
    bias_bound = std::max(bias_bound, std::abs(bias_acc[size_t(oc)]));
  }
  const double term_bound = std::ldexp(1.0, input.q.total_bits - 1) *
                            std::ldexp(1.0, weights.q.total_bits - 1);
  const bool fast =
      double(1ll * kh * kw * ic_n) * term_bound + double(bias_bound) <
      std::ldexp(1.0, 62);

  FxTensor out(Shape4{is.n, ah.out, aw.out, oc_n}, out_q);
  std::vector<int64_t> part;
  long long sat_count = 0;

  for (int oc0 = 0; oc0 < oc_n; oc0 += t_oc) {
    const int toc = std::min(t_oc, oc_n - oc0);
    for (int oh0 = 0; oh0 < ah.out; oh0 += t_oh) {
      const int toh = std::min(t_oh, ah.out - oh0);
      for (int ow0 = 0; ow0 < aw.out; ow0 += t_ow) {
        const int tow = std::min(t_ow, aw.out - ow0);

        part.assign(size_t(is.n) * toh * tow * toc, 0);
        const int ih_n = (toh - 1) * stride + kh;
        const int iw_n = (tow - 1) * stride + kw;
        const int ih0 = oh0 * stride - ah.pad_begin;
        const int iw0 = ow0 * stride - aw.pad_begin;

        for (int ic0 = 0; ic0 < ic_n; ic0 += t_ic) {
          const int tic = std::min(t_ic, ic_n - ic0);
          const FxTensor tile =
              extract_tile(input, {ih0, iw0, ic0}, {ih_n, iw_n, tic}, true);

          ++pc.tiles_executed;
          pc.macs += 1ll * is.n * toh * tow * toc * tic * kh * kw;
          pc.bytes_loaded += 1ll * kh * kw * tic * toc * weight_bytes +
                             1ll * is.n * ih_n * iw_n * tic * act_bytes;

          for (int nb = 0; nb < is.n; ++nb)
            for (int yo = 0; yo < toh; ++yo)
              for (int xo = 0; xo < tow; ++xo) {
                int64_t* prow = &part[((size_t(nb) * toh + yo) * tow + xo) * toc];
                for (int oc_i = 0; oc_i < toc; ++oc_i) {
                  int64_t acc = prow[oc_i];
                  const int32_t* wbase =
                      &wt[(size_t(oc0) + oc_i) * kh * kw * ic_n + ic0];
                  for (int y = 0; y < kh; ++y)
                    for (int x = 0; x < kw; ++x) {
                      const int32_t* trow =
                          &tile.raw[((size_t(nb) * ih_n + yo * stride + y) * iw_n +
                                     (xo * stride + x)) *
                                    tic];
                      const int32_t* wrow = wbase + (size_t(y) * kw + x) * ic_n;
                      if (fast) {
                        for (int ic = 0; ic < tic; ++ic)
                          acc += int64_t(trow[ic]) * int64_t(wrow[ic]);
                      } else {
                        for (int ic = 0; ic < tic; ++ic) {
                          int64_t prod;
                          if (__builtin_mul_overflow(int64_t(trow[ic]),
                                                     int64_t(wrow[ic]), &prod) ||
                              __builtin_add_overflow(acc, prod, &acc))
                            throw std::overflow_error(
                                "tiled conv: accumulator overflow");
                        }
                      }
                    }
                  prow[oc_i] = acc;
                }
              }
        }

        // Full input-channel reduction done: bias, one requantization, store.
        pc.bytes_loaded += 1ll * toc * 4;
        for (int nb = 0; nb < is.n; ++nb)
          for (int yo = 0; yo < toh; ++yo)
            for (int xo = 0; xo < tow; ++xo)
              for (int oc_i = 0; oc_i < toc; ++oc_i) {
                int64_t acc = part[((size_t(nb) * toh + yo) * tow + xo) * toc + oc_i];
                int64_t sum;
                if (__builtin_add_overflow(acc, bias_acc[size_t(oc0 + oc_i)], &sum))
                  throw std::overflow_error("tiled conv: accumulator overflow");
                // ReLU on the accumulator, as in fx_conv2d_naive: identical
                // output, and negative overshoot is not counted as saturation.
                if (act == Activation::Relu && sum < 0) sum = 0;
                bool sat = false;
                int32_t v = rescale_raw(sum, acc_frac, out_q, &sat);
                if (sat) ++sat_count;
                out.at(nb, oh0 + yo, ow0 + xo, oc0 + oc_i) = v;
              }
        pc.bytes_stored +=
            1ll * is.n * toh * tow * toc * bytes_per_element(out_q.total_bits);
      }
    }
  }

  if (saturations) *saturations += sat_count;
  return out;
}

// ---------------------------------------------------------------------------
// Tiled model executor
// ---------------------------------------------------------------------------

TiledResult run_tiled(const FxModel& fxm, const Tensor& image,
                      const TilePlan& tplan) {
  const ModelGraph& g = fxm.graph;
  g.validate();
  if (!(image.shape == g.input_shape))
    throw std::invalid_argument("run_tiled: input shape " +
                                image.shape.to_string() + " != model input " +
                                g.input_shape.to_string());

  const std::vector<TilingViolation> bad = validate_tiling(g, fxm.plan, tplan);
  if (!bad.empty())
    throw DataError("tile plan exceeds budget at layer " +
                    std::to_string(bad.front().id) + " (" +
                    std::to_string(bad.front().footprint) + " > " +
                    std::to_string(bad.front().budget) + " bytes)");

  TiledResult res;

  FxTensor input_fx(image.shape, fxm.plan.input_q);
  for (size_t i = 0; i < image.data.size(); ++i) {
    bool sat = false;
    input_fx.raw[i] = quantize(double(image.data[i]), fxm.plan.input_q, &sat);
    if (sat) ++res.fx.saturation_count;
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
      out = fx_conv2d_tiled(*cur, p.weights, p.bias_raw, p.bias_q, conv->stride,
                            conv->pad, conv->activation, lq.act_q,
                            tplan.layers.at(l.id), res.counters,
                            &res.fx.saturation_count);
    } else if (std::holds_alternative<BatchNorm>(l.op)) {
      throw DataError("fixed-point execution requires a fused model (layer " +
                      std::to_string(l.id) + " is batchnorm)");
    } else if (std::holds_alternative<Relu>(l.op)) {
      out = fx_relu(*cur);
    } else if (const auto* mp = std::get_if<MaxPool>(&l.op)) {
      out = fx_maxpool(*cur, *mp);
    } else if (const auto* add = std::get_if<ResidualAdd>(&l.op)) {
      const FxTensor& src = outputs[size_t(g.index_of(add->source))];
      out = fx_residual_add(*cur, src, lq.act_q, &res.fx.saturation_count);
    } else if (std::holds_alternative<GlobalAvgPool>(l.op)) {
      out = fx_global_avg_pool(*cur);
    } else if (const auto* dense = std::get_if<Dense>(&l.op)) {
      if (cur->shape.h != 1 || cur->shape.w != 1 || cur->shape.c != dense->in)
        throw std::invalid_argument("run_tiled: dense expects [n,1,1," +
                                    std::to_string(dense->in) + "], got " +
                                    cur->shape.to_string());
      const FxLayerParams& p = fxm.params.at(l.id);
      if (lq.acc_frac != p.weights.q.frac_bits + cur->q.frac_bits)
        throw std::invalid_argument(
            "quant plan: acc_frac inconsistent at layer " + std::to_string(l.id));
      out = *cur;
      out.shape = Shape4{cur->shape.n, 1, 1, dense->in};
      out = fx_conv2d_tiled(out, p.weights, p.bias_raw, p.bias_q, 1,
                            Padding::Valid, Activation::None, lq.act_q,
                            tplan.layers.at(l.id), res.counters,
                            &res.fx.saturation_count);
    } else {  // Softmax
      saw_softmax = true;
      res.fx.logit_raw = cur->raw;
      res.fx.logit_q = cur->q;
      res.fx.logits.resize(cur->raw.size());
      for (size_t k = 0; k < cur->raw.size(); ++k)
        res.fx.logits[k] = dequantize(cur->raw[k], cur->q);
      res.fx.probabilities = softmax_ref_d(res.fx.logits);
      out = *cur;
    }
    outputs.push_back(std::move(out));
    cur = &outputs.back();
  }

  if (!saw_softmax)
    throw std::invalid_argument("run_tiled: model has no softmax layer");
  res.fx.class_id = argmax_lowest(res.fx.probabilities);
  res.fx.confidence = res.fx.probabilities[size_t(res.fx.class_id)];
  return res;
}

// ---------------------------------------------------------------------------
// Tile plan serialization
// ---------------------------------------------------------------------------

void save_tile_plan(const TilePlan& plan, const std::string& path) {
  json j;
  j["format"] = "tplan";
  j["version"] = 1;
  j["budget_bytes"] = plan.budget_bytes;
  json layers = json::array();
  for (const auto& [id, cfg] : plan.layers) {
    layers.push_back(json{{"id", id},
                          {"t_oc", cfg.t_oc},
                          {"t_ic", cfg.t_ic},
                          {"t_oh", cfg.t_oh},
                          {"t_ow", cfg.t_ow}});
  }
  j["layers"] = std::move(layers);

  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot write tile plan: " + path);
  f << j.dump(2) << '\n';
  if (!f) throw DataError("short write to tile plan: " + path);
}

TilePlan load_tile_plan(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open tile plan: " + path);
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw DataError(std::string("tile plan: malformed JSON: ") + e.what());
  }
  if (j.value("format", "") != "tplan")
    throw DataError("tile plan: not a tplan file");
  if (j.value("version", -1) != 1)
    throw DataError("tile plan: unsupported version");
  if (!j.contains("budget_bytes") || !j["budget_bytes"].is_number_integer())
    throw DataError("tile plan: missing budget_bytes");
  if (!j.contains("layers") || !j["layers"].is_array())
    throw DataError("tile plan: missing layers");

  TilePlan plan;
  plan.budget_bytes = j["budget_bytes"].get<long long>();
  for (const json& e : j["layers"]) {
    for (const char* k : {"id", "t_oc", "t_ic", "t_oh", "t_ow"})
      if (!e.contains(k) || !e[k].is_number_integer())
        throw DataError(std::string("tile plan: layer entry missing '") + k + "'");
    TileConfig cfg{e["t_oc"].get<int>(), e["t_ic"].get<int>(),
                   e["t_oh"].get<int>(), e["t_ow"].get<int>()};
    if (cfg.t_oc < 1 || cfg.t_ic < 1 || cfg.t_oh < 1 || cfg.t_ow < 1)
      throw DataError("tile plan: tile sizes must be >= 1");
    plan.layers[e["id"].get<int>()] = cfg;
  }
  return plan;
}

}  // namespace railnet
