#include "railnet/fuse.hpp"

#include <cmath>
#include <set>
#include <stdexcept>
#include <unordered_map>

namespace railnet {

Conv2D fold_bn_into_conv(const Conv2D& conv, const BatchNorm& bn) {
  if (bn.gamma.size() != size_t(conv.out_ch))
    throw std::invalid_argument("fold: batchnorm channels " +
                                std::to_string(bn.gamma.size()) +
                                " != conv out_ch " + std::to_string(conv.out_ch));
  Conv2D out = conv;
  const int oc_n = conv.out_ch;
  std::vector<double> scale(static_cast<size_t>(oc_n), 0.0);
  for (int c = 0; c < oc_n; ++c) {
    const double ve = double(bn.var[size_t(c)]) + double(bn.eps);
    if (ve <= 0.0)
      throw std::invalid_argument("fold: var + eps <= 0 at channel " +
                                  std::to_string(c));
    scale[size_t(c)] = double(bn.gamma[size_t(c)]) / std::sqrt(ve);
  }
  // out_ch is the fastest weight axis, so scale cycles over the flat data.
  for (size_t i = 0; i < out.weights.data.size(); ++i)
    out.weights.data[i] = float(double(out.weights.data[i]) * scale[i % size_t(oc_n)]);
  for (int c = 0; c < oc_n; ++c)
    out.bias[size_t(c)] =
        float((double(conv.bias[size_t(c)]) - double(bn.mean[size_t(c)])) *
                  scale[size_t(c)] +
              double(bn.beta[size_t(c)]));
  return out;
}

ModelGraph fuse_pass(const ModelGraph& model) {
  model.validate();

  std::set<int> taps;
  for (const Layer& l : model.layers)
    if (const auto* add = std::get_if<ResidualAdd>(&l.op))
      taps.insert(add->source);

  ModelGraph out;
  out.input_shape = model.input_shape;
  out.class_names = model.class_names;
  std::unordered_map<int, int> remap;  // removed id -> absorbing conv id

  size_t i = 0;
  while (i < model.layers.size()) {
    const Layer& l = model.layers[i];
    const auto* conv = std::get_if<Conv2D>(&l.op);
    if (conv == nullptr || conv->activation != Activation::None ||
        taps.count(l.id)) {
      Layer copy = l;
      if (auto* add = std::get_if<ResidualAdd>(&copy.op)) {
        auto it = remap.find(add->source);
        if (it != remap.end()) add->source = it->second;
      }
      out.layers.push_back(std::move(copy));
      ++i;
      continue;
    }

    Conv2D fused = *conv;
    size_t next = i + 1;
    int pre_relu_id = l.id;  // id whose value a ReLU absorption would change

    if (next < model.layers.size()) {
      if (const auto* bn = std::get_if<BatchNorm>(&model.layers[next].op)) {
        fused = fold_bn_into_conv(fused, *bn);
        remap[model.layers[next].id] = l.id;
        pre_relu_id = model.layers[next].id;
        ++next;
      }
    }
    if (next < model.layers.size() &&
        std::holds_alternative<Relu>(model.layers[next].op) &&
        !taps.count(pre_relu_id)) {
      fused.activation = Activation::Relu;
      remap[model.layers[next].id] = l.id;
      ++next;
    }

    out.layers.push_back(Layer{l.id, std::move(fused)});
    i = next;
  }

  out.validate();
  return out;
}

}  // namespace railnet
