#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <zlib.h>

#include <json.hpp>

#include "railnet/errors.hpp"
#include "railnet/model.hpp"

namespace railnet {

using json = nlohmann::json;

namespace {

constexpr int kRnetVersion = 1;

void put_f32_le(std::vector<uint8_t>& out, float v) {
  uint32_t u = std::bit_cast<uint32_t>(v);
  out.push_back(uint8_t(u & 0xff));
  out.push_back(uint8_t((u >> 8) & 0xff));
  out.push_back(uint8_t((u >> 16) & 0xff));
  out.push_back(uint8_t((u >> 24) & 0xff));
}

void put_u32_le(std::vector<uint8_t>& out, uint32_t u) {
  out.push_back(uint8_t(u & 0xff));
  out.push_back(uint8_t((u >> 8) & 0xff));
  out.push_back(uint8_t((u >> 16) & 0xff));
  out.push_back(uint8_t((u >> 24) & 0xff));
}

class BlobReader {
 public:
  BlobReader(const uint8_t* p, size_t n) : p_(p), n_(n) {}

  float f32() {
    if (pos_ + 4 > n_) throw DataError("model file: weight blob truncated");
    uint32_t u = uint32_t(p_[pos_]) | (uint32_t(p_[pos_ + 1]) << 8) |
                 (uint32_t(p_[pos_ + 2]) << 16) | (uint32_t(p_[pos_ + 3]) << 24);
    pos_ += 4;
    return std::bit_cast<float>(u);
  }
  void fill(std::vector<float>& v) {
    for (float& x : v) x = f32();
  }
  size_t remaining() const { return n_ - pos_; }

 private:
  const uint8_t* p_;
  size_t n_;
  size_t pos_ = 0;
};

json layer_to_json(const Layer& l) {
  json j;
  j["id"] = l.id;
  j["kind"] = layer_kind_name(l.op);
  if (const auto* conv = std::get_if<Conv2D>(&l.op)) {
    j["out_ch"] = conv->out_ch;
    j["in_ch"] = conv->in_ch();
    j["kh"] = conv->kh;
    j["kw"] = conv->kw;
    j["stride"] = conv->stride;
    j["pad"] = conv->pad == Padding::Same ? "same" : "valid";
    j["activation"] = conv->activation == Activation::Relu ? "relu" : "none";
  } else if (const auto* bn = std::get_if<BatchNorm>(&l.op)) {
    j["channels"] = bn->gamma.size();
    j["eps"] = bn->eps;
  } else if (const auto* mp = std::get_if<MaxPool>(&l.op)) {
    j["size"] = mp->size;
    j["stride"] = mp->stride;
  } else if (const auto* add = std::get_if<ResidualAdd>(&l.op)) {
    j["source"] = add->source;
  } else if (const auto* dense = std::get_if<Dense>(&l.op)) {
    j["in"] = dense->in;
    j["out"] = dense->out;
  }
  return j;
}

void append_params(const Layer& l, std::vector<uint8_t>& blob) {
  if (const auto* conv = std::get_if<Conv2D>(&l.op)) {
    for (float v : conv->weights.data) put_f32_le(blob, v);
    for (float v : conv->bias) put_f32_le(blob, v);
  } else if (const auto* bn = std::get_if<BatchNorm>(&l.op)) {
    for (float v : bn->gamma) put_f32_le(blob, v);
    for (float v : bn->beta) put_f32_le(blob, v);
    for (float v : bn->mean) put_f32_le(blob, v);
    for (float v : bn->var) put_f32_le(blob, v);
  } else if (const auto* dense = std::get_if<Dense>(&l.op)) {
    for (float v : dense->weights) put_f32_le(blob, v);
    for (float v : dense->bias) put_f32_le(blob, v);
  }
}

int get_int(const json& j, const char* key) {
  if (!j.contains(key) || !j[key].is_number_integer())
    throw DataError(std::string("model file: missing integer field '") + key + "'");
  return j[key].get<int>();
}

LayerOp layer_from_json(const json& j, BlobReader& blob) {
  if (!j.contains("kind") || !j["kind"].is_string())
    throw DataError("model file: layer without 'kind'");
  const std::string kind = j["kind"].get<std::string>();

  if (kind == "conv2d") {
    Conv2D c;
    c.out_ch = get_int(j, "out_ch");
    const int in_ch = get_int(j, "in_ch");
    c.kh = get_int(j, "kh");
    c.kw = get_int(j, "kw");
    c.stride = get_int(j, "stride");
    if (c.out_ch < 1 || in_ch < 1 || c.kh < 1 || c.kw < 1 || c.stride < 1)
      throw DataError("model file: conv2d with non-positive geometry");
    const std::string pad = j.value("pad", "same");
    if (pad == "same")
      c.pad = Padding::Same;
    else if (pad == "valid")
      c.pad = Padding::Valid;
    else
      throw DataError("model file: unknown padding '" + pad + "'");
    const std::string act = j.value("activation", "none");
    if (act == "relu")
      c.activation = Activation::Relu;
    else if (act == "none")
      c.activation = Activation::None;
    else
      throw DataError("model file: unknown activation '" + act + "'");
    c.weights = Tensor(Shape4{c.kh, c.kw, in_ch, c.out_ch});
    blob.fill(c.weights.data);
    c.bias.resize(size_t(c.out_ch));
    blob.fill(c.bias);
    return c;
  }
  if (kind == "batchnorm") {
    BatchNorm b;
    const int ch = get_int(j, "channels");
    if (ch < 1) throw DataError("model file: batchnorm with no channels");
    b.gamma.resize(size_t(ch));
    b.beta.resize(size_t(ch));
    b.mean.resize(size_t(ch));
    b.var.resize(size_t(ch));
    blob.fill(b.gamma);
    blob.fill(b.beta);
    blob.fill(b.mean);
    blob.fill(b.var);
    if (!j.contains("eps") || !j["eps"].is_number())
      throw DataError("model file: batchnorm without eps");
    b.eps = j["eps"].get<float>();
    return b;
  }
  if (kind == "relu") return Relu{};
  if (kind == "maxpool") {
    MaxPool m;
    m.size = get_int(j, "size");
    m.stride = get_int(j, "stride");
    if (m.size < 1 || m.stride < 1)
      throw DataError("model file: maxpool with non-positive geometry");
    return m;
  }
  if (kind == "residual_add") return ResidualAdd{get_int(j, "source")};
  if (kind == "global_avg_pool") return GlobalAvgPool{};
  if (kind == "dense") {
    Dense d;
    d.in = get_int(j, "in");
    d.out = get_int(j, "out");
    if (d.in < 1 || d.out < 1)
      throw DataError("model file: dense with non-positive geometry");
    d.weights.resize(size_t(d.in) * size_t(d.out));
    blob.fill(d.weights);
    d.bias.resize(size_t(d.out));
    blob.fill(d.bias);
    return d;
  }
  if (kind == "softmax") return Softmax{};
  throw DataError("model file: unknown layer kind '" + kind + "'");
}

}  // namespace

void save_model(const ModelGraph& model, const std::string& path) {
  model.validate();

  json header;
  header["format"] = "rnet";
  header["version"] = kRnetVersion;
  header["input_shape"] = {model.input_shape.n, model.input_shape.h,
                           model.input_shape.w, model.input_shape.c};
  header["class_names"] = model.class_names;
  json layers = json::array();
  for (const Layer& l : model.layers) layers.push_back(layer_to_json(l));
  header["layers"] = std::move(layers);

  std::vector<uint8_t> blob;
  for (const Layer& l : model.layers) append_params(l, blob);
  const uint32_t crc =
      uint32_t(crc32(0, blob.empty() ? Z_NULL : blob.data(), uInt(blob.size())));
  put_u32_le(blob, crc);

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write model file: " + path);
  const std::string head = header.dump();
  f.write(head.data(), std::streamsize(head.size()));
  f.put('\n');
  f.write(reinterpret_cast<const char*>(blob.data()), std::streamsize(blob.size()));
  if (!f) throw DataError("short write to model file: " + path);
}

ModelGraph load_model(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open model file: " + path);

  std::string head;
  if (!std::getline(f, head))
    throw DataError("model file: missing header line");
  json header;
  try {
    header = json::parse(head);
  } catch (const json::parse_error& e) {
    throw DataError(std::string("model file: malformed header: ") + e.what());
  }
  if (header.value("format", "") != "rnet")
    throw DataError("model file: not an rnet file");
  if (!header.contains("version") || !header["version"].is_number_integer())
    throw DataError("model file: missing version");
  if (header["version"].get<int>() != kRnetVersion)
    throw DataError("model file: unsupported version " +
                    header["version"].dump());

  std::vector<uint8_t> body((std::istreambuf_iterator<char>(f)),
                            std::istreambuf_iterator<char>());
  if (body.size() < 4) throw DataError("model file: weight blob truncated");
  const size_t blob_len = body.size() - 4;
  uint32_t stored = uint32_t(body[blob_len]) | (uint32_t(body[blob_len + 1]) << 8) |
                    (uint32_t(body[blob_len + 2]) << 16) |
                    (uint32_t(body[blob_len + 3]) << 24);
  const uint32_t actual =
      uint32_t(crc32(0, blob_len ? body.data() : Z_NULL, uInt(blob_len)));
  if (stored != actual)
    throw DataError("model file: weight blob checksum mismatch");

  ModelGraph m;
  if (!header.contains("input_shape") || !header["input_shape"].is_array() ||
      header["input_shape"].size() != 4)
    throw DataError("model file: bad input_shape");
  m.input_shape = Shape4{header["input_shape"][0].get<int>(),
                         header["input_shape"][1].get<int>(),
                         header["input_shape"][2].get<int>(),
                         header["input_shape"][3].get<int>()};
  if (header.contains("class_names"))
    m.class_names = header["class_names"].get<std::vector<std::string>>();

  if (!header.contains("layers") || !header["layers"].is_array())
    throw DataError("model file: missing layers array");
  BlobReader blob(body.data(), blob_len);
  for (const json& jl : header["layers"]) {
    Layer l;
    l.id = get_int(jl, "id");
    l.op = layer_from_json(jl, blob);
    m.layers.push_back(std::move(l));
  }
  if (blob.remaining() != 0)
    throw DataError("model file: " + std::to_string(blob.remaining()) +
                    " trailing bytes in weight blob");
  try {
    m.validate();
  } catch (const std::invalid_argument& e) {
    throw DataError(std::string("model file: ") + e.what());
  }
  return m;
}

}  // namespace railnet
