#include "treenet/model.hpp"

#include <cstring>
#include <fstream>
#include <set>

#include "treenet/byteio.hpp"

namespace treenet {

void ModelConfig::validate() const {
  const std::pair<const char*, int64_t> fields[] = {{"channels", channels},
                                                    {"latent_channels", latent_channels},
                                                    {"hyper_channels", hyper_channels},
                                                    {"aff_reduction", aff_reduction},
                                                    {"context_kernel", context_kernel}};
  for (const auto& [name, v] : fields) {
    if (v <= 0) throw Error(std::string("ModelConfig: ") + name + " must be positive");
  }
  if (channels % aff_reduction != 0 || latent_channels % aff_reduction != 0) {
    throw Error("ModelConfig: channels and latent_channels must be divisible by aff_reduction");
  }
  if (context_kernel % 2 == 0) throw Error("ModelConfig: context_kernel must be odd");
  if (hyper_channels % 2 != 0) throw Error("ModelConfig: hyper_channels must be even");
}

uint8_t ModelConfig::id() const {
  uint32_t h = 2166136261u;
  for (int64_t v : {channels, latent_channels, hyper_channels, aff_reduction, context_kernel}) {
    for (int b = 0; b < 8; ++b) {
      h ^= static_cast<uint8_t>(static_cast<uint64_t>(v) >> (8 * b));
      h *= 16777619u;
    }
  }
  return static_cast<uint8_t>(h ^ (h >> 8) ^ (h >> 16) ^ (h >> 24));
}

template <typename T>
LatentSet<T> LatentSet<T>::full(std::array<Tensor<T>, kNumLatents> ys) {
  LatentSet s;
  s.y = std::move(ys);
  s.present.fill(true);
  return s;
}

template <typename T>
Shape LatentSet<T>::shape() const {
  std::optional<Shape> shape;
  for (int i = 0; i < kNumLatents; ++i) {
    if (!present[i]) continue;
    if (shape && !(*shape == y[i].shape())) {
      throw ShapeError("LatentSet: slot shapes differ (" + shape->str() + " vs " +
                       y[i].shape().str() + ")");
    }
    shape = y[i].shape();
  }
  if (!shape) throw Error("synthesis_forward: all four latent slots are absent");
  return *shape;
}

// ---------------------------------------------------------------------------

template <typename T>
AnalysisTree<T>::AnalysisTree(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  for (int i = 0; i < kTreeNodes; ++i) {
    const int64_t cin = i == 0 ? 3 : cfg.channels;
    const int64_t cout = is_leaf(i) ? cfg.latent_channels : cfg.channels;
    char name[32];
    std::snprintf(name, sizeof name, "ga.node%02d", i);
    nodes.emplace_back(name, cin, cout, rng);
  }
  for (int k = 0; k < kNumLatents; ++k) {
    fusions.emplace_back("ga.aff" + std::to_string(k), cfg.latent_channels, cfg.aff_reduction, rng);
  }
}

template <typename T>
int AnalysisTree<T>::depth(int node) {
  int d = 0;
  while (node > 0) {
    node = parent(node);
    ++d;
  }
  return d;
}

template <typename T>
std::array<Var<T>, kTreeLeaves> AnalysisTree<T>::leaves(const Var<T>& x) const {
  const Shape s = x.shape();
  if (s.c != 3) throw ShapeError("analysis_forward: expected 3 input channels, got " + s.str());
  std::vector<Var<T>> out(kTreeNodes);
  for (int i = 0; i < kTreeNodes; ++i) {
    out[i] = nodes[i].forward(i == 0 ? x : out[parent(i)]);
  }
  std::array<Var<T>, kTreeLeaves> result;
  for (int k = 0; k < kTreeLeaves; ++k) result[k] = out[kTreeNodes - kTreeLeaves + k];
  return result;
}

template <typename T>
std::array<Var<T>, kNumLatents> AnalysisTree<T>::forward(const Var<T>& x) const {
  const auto leaf = leaves(x);
  std::array<Var<T>, kNumLatents> y;
  for (int k = 0; k < kNumLatents; ++k) y[k] = fusions[k].forward(leaf[2 * k], leaf[2 * k + 1]);
  return y;
}

template <typename T>
MacCount AnalysisTree<T>::count(const Shape& image) const {
  std::vector<Shape> out(kTreeNodes);
  MacCount total;
  for (int i = 0; i < kTreeNodes; ++i) {
    const Shape in = i == 0 ? image : out[parent(i)];
    total += nodes[i].count(in);
    out[i] = nodes[i].output_shape(in);
  }
  for (int k = 0; k < kNumLatents; ++k) total += fusions[k].count(out[kTreeNodes - kTreeLeaves]);
  return total;
}

template <typename T>
void AnalysisTree<T>::collect(ParamList<T>& out) {
  for (auto& n : nodes) n.collect(out);
  for (auto& f : fusions) f.collect(out);
}

// ---------------------------------------------------------------------------

template <typename T>
SynthesisNet<T>::SynthesisNet(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  const int sizes[] = {3, 2, 1};
  for (int l = 0; l < 3; ++l) {
    std::vector<ResidualUpBlock<T>> ups;
    std::vector<AFFBlock<T>> affs;
    const int64_t cin = l == 0 ? 2 * cfg.latent_channels : cfg.channels;
    for (int k = 0; k < sizes[l]; ++k) {
      ups.emplace_back("gs.l" + std::to_string(l) + ".up" + std::to_string(k), cin, cfg.channels,
                       rng);
    }
    for (int k = 0; k + 1 < sizes[l]; ++k) {
      affs.emplace_back("gs.l" + std::to_string(l) + ".aff" + std::to_string(k), cfg.channels,
                        cfg.aff_reduction, rng);
    }
    layers.push_back(std::move(ups));
    fusions.push_back(std::move(affs));
  }
  final_node = ResidualUpBlock<T>("gs.final", cfg.channels, cfg.channels, rng);
  head = Conv2d<T>("gs.head", cfg.channels, 3, 3, 1, rng);
}

template <typename T>
std::vector<int> SynthesisNet<T>::layer_sizes() const {
  std::vector<int> out;
  for (const auto& l : layers) out.push_back(static_cast<int>(l.size()));
  return out;
}

template <typename T>
int SynthesisNet<T>::upsampling_count() const {
  return static_cast<int>(layers.size()) + 1;
}

template <typename T>
Var<T> SynthesisNet<T>::forward(const std::array<Var<T>, kNumLatents>& latents) const {
  std::optional<Shape> shape;
  for (const auto& y : latents) {
    if (!y.defined()) continue;
    if (shape && !(*shape == y.shape())) {
      throw ShapeError("synthesis_forward: latent shapes differ (" + shape->str() + " vs " +
                       y.shape().str() + ")");
    }
    shape = y.shape();
  }
  if (!shape) throw Error("synthesis_forward: all four latent slots are absent");
  std::array<Var<T>, kNumLatents> y;
  for (int i = 0; i < kNumLatents; ++i) {
    y[i] = latents[i].defined() ? latents[i] : Var<T>::constant(Tensor<T>(*shape));
  }

  std::vector<Var<T>> inputs;
  for (int i = 0; i + 1 < kNumLatents; ++i) {
    const std::array<Var<T>, 2> pair{y[i], y[i + 1]};
    inputs.push_back(concat_channels<T>(pair));
  }
  for (size_t l = 0; l < layers.size(); ++l) {
    std::vector<Var<T>> ups;
    for (size_t k = 0; k < layers[l].size(); ++k) ups.push_back(layers[l][k].forward(inputs[k]));
    if (fusions[l].empty()) {
      inputs = std::move(ups);
      continue;
    }
    std::vector<Var<T>> fused;
    for (size_t k = 0; k < fusions[l].size(); ++k) fused.push_back(fusions[l][k].forward(ups[k], ups[k + 1]));
    inputs = std::move(fused);
  }
  return head.forward(final_node.forward(inputs[0]));
}

template <typename T>
MacCount SynthesisNet<T>::count(const Shape& latent) const {
  MacCount total;
  Shape in{latent.n, 2 * latent.c, latent.h, latent.w};
  for (size_t l = 0; l < layers.size(); ++l) {
    for (const auto& up : layers[l]) total += up.count(in);
    const Shape out = layers[l][0].output_shape(in);
    for (const auto& f : fusions[l]) total += f.count(out);
    in = out;
  }
  total += final_node.count(in);
  return total + head.count(final_node.output_shape(in));
}

template <typename T>
void SynthesisNet<T>::collect(ParamList<T>& out) {
  for (auto& l : layers)
    for (auto& up : l) up.collect(out);
  for (auto& l : fusions)
    for (auto& f : l) f.collect(out);
  final_node.collect(out);
  head.collect(out);
}

// ---------------------------------------------------------------------------

template <typename T>
TreeNet<T>::TreeNet(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
  cfg.validate();
  Rng rng(seed);
  analysis = AnalysisTree<T>(cfg, rng);
  synthesis = SynthesisNet<T>(cfg, rng);
  const EntropyConfig ec{cfg.latent_channels, cfg.hyper_channels, cfg.context_kernel};
  for (int i = 0; i < kNumLatents; ++i) {
    bottlenecks[i] = EntropyBottleneck<T>("eb" + std::to_string(i), ec, rng);
  }
}

template <typename T>
typename TreeNet<T>::TrainForward TreeNet<T>::forward_train(const Var<T>& x, Rng& rng) const {
  const auto y = analysis.forward(x);
  TrainForward out;
  std::array<Var<T>, kNumLatents> y_hat;
  for (int i = 0; i < kNumLatents; ++i) {
    auto eb = bottlenecks[i].forward_train(y[i], rng);
    y_hat[i] = eb.y_hat;
    out.y_likelihood[i] = eb.y_likelihood;
    out.z_likelihood[i] = eb.z_likelihood;
  }
  out.x_hat = synthesis.forward(y_hat);
  return out;
}

template <typename T>
std::array<LatentCode<T>, kNumLatents> TreeNet<T>::quantize(const Tensor<T>& padded) const {
  const Shape s = padded.shape();
  if (s.h % kPadMultiple != 0 || s.w % kPadMultiple != 0) {
    throw ShapeError("encode: image " + s.str() + " is not padded to a multiple of 64");
  }
  const auto y = analysis.forward(Var<T>::constant(padded));
  std::array<LatentCode<T>, kNumLatents> codes;
  for (int i = 0; i < kNumLatents; ++i) codes[i] = bottlenecks[i].quantize_latent(y[i]);
  return codes;
}

template <typename T>
Tensor<T> TreeNet<T>::synthesize(const LatentSet<T>& latents) const {
  latents.shape();
  std::array<Var<T>, kNumLatents> y;
  for (int i = 0; i < kNumLatents; ++i) {
    if (latents.present[i]) y[i] = Var<T>::constant(latents.y[i]);
  }
  return synthesis.forward(y).value();
}

template <typename T>
ParamList<T> TreeNet<T>::parameters() {
  ParamList<T> out;
  analysis.collect(out);
  synthesis.collect(out);
  for (auto& eb : bottlenecks) eb.collect(out);
  return out;
}

template <typename T>
typename TreeNet<T>::Complexity TreeNet<T>::complexity(int64_t height, int64_t width) const {
  const Shape image{1, 3, height, width};
  const Shape latent{1, cfg_.latent_channels, height / 16, width / 16};
  Complexity c;
  c.analysis = analysis.count(image);
  c.synthesis = synthesis.count(latent);
  for (const auto& eb : bottlenecks) {
    c.hyper_analysis += eb.count_hyper_analysis(latent);
    c.hyper_synthesis += eb.count_hyper_synthesis(latent);
    c.context += eb.count_context(latent);
    c.entropy_parameters += eb.count_entropy_parameters(latent);
  }
  for (const auto& eb : bottlenecks) c.priors.params += eb.prior.param_count();
  return c;
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> pad_to_multiple(const Tensor<T>& img, int64_t multiple) {
  const Shape s = img.shape();
  if (s.h < 1 || s.w < 1) throw ShapeError("pad_to_multiple: empty image " + s.str());
  const Shape p{s.n, s.c, round_up(s.h, multiple), round_up(s.w, multiple)};
  if (p == s) return img;
  Tensor<T> out(p);
  for (int64_t n = 0; n < p.n; ++n)
    for (int64_t c = 0; c < p.c; ++c)
      for (int64_t r = 0; r < p.h; ++r)
        for (int64_t q = 0; q < p.w; ++q)
          out.at(n, c, r, q) = img.at(n, c, std::min(r, s.h - 1), std::min(q, s.w - 1));
  return out;
}

template <typename T>
Tensor<T> crop(const Tensor<T>& img, int64_t height, int64_t width) {
  const Shape s = img.shape();
  if (height > s.h || width > s.w) {
    throw ShapeError("crop: " + std::to_string(height) + "x" + std::to_string(width) +
                     " exceeds " + s.str());
  }
  Tensor<T> out(Shape{s.n, s.c, height, width});
  for (int64_t n = 0; n < s.n; ++n)
    for (int64_t c = 0; c < s.c; ++c)
      for (int64_t r = 0; r < height; ++r)
        for (int64_t q = 0; q < width; ++q) out.at(n, c, r, q) = img.at(n, c, r, q);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {
constexpr char kCheckpointMagic[4] = {'T', 'N', 'W', 'T'};
constexpr uint16_t kCheckpointVersion = 1;
}  // namespace

const Tensor<float>* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : records)
    if (n == name) return &t;
  return nullptr;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  ByteWriter w;
  w.bytes(kCheckpointMagic, 4);
  w.u16(kCheckpointVersion);
  const ModelConfig& c = ckpt.config;
  for (int64_t v : {c.channels, c.latent_channels, c.hyper_channels, c.aff_reduction, c.context_kernel}) {
    w.u32(static_cast<uint32_t>(v));
  }
  w.u32(static_cast<uint32_t>(ckpt.records.size()));
  for (const auto& [name, t] : ckpt.records) {
    w.u32(static_cast<uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    const Shape s = t.shape();
    for (int64_t d : {s.n, s.c, s.h, s.w}) w.u32(static_cast<uint32_t>(d));
    for (float v : t.data()) w.f32(v);
  }
  write_file(path, w.buffer());
}

Checkpoint load_checkpoint(const std::string& path) {
  const std::vector<uint8_t> data = read_file(path);
  ByteReader r(data, "checkpoint");
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw Error("checkpoint: bad magic in " + path);
  const uint16_t version = r.u16();
  if (version != kCheckpointVersion) {
    throw Error("checkpoint: unsupported version " + std::to_string(version));
  }
  Checkpoint ckpt;
  ModelConfig& c = ckpt.config;
  for (int64_t* f : {&c.channels, &c.latent_channels, &c.hyper_channels, &c.aff_reduction, &c.context_kernel}) {
    *f = r.u32();
  }
  c.validate();
  const uint32_t count = r.u32();
  std::set<std::string> seen;
  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t len = r.u32();
    std::string name(len, '\0');
    r.bytes(name.data(), len);
    if (!seen.insert(name).second) throw Error("checkpoint: duplicate record '" + name + "'");
    Shape s;
    s.n = r.u32();
    s.c = r.u32();
    s.h = r.u32();
    s.w = r.u32();
    const double bytes = 4.0 * static_cast<double>(s.n) * static_cast<double>(s.c) * static_cast<double>(s.h) *
                         static_cast<double>(s.w);
    if (bytes > static_cast<double>(r.remaining())) {
      throw Error("checkpoint: record '" + name + "' " + s.str() + " runs past the end of " + path);
    }
    Tensor<float> t(s);
    for (float& v : t.data()) v = r.f32();
    ckpt.records.emplace_back(std::move(name), std::move(t));
  }
  if (!r.done()) throw Error("checkpoint: trailing bytes in " + path);
  return ckpt;
}

template <typename T>
StateDict model_state(TreeNet<T>& model) {
  StateDict out;
  for (Parameter<T>* p : model.parameters()) out.emplace_back(p->name, p->value().template cast<float>());
  return out;
}

template <typename T>
void load_model_state(TreeNet<T>& model, const Checkpoint& ckpt) {
  if (!(ckpt.config == model.config())) throw Error("checkpoint: model config mismatch");
  for (Parameter<T>* p : model.parameters()) {
    const Tensor<float>* t = ckpt.find(p->name);
    if (!t) throw Error("checkpoint: missing parameter '" + p->name + "'");
    if (!(t->shape() == p->value().shape())) {
      throw ShapeError("checkpoint: parameter '" + p->name + "' has shape " + t->shape().str() +
                       ", expected " + p->value().shape().str());
    }
    p->mutable_value() = t->template cast<T>();
  }
}

#define TREENET_INSTANTIATE(T)                                           \
  template struct LatentSet<T>;                                          \
  template class AnalysisTree<T>;                                        \
  template class SynthesisNet<T>;                                        \
  template class TreeNet<T>;                                             \
  template Tensor<T> pad_to_multiple(const Tensor<T>&, int64_t);          \
  template Tensor<T> crop(const Tensor<T>&, int64_t, int64_t);            \
  template StateDict model_state(TreeNet<T>&);                           \
  template void load_model_state(TreeNet<T>&, const Checkpoint&);

TREENET_INSTANTIATE(float)
TREENET_INSTANTIATE(double)
#undef TREENET_INSTANTIATE

}  // namespace treenet
