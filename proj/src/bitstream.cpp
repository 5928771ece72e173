#include "treenet/bitstream.hpp"

#include <algorithm>
#include <cstring>

#include "treenet/byteio.hpp"

namespace treenet {
namespace {

constexpr char kMagic[4] = {'T', 'N', 'B', 'S'};

std::string segment_name(char kind, int latent) { return std::string(1, kind) + std::to_string(latent + 1); }

int32_t alphabet_bound(const std::vector<int32_t>& symbols) {
  int64_t m = 0;
  for (int32_t s : symbols) m = std::max<int64_t>(m, std::abs(static_cast<int64_t>(s)));
  return static_cast<int32_t>(std::min<int64_t>(m + 2, kCdfTotal / 4));
}

std::vector<CdfTable> prior_tables(const FactorizedPrior<float>& prior, int32_t bound) {
  std::vector<CdfTable> tables;
  for (int64_t c = 0; c < prior.channels(); ++c) {
    const std::vector<double> pmf = prior.pmf(c, -bound, bound);
    tables.push_back(CdfTable::from_pmf(-bound, pmf));
  }
  return tables;
}

struct LatentGeometry {
  Shape y, z;
};

LatentGeometry geometry(const ModelConfig& cfg, uint32_t width, uint32_t height) {
  const int64_t ph = round_up(height, kPadMultiple), pw = round_up(width, kPadMultiple);
  return {{1, cfg.latent_channels, ph / 16, pw / 16}, {1, cfg.hyper_channels, ph / 64, pw / 64}};
}

// Visits every (n, c, r, q) of one checkerboard class in coding order.
template <typename F>
void for_each_position(const Shape& s, bool anchors, F&& f) {
  for (int64_t n = 0; n < s.n; ++n)
    for (int64_t c = 0; c < s.c; ++c)
      for (int64_t r = 0; r < s.h; ++r)
        for (int64_t q = 0; q < s.w; ++q)
          if (is_anchor(r, q) == anchors) f(((n * s.c + c) * s.h + r) * s.w + q);
}

std::vector<uint8_t> encode_z(const FactorizedPrior<float>& prior, const LatentCode<float>& code) {
  const int32_t bound = alphabet_bound(code.z_symbols);
  const std::vector<CdfTable> tables = prior_tables(prior, bound);
  const Shape s = code.z_hat.shape();
  RangeEncoder enc;
  for (int64_t i = 0; i < s.numel(); ++i) {
    const int64_t c = (i / s.plane()) % s.c;
    enc.encode_symbol(tables[static_cast<size_t>(c)], code.z_symbols[static_cast<size_t>(i)]);
  }
  std::vector<uint8_t> out;
  put_varint(out, static_cast<uint32_t>(bound));
  const std::vector<uint8_t> body = enc.finish();
  out.insert(out.end(), body.begin(), body.end());
  return out;
}

std::vector<uint8_t> encode_y(const LatentCode<float>& code) {
  const int32_t bound = alphabet_bound(code.y_symbols);
  const Shape s = code.y_hat.shape();
  RangeEncoder enc;
  for (bool anchors : {true, false}) {
    for_each_position(s, anchors, [&](int64_t i) {
      enc.encode_symbol(gaussian_cdf_table(bound, code.sigma[i]), code.y_symbols[static_cast<size_t>(i)]);
    });
  }
  std::vector<uint8_t> out;
  put_varint(out, static_cast<uint32_t>(bound));
  const std::vector<uint8_t> body = enc.finish();
  out.insert(out.end(), body.begin(), body.end());
  return out;
}

Tensor<float> decode_z(const FactorizedPrior<float>& prior, const std::vector<uint8_t>& seg,
                       const Shape& s, const std::string& name) {
  size_t pos = 0;
  const auto bound = static_cast<int32_t>(get_varint(seg, pos, "segment " + name));
  if (bound < 1 || bound > static_cast<int32_t>(kCdfTotal / 4)) {
    throw Error("segment " + name + ": invalid alphabet bound " + std::to_string(bound));
  }
  const std::vector<CdfTable> tables = prior_tables(prior, bound);
  RangeDecoder dec(std::span<const uint8_t>(seg).subspan(pos), "segment " + name);
  Tensor<float> z(s);
  for (int64_t i = 0; i < s.numel(); ++i) {
    const int64_t c = (i / s.plane()) % s.c;
    z[i] = static_cast<float>(dec.decode_symbol(tables[static_cast<size_t>(c)]));
  }
  return z;
}

}  // namespace

CdfTable gaussian_cdf_table(int32_t bound, double sigma) {
  std::vector<double> pmf(static_cast<size_t>(2 * bound + 1));
  for (int32_t k = -bound; k <= bound; ++k) {
    pmf[static_cast<size_t>(k + bound)] = gaussian_bin_probability(k, sigma);
  }
  return CdfTable::from_pmf(-bound, pmf);
}

std::vector<uint8_t> Bitstream::serialize() const {
  ByteWriter w;
  w.bytes(kMagic, 4);
  w.u8(header.version);
  w.u32(header.width);
  w.u32(header.height);
  w.u8(header.config_id);
  w.u8(header.lambda_index);
  for (int i = 0; i < kNumLatents; ++i) {
    w.u32(static_cast<uint32_t>(z_segments[i].size()));
    w.u32(static_cast<uint32_t>(y_segments[i].size()));
  }
  for (const auto& s : z_segments) w.bytes(s.data(), s.size());
  for (const auto& s : y_segments) w.bytes(s.data(), s.size());
  return std::move(w.buffer());
}

Bitstream Bitstream::parse(const std::vector<uint8_t>& bytes) {
  ByteReader r(bytes, "bitstream header");
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw Error("bitstream: bad magic");
  Bitstream b;
  b.header.version = r.u8();
  if (b.header.version != kBitstreamVersion) {
    throw Error("bitstream: unsupported version " + std::to_string(b.header.version));
  }
  b.header.width = r.u32();
  b.header.height = r.u32();
  b.header.config_id = r.u8();
  b.header.lambda_index = r.u8();
  if (b.header.width == 0 || b.header.height == 0) throw Error("bitstream: empty image dimensions");
  std::array<uint32_t, kNumLatents> zlen{}, ylen{};
  for (int i = 0; i < kNumLatents; ++i) {
    zlen[i] = r.u32();
    ylen[i] = r.u32();
  }
  auto take = [&](uint32_t len, const std::string& name) {
    if (r.remaining() < len) {
      throw Error("bitstream: segment " + name + " truncated (expected " + std::to_string(len) +
                  " bytes, " + std::to_string(r.remaining()) + " available)");
    }
    std::vector<uint8_t> seg(len);
    r.bytes(seg.data(), len);
    return seg;
  };
  for (int i = 0; i < kNumLatents; ++i) b.z_segments[i] = take(zlen[i], segment_name('z', i));
  for (int i = 0; i < kNumLatents; ++i) b.y_segments[i] = take(ylen[i], segment_name('y', i));
  if (!r.done()) throw Error("bitstream: " + std::to_string(r.remaining()) + " trailing bytes after segment y4");
  return b;
}

size_t Bitstream::payload_bytes() const {
  size_t n = 0;
  for (int i = 0; i < kNumLatents; ++i) n += z_segments[i].size() + y_segments[i].size();
  return n;
}

Bitstream encode_latents(const TreeNet<float>& model,
                         const std::array<LatentCode<float>, kNumLatents>& codes, uint32_t width,
                         uint32_t height, uint8_t lambda_index) {
  const LatentGeometry geo = geometry(model.config(), width, height);
  Bitstream b;
  b.header.width = width;
  b.header.height = height;
  b.header.config_id = model.config().id();
  b.header.lambda_index = lambda_index;
  for (int i = 0; i < kNumLatents; ++i) {
    if (!(codes[i].y_hat.shape() == geo.y) || !(codes[i].z_hat.shape() == geo.z)) {
      throw ShapeError("encode: latent " + std::to_string(i + 1) + " has shape " +
                       codes[i].y_hat.shape().str() + ", expected " + geo.y.str() + " for a " +
                       std::to_string(width) + "x" + std::to_string(height) + " image");
    }
    b.z_segments[i] = encode_z(model.bottlenecks[i].prior, codes[i]);
    b.y_segments[i] = encode_y(codes[i]);
  }
  return b;
}

EncodeResult encode_image(const TreeNet<float>& model, const Tensor<float>& image,
                          uint8_t lambda_index) {
  const Shape s = image.shape();
  if (s.n != 1 || s.c != 3) throw ShapeError("encode: expected a (1,3,H,W) image, got " + s.str());
  EncodeResult r;
  r.codes = model.quantize(pad_to_multiple(image));
  r.stream = encode_latents(model, r.codes, static_cast<uint32_t>(s.w), static_cast<uint32_t>(s.h),
                            lambda_index);
  return r;
}

DecodedLatents decode_latents(const TreeNet<float>& model, const Bitstream& stream) {
  if (stream.header.config_id != model.config().id()) {
    throw Error("decode: bitstream was produced by a different model configuration");
  }
  const LatentGeometry geo = geometry(model.config(), stream.header.width, stream.header.height);
  DecodedLatents out;
  for (int i = 0; i < kNumLatents; ++i) {
    const EntropyBottleneck<float>& eb = model.bottlenecks[i];
    const std::string zname = segment_name('z', i), yname = segment_name('y', i);
    out.z_hat[i] = decode_z(eb.prior, stream.z_segments[i], geo.z, zname);

    const Var<float> features =
        Var<float>::constant(eb.hyper_synthesis(Var<float>::constant(out.z_hat[i])).value());
    const std::vector<uint8_t>& seg = stream.y_segments[i];
    size_t pos = 0;
    const auto bound = static_cast<int32_t>(get_varint(seg, pos, "segment " + yname));
    if (bound < 1 || bound > static_cast<int32_t>(kCdfTotal / 4)) {
      throw Error("segment " + yname + ": invalid alphabet bound " + std::to_string(bound));
    }
    RangeDecoder dec(std::span<const uint8_t>(seg).subspan(pos), "segment " + yname);
    Tensor<float> y(geo.y);
    for (bool anchors : {true, false}) {
      const GaussianParams<float> p = eb.checkerboard_params(Var<float>::constant(y), features);
      for_each_position(geo.y, anchors, [&](int64_t idx) {
        const int32_t sym = dec.decode_symbol(gaussian_cdf_table(bound, p.sigma.value()[idx]));
        y[idx] = static_cast<float>(sym) + p.mu.value()[idx];
      });
    }
    out.y_hat[i] = std::move(y);
  }
  return out;
}

Tensor<float> reconstruct(const TreeNet<float>& model, const LatentSet<float>& latents,
                          uint32_t width, uint32_t height) {
  Tensor<float> x = crop(model.synthesize(latents), height, width);
  for (float& v : x.data()) v = std::clamp(v, 0.0f, 1.0f);
  return x;
}

Tensor<float> decode_image(const TreeNet<float>& model, const Bitstream& stream) {
  DecodedLatents d = decode_latents(model, stream);
  return reconstruct(model, LatentSet<float>::full(std::move(d.y_hat)), stream.header.width,
                     stream.header.height);
}

}  // namespace treenet
