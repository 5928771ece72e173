#include <doctest.h>

#include <cmath>

#include "support.hpp"
#include "treenet/bitstream.hpp"
#include "treenet/synth.hpp"

using namespace treenet;
using namespace treenet::testing;

namespace {

CdfTable random_table(Rng& rng, int32_t lo, int n) {
  std::vector<double> pmf(static_cast<size_t>(n));
  double total = 0;
  for (double& p : pmf) total += (p = std::pow(rng.uniform(), 3.0) + 1e-6);
  for (double& p : pmf) p *= 0.999 / total;
  return CdfTable::from_pmf(lo, pmf);
}

const TreeNet<float>& shared_model() {
  static const TreeNet<float> model(ModelConfig{}, 11);
  return model;
}

double estimated_bits(const TreeNet<float>& model, const std::array<LatentCode<float>, kNumLatents>& codes) {
  double bits = 0;
  for (int i = 0; i < kNumLatents; ++i) {
    const auto [y, z] = model.bottlenecks[i].round_likelihoods(codes[i]);
    const std::vector<Tensor<float>> lik = {y, z};
    bits += rate_bits<float>(lik);
  }
  return bits;
}

}  // namespace

TEST_SUITE("bitstream_coder") {

TEST_CASE("cdf tables") {
  const std::vector<double> pmf = {0.1, 0.6, 0.3};
  const CdfTable t = CdfTable::from_pmf(-1, pmf);
  CHECK_NOTHROW(t.validate());
  CHECK(t.num_symbols() == 3);
  CHECK(t.frequency(t.escape_index()) >= 1);
  CHECK(t.cdf.back() == kCdfTotal);
  CHECK(std::abs(static_cast<double>(t.frequency(1)) / kCdfTotal - 0.6) < 1e-3);
  const std::vector<double> tiny = {1e-30, 1.0, 1e-30};
  CHECK_NOTHROW(CdfTable::from_pmf(0, tiny).validate());
  CdfTable bad = t;
  bad.cdf[2] = bad.cdf[1];
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("range coder round trip") {
  Rng rng(1);
  std::vector<CdfTable> tables;
  for (int k = 0; k < 16; ++k) tables.push_back(random_table(rng, -static_cast<int32_t>(rng.below(40)), 1 + static_cast<int>(rng.below(80))));
  std::vector<size_t> which;
  std::vector<int32_t> symbols;
  RangeEncoder enc;
  for (int i = 0; i < 100000; ++i) {
    const size_t k = rng.below(tables.size());
    const CdfTable& t = tables[k];
    // Roughly one symbol in fifty falls outside the table and takes the escape path.
    const int32_t sym = rng.below(50) == 0 ? t.lo - 1 - static_cast<int32_t>(rng.below(70000)) * (rng.below(2) ? 1 : -1)
                                           : t.lo + static_cast<int32_t>(rng.below(static_cast<uint64_t>(t.num_symbols())));
    which.push_back(k);
    symbols.push_back(sym);
    enc.encode_symbol(t, sym);
  }
  const std::vector<uint8_t> bytes = enc.finish();
  RangeDecoder dec(bytes, "test");
  for (size_t i = 0; i < symbols.size(); ++i) {
    const int32_t got = dec.decode_symbol(tables[which[i]]);
    if (got != symbols[i]) {
      FAIL("symbol " << i << " decoded as " << got << ", expected " << symbols[i]);
    }
  }
}

TEST_CASE("range coder efficiency and determinism") {
  const std::vector<double> uniform(256, 1.0 / 256);
  const CdfTable t = CdfTable::from_pmf(0, uniform);
  Rng rng(2);
  std::vector<int32_t> symbols(4096);
  for (auto& s : symbols) s = static_cast<int32_t>(rng.below(256));
  auto code = [&] {
    RangeEncoder enc;
    for (int32_t s : symbols) enc.encode_symbol(t, s);
    return enc.finish();
  };
  const std::vector<uint8_t> a = code(), b = code();
  CHECK(a == b);
  CHECK(std::abs(static_cast<double>(a.size()) - 4096.0) <= 34.0);

  RangeEncoder empty;
  CHECK(empty.finish().size() <= 1);

  const std::vector<double> skewed = {0.999, 0.001};
  const CdfTable s = CdfTable::from_pmf(0, skewed);
  RangeEncoder enc;
  for (int i = 0; i < 10000; ++i) enc.encode_symbol(s, 0);
  CHECK(enc.finish().size() < 10);
}

TEST_CASE("range coder raw values and corrupt input") {
  RangeEncoder enc;
  for (uint32_t v : {0u, 1u, 65535u, 4242u}) enc.encode_raw16(v);
  const std::vector<uint8_t> bytes = enc.finish();
  RangeDecoder dec(bytes, "raw");
  for (uint32_t v : {0u, 1u, 65535u, 4242u}) CHECK(dec.decode_raw16() == v);

  const std::vector<double> pmf = {0.5, 0.25, 0.25};
  const CdfTable t = CdfTable::from_pmf(0, pmf);
  const std::vector<uint8_t> junk(16, 0xFF);
  RangeDecoder bad(junk, "segment y2");
  CHECK_THROWS_WITH_AS(bad.decode_symbol(t), doctest::Contains("segment y2"), Error);
}

TEST_CASE("varints") {
  std::vector<uint8_t> out;
  for (uint32_t v : {0u, 127u, 128u, 300u, 0xFFFFFFFFu}) put_varint(out, v);
  size_t pos = 0;
  for (uint32_t v : {0u, 127u, 128u, 300u, 0xFFFFFFFFu}) CHECK(get_varint(out, pos, "v") == v);
  CHECK(pos == out.size());
  const std::vector<uint8_t> cut = {0x80, 0x80};
  pos = 0;
  CHECK_THROWS_WITH_AS(get_varint(cut, pos, "segment z1"), doctest::Contains("segment z1"), Error);
}

TEST_CASE("lossless transport on seeded images") {
  const TreeNet<float>& model = shared_model();
  Rng rng(20);
  for (int k = 0; k < 20; ++k) {
    const int64_t h = 40 + static_cast<int64_t>(rng.below(60)), w = 40 + static_cast<int64_t>(rng.below(60));
    const Tensor<float> image = synth_image(rng, h, w);
    const EncodeResult enc = encode_image(model, image, static_cast<uint8_t>(k % 4));
    const std::vector<uint8_t> bytes = enc.stream.serialize();
    const Bitstream parsed = Bitstream::parse(bytes);
    CHECK(parsed.header.width == w);
    CHECK(parsed.header.height == h);
    CHECK(parsed.header.lambda_index == k % 4);
    const DecodedLatents dec = decode_latents(model, parsed);
    for (int i = 0; i < kNumLatents; ++i) {
      CHECK(bit_equal(dec.y_hat[i], enc.codes[i].y_hat));
      CHECK(bit_equal(dec.z_hat[i], enc.codes[i].z_hat));
    }
    const Tensor<float> x_hat = decode_image(model, parsed);
    CHECK(x_hat.shape() == image.shape());
    const EncodeResult again = encode_image(model, x_hat, static_cast<uint8_t>(k % 4));
    const EncodeResult same = encode_image(model, image, static_cast<uint8_t>(k % 4));
    CHECK(same.stream.serialize() == bytes);
    CHECK(Bitstream::parse(again.stream.serialize()).serialize() == again.stream.serialize());
  }
}

TEST_CASE("rate consistency") {
  const TreeNet<float>& model = shared_model();
  Rng rng(21);
  for (int k = 0; k < 6; ++k) {
    const Tensor<float> image = synth_image(rng, 64 + 16 * k, 96);
    const EncodeResult enc = encode_image(model, image);
    const double measured = 8.0 * static_cast<double>(enc.stream.payload_bytes());
    const double estimate = estimated_bits(model, enc.codes);
    CHECK_MESSAGE(std::abs(measured - estimate) <= 0.02 * estimate + 256, "measured " << measured << " estimate " << estimate);
  }
}

TEST_CASE("header and truncation errors") {
  const TreeNet<float>& model = shared_model();
  Rng rng(22);
  const Tensor<float> image = synth_image(rng, 37, 101);
  const std::vector<uint8_t> bytes = encode_image(model, image, 3).stream.serialize();
  CHECK(bytes.size() > kBitstreamHeaderBytes);
  const Bitstream b = Bitstream::parse(bytes);
  CHECK(b.header.width == 101);
  CHECK(b.header.height == 37);
  CHECK(b.header.lambda_index == 3);
  CHECK(b.total_bytes() == bytes.size());

  std::vector<uint8_t> cut(bytes.begin(), bytes.end() - 1);
  CHECK_THROWS_WITH_AS(Bitstream::parse(cut), doctest::Contains("segment y4"), Error);
  std::vector<uint8_t> head(bytes.begin(), bytes.begin() + static_cast<long>(kBitstreamHeaderBytes) + 1);
  CHECK_THROWS_WITH_AS(Bitstream::parse(head), doctest::Contains("segment z1"), Error);
  std::vector<uint8_t> shortheader(bytes.begin(), bytes.begin() + 10);
  CHECK_THROWS_AS(Bitstream::parse(shortheader), Error);
  std::vector<uint8_t> magic = bytes;
  magic[0] = 'X';
  CHECK_THROWS_WITH_AS(Bitstream::parse(magic), doctest::Contains("magic"), Error);
  std::vector<uint8_t> extra = bytes;
  extra.push_back(0);
  CHECK_THROWS_WITH_AS(Bitstream::parse(extra), doctest::Contains("trailing"), Error);

  Bitstream other = b;
  ModelConfig narrow;
  narrow.channels = 16;
  const TreeNet<float> different(narrow, 3);
  CHECK_THROWS_WITH_AS(decode_latents(different, other), doctest::Contains("different model"), Error);
  CHECK_THROWS_AS(encode_image(model, Tensor<float>(Shape{1, 1, 64, 64})), ShapeError);
}

}
