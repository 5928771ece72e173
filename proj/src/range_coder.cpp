#include "treenet/range_coder.hpp"

#include <algorithm>
#include <cmath>

#include "treenet/tensor.hpp"

namespace treenet {

namespace {
constexpr uint32_t kTop = uint32_t{1} << 24;

uint32_t zigzag(int32_t v) {
  return (static_cast<uint32_t>(v) << 1) ^ static_cast<uint32_t>(v >> 31);
}
int32_t unzigzag(uint32_t v) { return static_cast<int32_t>(v >> 1) ^ -static_cast<int32_t>(v & 1); }
}  // namespace

CdfTable CdfTable::from_pmf(int32_t lo, std::span<const double> pmf) {
  const int64_t bins = static_cast<int64_t>(pmf.size()) + 1;
  if (bins > kCdfTotal / 2) throw Error("CdfTable: alphabet too large for 16-bit precision");
  double mass = 0;
  for (double p : pmf) mass += std::max(p, 0.0);
  const double escape = std::max(0.0, 1.0 - mass);
  const uint64_t spare = kCdfTotal - static_cast<uint64_t>(bins);

  std::vector<uint32_t> freq(static_cast<size_t>(bins));
  uint64_t used = 0;
  size_t mode = 0;
  for (int64_t i = 0; i < bins; ++i) {
    const double p = i + 1 < bins ? std::max(pmf[static_cast<size_t>(i)], 0.0) : escape;
    const auto extra = static_cast<uint64_t>(std::floor(p * static_cast<double>(spare)));
    freq[static_cast<size_t>(i)] = static_cast<uint32_t>(1 + std::min(extra, spare));
    used += freq[static_cast<size_t>(i)];
    if (freq[static_cast<size_t>(i)] > freq[mode]) mode = static_cast<size_t>(i);
  }
  // Floors can only undershoot, except for a pmf summing above one.
  while (used > kCdfTotal) {
    const size_t big = static_cast<size_t>(std::max_element(freq.begin(), freq.end()) - freq.begin());
    const uint64_t cut = std::min<uint64_t>(used - kCdfTotal, freq[big] - 1);
    freq[big] -= static_cast<uint32_t>(cut);
    used -= cut;
  }
  freq[mode] += static_cast<uint32_t>(kCdfTotal - used);

  CdfTable t;
  t.lo = lo;
  t.cdf.resize(static_cast<size_t>(bins) + 1);
  t.cdf[0] = 0;
  for (int64_t i = 0; i < bins; ++i) t.cdf[static_cast<size_t>(i) + 1] = t.cdf[static_cast<size_t>(i)] + freq[static_cast<size_t>(i)];
  return t;
}

void CdfTable::validate() const {
  if (cdf.size() < 2 || cdf.front() != 0 || cdf.back() != kCdfTotal) {
    throw Error("CdfTable: cumulative counts must run from 0 to 2^16");
  }
  for (size_t i = 1; i < cdf.size(); ++i) {
    if (cdf[i] <= cdf[i - 1]) throw Error("CdfTable: counts are not strictly increasing");
  }
}

// ---------------------------------------------------------------------------

void RangeEncoder::shift_low() {
  if (static_cast<uint32_t>(low_) < 0xFF000000u || (low_ >> 32) != 0) {
    const auto carry = static_cast<uint8_t>(low_ >> 32);
    uint8_t temp = cache_;
    do {
      // The very first byte is the initial zero cache; the decoder never needs it.
      if (first_) {
        first_ = false;
      } else {
        out_.push_back(static_cast<uint8_t>(temp + carry));
      }
      temp = 0xFF;
    } while (--cache_size_ != 0);
    cache_ = static_cast<uint8_t>(low_ >> 24);
  }
  ++cache_size_;
  low_ = (low_ & 0x00FFFFFFu) << 8;
}

void RangeEncoder::encode(uint32_t start, uint32_t freq) {
  const uint32_t r = range_ >> kCdfPrecision;
  low_ += static_cast<uint64_t>(r) * start;
  range_ = r * freq;
  while (range_ < kTop) {
    range_ <<= 8;
    shift_low();
  }
}

void RangeEncoder::encode_symbol(const CdfTable& table, int32_t symbol) {
  const int64_t index = static_cast<int64_t>(symbol) - table.lo;
  if (index >= 0 && index < table.num_symbols()) {
    encode(table.cdf[index], table.frequency(static_cast<int32_t>(index)));
    return;
  }
  const int32_t esc = table.escape_index();
  encode(table.cdf[esc], table.frequency(esc));
  const uint32_t z = zigzag(symbol);
  encode_raw16(z >> 16);
  encode_raw16(z & 0xFFFFu);
}

void RangeEncoder::encode_raw16(uint32_t value) { encode(value & 0xFFFFu, 1); }

std::vector<uint8_t> RangeEncoder::finish() {
  // Pick the value in [low, low + range) with the most trailing zero bits.
  const uint64_t hi = low_ + range_;
  for (int bits = 32; bits >= 0; --bits) {
    const uint64_t mask = (uint64_t{1} << bits) - 1;
    const uint64_t v = (low_ + mask) & ~mask;
    if (v < hi) {
      low_ = v;
      break;
    }
  }
  for (int i = 0; i < 5; ++i) shift_low();
  while (!out_.empty() && out_.back() == 0) out_.pop_back();
  return std::move(out_);
}

// ---------------------------------------------------------------------------

RangeDecoder::RangeDecoder(std::span<const uint8_t> data, std::string context)
    : data_(data), context_(std::move(context)) {
  for (int i = 0; i < 4; ++i) code_ = (code_ << 8) | next_byte();
}

uint32_t RangeDecoder::next_byte() {
  if (pos_ < data_.size()) return data_[pos_++];
  ++overrun_;
  return 0;
}

void RangeDecoder::normalize() {
  while (range_ < kTop) {
    code_ = (code_ << 8) | next_byte();
    range_ <<= 8;
  }
}

void RangeDecoder::consume(uint32_t start, uint32_t freq) {
  const uint32_t r = range_ >> kCdfPrecision;
  code_ -= r * start;
  range_ = r * freq;
  if (code_ >= range_) throw Error(context_ + ": corrupt range-coded data");
  normalize();
}

int32_t RangeDecoder::decode_symbol(const CdfTable& table) {
  const uint32_t r = range_ >> kCdfPrecision;
  const uint32_t target = std::min(code_ / r, kCdfTotal - 1);
  const auto it = std::upper_bound(table.cdf.begin(), table.cdf.end(), target);
  const auto index = static_cast<int32_t>(it - table.cdf.begin()) - 1;
  consume(table.cdf[index], table.frequency(index));
  if (index < table.escape_index()) return table.lo + index;
  const uint32_t high = decode_raw16();
  return unzigzag((high << 16) | decode_raw16());
}

uint32_t RangeDecoder::decode_raw16() {
  const uint32_t r = range_ >> kCdfPrecision;
  const uint32_t v = std::min(code_ / r, kCdfTotal - 1);
  consume(v, 1);
  return v;
}

// ---------------------------------------------------------------------------

void put_varint(std::vector<uint8_t>& out, uint32_t v) {
  while (v >= 0x80) {
    out.push_back(static_cast<uint8_t>(v | 0x80));
    v >>= 7;
  }
  out.push_back(static_cast<uint8_t>(v));
}

uint32_t get_varint(std::span<const uint8_t> data, size_t& pos, const std::string& context) {
  uint32_t v = 0;
  for (int shift = 0; shift < 35; shift += 7) {
    if (pos >= data.size()) throw Error(context + ": truncated varint");
    const uint8_t b = data[pos++];
    v |= static_cast<uint32_t>(b & 0x7F) << shift;
    if (!(b & 0x80)) return v;
  }
  throw Error(context + ": malformed varint");
}

}  // namespace treenet
