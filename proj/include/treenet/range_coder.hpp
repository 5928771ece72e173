#pragma once

// Byte-oriented range coder with 16-bit frequency tables and an escape path
// for symbols outside a table's alphabet.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace treenet {

inline constexpr int kCdfPrecision = 16;
inline constexpr uint32_t kCdfTotal = uint32_t{1} << kCdfPrecision;

/// Cumulative counts for symbols lo..lo+n-1 followed by one escape bin.
/// cdf has n + 2 entries, cdf[0] == 0, cdf[n + 1] == kCdfTotal, strictly increasing.
struct CdfTable {
  int32_t lo = 0;
  std::vector<uint32_t> cdf;

  int32_t num_symbols() const { return static_cast<int32_t>(cdf.size()) - 2; }
  int32_t escape_index() const { return num_symbols(); }
  uint32_t frequency(int32_t index) const { return cdf[index + 1] - cdf[index]; }

  /// Quantizes probabilities of symbols lo..lo+pmf.size()-1. The escape bin gets
  /// the missing mass. Every bin receives at least one count; rounding slack
  /// goes to the most probable bin.
  static CdfTable from_pmf(int32_t lo, std::span<const double> pmf);
  /// Throws Error if the table is not a valid 16-bit cumulative table.
  void validate() const;
};

class RangeEncoder {
 public:
  void encode(uint32_t start, uint32_t freq);
  /// Codes `symbol` with `table`, escaping to raw bits when it is out of range.
  void encode_symbol(const CdfTable& table, int32_t symbol);
  /// Equiprobable 16-bit value.
  void encode_raw16(uint32_t value);
  /// Terminates the stream with the fewest bytes that still decode correctly
  /// when the decoder pads with zeros.
  std::vector<uint8_t> finish();

 private:
  void shift_low();

  uint64_t low_ = 0;
  uint32_t range_ = 0xFFFFFFFFu;
  uint8_t cache_ = 0;
  uint64_t cache_size_ = 1;
  bool first_ = true;
  std::vector<uint8_t> out_;
};

class RangeDecoder {
 public:
  /// `context` names the stream in error messages.
  RangeDecoder(std::span<const uint8_t> data, std::string context);

  int32_t decode_symbol(const CdfTable& table);
  uint32_t decode_raw16();

  /// Bytes consumed past the end of the data (implicit zero padding).
  size_t overrun() const { return overrun_; }

 private:
  uint32_t next_byte();
  void consume(uint32_t start, uint32_t freq);
  void normalize();

  std::span<const uint8_t> data_;
  std::string context_;
  size_t pos_ = 0;
  size_t overrun_ = 0;
  uint32_t range_ = 0xFFFFFFFFu;
  uint32_t code_ = 0;
};

/// Unsigned LEB128.
void put_varint(std::vector<uint8_t>& out, uint32_t v);
/// Reads a varint at `pos`, advancing it; throws Error naming `context` on truncation.
uint32_t get_varint(std::span<const uint8_t> data, size_t& pos, const std::string& context);

}  // namespace treenet
