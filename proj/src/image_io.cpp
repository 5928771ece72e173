#include "treenet/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>

namespace treenet {
namespace {

bool has_extension(const std::string& path, const std::string& ext) {
  if (path.size() < ext.size()) return false;
  std::string tail = path.substr(path.size() - ext.size());
  std::transform(tail.begin(), tail.end(), tail.begin(), [](unsigned char c) { return std::tolower(c); });
  return tail == ext;
}

struct FileCloser {
  void operator()(FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

FilePtr open_file(const std::string& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw Error("cannot open '" + path + "'");
  return f;
}

[[noreturn]] void png_error_handler(png_structp, png_const_charp msg) { throw Error(std::string("png: ") + msg); }
void png_warning_handler(png_structp, png_const_charp) {}

Tensor<float> read_png(const std::string& path) {
  FilePtr f = open_file(path, "rb");
  uint8_t sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw Error("'" + path + "' is not a PNG file");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_handler, png_warning_handler);
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* p;
    png_infop* i;
    ~Guard() { png_destroy_read_struct(p, i, nullptr); }
  } guard{&png, &info};
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const auto w = static_cast<int64_t>(png_get_image_width(png, info));
  const auto h = static_cast<int64_t>(png_get_image_height(png, info));
  const size_t rowbytes = png_get_rowbytes(png, info);
  if (rowbytes != static_cast<size_t>(3 * w)) throw Error("png: unsupported pixel layout in '" + path + "'");
  std::vector<uint8_t> buf(rowbytes * static_cast<size_t>(h));
  std::vector<png_bytep> rows(static_cast<size_t>(h));
  for (int64_t r = 0; r < h; ++r) rows[static_cast<size_t>(r)] = buf.data() + r * rowbytes;
  png_read_image(png, rows.data());
  Tensor<float> img(Shape{1, 3, h, w});
  for (int64_t r = 0; r < h; ++r)
    for (int64_t c = 0; c < w; ++c)
      for (int64_t ch = 0; ch < 3; ++ch) img.at(0, ch, r, c) = buf[static_cast<size_t>(r * rowbytes + 3 * c + ch)] / 255.0f;
  return img;
}

void write_png_rows(const std::string& path, int64_t w, int64_t h, int color_type,
                    const std::vector<uint8_t>& buf, size_t rowbytes) {
  FilePtr f = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_handler, png_warning_handler);
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* p;
    png_infop* i;
    ~Guard() { png_destroy_write_struct(p, i); }
  } guard{&png, &info};
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int64_t r = 0; r < h; ++r) png_write_row(png, buf.data() + r * rowbytes);
  png_write_end(png, nullptr);
}

// Next whitespace-separated token of a PNM header, skipping comments.
std::string pnm_token(std::istream& in) {
  std::string tok;
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  return tok;
}

Tensor<float> read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "'");
  if (pnm_token(in) != "P6") throw Error("'" + path + "' is not a binary PPM (P6) file");
  int64_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoll(pnm_token(in));
    h = std::stoll(pnm_token(in));
    maxval = std::stoll(pnm_token(in));
  } catch (const std::exception&) {
    throw Error("ppm: malformed header in '" + path + "'");
  }
  if (w < 1 || h < 1 || maxval < 1 || maxval > 65535) throw Error("ppm: invalid header in '" + path + "'");
  const int bytes = maxval > 255 ? 2 : 1;
  std::vector<uint8_t> buf(static_cast<size_t>(w * h * 3 * bytes));
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (in.gcount() != static_cast<std::streamsize>(buf.size())) throw Error("ppm: truncated pixel data in '" + path + "'");
  Tensor<float> img(Shape{1, 3, h, w});
  for (int64_t r = 0; r < h; ++r)
    for (int64_t c = 0; c < w; ++c)
      for (int64_t ch = 0; ch < 3; ++ch) {
        const size_t i = static_cast<size_t>(((r * w + c) * 3 + ch) * bytes);
        const int v = bytes == 2 ? (buf[i] << 8 | buf[i + 1]) : buf[i];
        img.at(0, ch, r, c) = static_cast<float>(v) / static_cast<float>(maxval);
      }
  return img;
}

}  // namespace

uint8_t to_u8(float v) { return static_cast<uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); }

Tensor<float> quantize_8bit(const Tensor<float>& image) {
  Tensor<float> out(image.shape());
  for (int64_t i = 0; i < image.numel(); ++i) out[i] = to_u8(image[i]) / 255.0f;
  return out;
}

Tensor<float> read_image(const std::string& path) {
  if (has_extension(path, ".ppm") || has_extension(path, ".pnm")) return read_ppm(path);
  return read_png(path);
}

void write_image(const std::string& path, const Tensor<float>& image) {
  const Shape s = image.shape();
  if (s.n != 1 || s.c != 3) throw ShapeError("write_image: expected (1,3,H,W), got " + s.str());
  std::vector<uint8_t> buf(static_cast<size_t>(s.h * s.w * 3));
  for (int64_t r = 0; r < s.h; ++r)
    for (int64_t c = 0; c < s.w; ++c)
      for (int64_t ch = 0; ch < 3; ++ch) buf[static_cast<size_t>((r * s.w + c) * 3 + ch)] = to_u8(image.at(0, ch, r, c));
  if (has_extension(path, ".ppm")) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    out << "P6\n" << s.w << " " << s.h << "\n255\n";
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!out) throw Error("write to '" + path + "' failed");
    return;
  }
  write_png_rows(path, s.w, s.h, PNG_COLOR_TYPE_RGB, buf, static_cast<size_t>(3 * s.w));
}

void write_gray_png(const std::string& path, int64_t width, int64_t height,
                    const std::vector<uint8_t>& pixels) {
  if (static_cast<int64_t>(pixels.size()) != width * height) {
    throw ShapeError("write_gray_png: pixel count does not match dimensions");
  }
  write_png_rows(path, width, height, PNG_COLOR_TYPE_GRAY, pixels, static_cast<size_t>(width));
}

}  // namespace treenet
