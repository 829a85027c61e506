#include "privisp/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>
#include <string>
#include <vector>

// jpeglib.h expects FILE and size_t to be declared first.
#include <jpeglib.h>

#include <csetjmp>

#include "privisp/error.hpp"

namespace privisp::io {

namespace {

std::string lower_extension(const std::filesystem::path& p) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
  return e;
}

bool is_jpeg(const std::filesystem::path& p) {
  const auto e = lower_extension(p);
  return e == ".jpg" || e == ".jpeg";
}

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

File open_file(const std::filesystem::path& p, const char* mode) {
  File f(std::fopen(p.c_str(), mode));
  if (!f) throw Error("cannot open " + p.string());
  return f;
}

Tensor from_interleaved(const std::vector<std::uint8_t>& rgb, int h, int w) {
  Tensor t({1, 3, h, w});
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (std::size_t p = 0; p < plane; ++p)
    for (int c = 0; c < 3; ++c) t[c * plane + p] = rgb[3 * p + c] / 255.0;
  return t;
}

std::vector<std::uint8_t> to_interleaved(const Tensor& img, int& h, int& w) {
  const bool batched = img.rank() == 4;
  if (!(batched && img.dim(0) == 1 && img.dim(1) == 3) && !(img.rank() == 3 && img.dim(0) == 3))
    throw ValidationError("write_image expects [1,3,H,W] or [3,H,W], got " + img.shape_string());
  h = img.dim(-2);
  w = img.dim(-1);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<std::uint8_t> rgb(3 * plane);
  for (std::size_t p = 0; p < plane; ++p)
    for (int c = 0; c < 3; ++c) rgb[3 * p + c] = to_byte(img[c * plane + p]);
  return rgb;
}

// --- PNG via the simplified libpng API.

Tensor read_png(const std::filesystem::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str()))
    throw ParseError(path.string(), image.message);
  image.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&image);
    throw ParseError(path.string(), image.message);
  }
  return from_interleaved(buf, static_cast<int>(image.height), static_cast<int>(image.width));
}

void write_png(const std::vector<std::uint8_t>& rgb, int h, int w, const std::filesystem::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(w);
  image.height = static_cast<png_uint_32>(h);
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, rgb.data(), 0, nullptr))
    throw Error("cannot write " + path.string() + ": " + image.message);
}

// --- JPEG via libjpeg with longjmp error recovery.

struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegError*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

Tensor read_jpeg(const std::filesystem::path& path) {
  File f = open_file(path, "rb");
  jpeg_decompress_struct cinfo;
  JpegError err;
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_error_exit;
  std::vector<std::uint8_t> buf;
  int h = 0, w = 0;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw ParseError(path.string(), err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, f.get());
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  h = static_cast<int>(cinfo.output_height);
  w = static_cast<int>(cinfo.output_width);
  buf.resize(static_cast<std::size_t>(h) * w * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = buf.data() + static_cast<std::size_t>(cinfo.output_scanline) * w * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return from_interleaved(buf, h, w);
}

void write_jpeg(const std::vector<std::uint8_t>& rgb, int h, int w, const std::filesystem::path& path, int quality) {
  File f = open_file(path, "wb");
  jpeg_compress_struct cinfo;
  JpegError err;
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_error_exit;
  if (setjmp(err.jump)) {
    jpeg_destroy_compress(&cinfo);
    throw Error("cannot write " + path.string() + ": " + err.message);
  }
  jpeg_create_compress(&cinfo);
  jpeg_stdio_dest(&cinfo, f.get());
  cinfo.image_width = static_cast<JDIMENSION>(w);
  cinfo.image_height = static_cast<JDIMENSION>(h);
  cinfo.input_components = 3;
  cinfo.in_color_space = JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  while (cinfo.next_scanline < cinfo.image_height) {
    JSAMPROW row = const_cast<std::uint8_t*>(rgb.data()) + static_cast<std::size_t>(cinfo.next_scanline) * w * 3;
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  jpeg_destroy_compress(&cinfo);
}

}  // namespace

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

Tensor read_image(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error("no such image: " + path.string());
  return is_jpeg(path) ? read_jpeg(path) : read_png(path);
}

void write_image(const Tensor& img, const std::filesystem::path& path, int jpeg_quality) {
  int h = 0, w = 0;
  const auto rgb = to_interleaved(img, h, w);
  if (is_jpeg(path))
    write_jpeg(rgb, h, w, path, jpeg_quality);
  else if (lower_extension(path) == ".png")
    write_png(rgb, h, w, path);
  else
    throw Error("unsupported image extension: " + path.string());
}

void write_mask(const Tensor& mask, const std::filesystem::path& path) {
  const int h = mask.dim(-2), w = mask.dim(-1);
  if (static_cast<std::size_t>(h) * w != mask.numel()) throw ValidationError("mask must be a single plane");
  File f = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) throw Error("libpng initialisation failed");
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("cannot write mask " + path.string());
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 1, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row(static_cast<std::size_t>((w + 7) / 8));
  for (int y = 0; y < h; ++y) {
    std::fill(row.begin(), row.end(), 0);
    for (int x = 0; x < w; ++x)
      if (mask[static_cast<std::size_t>(y) * w + x] != 0.0) row[x / 8] |= static_cast<png_byte>(0x80 >> (x % 8));
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Tensor read_mask(const std::filesystem::path& path) {
  Tensor rgb = read_png(path);
  const int h = rgb.dim(2), w = rgb.dim(3);
  Tensor out({1, 1, h, w});
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = rgb[i] > 0.5 ? 1.0 : 0.0;
  return out;
}

}  // namespace privisp::io
