#include "ihk/common/image_io.hpp"

#include <png.h>

#include <cmath>
#include <cstring>
#include <stdexcept>
#include <vector>

#include "ihk/common/array_file.hpp"

namespace ihk {

namespace {

int color_type_for(int64_t channels) {
  switch (channels) {
    case 1: return PNG_COLOR_TYPE_GRAY;
    case 3: return PNG_COLOR_TYPE_RGB;
    case 4: return PNG_COLOR_TYPE_RGBA;
    default: throw std::invalid_argument("PNG images need 1, 3 or 4 channels");
  }
}

void append_to_string(png_structp png, png_bytep data, png_size_t len) {
  auto* out = static_cast<std::string*>(png_get_io_ptr(png));
  out->append(reinterpret_cast<const char*>(data), len);
}

struct ReadCursor {
  const std::string* bytes;
  std::size_t pos;
};

void read_from_string(png_structp png, png_bytep data, png_size_t len) {
  auto* cur = static_cast<ReadCursor*>(png_get_io_ptr(png));
  if (cur->pos + len > cur->bytes->size()) png_error(png, "PNG stream truncated");
  std::memcpy(data, cur->bytes->data() + cur->pos, len);
  cur->pos += len;
}

}  // namespace

std::string encode_png(const torch::Tensor& image) {
  if (image.dim() != 3) throw std::invalid_argument("encode_png expects H x W x C");
  const auto h = image.size(0), w = image.size(1), c = image.size(2);
  const int ctype = color_type_for(c);
  auto bytes = (image.detach().to(torch::kCPU, torch::kFloat32).clamp(0.0, 1.0) * 255.0)
                   .round()
                   .to(torch::kUInt8)
                   .contiguous();

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  std::string out;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng failed while encoding");
  }
  png_set_write_fn(png, &out, append_to_string, nullptr);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8, ctype, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  auto* base = bytes.data_ptr<uint8_t>();
  for (int64_t r = 0; r < h; ++r) png_write_row(png, base + r * w * c);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

torch::Tensor decode_png(const std::string& bytes) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  ReadCursor cur{&bytes, 0};
  torch::Tensor out;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("libpng failed while decoding");
  }
  png_set_read_fn(png, &cur, read_from_string);
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_packing(png);
  png_set_expand(png);
  png_read_update_info(png, info);
  const auto w = png_get_image_width(png, info);
  const auto h = png_get_image_height(png, info);
  const auto c = png_get_channels(png, info);
  auto raw = torch::empty({h, w, c}, torch::kUInt8);
  for (png_uint_32 r = 0; r < h; ++r) png_read_row(png, raw.data_ptr<uint8_t>() + r * w * c, nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return raw.to(torch::kFloat32) / 255.0;
}

void write_png(const std::filesystem::path& path, const torch::Tensor& image) {
  write_file_bytes(path, encode_png(image));
}

torch::Tensor read_png(const std::filesystem::path& path) { return decode_png(read_file_bytes(path)); }

double psnr(const torch::Tensor& a, const torch::Tensor& b) {
  const double mse = (a.to(torch::kFloat64) - b.to(torch::kFloat64)).pow(2).mean().item<double>();
  if (mse <= 0.0) return std::numeric_limits<double>::infinity();
  return -10.0 * std::log10(mse);
}

}  // namespace ihk
