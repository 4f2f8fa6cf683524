#include "volcap/frame_io.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>

#include "json.hpp"

namespace volcap {

namespace {

using FilePtr = std::unique_ptr<std::FILE, int (*)(std::FILE*)>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.string().c_str(), mode), &std::fclose);
  if (!f) throw IoError("cannot open " + path.string());
  return f;
}

// Writes rows of already packed big-endian samples.
void write_png(const std::filesystem::path& path, int width, int height, int bit_depth, int color_type,
               const std::vector<std::uint8_t>& packed, std::size_t row_bytes) {
  auto file = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("failed to encode " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), bit_depth,
               color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y)
    png_write_row(png, const_cast<png_bytep>(packed.data() + static_cast<std::size_t>(y) * row_bytes));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

struct DecodedPng {
  int width = 0, height = 0, bit_depth = 0, channels = 0;
  std::vector<std::uint8_t> packed;
  std::size_t row_bytes = 0;
};

DecodedPng read_png(const std::filesystem::path& path) {
  auto file = open_file(path, "rb");
  png_byte signature[8] = {};
  if (std::fread(signature, 1, 8, file.get()) != 8 || png_sig_cmp(signature, 0, 8) != 0)
    throw IoError(path.string() + ": not a PNG file");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("failed to decode " + path.string());
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  DecodedPng out;
  out.width = static_cast<int>(png_get_image_width(png, info));
  out.height = static_cast<int>(png_get_image_height(png, info));
  out.bit_depth = png_get_bit_depth(png, info);
  out.channels = png_get_channels(png, info);
  out.row_bytes = png_get_rowbytes(png, info);
  out.packed.resize(out.row_bytes * static_cast<std::size_t>(out.height));
  for (int y = 0; y < out.height; ++y)
    png_read_row(png, out.packed.data() + static_cast<std::size_t>(y) * out.row_bytes, nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

void put_u32_le(std::ostream& os, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                              static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b.data(), 4);
}

std::uint32_t get_u32_le(std::istream& is) {
  std::array<unsigned char, 4> b{};
  is.read(reinterpret_cast<char*>(b.data()), 4);
  return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_depth_png(const std::filesystem::path& path, const DepthFrame& frame) {
  const auto& img = frame.depth;
  const std::size_t row_bytes = static_cast<std::size_t>(img.width()) * 2;
  std::vector<std::uint8_t> packed(row_bytes * static_cast<std::size_t>(img.height()));
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      const double mm = std::round(static_cast<double>(img(x, y)) * 1000.0);
      const auto v = static_cast<std::uint16_t>(std::clamp(mm, 0.0, 65535.0));
      std::uint8_t* p = packed.data() + static_cast<std::size_t>(y) * row_bytes + static_cast<std::size_t>(x) * 2;
      p[0] = static_cast<std::uint8_t>(v >> 8);
      p[1] = static_cast<std::uint8_t>(v & 0xff);
    }
  }
  write_png(path, img.width(), img.height(), 16, PNG_COLOR_TYPE_GRAY, packed, row_bytes);
}

Image<float> read_depth_png(const std::filesystem::path& path) {
  const DecodedPng png = read_png(path);
  if (png.bit_depth != 16 || png.channels != 1) throw IoError(path.string() + ": expected 16-bit gray PNG");
  Image<float> img(png.width, png.height);
  for (int y = 0; y < png.height; ++y) {
    for (int x = 0; x < png.width; ++x) {
      const std::uint8_t* p = png.packed.data() + static_cast<std::size_t>(y) * png.row_bytes + static_cast<std::size_t>(x) * 2;
      img(x, y) = static_cast<float>(((p[0] << 8) | p[1]) / 1000.0);
    }
  }
  return img;
}

void write_depth_raw(const std::filesystem::path& path, const DepthFrame& frame) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string());
  os.write(kRawDepthMagic, 8);
  put_u32_le(os, static_cast<std::uint32_t>(frame.depth.width()));
  put_u32_le(os, static_cast<std::uint32_t>(frame.depth.height()));
  for (float d : frame.depth.data()) {
    std::uint32_t bits = 0;
    std::memcpy(&bits, &d, 4);
    put_u32_le(os, bits);
  }
  if (!os) throw IoError("write failed: " + path.string());
}

Image<float> read_depth_raw(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kRawDepthMagic, 8) != 0) throw IoError(path.string() + ": bad raw depth magic");
  const auto w = get_u32_le(is), h = get_u32_le(is);
  if (!is || w == 0 || h == 0 || w > 1u << 16 || h > 1u << 16) throw IoError(path.string() + ": bad raw depth header");
  Image<float> img(static_cast<int>(w), static_cast<int>(h));
  for (float& d : img.data()) {
    const std::uint32_t bits = get_u32_le(is);
    std::memcpy(&d, &bits, 4);
  }
  if (!is) throw IoError(path.string() + ": truncated raw depth payload");
  return img;
}

void write_color_png(const std::filesystem::path& path, const ColorFrame& frame) {
  const auto& img = frame.color;
  const std::size_t row_bytes = static_cast<std::size_t>(img.width()) * 3;
  std::vector<std::uint8_t> packed(row_bytes * static_cast<std::size_t>(img.height()));
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = std::round(std::clamp(static_cast<double>(img(x, y)[c]), 0.0, 1.0) * 255.0);
        packed[static_cast<std::size_t>(y) * row_bytes + static_cast<std::size_t>(x) * 3 + static_cast<std::size_t>(c)] =
            static_cast<std::uint8_t>(v);
      }
  write_png(path, img.width(), img.height(), 8, PNG_COLOR_TYPE_RGB, packed, row_bytes);
}

Image<Vec3f> read_color_png(const std::filesystem::path& path) {
  const DecodedPng png = read_png(path);
  if (png.bit_depth != 8 || png.channels != 3) throw IoError(path.string() + ": expected 8-bit RGB PNG");
  Image<Vec3f> img(png.width, png.height);
  for (int y = 0; y < png.height; ++y)
    for (int x = 0; x < png.width; ++x) {
      const std::uint8_t* p = png.packed.data() + static_cast<std::size_t>(y) * png.row_bytes + static_cast<std::size_t>(x) * 3;
      img(x, y) = Vec3f(p[0], p[1], p[2]) / 255.0f;
    }
  return img;
}

void write_calibration(const std::filesystem::path& path, const std::vector<Camera>& cameras) {
  nlohmann::json views = nlohmann::json::array();
  for (const Camera& cam : cameras) {
    const auto& k = cam.intrinsics;
    std::vector<double> rot(9);
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) rot[static_cast<std::size_t>(r * 3 + c)] = cam.pose.rotation(r, c);
    const auto& t = cam.pose.translation;
    views.push_back({{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy}, {"width", k.width},
                     {"height", k.height}, {"rotation", rot}, {"translation", {t.x(), t.y(), t.z()}}});
  }
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path.string());
  os << nlohmann::json{{"views", views}}.dump(2) << '\n';
}

std::vector<Camera> read_calibration(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::vector<Camera> cameras;
  try {
    const auto doc = nlohmann::json::parse(is);
    for (const auto& v : doc.at("views")) {
      Camera cam;
      cam.intrinsics = {v.at("fx").get<double>(), v.at("fy").get<double>(), v.at("cx").get<double>(),
                        v.at("cy").get<double>(), v.at("width").get<int>(), v.at("height").get<int>()};
      const auto rot = v.at("rotation").get<std::vector<double>>();
      const auto tr = v.at("translation").get<std::vector<double>>();
      if (rot.size() != 9 || tr.size() != 3) throw IoError(path.string() + ": bad rotation/translation arity");
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) cam.pose.rotation(r, c) = rot[static_cast<std::size_t>(r * 3 + c)];
      cam.pose.translation = Vec3(tr[0], tr[1], tr[2]);
      cam.intrinsics.validate();
      cam.pose.validate();
      cameras.push_back(cam);
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  return cameras;
}

}  // namespace volcap
