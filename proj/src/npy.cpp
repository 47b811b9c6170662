#include "mthd/npy.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <regex>
#include <sstream>

namespace mthd::npy {
namespace {

constexpr char kMagic[] = "\x93NUMPY";

static_assert(std::endian::native == std::endian::little,
              "npy I/O assumes a little-endian host");

}  // namespace

void write(const std::filesystem::path& path, const ImageF& image) {
  std::ostringstream dict;
  dict << "{'descr': '<f4', 'fortran_order': False, 'shape': (" << image.rows() << ", "
       << image.cols() << "), }";
  std::string header = dict.str();
  // magic(6) + version(2) + length(2) + header must be a multiple of 64.
  const std::size_t unpadded = 10 + header.size() + 1;
  header.append((64 - unpadded % 64) % 64, ' ');
  header.push_back('\n');

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out.write(kMagic, 6);
  const char version[2] = {1, 0};
  out.write(version, 2);
  const auto len = static_cast<std::uint16_t>(header.size());
  out.write(reinterpret_cast<const char*>(&len), 2);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(image.data()),
            static_cast<std::streamsize>(image.size() * sizeof(float)));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

ImageF read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("missing file: " + path.string());

  char magic[6];
  in.read(magic, 6);
  if (!in || std::memcmp(magic, kMagic, 6) != 0)
    throw SchemaMismatch("not an npy file: " + path.string());
  unsigned char version[2];
  in.read(reinterpret_cast<char*>(version), 2);
  std::uint32_t header_len = 0;
  if (version[0] == 1) {
    std::uint16_t len16;
    in.read(reinterpret_cast<char*>(&len16), 2);
    header_len = len16;
  } else if (version[0] == 2 || version[0] == 3) {
    in.read(reinterpret_cast<char*>(&header_len), 4);
  } else {
    throw SchemaMismatch("unsupported npy version in " + path.string());
  }
  std::string header(header_len, '\0');
  in.read(header.data(), header_len);
  if (!in) throw SchemaMismatch("truncated npy header: " + path.string());

  static const std::regex descr_re(R"('descr'\s*:\s*'([<|=]?)(f4|f8)')");
  static const std::regex order_re(R"('fortran_order'\s*:\s*(True|False))");
  static const std::regex shape_re(R"('shape'\s*:\s*\(\s*(\d+)\s*,\s*(\d+)\s*,?\s*\))");
  std::smatch descr, order, shape;
  if (!std::regex_search(header, descr, descr_re) || !std::regex_search(header, order, order_re) ||
      !std::regex_search(header, shape, shape_re))
    throw SchemaMismatch("unsupported npy header in " + path.string() + ": " + header);
  if (order[1] == "True") throw SchemaMismatch("fortran-order npy not supported: " + path.string());

  const long rows = std::stol(shape[1]);
  const long cols = std::stol(shape[2]);
  ImageF image(rows, cols);
  if (descr[2] == "f4") {
    in.read(reinterpret_cast<char*>(image.data()),
            static_cast<std::streamsize>(image.size() * sizeof(float)));
  } else {
    Image<double> wide(rows, cols);
    in.read(reinterpret_cast<char*>(wide.data()),
            static_cast<std::streamsize>(wide.size() * sizeof(double)));
    image = wide.cast<float>();
  }
  if (!in) throw SchemaMismatch("truncated npy payload: " + path.string());
  return image;
}

}  // namespace mthd::npy
