#pragma once
// Binary netpbm I/O: P5 (grey) and P6 (colour), maxval 255.

#include <cctype>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace attnhybrid {

struct Image8 {
  std::size_t width = 0, height = 0, channels = 1;  // 1 (P5) or 3 (P6)
  std::vector<std::uint8_t> pixels;                 // interleaved, row-major
};

namespace detail {

inline std::string netpbm_token(std::istream& in, const std::string& path) {
  std::string tok;
  while (tok.empty()) {
    int c = in.get();
    if (c == EOF) throw std::runtime_error(path + ": truncated netpbm header");
    if (c == '#') {
      while (c != '\n' && c != EOF) c = in.get();
      continue;
    }
    while (c != EOF && !std::isspace(c)) {
      tok += static_cast<char>(c);
      c = in.get();
    }
  }
  return tok;
}

inline std::size_t netpbm_number(std::istream& in, const std::string& path) {
  const std::string tok = netpbm_token(in, path);
  if (tok.find_first_not_of("0123456789") != std::string::npos) {
    throw std::runtime_error(path + ": bad netpbm header field '" + tok + "'");
  }
  return std::stoul(tok);
}

}  // namespace detail

inline Image8 read_netpbm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open image '" + path + "'");
  const std::string magic = detail::netpbm_token(in, path);
  Image8 img;
  if (magic == "P5") {
    img.channels = 1;
  } else if (magic == "P6") {
    img.channels = 3;
  } else {
    throw std::runtime_error(path + ": unsupported netpbm magic '" + magic + "' (need P5 or P6)");
  }
  img.width = detail::netpbm_number(in, path);
  img.height = detail::netpbm_number(in, path);
  const std::size_t maxval = detail::netpbm_number(in, path);
  if (maxval != 255) throw std::runtime_error(path + ": maxval must be 255");
  if (img.width == 0 || img.height == 0) throw std::runtime_error(path + ": empty image");
  img.pixels.resize(img.width * img.height * img.channels);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (static_cast<std::size_t>(in.gcount()) != img.pixels.size()) {
    throw std::runtime_error(path + ": truncated pixel data");
  }
  return img;
}

inline void write_netpbm(const std::string& path, const Image8& img) {
  if (img.channels != 1 && img.channels != 3) {
    throw std::invalid_argument("write_netpbm: channels must be 1 or 3");
  }
  if (img.pixels.size() != img.width * img.height * img.channels) {
    throw std::invalid_argument("write_netpbm: pixel buffer does not match extents");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write image '" + path + "'");
  out << (img.channels == 1 ? "P5" : "P6") << "\n"
      << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

}  // namespace attnhybrid
