#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "m4/common.hpp"

namespace m4 {

// 8-bit image buffer; channels is 1 (PGM) or 3 (PPM), row-major interleaved.
struct Image {
    int width = 0, height = 0, channels = 0;
    std::vector<uint8_t> pixels;

    size_t idx(int y, int x, int c) const {
        return (static_cast<size_t>(y) * width + x) * channels + c;
    }
};

namespace pnm_detail {

inline int read_token(std::istream& in, const std::string& path) {
    // skips whitespace and '#' comments, then parses one decimal integer
    int ch = in.get();
    for (;;) {
        while (ch == ' ' || ch == '\t' || ch == '\r' || ch == '\n') ch = in.get();
        if (ch == '#') {
            while (ch != '\n' && ch != EOF) ch = in.get();
            continue;
        }
        break;
    }
    if (ch < '0' || ch > '9') {
        throw DataError("pnm: malformed header in " + path);
    }
    long v = 0;
    while (ch >= '0' && ch <= '9') {
        v = v * 10 + (ch - '0');
        if (v > 1 << 20) throw DataError("pnm: absurd header value in " + path);
        ch = in.get();
    }
    return static_cast<int>(v);
}

}  // namespace pnm_detail

inline Image read_pnm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("pnm: cannot open " + path);
    char m0 = 0, m1 = 0;
    in.get(m0);
    in.get(m1);
    int channels;
    if (m0 == 'P' && m1 == '6') {
        channels = 3;
    } else if (m0 == 'P' && m1 == '5') {
        channels = 1;
    } else {
        throw DataError("pnm: unsupported magic in " + path + " (want P5 or P6)");
    }
    Image img;
    img.channels = channels;
    img.width = pnm_detail::read_token(in, path);
    img.height = pnm_detail::read_token(in, path);
    const int maxval = pnm_detail::read_token(in, path);
    if (maxval != 255) throw DataError("pnm: only maxval 255 supported, " + path);
    // exactly one whitespace byte separates header and payload
    img.pixels.resize(static_cast<size_t>(img.width) * img.height * channels);
    in.read(reinterpret_cast<char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
    if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) {
        throw DataError("pnm: truncated payload in " + path);
    }
    return img;
}

inline void write_pnm(const std::string& path, const Image& img) {
    if (img.channels != 1 && img.channels != 3) {
        throw DataError("pnm: image must have 1 or 3 channels");
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("pnm: cannot write " + path);
    out << (img.channels == 3 ? "P6" : "P5") << '\n'
        << img.width << ' ' << img.height << '\n'
        << "255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()),
              static_cast<std::streamsize>(img.pixels.size()));
    if (!out) throw DataError("pnm: short write to " + path);
}

}  // namespace m4
