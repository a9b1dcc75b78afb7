#include "ctd/png_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "ctd/error.hpp"

namespace ctd {

namespace {

const uint8_t kPngSignature[8] = {137, 80, 78, 71, 13, 10, 26, 10};

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v >> 24));
    out.push_back(static_cast<uint8_t>(v >> 16));
    out.push_back(static_cast<uint8_t>(v >> 8));
    out.push_back(static_cast<uint8_t>(v));
}

uint32_t get_u32(const uint8_t* p) {
    return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
           (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

void append_chunk(std::vector<uint8_t>& out, const char type[4],
                  const std::vector<uint8_t>& payload) {
    put_u32(out, static_cast<uint32_t>(payload.size()));
    size_t crc_start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), payload.begin(), payload.end());
    uint32_t crc = crc32(0, out.data() + crc_start, static_cast<uInt>(out.size() - crc_start));
    put_u32(out, crc);
}

int paeth(int a, int b, int c) {
    int p = a + b - c;
    int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return a;
    if (pb <= pc) return b;
    return c;
}

}  // namespace

void write_gray_png(const std::filesystem::path& path, const GrayImage& image) {
    check(image.bit_depth == 8 || image.bit_depth == 16, Error::Kind::io,
          "unsupported PNG bit depth");
    check(static_cast<size_t>(image.width) * image.height == image.pixels.size(),
          Error::Kind::io, "image pixel buffer size mismatch");

    const int bytes_per_px = image.bit_depth / 8;
    const size_t stride = static_cast<size_t>(image.width) * bytes_per_px;
    std::vector<uint8_t> raw((stride + 1) * image.height);
    for (int y = 0; y < image.height; ++y) {
        uint8_t* row = raw.data() + static_cast<size_t>(y) * (stride + 1);
        row[0] = 0;  // filter: none
        for (int x = 0; x < image.width; ++x) {
            uint16_t v = image.pixels[static_cast<size_t>(y) * image.width + x];
            if (bytes_per_px == 1) {
                row[1 + x] = static_cast<uint8_t>(v & 0xFF);
            } else {
                row[1 + 2 * x] = static_cast<uint8_t>(v >> 8);
                row[2 + 2 * x] = static_cast<uint8_t>(v & 0xFF);
            }
        }
    }

    uLongf comp_bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<uint8_t> compressed(comp_bound);
    int rc = compress2(compressed.data(), &comp_bound, raw.data(),
                       static_cast<uLong>(raw.size()), 6);
    check(rc == Z_OK, Error::Kind::io, "zlib compression failed");
    compressed.resize(comp_bound);

    std::vector<uint8_t> out(kPngSignature, kPngSignature + 8);
    std::vector<uint8_t> ihdr;
    put_u32(ihdr, static_cast<uint32_t>(image.width));
    put_u32(ihdr, static_cast<uint32_t>(image.height));
    ihdr.push_back(static_cast<uint8_t>(image.bit_depth));
    ihdr.push_back(0);  // grayscale
    ihdr.push_back(0);  // deflate
    ihdr.push_back(0);  // filter method
    ihdr.push_back(0);  // no interlace
    append_chunk(out, "IHDR", ihdr);
    append_chunk(out, "IDAT", compressed);
    append_chunk(out, "IEND", {});

    std::ofstream f(path, std::ios::binary);
    check(f.good(), Error::Kind::io, "cannot write " + path.string());
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    check(f.good(), Error::Kind::io, "write failed for " + path.string());
}

GrayImage read_gray_png(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    check(f.good(), Error::Kind::io, "cannot open " + path.string());
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
    check(bytes.size() > 8 && std::memcmp(bytes.data(), kPngSignature, 8) == 0,
          Error::Kind::parse, path.string() + ": not a PNG file");

    GrayImage img;
    std::vector<uint8_t> idat;
    size_t pos = 8;
    bool saw_ihdr = false;
    while (pos + 12 <= bytes.size()) {
        uint32_t len = get_u32(bytes.data() + pos);
        check(pos + 12 + len <= bytes.size(), Error::Kind::parse, "truncated PNG chunk");
        const char* type = reinterpret_cast<const char*>(bytes.data() + pos + 4);
        const uint8_t* payload = bytes.data() + pos + 8;
        if (std::memcmp(type, "IHDR", 4) == 0) {
            check(len == 13, Error::Kind::parse, "bad IHDR length");
            img.width = static_cast<int>(get_u32(payload));
            img.height = static_cast<int>(get_u32(payload + 4));
            img.bit_depth = payload[8];
            check(payload[9] == 0, Error::Kind::parse, "only grayscale PNG supported");
            check(img.bit_depth == 8 || img.bit_depth == 16, Error::Kind::parse,
                  "only 8/16-bit PNG supported");
            check(payload[12] == 0, Error::Kind::parse, "interlaced PNG not supported");
            saw_ihdr = true;
        } else if (std::memcmp(type, "IDAT", 4) == 0) {
            idat.insert(idat.end(), payload, payload + len);
        } else if (std::memcmp(type, "IEND", 4) == 0) {
            break;
        }
        pos += 12 + len;
    }
    check(saw_ihdr && !idat.empty(), Error::Kind::parse, "incomplete PNG");

    const int bytes_per_px = img.bit_depth / 8;
    const size_t stride = static_cast<size_t>(img.width) * bytes_per_px;
    std::vector<uint8_t> raw((stride + 1) * img.height);
    uLongf raw_len = static_cast<uLongf>(raw.size());
    int rc = uncompress(raw.data(), &raw_len, idat.data(), static_cast<uLong>(idat.size()));
    check(rc == Z_OK && raw_len == raw.size(), Error::Kind::parse, "PNG inflate failed");

    // undo scanline filters
    std::vector<uint8_t> prev(stride, 0);
    img.pixels.resize(static_cast<size_t>(img.width) * img.height);
    for (int y = 0; y < img.height; ++y) {
        uint8_t* row = raw.data() + static_cast<size_t>(y) * (stride + 1);
        uint8_t filter = row[0];
        uint8_t* cur = row + 1;
        for (size_t i = 0; i < stride; ++i) {
            int a = i >= static_cast<size_t>(bytes_per_px) ? cur[i - bytes_per_px] : 0;
            int b = prev[i];
            int c = i >= static_cast<size_t>(bytes_per_px) ? prev[i - bytes_per_px] : 0;
            int v = cur[i];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += paeth(a, b, c); break;
                default: throw Error(Error::Kind::parse, "unknown PNG filter");
            }
            cur[i] = static_cast<uint8_t>(v & 0xFF);
        }
        std::memcpy(prev.data(), cur, stride);
        for (int x = 0; x < img.width; ++x) {
            uint16_t v = bytes_per_px == 1
                             ? cur[x]
                             : static_cast<uint16_t>((cur[2 * x] << 8) | cur[2 * x + 1]);
            img.pixels[static_cast<size_t>(y) * img.width + x] = v;
        }
    }
    return img;
}

Tensor image_to_tensor(const GrayImage& image) {
    Tensor t({1, image.height, image.width});
    const double scale = 1.0 / image.max_value();
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = image.pixels[static_cast<size_t>(i)] * scale;
    return t;
}

GrayImage tensor_to_image(const Tensor& t) {
    check(t.ndim() == 3 ? t.dim(0) == 1 : t.ndim() == 2, Error::Kind::shape,
          "tensor_to_image expects [1,H,W] or [H,W]");
    int h = t.dim(t.ndim() - 2), w = t.dim(t.ndim() - 1);
    GrayImage img;
    img.width = w;
    img.height = h;
    img.bit_depth = 8;
    img.pixels.resize(static_cast<size_t>(w) * h);
    for (int64_t i = 0; i < t.numel(); ++i) {
        double v = std::clamp(t[i], 0.0, 1.0);
        img.pixels[static_cast<size_t>(i)] = static_cast<uint16_t>(std::lround(v * 255.0));
    }
    return img;
}

}  // namespace ctd
