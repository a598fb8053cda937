#include "cvox/png.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "cvox/core.hpp"

namespace cvox::png {

namespace {

void put_u32_be(std::string& out, uint32_t v) {
    out.push_back(static_cast<char>((v >> 24) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>(v & 0xff));
}

// A PNG chunk is length, 4-char type, payload, then a CRC over type+payload.
void put_chunk(std::string& out, const char type[4], const std::string& payload) {
    put_u32_be(out, static_cast<uint32_t>(payload.size()));
    const size_t crc_start = out.size();
    out.append(type, 4);
    out += payload;
    const uLong crc = crc32(0L, reinterpret_cast<const Bytef*>(out.data() + crc_start),
                            static_cast<uInt>(4 + payload.size()));
    put_u32_be(out, static_cast<uint32_t>(crc));
}

}  // namespace

void GrayImage::validate() const {
    if (width < 1 || height < 1) throw Error::contract("GrayImage: empty image");
    if (static_cast<int64_t>(pixels.size()) != width * height)
        throw Error::contract("GrayImage: pixel buffer does not match width*height");
}

void write_gray_png(const GrayImage& image, const std::string& path) {
    image.validate();

    // Raw scanlines: one filter byte (0 = none) followed by the row's pixels.
    std::string raw;
    raw.reserve(static_cast<size_t>(image.height) * (static_cast<size_t>(image.width) + 1));
    for (int64_t y = 0; y < image.height; ++y) {
        raw.push_back('\0');
        raw.append(reinterpret_cast<const char*>(image.pixels.data() + y * image.width),
                   static_cast<size_t>(image.width));
    }

    uLongf comp_size = compressBound(static_cast<uLong>(raw.size()));
    std::string compressed(comp_size, '\0');
    const int rc = compress2(reinterpret_cast<Bytef*>(compressed.data()), &comp_size,
                             reinterpret_cast<const Bytef*>(raw.data()),
                             static_cast<uLong>(raw.size()), Z_BEST_SPEED);
    if (rc != Z_OK) throw Error::io("png: zlib compression failed");
    compressed.resize(comp_size);

    std::string ihdr;
    put_u32_be(ihdr, static_cast<uint32_t>(image.width));
    put_u32_be(ihdr, static_cast<uint32_t>(image.height));
    ihdr.push_back(8);     // bit depth
    ihdr.push_back(0);     // color type: grayscale
    ihdr.push_back(0);     // compression method
    ihdr.push_back(0);     // filter method
    ihdr.push_back(0);     // interlace: none

    std::string out;
    static const unsigned char sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    out.append(reinterpret_cast<const char*>(sig), 8);
    put_chunk(out, "IHDR", ihdr);
    put_chunk(out, "IDAT", compressed);
    put_chunk(out, "IEND", "");

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error::io("cannot open '" + path + "' for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw Error::io("short write to '" + path + "'");
}

GrayImage slice_panel(const Volume& v) {
    v.validate();
    const int64_t D = v.data.dim(0), H = v.data.dim(1), W = v.data.dim(2);

    float lo = v.data.data()[0], hi = v.data.data()[0];
    for (int64_t i = 0; i < v.data.size(); ++i) {
        lo = std::min(lo, v.data.data()[i]);
        hi = std::max(hi, v.data.data()[i]);
    }
    const float range = (hi - lo) > 1e-12f ? (hi - lo) : 1.0f;
    auto shade = [&](float x) {
        const float t = (x - lo) / range;
        return static_cast<uint8_t>(std::lround(std::clamp(t, 0.0f, 1.0f) * 255.0f));
    };

    // Three tiles: (H,W) at mid-depth, (D,W) at mid-height, (D,H) at mid-width.
    const int64_t gutter = 2;
    const int64_t tile_h = std::max({H, D});
    const int64_t tile_ws[3] = {W, W, H};
    const int64_t panel_w = tile_ws[0] + tile_ws[1] + tile_ws[2] + 2 * gutter;

    GrayImage img;
    img.width = panel_w;
    img.height = tile_h;
    img.pixels.assign(static_cast<size_t>(panel_w) * tile_h, 0);

    auto put = [&](int64_t x0, int64_t y, int64_t x, uint8_t g) {
        img.pixels[static_cast<size_t>(y) * panel_w + x0 + x] = g;
    };

    int64_t x0 = 0;
    for (int64_t y = 0; y < H; ++y)
        for (int64_t x = 0; x < W; ++x) put(x0, y, x, shade(v.at(D / 2, y, x)));
    x0 += tile_ws[0] + gutter;
    for (int64_t y = 0; y < D; ++y)
        for (int64_t x = 0; x < W; ++x) put(x0, y, x, shade(v.at(y, H / 2, x)));
    x0 += tile_ws[1] + gutter;
    for (int64_t y = 0; y < D; ++y)
        for (int64_t x = 0; x < H; ++x) put(x0, y, x, shade(v.at(y, x, W / 2)));

    return img;
}

void write_slice_panel(const Volume& v, const std::string& path) {
    write_gray_png(slice_panel(v), path);
}

}  // namespace cvox::png
