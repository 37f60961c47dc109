#include "treeground/render.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "treeground/common.hpp"

namespace tg {

namespace {

void put_u16(std::vector<uint8_t>& v, uint16_t x) {
    v.push_back(static_cast<uint8_t>(x & 0xff));
    v.push_back(static_cast<uint8_t>(x >> 8));
}

void put_u32(std::vector<uint8_t>& v, uint32_t x) {
    for (int i = 0; i < 4; ++i) v.push_back(static_cast<uint8_t>(x >> (8 * i) & 0xff));
}

uint8_t to_byte(double v) { return static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

}  // namespace

std::vector<uint8_t> bmp_bytes(const Tensor& frame) {
    if (frame.rank() != 3 || frame.shape[0] != 3)
        throw ShapeError(fmt::format("bmp needs a 3-channel grid, got {}", shape_str(frame.shape)));
    const int64_t h = frame.shape[1], w = frame.shape[2];
    const size_t row = (static_cast<size_t>(w) * 3 + 3) / 4 * 4;
    const uint32_t pixel_bytes = static_cast<uint32_t>(row * static_cast<size_t>(h));

    std::vector<uint8_t> out;
    out.reserve(54 + pixel_bytes);
    out.push_back('B');
    out.push_back('M');
    put_u32(out, 54 + pixel_bytes);
    put_u32(out, 0);
    put_u32(out, 54);
    put_u32(out, 40);
    put_u32(out, static_cast<uint32_t>(w));
    put_u32(out, static_cast<uint32_t>(h));
    put_u16(out, 1);
    put_u16(out, 24);
    put_u32(out, 0);
    put_u32(out, pixel_bytes);
    put_u32(out, 2835);
    put_u32(out, 2835);
    put_u32(out, 0);
    put_u32(out, 0);

    const auto px = [&](int64_t c, int64_t y, int64_t x) { return frame.at((c * h + y) * w + x); };
    for (int64_t y = h - 1; y >= 0; --y) {  // bottom-up rows
        const size_t start = out.size();
        for (int64_t x = 0; x < w; ++x) {
            out.push_back(to_byte(px(2, y, x)));  // B
            out.push_back(to_byte(px(1, y, x)));  // G
            out.push_back(to_byte(px(0, y, x)));  // R
        }
        out.resize(start + row, 0);
    }
    return out;
}

std::string base64_encode(const uint8_t* data, size_t n) {
    static const char table[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    out.reserve((n + 2) / 3 * 4);
    for (size_t i = 0; i < n; i += 3) {
        uint32_t chunk = static_cast<uint32_t>(data[i]) << 16;
        if (i + 1 < n) chunk |= static_cast<uint32_t>(data[i + 1]) << 8;
        if (i + 2 < n) chunk |= data[i + 2];
        out.push_back(table[chunk >> 18 & 63]);
        out.push_back(table[chunk >> 12 & 63]);
        out.push_back(i + 1 < n ? table[chunk >> 6 & 63] : '=');
        out.push_back(i + 2 < n ? table[chunk & 63] : '=');
    }
    return out;
}

namespace {

std::string rect(const Box& b, int64_t px, const char* cls, const char* color) {
    return fmt::format(
        "  <rect class=\"{}\" x=\"{:.2f}\" y=\"{:.2f}\" width=\"{:.2f}\" height=\"{:.2f}\" fill=\"none\" "
        "stroke=\"{}\" stroke-width=\"{:.2f}\"/>\n",
        cls, b.x_min * static_cast<double>(px), b.y_min * static_cast<double>(px),
        (b.x_max - b.x_min) * static_cast<double>(px), (b.y_max - b.y_min) * static_cast<double>(px), color,
        static_cast<double>(px) / 48.0);
}

}  // namespace

std::string render_overlay_svg(const Tensor& frame, const Box& pred, const std::optional<Box>& gt,
                               int64_t display_scale) {
    const int64_t px = frame.shape.size() == 3 ? frame.shape[1] : 0;
    const auto bmp = bmp_bytes(frame);
    std::string svg = fmt::format(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\">\n"
        "  <image href=\"data:image/bmp;base64,{}\" x=\"0\" y=\"0\" width=\"{}\" height=\"{}\" "
        "image-rendering=\"pixelated\"/>\n",
        px * display_scale, px * display_scale, px, px, base64_encode(bmp.data(), bmp.size()), px, px);
    svg += rect(pred, px, "pred", "#ff4040");
    if (gt) svg += rect(*gt, px, "gt", "#30d060");
    svg += "</svg>\n";
    return svg;
}

}  // namespace tg
