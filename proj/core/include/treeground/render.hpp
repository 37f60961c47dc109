#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "treeground/box.hpp"
#include "treeground/tensor.hpp"

namespace tg {

/// 24-bit uncompressed BMP of a 3 x px x px float grid (values clamped to [0,1]).
std::vector<uint8_t> bmp_bytes(const Tensor& frame);

std::string base64_encode(const uint8_t* data, size_t n);

/// Self-contained SVG overlay: the frame as an embedded BMP plus a rectangle
/// for the prediction and, when present, one for the ground truth.
std::string render_overlay_svg(const Tensor& frame, const Box& pred, const std::optional<Box>& gt,
                               int64_t display_scale = 8);

}  // namespace tg
