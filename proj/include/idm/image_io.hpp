#pragma once

#include <filesystem>

#include "idm/common.hpp"

namespace idm {

// 8-bit PNG / binary PPM codecs. Float images are quantized with round-to-nearest.
ImageTensor read_image(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const ImageTensor& image);

/// Raw single-channel 8-bit values; the caller maps them to classes.
LabelMap read_label_png(const std::filesystem::path& path);
void write_label_png(const std::filesystem::path& path, const LabelMap& label);

}  // namespace idm
