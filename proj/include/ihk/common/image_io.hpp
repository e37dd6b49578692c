#pragma once

#include <filesystem>
#include <string>

#include <torch/torch.h>

namespace ihk {

// Images are float tensors H x W x C with values in [0, 1], C in {1, 3, 4}.
// Row 0 is the top row of the picture.
std::string encode_png(const torch::Tensor& image);
torch::Tensor decode_png(const std::string& bytes);

void write_png(const std::filesystem::path& path, const torch::Tensor& image);
torch::Tensor read_png(const std::filesystem::path& path);

// Peak signal-to-noise ratio in dB for images on a [0, 1] scale.
double psnr(const torch::Tensor& a, const torch::Tensor& b);

}  // namespace ihk
