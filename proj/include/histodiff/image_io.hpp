#pragma once

#include <string>

#include "histodiff/tensor.hpp"

namespace histodiff {

// PNG <-> CHW tensor in [0,1]. 8-bit RGB on disk.
Tensor load_png(const std::string& path);
void save_png(const Tensor& image, const std::string& path);

}  // namespace histodiff
