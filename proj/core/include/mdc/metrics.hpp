#pragma once

#include "mdc/tensor.hpp"

// Full-reference image quality metrics, computed per channel in double
// precision over data range [0, 1] (no luma conversion).
namespace mdc::metrics {

// 10*log10(data_range^2 / MSE) in dB. Identical inputs (MSE = 0) return
// +infinity — callers serialize it as a tagged sentinel, never a cap.
double psnr(const Tensor& a, const Tensor& b, double data_range = 1.0);

// Mean local SSIM with the standard 11x11 Gaussian window (sigma 1.5),
// C1 = 0.01^2, C2 = 0.03^2 at data range 1. Only fully-valid window
// positions contribute (no padding); channels are averaged. Throws
// InvalidShapeError when either side is smaller than the window.
double ssim(const Tensor& a, const Tensor& b);

}  // namespace mdc::metrics
