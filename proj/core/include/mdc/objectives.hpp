#pragma once

#include <vector>

#include "mdc/tensor.hpp"

// Training objectives: focal classification loss, L1 pixel loss, and their
// weighted combination. Everything here is computed in double precision —
// these values feed finite-difference gradient checks and logged curves, so
// float rounding would show up as test noise.
namespace mdc::objectives {

struct LossBreakdown {
  double pix = 0.0;
  double cls = 0.0;
  double total = 0.0;
  double alpha = 1.0;
};

// -w_t (1-p_t)^gamma log(p_t) with p = softmax(logits), evaluated in
// log-sum-exp form so extreme logits stay finite. gamma = 0 reduces to
// (weighted) cross-entropy. Empty class_weights means uniform weights.
// Throws std::invalid_argument on a bad target/gamma/weight vector or
// non-finite logits.
double focal_loss(const std::vector<double>& logits, int target, double gamma,
                  const std::vector<double>& class_weights = {});

// dL/dlogits for focal_loss, scaled by `scale` (use 1/batch for batch means).
std::vector<double> focal_loss_grad(const std::vector<double>& logits,
                                    int target, double gamma,
                                    const std::vector<double>& class_weights = {},
                                    double scale = 1.0);

// Mean absolute difference over all elements of the full image — masked and
// unmasked regions alike. Throws InvalidShapeError on shape mismatch.
double pixel_l1_loss(const Tensor& xhat, const Tensor& gt);

// dL/dxhat for pixel_l1_loss: sign(xhat - gt) / N, scaled by `scale`.
Tensor pixel_l1_grad(const Tensor& xhat, const Tensor& gt, double scale = 1.0);

// Combined objective: total = alpha * pix + cls.
LossBreakdown total_loss(const Tensor& xhat, const Tensor& gt,
                         const std::vector<double>& logits, int target,
                         double alpha = 1.0, double gamma = 2.0);

}  // namespace mdc::objectives
