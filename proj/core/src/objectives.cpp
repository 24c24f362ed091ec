#include "mdc/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "mdc/errors.hpp"

namespace mdc::objectives {

namespace {

void check_focal_inputs(const std::vector<double>& logits, int target,
                        double gamma,
                        const std::vector<double>& class_weights) {
  if (logits.empty())
    throw std::invalid_argument("focal_loss: empty logits");
  if (target < 0 || target >= static_cast<int>(logits.size()))
    throw std::invalid_argument("focal_loss: target " +
                                std::to_string(target) + " out of range for " +
                                std::to_string(logits.size()) + " classes");
  if (!(gamma >= 0.0))
    throw std::invalid_argument("focal_loss: gamma must be >= 0");
  for (double l : logits)
    if (!std::isfinite(l))
      throw std::invalid_argument("focal_loss: non-finite logit");
  if (!class_weights.empty() && class_weights.size() != logits.size())
    throw std::invalid_argument("focal_loss: class_weights size " +
                                std::to_string(class_weights.size()) +
                                " vs " + std::to_string(logits.size()) +
                                " classes");
}

double log_sum_exp(const std::vector<double>& v) {
  double m = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

}  // namespace

double focal_loss(const std::vector<double>& logits, int target, double gamma,
                  const std::vector<double>& class_weights) {
  check_focal_inputs(logits, target, gamma, class_weights);
  double w = class_weights.empty()
                 ? 1.0
                 : class_weights[static_cast<std::size_t>(target)];
  double lse = log_sum_exp(logits);
  double log_pt = logits[static_cast<std::size_t>(target)] - lse;
  // 1 - p_t via expm1 keeps precision when p_t is close to 1.
  double q = -std::expm1(log_pt);
  q = std::max(q, 0.0);
  return -w * std::pow(q, gamma) * log_pt;
}

std::vector<double> focal_loss_grad(const std::vector<double>& logits,
                                    int target, double gamma,
                                    const std::vector<double>& class_weights,
                                    double scale) {
  check_focal_inputs(logits, target, gamma, class_weights);
  double w = class_weights.empty()
                 ? 1.0
                 : class_weights[static_cast<std::size_t>(target)];
  double lse = log_sum_exp(logits);
  double log_pt = logits[static_cast<std::size_t>(target)] - lse;
  double pt = std::exp(log_pt);
  double q = std::max(-std::expm1(log_pt), 0.0);

  // d/dl_j of -w q^g log(p_t) = A (delta_tj - p_j) with
  // A = w (g q^(g-1) p_t log(p_t) - q^g). The first term's limit as q->0 is
  // 0 for any g > 0, but pow(0, g-1) overflows for g < 1, so take the limit
  // explicitly.
  double term1;
  if (gamma == 0.0)
    term1 = 0.0;
  else if (q == 0.0)
    term1 = 0.0;
  else
    term1 = gamma * std::pow(q, gamma - 1.0) * pt * log_pt;
  double a = w * (term1 - std::pow(q, gamma));

  std::vector<double> g(logits.size());
  for (std::size_t j = 0; j < logits.size(); ++j) {
    double pj = std::exp(logits[j] - lse);
    double delta = static_cast<int>(j) == target ? 1.0 : 0.0;
    g[j] = scale * a * (delta - pj);
  }
  return g;
}

double pixel_l1_loss(const Tensor& xhat, const Tensor& gt) {
  check_same_shape(xhat, gt, "pixel_l1_loss");
  if (xhat.size() == 0)
    throw std::invalid_argument("pixel_l1_loss: empty tensors");
  double acc = 0.0;
  for (std::size_t i = 0; i < xhat.data.size(); ++i)
    acc += std::abs(static_cast<double>(xhat.data[i]) - gt.data[i]);
  return acc / static_cast<double>(xhat.data.size());
}

Tensor pixel_l1_grad(const Tensor& xhat, const Tensor& gt, double scale) {
  check_same_shape(xhat, gt, "pixel_l1_grad");
  if (xhat.size() == 0)
    throw std::invalid_argument("pixel_l1_grad: empty tensors");
  Tensor g(xhat.c, xhat.h, xhat.w);
  double s = scale / static_cast<double>(xhat.data.size());
  for (std::size_t i = 0; i < xhat.data.size(); ++i) {
    double d = static_cast<double>(xhat.data[i]) - gt.data[i];
    g.data[i] = static_cast<float>(d > 0.0 ? s : (d < 0.0 ? -s : 0.0));
  }
  return g;
}

LossBreakdown total_loss(const Tensor& xhat, const Tensor& gt,
                         const std::vector<double>& logits, int target,
                         double alpha, double gamma) {
  LossBreakdown b;
  b.alpha = alpha;
  b.pix = pixel_l1_loss(xhat, gt);
  b.cls = focal_loss(logits, target, gamma);
  b.total = alpha * b.pix + b.cls;
  return b;
}

}  // namespace mdc::objectives
