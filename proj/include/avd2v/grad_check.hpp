#pragma once

#include <functional>
#include <string>
#include <vector>

#include "avd2v/tensor.hpp"

namespace avd2v {

struct GradCheckEntry {
  std::string name;
  double rel_error = 0.0;  // ||tape - fd|| / max(||tape||, ||fd||, floor)
  double tape_norm = 0.0;
  double fd_norm = 0.0;
  std::size_t coords_checked = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  bool non_finite = false;
  double tolerance = 0.0;

  double max_rel_error() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.rel_error);
    return m;
  }
  bool passed() const { return !non_finite && max_rel_error() < tolerance; }
};

struct NamedLeaf {
  std::string name;
  Tensor<double> leaf;
};

/// Compares tape gradients of the scalar `f` with central finite differences
/// (step `h`) at the current values of `leaves`. At most `max_coords`
/// coordinates per leaf are perturbed, evenly strided; 0 means all of them.
inline GradCheckReport grad_check(const std::function<Tensor<double>()>& f, std::vector<NamedLeaf> leaves,
                                  double tolerance = 1e-4, double h = 1e-5, std::size_t max_coords = 0,
                                  double floor = 1e-7) {
  GradCheckReport report;
  report.tolerance = tolerance;
  for (auto& l : leaves) {
    l.leaf.set_requires_grad(true);
    l.leaf.zero_grad();
  }
  {
    auto loss = f();
    if (!loss.all_finite()) report.non_finite = true;
    backward(loss);
  }
  NoGradGuard no_grad;
  for (auto& l : leaves) {
    GradCheckEntry e;
    e.name = l.name;
    const std::size_t n = l.leaf.numel();
    const std::size_t stride = (max_coords == 0 || n <= max_coords) ? 1 : (n + max_coords - 1) / max_coords;
    std::vector<double> tape(l.leaf.grad().begin(), l.leaf.grad().end());
    if (tape.empty()) tape.assign(n, 0.0);
    double diff2 = 0, tape2 = 0, fd2 = 0;
    auto values = l.leaf.mutable_data();
    for (std::size_t i = 0; i < n; i += stride) {
      const double saved = values[i];
      values[i] = saved + h;
      const double up = f().item();
      values[i] = saved - h;
      const double down = f().item();
      values[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) report.non_finite = true;
      const double fd = (up - down) / (2 * h);
      diff2 += (fd - tape[i]) * (fd - tape[i]);
      tape2 += tape[i] * tape[i];
      fd2 += fd * fd;
      ++e.coords_checked;
    }
    e.tape_norm = std::sqrt(tape2);
    e.fd_norm = std::sqrt(fd2);
    e.rel_error = std::sqrt(diff2) / std::max({e.tape_norm, e.fd_norm, floor});
    report.entries.push_back(e);
  }
  return report;
}

}  // namespace avd2v
