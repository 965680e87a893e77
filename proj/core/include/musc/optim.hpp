#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace musc {

enum class Schedule { kCosine, kConstant };

Schedule parse_schedule(const std::string& name);
std::string schedule_name(Schedule s);

// Learning rate at `step` of `total_steps`; cosine decays from base to 0.
double scheduled_lr(Schedule s, double base_lr, std::int64_t step,
                    std::int64_t total_steps) noexcept;

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

class Adam {
 public:
  Adam(std::size_t num_params, AdamConfig cfg = {});

  void step(std::span<double> params, std::span<const double> grad, double lr);
  std::int64_t steps_taken() const noexcept { return t_; }

 private:
  AdamConfig cfg_;
  std::vector<double> m_;
  std::vector<double> v_;
  std::int64_t t_ = 0;
};

// Scales `grad` in place so its L2 norm is at most max_norm; returns the
// norm before clipping.
double clip_grad_norm(std::span<double> grad, double max_norm) noexcept;

}  // namespace musc
