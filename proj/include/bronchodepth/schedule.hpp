#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace bronchodepth {

/// Step learning rate: base, base/2 from the first milestone, base/4 from the
/// second. Milestones are ceil(fraction * total) iterations (0-based).
class LrSchedule {
 public:
  LrSchedule(double base_lr, int64_t total_iterations, std::array<double, 2> fractions)
      : base_(base_lr) {
    for (size_t i = 0; i < fractions.size(); ++i) {
      const double exact = fractions[i] * static_cast<double>(total_iterations);
      const double nearest = std::round(exact);
      // 0.6 * 12000 is 7199.999... in binary; snap near-integers before ceil
      marks_[i] = static_cast<int64_t>(std::abs(exact - nearest) < 1e-6 ? nearest : std::ceil(exact));
    }
  }

  double lr_at(int64_t iteration) const {
    if (iteration >= marks_[1]) return base_ / 4.0;
    if (iteration >= marks_[0]) return base_ / 2.0;
    return base_;
  }

  const std::array<int64_t, 2>& milestones() const { return marks_; }

 private:
  double base_;
  std::array<int64_t, 2> marks_{};
};

/// SplitMix64 finaliser; derives independent stream seeds from (base, tag, index).
inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t base, uint64_t tag, uint64_t index = 0) {
  return mix64(mix64(base) ^ mix64(tag + 0x51ed27) ^ mix64(index * 0x2545f4914f6cdd1dULL + 1));
}

}  // namespace bronchodepth
