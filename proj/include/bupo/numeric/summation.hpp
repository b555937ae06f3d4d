#pragma once

#include <cmath>
#include <cstddef>

namespace bupo::numeric {

// Neumaier-compensated running sum; the result is insensitive to summation
// order well below 1e-12 relative for the magnitudes used here.
class CompensatedSum {
 public:
  void add(double x) {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x)) {
      comp_ += (sum_ - t) + x;
    } else {
      comp_ += (x - t) + sum_;
    }
    sum_ = t;
  }
  void merge(const CompensatedSum& other) {
    add(other.sum_);
    add(other.comp_);
  }
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

// Mean with compensated accumulation and an explicit sample count.
class RunningMean {
 public:
  void add(double x) {
    sum_.add(x);
    ++count_;
  }
  void merge(const RunningMean& other) {
    sum_.merge(other.sum_);
    count_ += other.count_;
  }
  std::size_t count() const { return count_; }
  double sum() const { return sum_.value(); }
  double mean() const { return count_ ? sum_.value() / static_cast<double>(count_) : 0.0; }

 private:
  CompensatedSum sum_;
  std::size_t count_ = 0;
};

}  // namespace bupo::numeric
