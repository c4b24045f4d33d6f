#pragma once

#include <stdexcept>
#include <string>

namespace pacm {

// Caller violated a documented precondition (bad shape, out-of-range knob).
class UsageError : public std::invalid_argument {
 public:
  explicit UsageError(const std::string& what) : std::invalid_argument(what) {}
};

// A density that cannot be normalized (all mass at -inf).
class DegenerateDensityError : public std::domain_error {
 public:
  explicit DegenerateDensityError(const std::string& what) : std::domain_error(what) {}
};

// q puts mass where r has none, so KL[q, r] is infinite.
class AbsoluteContinuityError : public std::domain_error {
 public:
  explicit AbsoluteContinuityError(const std::string& what) : std::domain_error(what) {}
};

// A quadrature grid does not cover enough of the target's mass.
class MassCoverageError : public std::domain_error {
 public:
  explicit MassCoverageError(const std::string& what) : std::domain_error(what) {}
};

// NaN produced during evaluation or differentiation.
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace pacm
