#pragma once

#include <functional>
#include <span>
#include <vector>

#include "hasd/matrix.hpp"

namespace hasd {

// log(sum(exp(v))) computed with a max shift, so it stays finite for
// large magnitudes and tolerates -inf entries. Empty input is an error.
double logsumexp(std::span<const double> v);

// X X^T for a P x M matrix; output is P x P symmetric PSD.
Matrix gram(const Matrix& x);

// sqrt(sum((A_ij - B_ij)^2)). Shapes must match.
double frobenius_distance(const Matrix& a, const Matrix& b);

// Central-difference gradient (f(x+h e_i) - f(x-h e_i)) / 2h. Used as the
// oracle every analytic gradient in the project is checked against.
std::vector<double> finite_diff_grad(
    const std::function<double(std::span<const double>)>& f,
    std::span<const double> x, double h);

}  // namespace hasd
