#pragma once

#include <functional>

#include <Eigen/Core>

namespace curvereg {

struct SimplexOptions {
    int max_evaluations = 2000;
    double f_tolerance = 1e-6; // stop when the simplex objective spread falls below this
    double x_tolerance = 1e-4; // ...and its largest vertex offset (in parameter units) too
};

struct SimplexResult {
    Eigen::VectorXd x;
    double value = 0.0;
    int evaluations = 0;
};

// Nelder-Mead downhill simplex (reflection 1, expansion 2, contraction 1/2, shrink 1/2).
// The initial simplex is x0 plus step[i] along each coordinate i.
SimplexResult nelder_mead(const std::function<double(const Eigen::VectorXd &)> &f, const Eigen::VectorXd &x0,
                          const Eigen::VectorXd &step, const SimplexOptions &opts = {});

} // namespace curvereg
