#pragma once

// Independent reference implementations used to check the library.

#include <array>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "curvereg/keycurve.hpp"
#include "curvereg/random.hpp"

namespace oracle {

using quad = __float128;

// Least squares quadratic in the raw z basis from the 3x3 normal equations, solved in
// quad precision by Gaussian elimination with partial pivoting.
inline std::pair<curvereg::QuadCoeffs, curvereg::QuadCoeffs>
normal_equations_fit(const std::vector<curvereg::KeyPoint> &pts) {
    quad a[3][5] = {};
    for(const auto &p : pts){
        const quad z = p.z;
        const quad v[3] = {z * z, z, 1};
        for(int r = 0; r < 3; ++r){
            for(int c = 0; c < 3; ++c) a[r][c] += v[r] * v[c];
            a[r][3] += v[r] * quad(p.x);
            a[r][4] += v[r] * quad(p.y);
        }
    }
    for(int col = 0; col < 3; ++col){
        int piv = col;
        for(int r = col + 1; r < 3; ++r){
            if((a[r][col] < 0 ? -a[r][col] : a[r][col]) > (a[piv][col] < 0 ? -a[piv][col] : a[piv][col])) piv = r;
        }
        for(int c = 0; c < 5; ++c) std::swap(a[col][c], a[piv][c]);
        for(int r = 0; r < 3; ++r){
            if(r == col) continue;
            const quad f = a[r][col] / a[col][col];
            for(int c = 0; c < 5; ++c) a[r][c] -= f * a[col][c];
        }
    }
    curvereg::QuadCoeffs cx{}, cy{};
    for(int r = 0; r < 3; ++r){
        cx[static_cast<std::size_t>(r)] = static_cast<double>(a[r][3] / a[r][r]);
        cy[static_cast<std::size_t>(r)] = static_cast<double>(a[r][4] / a[r][r]);
    }
    return {cx, cy};
}

// Noisy samples of a random quadratic at n distinct z positions.
inline std::vector<curvereg::KeyPoint> random_points(std::uint64_t seed, int n, const std::string &id = "c") {
    curvereg::Rng rng(seed);
    const double a2x = rng.uniform(-0.01, 0.01), a1x = rng.uniform(-0.5, 0.5), a0x = rng.uniform(-50, 50);
    const double a2y = rng.uniform(-0.01, 0.01), a1y = rng.uniform(-0.5, 0.5), a0y = rng.uniform(-50, 50);
    const double z0 = rng.uniform(-80, 0);
    std::vector<curvereg::KeyPoint> pts;
    for(int i = 0; i < n; ++i){
        const double z = z0 + 3.5 * i + rng.uniform(0, 1);
        curvereg::KeyPoint p;
        p.curve_id = id;
        p.z = z;
        p.x = (a2x * z + a1x) * z + a0x + rng.normal();
        p.y = (a2y * z + a1y) * z + a0y + rng.normal();
        p.source_slice_index = i;
        pts.push_back(p);
    }
    return pts;
}

// Power-sum evaluation, written independently of the library's Horner form.
inline double power_sum(const curvereg::QuadCoeffs &c, double z) {
    return c[0] * std::pow(z, 2) + c[1] * std::pow(z, 1) + c[2];
}

// Mean in-plane distance over the z overlap by dense midpoint sampling.
inline double dense_distance(const curvereg::KeyCurve &a, const curvereg::KeyCurve &b, int n) {
    const double lo = std::max(a.z_min, b.z_min), hi = std::min(a.z_max, b.z_max);
    long double sum = 0;
    for(int i = 0; i < n; ++i){
        const double z = lo + (hi - lo) * (i + 0.5) / n;
        const double dx = power_sum(a.coeff_x, z) - power_sum(b.coeff_x, z);
        const double dy = power_sum(a.coeff_y, z) - power_sum(b.coeff_y, z);
        sum += std::sqrt(dx * dx + dy * dy);
    }
    return static_cast<double>(sum / n);
}

// CKA from explicit n x n Gram matrices: HSIC(K, L) = tr(K H L H).
inline double hsic_lcka(const Eigen::MatrixXd &x, const Eigen::MatrixXd &y) {
    const auto n = x.rows();
    using MatL = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;
    const MatL xl = x.cast<long double>(), yl = y.cast<long double>();
    const MatL k = xl * xl.transpose(), l = yl * yl.transpose();
    const MatL h = MatL::Identity(n, n) - MatL::Constant(n, n, 1.0L / static_cast<long double>(n));
    const auto hsic = [&](const MatL &p, const MatL &q) { return (p * h * q * h).trace(); };
    return static_cast<double>(hsic(k, l) / std::sqrt(hsic(k, k) * hsic(l, l)));
}

} // namespace oracle
