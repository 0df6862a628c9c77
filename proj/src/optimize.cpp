#include "curvereg/optimize.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "curvereg/error.hpp"

namespace curvereg {

SimplexResult nelder_mead(const std::function<double(const Eigen::VectorXd &)> &f, const Eigen::VectorXd &x0,
                          const Eigen::VectorXd &step, const SimplexOptions &opts) {
    if(opts.max_evaluations < 1){
        throw Error(ErrorKind::OptimizerBudgetExceeded, "simplex search needs a budget of at least one evaluation");
    }
    const Eigen::Index n = x0.size();
    SimplexResult res;
    auto eval = [&](const Eigen::VectorXd &x) {
        ++res.evaluations;
        const double v = f(x);
        return std::isnan(v) ? std::numeric_limits<double>::infinity() : v;
    };

    std::vector<Eigen::VectorXd> pts(static_cast<std::size_t>(n + 1), x0);
    std::vector<double> vals(static_cast<std::size_t>(n + 1));
    vals[0] = eval(x0);
    for(Eigen::Index i = 0; i < n && res.evaluations < opts.max_evaluations; ++i){
        pts[static_cast<std::size_t>(i + 1)][i] += step[i];
        vals[static_cast<std::size_t>(i + 1)] = eval(pts[static_cast<std::size_t>(i + 1)]);
    }
    if(res.evaluations < n + 1){
        // Budget ran out while building the simplex.
        const auto best = static_cast<std::size_t>(std::min_element(vals.begin(), vals.begin() + res.evaluations) - vals.begin());
        res.x = pts[best];
        res.value = vals[best];
        return res;
    }

    std::vector<std::size_t> order(static_cast<std::size_t>(n + 1));
    while(res.evaluations < opts.max_evaluations){
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b){ return vals[a] < vals[b]; });
        const std::size_t best = order.front(), worst = order.back(), second = order[order.size() - 2];

        double spread = vals[worst] - vals[best];
        double size = 0.0;
        for(const auto &p : pts) size = std::max(size, (p - pts[best]).cwiseAbs().maxCoeff());
        if(spread <= opts.f_tolerance && size <= opts.x_tolerance) break;
        if(!std::isfinite(spread) && size <= opts.x_tolerance) break;

        Eigen::VectorXd centroid = Eigen::VectorXd::Zero(n);
        for(std::size_t i = 0; i < pts.size(); ++i){
            if(i != worst) centroid += pts[i];
        }
        centroid /= static_cast<double>(n);

        const Eigen::VectorXd xr = centroid + (centroid - pts[worst]);
        const double fr = eval(xr);
        if(fr < vals[best]){
            if(res.evaluations >= opts.max_evaluations){
                pts[worst] = xr; vals[worst] = fr;
                break;
            }
            const Eigen::VectorXd xe = centroid + 2.0 * (centroid - pts[worst]);
            const double fe = eval(xe);
            if(fe < fr){ pts[worst] = xe; vals[worst] = fe; }
            else{ pts[worst] = xr; vals[worst] = fr; }
            continue;
        }
        if(fr < vals[second]){
            pts[worst] = xr; vals[worst] = fr;
            continue;
        }
        if(res.evaluations >= opts.max_evaluations) break;
        // Contraction: outside if the reflection improved on the worst point, inside otherwise.
        const bool outside = fr < vals[worst];
        const Eigen::VectorXd xc = outside ? Eigen::VectorXd(centroid + 0.5 * (xr - centroid))
                                           : Eigen::VectorXd(centroid + 0.5 * (pts[worst] - centroid));
        const double fc = eval(xc);
        if(fc < (outside ? fr : vals[worst])){
            pts[worst] = xc; vals[worst] = fc;
            continue;
        }
        for(std::size_t i = 0; i < pts.size() && res.evaluations < opts.max_evaluations; ++i){
            if(i == best) continue;
            pts[i] = pts[best] + 0.5 * (pts[i] - pts[best]);
            vals[i] = eval(pts[i]);
        }
    }

    const auto best = static_cast<std::size_t>(std::min_element(vals.begin(), vals.end()) - vals.begin());
    res.x = pts[best];
    res.value = vals[best];
    return res;
}

} // namespace curvereg
