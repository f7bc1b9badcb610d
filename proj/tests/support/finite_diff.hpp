#pragma once

// Central finite differences; test-only oracle, independent of the
// reverse-mode engine.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "metakws/tensor.hpp"

namespace metakws::testing {

using Objective = std::function<double(const std::vector<Tensor<double>>&)>;

inline std::vector<Tensor<double>> numeric_gradient(const Objective& f, std::vector<Tensor<double>> x, double h = 1e-5) {
    std::vector<Tensor<double>> out;
    for (std::size_t t = 0; t < x.size(); ++t) {
        Tensor<double> g(x[t].shape());
        for (std::size_t i = 0; i < x[t].size(); ++i) {
            const double saved = x[t][i];
            x[t][i] = saved + h;
            const double up = f(x);
            x[t][i] = saved - h;
            const double down = f(x);
            x[t][i] = saved;
            g[i] = (up - down) / (2 * h);
        }
        out.push_back(std::move(g));
    }
    return out;
}

/// |a - n| / max(|a|, |n|, floor), maximised over all entries. The floor keeps
/// near-zero entries from amplifying finite-difference roundoff.
inline double max_relative_error(const std::vector<Tensor<double>>& analytic, const std::vector<Tensor<double>>& numeric,
                                 double floor = 1e-4) {
    double worst = 0;
    for (std::size_t t = 0; t < analytic.size(); ++t)
        for (std::size_t i = 0; i < analytic[t].size(); ++i) {
            const double a = analytic[t][i], n = numeric[t][i];
            worst = std::max(worst, std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor}));
        }
    return worst;
}

}  // namespace metakws::testing
