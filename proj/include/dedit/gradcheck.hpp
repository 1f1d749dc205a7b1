#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dedit/param_set.hpp"
#include "dedit/rng.hpp"
#include "dedit/tensor.hpp"

namespace dedit {

struct FdSample {
    std::string name;
    std::size_t index = 0;
    double analytic = 0;
    double numeric = 0;
    double rel_err = 0;
};

struct FdReport {
    double max_rel = 0;
    double mean_rel = 0;
    std::vector<FdSample> samples;
};

// Compares reverse-mode gradients against central finite differences on a
// random subset of the trainable scalars. `f` must rebuild the loss from the
// current parameter values on every call; it is evaluated twice up front and
// rejected if the two values differ, since a nondeterministic loss voids the
// finite-difference estimate. Frozen parameters are never sampled.
template <class S>
FdReport finite_diff_check(const std::function<TensorT<S>()>& f, ParamSetT<S>& params, int n_samples,
                           double h, Rng& rng) {
    if (n_samples <= 0) throw std::invalid_argument("finite_diff_check: n_samples must be positive");
    if (h <= 0) throw std::invalid_argument("finite_diff_check: step must be positive");

    TensorT<S> l1 = f();
    const S v1 = l1.value();
    const S v2 = f().value();
    if (std::memcmp(&v1, &v2, sizeof(S)) != 0)
        throw std::runtime_error("finite_diff_check: f is not deterministic (two evaluations differ)");

    params.zero_grads();
    backward(l1);

    std::vector<std::pair<std::string, std::size_t>> pool;
    params.for_each([&](const std::string& name, const TensorT<S>& t, bool frozen) {
        if (!frozen) pool.emplace_back(name, t.size());
    });
    std::size_t total = 0;
    for (auto& [name, n] : pool) total += n;
    if (total == 0) throw std::invalid_argument("finite_diff_check: no trainable scalars");

    FdReport report;
    for (int s = 0; s < n_samples; ++s) {
        std::size_t flat = rng.uniform_int(total);
        std::string name;
        std::size_t idx = 0;
        for (auto& [pname, n] : pool) {
            if (flat < n) {
                name = pname;
                idx = flat;
                break;
            }
            flat -= n;
        }
        TensorT<S>& p = params.at(name);
        const double analytic = static_cast<double>(p.grad()[idx]);
        S* slot = p.data() + idx;
        const S orig = *slot;
        *slot = orig + static_cast<S>(h);
        const double fp = static_cast<double>(f().value());
        *slot = orig - static_cast<S>(h);
        const double fm = static_cast<double>(f().value());
        *slot = orig;
        const double numeric = (fp - fm) / (2.0 * h);
        const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-12});
        const double rel = std::fabs(analytic - numeric) / denom;
        report.samples.push_back({name, idx, analytic, numeric, rel});
        report.max_rel = std::max(report.max_rel, rel);
        report.mean_rel += rel;
    }
    report.mean_rel /= static_cast<double>(n_samples);
    return report;
}

}  // namespace dedit
