// Copyright 2026 MUJICA Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "mujica/graph.hpp"
#include "mujica/tensor.hpp"

namespace mujica::test {

struct GradCheck {
    double max_rel = 0.0;
    double max_abs = 0.0;
};

/// Compares one reverse pass against central finite differences. `build`
/// receives fresh leaves for `inputs` (in order) and returns a scalar.
inline GradCheck grad_check(const std::vector<Tensor*>& inputs,
                            const std::function<Var(Graph&, const std::vector<Var>&)>& build,
                            double step = 1e-5, double denom_floor = 1e-6) {
    std::vector<Tensor> analytic;
    {
        Graph g;
        std::vector<Var> leaves;
        leaves.reserve(inputs.size());
        for (Tensor* t : inputs) leaves.push_back(g.leaf(*t, true));
        Var loss = build(g, leaves);
        g.backward(loss);
        for (const Var& v : leaves) analytic.push_back(v.grad());
    }
    auto eval = [&]() {
        Graph g;
        std::vector<Var> leaves;
        leaves.reserve(inputs.size());
        for (Tensor* t : inputs) leaves.push_back(g.leaf(*t, false));
        return build(g, leaves).val()[0];
    };
    GradCheck r;
    for (size_t k = 0; k < inputs.size(); ++k) {
        Tensor& t = *inputs[k];
        for (std::int64_t i = 0; i < t.size(); ++i) {
            const double keep = t[i];
            t[i] = keep + step;
            const double up = eval();
            t[i] = keep - step;
            const double dn = eval();
            t[i] = keep;
            const double fd = (up - dn) / (2.0 * step);
            const double an = analytic[k][i];
            const double abs_err = std::abs(fd - an);
            const double denom = std::max({std::abs(fd), std::abs(an), denom_floor});
            r.max_abs = std::max(r.max_abs, abs_err);
            r.max_rel = std::max(r.max_rel, abs_err / denom);
        }
    }
    return r;
}

/// Binder-aware variant: `build` binds every checked tensor (parameters and
/// activations alike) through the Binder, so analytic gradients are read back
/// with Binder::grad_of. Finite differences perturb the tensors in place and
/// rebuild.
inline GradCheck grad_check_bound(const std::vector<Tensor*>& inputs,
                                  const std::function<Var(Graph&, Binder&)>& build,
                                  double step = 1e-5, double denom_floor = 1e-6) {
    std::vector<Tensor> analytic;
    {
        Graph g;
        Binder bind(g);
        Var loss = build(g, bind);
        g.backward(loss);
        for (Tensor* t : inputs) analytic.push_back(bind.grad_of(*t));
    }
    auto eval = [&]() {
        Graph g;
        Binder bind(g);
        return build(g, bind).val()[0];
    };
    GradCheck r;
    for (size_t k = 0; k < inputs.size(); ++k) {
        Tensor& t = *inputs[k];
        for (std::int64_t i = 0; i < t.size(); ++i) {
            const double keep = t[i];
            t[i] = keep + step;
            const double up = eval();
            t[i] = keep - step;
            const double dn = eval();
            t[i] = keep;
            const double fd = (up - dn) / (2.0 * step);
            const double an = analytic[k][i];
            const double abs_err = std::abs(fd - an);
            const double denom = std::max({std::abs(fd), std::abs(an), denom_floor});
            r.max_abs = std::max(r.max_abs, abs_err);
            r.max_rel = std::max(r.max_rel, abs_err / denom);
        }
    }
    return r;
}

class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        path_ = std::filesystem::temp_directory_path() /
                ("mujica_" + tag + "_" + std::to_string(::getpid()) + "_" +
                 std::to_string(counter()++));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }

private:
    static int& counter() {
        static int c = 0;
        return c;
    }
    std::filesystem::path path_;
};

} // namespace mujica::test
