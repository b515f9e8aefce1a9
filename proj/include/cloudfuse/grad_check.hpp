#ifndef CLOUDFUSE_GRAD_CHECK_HPP
#define CLOUDFUSE_GRAD_CHECK_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "cloudfuse/blocks.hpp"
#include "cloudfuse/graph.hpp"

namespace cloudfuse {

// Scalar objective built on top of a graph output: `value` is the loss and
// `seed` its gradient with respect to `out`.
struct Objective {
    Var<double> out;
    double value = 0;
    Tensor<double> seed;
};

// Builds the operation under test from the given input vars and parameters.
using ObjectiveFn = std::function<Objective(Graph<double>&, const std::vector<Var<double>>&, ParameterSet<double>&)>;
using OpFn = std::function<Var<double>(Graph<double>&, const std::vector<Var<double>>&, ParameterSet<double>&)>;

struct GradCheckOptions {
    double eps = 1e-5;
    // Denominator floor of the relative error; keeps near-zero gradient
    // entries from turning finite-difference roundoff into large ratios.
    double floor = 1e-5;
    // Coordinates sampled per parameter tensor (all input coordinates are checked).
    std::size_t max_param_coords = 24;
    // A coordinate above `tolerance` at `eps` is re-measured at these larger
    // steps and keeps its best agreement. Near-zero entries of a large
    // objective are otherwise dominated by evaluation roundoff, which grows
    // as eps shrinks; a wrong gradient disagrees at every step.
    double tolerance = 1e-4;
    std::vector<double> fallback_eps = {1e-4, 1e-3};
    std::size_t max_retries = 3;
    double jitter = 1e-3;
    std::uint64_t seed = 1234;
};

struct GradCheckResult {
    double max_rel_error = 0;
    std::size_t coords_checked = 0;
    std::size_t kinks_detected = 0;  // coordinates whose one-sided differences disagree
    std::size_t retries = 0;
    std::size_t refined = 0;  // coordinates that needed a fallback step
    std::string worst;  // "input[0][17]" or "param <name>[i]"
};

// Loss = sum(probe * out), probe fixed per output shape.
inline Objective probe_sum(Var<double> out, std::uint64_t seed) {
    Objective obj{out, 0, Tensor<double>(out.shape())};
    Rng rng(seed);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    for (auto& v : obj.seed.values()) v = dist(rng);
    const Tensor<double>& y = out.value();
    for (std::size_t i = 0; i < y.size(); ++i) obj.value += obj.seed[i] * y[i];
    return obj;
}

namespace detail {

struct Coordinate {
    bool is_param;
    std::size_t input_index;
    std::string param_name;
    std::size_t offset;
};

inline GradCheckResult grad_check_once(const ObjectiveFn& fn, std::vector<Tensor<double>>& inputs,
                                       ParameterSet<double>& params, const GradCheckOptions& opt) {
    auto evaluate = [&]() {
        Graph<double> g;
        std::vector<Var<double>> vars;
        for (const auto& t : inputs) vars.push_back(g.input(t, false));
        return fn(g, vars, params).value;
    };

    // Analytic pass.
    params.zero_grad();
    Graph<double> g;
    std::vector<Var<double>> vars;
    for (const auto& t : inputs) vars.push_back(g.input(t, true));
    Objective obj = fn(g, vars, params);
    g.backward(obj.out, obj.seed);

    std::vector<Coordinate> coords;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        for (std::size_t k = 0; k < inputs[i].size(); ++k) coords.push_back({false, i, {}, k});
    }
    Rng rng(opt.seed);
    for (const auto& [name, value] : params.values()) {
        std::vector<std::size_t> idx(value.size());
        for (std::size_t k = 0; k < idx.size(); ++k) idx[k] = k;
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(std::min(idx.size(), opt.max_param_coords));
        for (std::size_t k : idx) coords.push_back({true, 0, name, k});
    }

    GradCheckResult res;
    const double f0 = obj.value;
    for (const auto& c : coords) {
        double& slot = c.is_param ? params.value(c.param_name)[c.offset] : inputs[c.input_index][c.offset];
        const double analytic = c.is_param ? params.grad(c.param_name)[c.offset]
                                           : g.grad(vars[c.input_index])[c.offset];
        const double orig = slot;
        slot = orig + opt.eps;
        const double fp = evaluate();
        slot = orig - opt.eps;
        const double fm = evaluate();
        slot = orig;
        auto rel_error = [&](double numeric) {
            return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), opt.floor});
        };
        double rel = rel_error((fp - fm) / (2 * opt.eps));
        if (rel > opt.tolerance && !opt.fallback_eps.empty()) {
            ++res.refined;
            for (double h : opt.fallback_eps) {
                slot = orig + h;
                const double hp = evaluate();
                slot = orig - h;
                const double hm = evaluate();
                slot = orig;
                rel = std::min(rel, rel_error((hp - hm) / (2 * h)));
            }
        }
        ++res.coords_checked;
        const double forward = (fp - f0) / opt.eps, backward = (f0 - fm) / opt.eps;
        if (std::abs(forward - backward) > 1e-2 * std::max({std::abs(forward), std::abs(backward), 1e-3})) {
            ++res.kinks_detected;
        }
        if (rel > res.max_rel_error) {
            res.max_rel_error = rel;
            res.worst = c.is_param ? "param " + c.param_name + "[" + std::to_string(c.offset) + "]"
                                   : "input[" + std::to_string(c.input_index) + "][" + std::to_string(c.offset) + "]";
        }
    }
    return res;
}

}  // namespace detail

// Central finite-difference check of analytic input and parameter
// gradients. When a non-differentiable point (ReLU kink) is hit, inputs are
// jittered and the check is repeated up to `max_retries` times.
inline GradCheckResult grad_check_objective(const ObjectiveFn& fn, std::vector<Tensor<double>> inputs,
                                            ParameterSet<double> params, const GradCheckOptions& opt = {}) {
    Rng rng(opt.seed ^ 0x9e3779b97f4a7c15ULL);
    std::uniform_real_distribution<double> jitter(-opt.jitter, opt.jitter);
    GradCheckResult res;
    for (std::size_t attempt = 0;; ++attempt) {
        res = detail::grad_check_once(fn, inputs, params, opt);
        res.retries = attempt;
        if (res.kinks_detected == 0 || attempt >= opt.max_retries) break;
        for (auto& t : inputs) {
            for (auto& v : t.values()) v += jitter(rng);
        }
    }
    return res;
}

inline GradCheckResult grad_check(const OpFn& op, std::vector<Tensor<double>> inputs, ParameterSet<double> params,
                                  const GradCheckOptions& opt = {}) {
    const std::uint64_t probe_seed = opt.seed + 1;
    ObjectiveFn fn = [op, probe_seed](Graph<double>& g, const std::vector<Var<double>>& in, ParameterSet<double>& p) {
        return probe_sum(op(g, in, p), probe_seed);
    };
    return grad_check_objective(fn, std::move(inputs), std::move(params), opt);
}

}  // namespace cloudfuse

#endif  // CLOUDFUSE_GRAD_CHECK_HPP
