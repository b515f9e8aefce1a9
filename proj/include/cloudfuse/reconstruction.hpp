#ifndef CLOUDFUSE_RECONSTRUCTION_HPP
#define CLOUDFUSE_RECONSTRUCTION_HPP

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "cloudfuse/blocks.hpp"
#include "cloudfuse/fusion_net.hpp"
#include "cloudfuse/graph.hpp"

namespace cloudfuse {

// Global feature fusion: conv3x3(conv1x1(concat(stage features))) + F_opt^(0).
struct GlobalFeatureFusion {
    std::size_t stages = 1, channels = 0;

    Conv2dLayer reduce() const { return {"gff.conv1x1", stages * channels, channels, 1}; }
    Conv2dLayer refine() const { return {"gff.conv3x3", channels, channels, 3}; }

    template <typename T>
    void init(ParameterSet<T>& p, Rng& rng) const {
        reduce().init(p, rng);
        refine().init(p, rng);
    }

    template <typename T>
    Var<T> operator()(Graph<T>& g, ParameterSet<T>& p, const std::vector<Var<T>>& features, Var<T> optical_initial) const {
        if (features.size() != stages) {
            throw ShapeError("gff: expected " + std::to_string(stages) + " stage features, got " +
                             std::to_string(features.size()));
        }
        for (const auto& f : features) {
            if (f.shape() != optical_initial.shape()) {
                throw ShapeError("gff: stage feature " + shape_str(f.shape()) + " vs initial features " +
                                 shape_str(optical_initial.shape()));
            }
        }
        Var<T> merged = features.size() == 1 ? features.front() : concat(features);
        return add(refine()(g, p, reduce()(g, p, merged)), optical_initial);
    }
};

// Image reconstruction: conv3x3(reformat_inv(conv3x3(x))) back to full
// resolution and `bands` channels. The last conv starts at zero.
struct ImageReconstruction {
    std::size_t channels = 0, scale = 2, bands = kOpticalBands;

    Conv2dLayer expand() const { return {"irn.pre", channels, bands * scale * scale, 3}; }
    Conv2dLayer output() const { return {"irn.post", bands, bands, 3}; }

    template <typename T>
    void init(ParameterSet<T>& p, Rng& rng) const {
        expand().init(p, rng);
        output().init(p, rng, /*zero=*/true);
    }

    template <typename T>
    Var<T> operator()(Graph<T>& g, ParameterSet<T>& p, Var<T> x) const {
        return output()(g, p, reformat_inv(expand()(g, p, x), scale));
    }
};

// prediction = residual + cloudy input (unclipped).
template <typename T>
Var<T> predict(Var<T> residual, Var<T> input_opt) {
    if (residual.shape() != input_opt.shape()) {
        throw ShapeError("predict: residual " + shape_str(residual.shape()) + " vs input " + shape_str(input_opt.shape()));
    }
    return add(residual, input_opt);
}

// Export-time clipping to [0, 1].
template <typename T>
Tensor<T> clip_for_export(Tensor<T> x) {
    for (auto& v : x.values()) v = std::clamp(v, T(0), T(1));
    return x;
}

// Fusion network + global fusion + reconstruction head + input residual.
struct CloudRemovalNet {
    FusionConfig cfg;

    FusionNet fusion() const { return {cfg}; }
    GlobalFeatureFusion gff() const { return {cfg.stages, cfg.channels}; }
    ImageReconstruction irn() const { return {cfg.channels, cfg.scale, cfg.optical_bands}; }

    template <typename T>
    ParameterSet<T> init(Rng& rng) const {
        ParameterSet<T> p;
        fusion().init(p, rng);
        gff().init(p, rng);
        irn().init(p, rng);
        return p;
    }

    template <typename T>
    Var<T> operator()(Graph<T>& g, ParameterSet<T>& p, Var<T> opt, Var<T> sar) const {
        FusionOutput<T> f = fusion()(g, p, opt, sar);
        Var<T> fused = gff()(g, p, f.stage_features, f.optical_initial);
        return predict(irn()(g, p, fused), opt);
    }

    // Inference without gradient bookkeeping.
    template <typename T>
    Tensor<T> run(ParameterSet<T>& p, const Tensor<T>& opt, const Tensor<T>& sar) const {
        Graph<T> g(/*track_params=*/false);
        return (*this)(g, p, g.input(opt), g.input(sar)).value();
    }
};

}  // namespace cloudfuse

#endif  // CLOUDFUSE_RECONSTRUCTION_HPP
