#ifndef CLOUDFUSE_FUSION_NET_HPP
#define CLOUDFUSE_FUSION_NET_HPP

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "cloudfuse/blocks.hpp"
#include "cloudfuse/graph.hpp"
#include "cloudfuse/raster_store.hpp"

namespace cloudfuse {

struct FusionConfig {
    std::size_t scale = 2;        // reformat factor s
    std::size_t channels = 64;    // base feature width
    std::size_t rdb_count = 4;    // J, residual dense blocks per stage
    std::size_t stages = 3;       // N (also D, the number of maps fed to global fusion)
    std::size_t rdb_layers = 5;
    std::size_t rdb_growth = 32;
    std::size_t window = 8;
    std::size_t heads = 4;
    std::size_t mlp_ratio = 2;
    std::size_t optical_bands = kOpticalBands;
    std::size_t sar_channels = kSarChannels;

    // Patch height and width must be multiples of this.
    std::size_t patch_multiple() const { return scale * window; }

    void validate() const {
        auto fail = [](const std::string& m) { throw ValidationError("fusion config: " + m); };
        if (scale == 0) fail("scale must be >= 1");
        if (channels == 0) fail("channels must be >= 1");
        if (rdb_count < 2) fail("rdb_count (J) must be >= 2");
        if (stages < 1) fail("stages (N) must be >= 1");
        if (rdb_layers < 1 || rdb_growth < 1) fail("rdb_layers and rdb_growth must be >= 1");
        if (window == 0) fail("window must be >= 1");
        if (heads == 0 || channels % heads != 0) fail("channels must be divisible by heads");
        if (mlp_ratio == 0) fail("mlp_ratio must be >= 1");
    }

    void require_patch(std::size_t h, std::size_t w) const {
        const std::size_t m = patch_multiple();
        if (h == 0 || w == 0 || h % m != 0 || w % m != 0) {
            throw ShapeError("patch " + std::to_string(h) + "x" + std::to_string(w) + " is not divisible by s*window = " +
                             std::to_string(m));
        }
    }

    friend bool operator==(const FusionConfig&, const FusionConfig&) = default;
};

enum class Modality { optical, sar };

inline const char* modality_name(Modality m) { return m == Modality::optical ? "opt" : "sar"; }

namespace detail {

template <typename T>
void require_channels(Var<T> x, std::size_t c, const char* what) {
    const Shape& s = x.shape();
    if (s.size() != 3 || s[0] != c) {
        throw ShapeError(std::string(what) + ": expected " + std::to_string(c) + " channels, got " + shape_str(s));
    }
}

}  // namespace detail

// Low-level feature encoder: ReLU(conv3x3(ReLU(conv3x3(x)))).
struct LowLevelEncoder {
    std::string name;
    std::size_t in = 0, channels = 0;

    Conv2dLayer conv1() const { return {name + ".conv1", in, channels, 3}; }
    Conv2dLayer conv2() const { return {name + ".conv2", channels, channels, 3}; }

    template <typename T>
    void init(ParameterSet<T>& p, Rng& rng) const {
        conv1().init(p, rng);
        conv2().init(p, rng);
    }

    template <typename T>
    Var<T> operator()(Graph<T>& g, ParameterSet<T>& p, Var<T> x) const {
        detail::require_channels(x, in, "lfe_forward");
        return relu(conv2()(g, p, relu(conv1()(g, p, x))));
    }
};

// Residual dense block: densely connected 3x3 conv+ReLU layers, 1x1 local
// fusion back to `channels`, plus the block input.
struct ResidualDenseBlock {
    std::string name;
    std::size_t channels = 0, layers = 5, growth = 32;

    Conv2dLayer dense(std::size_t l) const {
        return {name + ".dense" + std::to_string(l), channels + l * growth, growth, 3};
    }
    Conv2dLayer fusion() const { return {name + ".lff", channels + layers * growth, channels, 1}; }

    template <typename T>
    void init(ParameterSet<T>& p, Rng& rng) const {
        for (std::size_t l = 0; l < layers; ++l) dense(l).init(p, rng);
        fusion().init(p, rng);
    }

    template <typename T>
    Var<T> operator()(Graph<T>& g, ParameterSet<T>& p, Var<T> x) const {
        detail::require_channels(x, channels, "rdb_forward");
        std::vector<Var<T>> features{x};
        for (std::size_t l = 0; l < layers; ++l) {
            Var<T> in = features.size() == 1 ? x : concat(features);
            features.push_back(relu(dense(l)(g, p, in)));
        }
        return add(x, fusion()(g, p, concat(features)));
    }
};

// x + MLP(LN(x + W-MSA(LN(x)))), one outer residual.
struct SwinBlock {
    std::string name;
    std::size_t channels = 0, window = 8, heads = 4, mlp_ratio = 2;

    LayerNormLayer norm1() const { return {name + ".norm1", channels}; }
    LayerNormLayer norm2() const { return {name + ".norm2", channels}; }
    WindowAttentionLayer attention() const { return {name + ".attn", channels, {window, heads}}; }
    MlpLayer mlp() const { return {name + ".mlp", channels, mlp_ratio}; }

    template <typename T>
    void init(ParameterSet<T>& p, Rng& rng) const {
        norm1().init(p);
        attention().init(p, rng);
        norm2().init(p);
        mlp().init(p, rng);
    }

    template <typename T>
    Var<T> operator()(Graph<T>& g, ParameterSet<T>& p, Var<T> x) const {
        detail::require_channels(x, channels, "swin_block_forward");
        Var<T> attended = add(x, attention()(g, p, norm1()(g, p, x)));
        return add(x, mlp()(g, p, norm2()(g, p, attended)));
    }
};

// One fusion stage for both modalities: RDB_1, Swin_1, ..., RDB_{J-1},
// Swin_{J-1}, RDB_J, then a 1x1 conv over [Swin_1 .. Swin_{J-1}, RDB_J].
struct FusionStage {
    std::string name;
    FusionConfig cfg;

    std::string prefix(Modality m) const { return name + "." + modality_name(m); }
    ResidualDenseBlock rdb(Modality m, std::size_t j) const {
        return {prefix(m) + ".rdb" + std::to_string(j), cfg.channels, cfg.rdb_layers, cfg.rdb_growth};
    }
    SwinBlock swin(Modality m, std::size_t j) const {
        return {prefix(m) + ".swin" + std::to_string(j), cfg.channels, cfg.window, cfg.heads, cfg.mlp_ratio};
    }
    Conv2dLayer aggregate(Modality m) const {
        return {prefix(m) + ".aggregate", cfg.rdb_count * cfg.channels, cfg.channels, 1};
    }

    template <typename T>
    void init(ParameterSet<T>& p, Rng& rng) const {
        for (Modality m : {Modality::optical, Modality::sar}) {
            for (std::size_t j = 0; j < cfg.rdb_count; ++j) {
                rdb(m, j).init(p, rng);
                if (j + 1 < cfg.rdb_count) swin(m, j).init(p, rng);
            }
            aggregate(m).init(p, rng);
        }
    }

    template <typename T>
    Var<T> branch(Graph<T>& g, ParameterSet<T>& p, Modality m, Var<T> x) const {
        detail::require_channels(x, cfg.channels, "stage_forward");
        std::vector<Var<T>> collected;
        Var<T> h = x;
        for (std::size_t j = 0; j < cfg.rdb_count; ++j) {
            h = rdb(m, j)(g, p, h);
            if (j + 1 < cfg.rdb_count) h = swin(m, j)(g, p, h);
            collected.push_back(h);
        }
        return aggregate(m)(g, p, concat(collected));
    }

    // Returns (optical, SAR) aggregated features.
    template <typename T>
    std::pair<Var<T>, Var<T>> operator()(Graph<T>& g, ParameterSet<T>& p, Var<T> opt, Var<T> sar) const {
        return {branch(g, p, Modality::optical, opt), branch(g, p, Modality::sar, sar)};
    }
};

// opt + conv1x1([opt, sar]).
struct CrossModalMerge {
    std::string name;
    std::size_t channels = 0;

    Conv2dLayer conv() const { return {name + ".conv", 2 * channels, channels, 1}; }

    template <typename T>
    void init(ParameterSet<T>& p, Rng& rng) const {
        conv().init(p, rng);
    }

    template <typename T>
    Var<T> operator()(Graph<T>& g, ParameterSet<T>& p, Var<T> opt, Var<T> sar) const {
        detail::require_channels(opt, channels, "cross_modal_merge");
        detail::require_channels(sar, channels, "cross_modal_merge");
        return add(opt, conv()(g, p, concat(std::vector<Var<T>>{opt, sar})));
    }
};

template <typename T>
struct FusionOutput {
    std::vector<Var<T>> stage_features;  // F_new_opt,i for i = 1..N
    Var<T> optical_initial;              // F_opt^(0), for the global skip
};

struct FusionNet {
    FusionConfig cfg;

    LowLevelEncoder encoder(Modality m) const {
        const std::size_t bands = m == Modality::optical ? cfg.optical_bands : cfg.sar_channels;
        return {std::string("lfe.") + modality_name(m), bands * cfg.scale * cfg.scale, cfg.channels};
    }
    FusionStage stage(std::size_t i) const { return {"stage" + std::to_string(i), cfg}; }
    CrossModalMerge merge(std::size_t i) const { return {"stage" + std::to_string(i) + ".merge", cfg.channels}; }

    template <typename T>
    void init(ParameterSet<T>& p, Rng& rng) const {
        cfg.validate();
        encoder(Modality::optical).init(p, rng);
        encoder(Modality::sar).init(p, rng);
        for (std::size_t i = 0; i < cfg.stages; ++i) {
            stage(i).init(p, rng);
            merge(i).init(p, rng);
        }
    }

    template <typename T>
    FusionOutput<T> operator()(Graph<T>& g, ParameterSet<T>& p, Var<T> opt, Var<T> sar) const {
        const Shape& os = opt.shape();
        const Shape& ss = sar.shape();
        if (os.size() != 3 || ss.size() != 3 || os[1] != ss[1] || os[2] != ss[2]) {
            throw ShapeError("fusion_forward: optical " + shape_str(os) + " and SAR " + shape_str(ss) +
                             " are not co-registered");
        }
        cfg.require_patch(os[1], os[2]);
        FusionOutput<T> out;
        Var<T> f_opt = encoder(Modality::optical)(g, p, reformat(opt, cfg.scale));
        Var<T> f_sar = encoder(Modality::sar)(g, p, reformat(sar, cfg.scale));
        out.optical_initial = f_opt;
        for (std::size_t i = 0; i < cfg.stages; ++i) {
            auto [opt_final, sar_final] = stage(i)(g, p, f_opt, f_sar);
            f_opt = merge(i)(g, p, opt_final, sar_final);
            f_sar = sar_final;
            out.stage_features.push_back(f_opt);
        }
        return out;
    }
};

}  // namespace cloudfuse

#endif  // CLOUDFUSE_FUSION_NET_HPP
