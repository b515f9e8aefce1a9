#ifndef CLOUDFUSE_CONFIG_HPP
#define CLOUDFUSE_CONFIG_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"

#include "cloudfuse/cloud_mask.hpp"
#include "cloudfuse/errors.hpp"
#include "cloudfuse/fusion_net.hpp"
#include "cloudfuse/objective.hpp"

namespace cloudfuse {

using Json = nlohmann::json;

struct TrainConfig {
    double learning_rate = 1e-5;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-8;
    std::uint64_t steps = 1000;
    std::size_t batch_size = 2;
    std::uint64_t seed = 0;
    double alpha = kCloudWeightAlpha;
    double lambda1 = 0.5;
    double lambda2 = 0.5;
    bool ablation_uniform_weight = false;
    bool split = false;  // 80/10/10 id-hash split; otherwise train on everything
    std::uint64_t log_every = 10;
    std::uint64_t validate_every = 0;  // 0 disables periodic validation
    FusionConfig fusion;

    LossConfig loss() const {
        LossConfig l;
        l.lambda1 = lambda1;
        l.lambda2 = lambda2;
        return l;
    }

    void validate() const {
        auto fail = [](const std::string& m) { throw ValidationError("config: " + m); };
        if (!(learning_rate > 0) || !std::isfinite(learning_rate)) fail("learning_rate must be > 0");
        if (steps < 1) fail("steps must be >= 1");
        if (batch_size < 1) fail("batch_size must be >= 1");
        if (!(adam_beta1 >= 0 && adam_beta1 < 1) || !(adam_beta2 >= 0 && adam_beta2 < 1)) {
            fail("adam betas must lie in [0, 1)");
        }
        if (!(adam_epsilon > 0)) fail("adam_epsilon must be > 0");
        if (!(alpha >= 0 && alpha <= 1)) fail("alpha must lie in [0, 1]");
        loss().validate();
        fusion.validate();
    }

    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// Small architecture used by the tests and the overfit check.
inline FusionConfig micro_fusion_config() {
    FusionConfig f;
    f.channels = 8;
    f.rdb_count = 2;
    f.stages = 1;
    f.rdb_layers = 2;
    f.rdb_growth = 8;
    f.window = 8;
    f.heads = 2;
    f.mlp_ratio = 2;
    return f;
}

// Keys that change the parameter layout. A checkpoint can only be loaded
// into a model whose values for these agree.
inline const std::vector<std::string>& architecture_keys() {
    static const std::vector<std::string> keys{"scale", "channels", "rdb_count", "stages", "rdb_layers", "rdb_growth",
                                               "window", "heads", "mlp_ratio", "optical_bands", "sar_channels"};
    return keys;
}

inline Json to_json(const TrainConfig& c) {
    const FusionConfig& f = c.fusion;
    return Json{
        {"learning_rate", c.learning_rate},
        {"adam_beta1", c.adam_beta1},
        {"adam_beta2", c.adam_beta2},
        {"adam_epsilon", c.adam_epsilon},
        {"steps", c.steps},
        {"batch_size", c.batch_size},
        {"seed", c.seed},
        {"alpha", c.alpha},
        {"lambda1", c.lambda1},
        {"lambda2", c.lambda2},
        {"ablation_uniform_weight", c.ablation_uniform_weight},
        {"split", c.split},
        {"log_every", c.log_every},
        {"validate_every", c.validate_every},
        {"scale", f.scale},
        {"channels", f.channels},
        {"rdb_count", f.rdb_count},
        {"stages", f.stages},
        {"rdb_layers", f.rdb_layers},
        {"rdb_growth", f.rdb_growth},
        {"window", f.window},
        {"heads", f.heads},
        {"mlp_ratio", f.mlp_ratio},
        {"optical_bands", f.optical_bands},
        {"sar_channels", f.sar_channels},
    };
}

namespace detail {

template <typename V>
void read_key(const Json& j, const char* key, V& out) {
    auto it = j.find(key);
    if (it == j.end()) return;
    try {
        if constexpr (std::is_same_v<V, bool>) {
            if (!it->is_boolean()) throw ValidationError("");
            out = it->get<bool>();
        } else if constexpr (std::is_integral_v<V>) {
            if (!it->is_number_unsigned()) throw ValidationError("");
            out = it->get<V>();
        } else {
            if (!it->is_number()) throw ValidationError("");
            out = it->get<V>();
        }
    } catch (const std::exception&) {
        throw ValidationError(std::string("config: key '") + key + "' has invalid value " + it->dump());
    }
}

}  // namespace detail

// Missing keys keep their defaults; unknown keys are rejected.
inline TrainConfig config_from_json(const Json& j) {
    if (!j.is_object()) throw ValidationError("config: expected a JSON object");
    const Json known = to_json(TrainConfig{});
    for (const auto& [k, _] : j.items()) {
        if (!known.contains(k)) throw ValidationError("config: unknown key '" + k + "'");
    }
    TrainConfig c;
    FusionConfig& f = c.fusion;
    detail::read_key(j, "learning_rate", c.learning_rate);
    detail::read_key(j, "adam_beta1", c.adam_beta1);
    detail::read_key(j, "adam_beta2", c.adam_beta2);
    detail::read_key(j, "adam_epsilon", c.adam_epsilon);
    detail::read_key(j, "steps", c.steps);
    detail::read_key(j, "batch_size", c.batch_size);
    detail::read_key(j, "seed", c.seed);
    detail::read_key(j, "alpha", c.alpha);
    detail::read_key(j, "lambda1", c.lambda1);
    detail::read_key(j, "lambda2", c.lambda2);
    detail::read_key(j, "ablation_uniform_weight", c.ablation_uniform_weight);
    detail::read_key(j, "split", c.split);
    detail::read_key(j, "log_every", c.log_every);
    detail::read_key(j, "validate_every", c.validate_every);
    detail::read_key(j, "scale", f.scale);
    detail::read_key(j, "channels", f.channels);
    detail::read_key(j, "rdb_count", f.rdb_count);
    detail::read_key(j, "stages", f.stages);
    detail::read_key(j, "rdb_layers", f.rdb_layers);
    detail::read_key(j, "rdb_growth", f.rdb_growth);
    detail::read_key(j, "window", f.window);
    detail::read_key(j, "heads", f.heads);
    detail::read_key(j, "mlp_ratio", f.mlp_ratio);
    detail::read_key(j, "optical_bands", f.optical_bands);
    detail::read_key(j, "sar_channels", f.sar_channels);
    c.validate();
    return c;
}

inline TrainConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open config '" + path.string() + "'");
    Json j;
    try {
        in >> j;
    } catch (const Json::parse_error& e) {
        throw ValidationError("config '" + path.string() + "': " + e.what());
    }
    return config_from_json(j);
}

// One line per differing key: "key: <a> != <b>". Restricted to `keys` when given.
inline std::vector<std::string> config_diff(const TrainConfig& a, const TrainConfig& b,
                                            const std::vector<std::string>& keys = {}) {
    const Json ja = to_json(a), jb = to_json(b);
    std::vector<std::string> out;
    for (const auto& [k, v] : ja.items()) {
        if (!keys.empty() && std::find(keys.begin(), keys.end(), k) == keys.end()) continue;
        if (v != jb.at(k)) out.push_back(k + ": " + v.dump() + " != " + jb.at(k).dump());
    }
    return out;
}

inline std::string join_lines(const std::vector<std::string>& lines) {
    std::ostringstream os;
    for (const auto& l : lines) os << "\n  " << l;
    return os.str();
}

}  // namespace cloudfuse

#endif  // CLOUDFUSE_CONFIG_HPP
