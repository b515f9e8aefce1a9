#ifndef CLOUDFUSE_HARNESS_HPP
#define CLOUDFUSE_HARNESS_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cloudfuse/checkpoint.hpp"
#include "cloudfuse/cloud_mask.hpp"
#include "cloudfuse/config.hpp"
#include "cloudfuse/errors.hpp"
#include "cloudfuse/metrics.hpp"
#include "cloudfuse/objective.hpp"
#include "cloudfuse/raster_store.hpp"
#include "cloudfuse/reconstruction.hpp"

namespace cloudfuse {

// A triplet plus everything the objective needs that does not change
// during training.
struct Sample {
    PatchTriplet triplet;
    CloudMask mask;              // refined mask of the cloudy input
    Tensor<float> weight;        // alpha-weighted map
    Tensor<float> uniform;       // W = 1
};

inline Sample make_sample(PatchTriplet t, double alpha = kCloudWeightAlpha) {
    Sample s;
    s.mask = refined_cloud_mask(t.cloudy);
    s.weight = weight_map(s.mask, alpha).values;
    s.uniform = uniform_weight_map(t.cloudy.height(), t.cloudy.width()).values;
    s.triplet = std::move(t);
    return s;
}

inline std::vector<Sample> make_samples(std::vector<PatchTriplet> ts, double alpha = kCloudWeightAlpha) {
    std::vector<Sample> out;
    out.reserve(ts.size());
    for (auto& t : ts) out.push_back(make_sample(std::move(t), alpha));
    return out;
}

inline std::vector<PatchTriplet> load_dataset(const std::filesystem::path& dir) {
    const auto ids = list_triplets(dir);
    if (ids.empty()) throw ValidationError("no patch triplets (*.cloudy.bin) in '" + dir.string() + "'");
    std::vector<PatchTriplet> out;
    for (const auto& id : ids) out.push_back(load_triplet(dir, id));
    return out;
}

// The data must fit the architecture in `cfg`.
inline void require_data_matches(const FusionConfig& cfg, const std::vector<Sample>& data) {
    for (const auto& s : data) {
        const auto& t = s.triplet;
        const std::size_t bands = t.cloudy.bands.channels(), sar = t.sar.channels.channels();
        const std::size_t h = t.cloudy.height(), w = t.cloudy.width();
        std::vector<std::string> diff;
        if (bands != cfg.optical_bands) {
            diff.push_back("optical_bands: " + std::to_string(cfg.optical_bands) + " != " + std::to_string(bands));
        }
        if (sar != cfg.sar_channels) {
            diff.push_back("sar_channels: " + std::to_string(cfg.sar_channels) + " != " + std::to_string(sar));
        }
        if (h % cfg.patch_multiple() != 0 || w % cfg.patch_multiple() != 0) {
            diff.push_back("patch size: multiple of " + std::to_string(cfg.patch_multiple()) +
                           " != " + std::to_string(h) + "x" + std::to_string(w));
        }
        if (!diff.empty()) {
            throw ConfigMismatchError("patch '" + t.id + "' does not match the model config (model != data):" +
                                      join_lines(diff));
        }
    }
}

// ---------------------------------------------------------------------------
// 80/10/10 split by id hash.

enum class SplitRole { train, validation, test };

inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 1469598103934665603ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) h = (h ^ p[i]) * 1099511628211ull;
    return h;
}

inline SplitRole split_role(const std::string& id) {
    const std::uint64_t b = fnv1a(id.data(), id.size()) % 10;
    return b < 8 ? SplitRole::train : b == 8 ? SplitRole::validation : SplitRole::test;
}

template <typename S>
std::vector<S> select_role(const std::vector<S>& all, SplitRole role, auto id_of) {
    std::vector<S> out;
    for (const auto& s : all) {
        if (split_role(id_of(s)) == role) out.push_back(s);
    }
    return out;
}

// Hex digest of every parameter byte, in name order.
inline std::string fingerprint(const ParameterSet<float>& p) {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& [name, v] : p.values()) {
        h = fnv1a(name.data(), name.size(), h);
        h = fnv1a(v.data(), v.size() * sizeof(float), h);
    }
    std::ostringstream os;
    os << std::hex << h;
    return os.str();
}

// ---------------------------------------------------------------------------
// Adam with a constant learning rate.

class Adam {
public:
    Adam(double beta1, double beta2, double epsilon) : b1_(beta1), b2_(beta2), eps_(epsilon) {}

    void attach(const ParameterSet<float>& p) {
        for (const auto& [name, v] : p.values()) {
            if (!m_.count(name)) m_[name] = Tensor<float>(v.shape());
            if (!v_.count(name)) v_[name] = Tensor<float>(v.shape());
        }
    }

    // `t` is the 1-based step number used for bias correction.
    void update(ParameterSet<float>& p, double lr, std::uint64_t t) {
        attach(p);
        const float b1 = float(b1_), b2 = float(b2_), eps = float(eps_), lrf = float(lr);
        const float bc1 = float(1.0 - std::pow(b1_, double(t))), bc2 = float(1.0 - std::pow(b2_, double(t)));
        for (auto& [name, value] : p.values()) {
            const Tensor<float>& g = p.grad(name);
            Tensor<float>& m = m_[name];
            Tensor<float>& v = v_[name];
            for (std::size_t i = 0; i < value.size(); ++i) {
                m[i] = b1 * m[i] + (1 - b1) * g[i];
                v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
                value[i] -= lrf * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
            }
        }
    }

    std::map<std::string, Tensor<float>>& first_moments() { return m_; }
    std::map<std::string, Tensor<float>>& second_moments() { return v_; }
    const std::map<std::string, Tensor<float>>& first_moments() const { return m_; }
    const std::map<std::string, Tensor<float>>& second_moments() const { return v_; }

private:
    double b1_, b2_, eps_;
    std::map<std::string, Tensor<float>> m_, v_;
};

// ---------------------------------------------------------------------------
// Training.

struct StepLog {
    std::uint64_t step = 0;  // number of updates applied after this step
    double loss = 0;
    std::vector<std::string> batch;
    std::optional<double> val_mae;
    std::optional<double> val_psnr_db;
};

inline double parameter_norm(const Tensor<float>& t) {
    double s = 0;
    for (float v : t.values()) s += double(v) * double(v);
    return std::sqrt(s);
}

class Trainer {
public:
    Trainer(const TrainConfig& cfg, std::vector<Sample> train, std::vector<Sample> val = {})
        : cfg_(cfg), net_{cfg.fusion}, train_(std::move(train)), val_(std::move(val)),
          adam_(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon) {
        cfg_.validate();
        check_data();
        Rng rng(cfg_.seed);
        params_ = net_.init<float>(rng);
        std::ostringstream os;
        os << rng;
        rng_state_ = os.str();
        adam_.attach(params_);
    }

    // Resumes from `ck`. Only the step budget may differ from the
    // checkpoint's config.
    Trainer(const Checkpoint& ck, const TrainConfig& cfg, std::vector<Sample> train, std::vector<Sample> val = {})
        : cfg_(cfg), net_{cfg.fusion}, train_(std::move(train)), val_(std::move(val)),
          adam_(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon) {
        cfg_.validate();
        TrainConfig a = ck.config, b = cfg;
        a.steps = b.steps = 0;
        const auto diff = config_diff(a, b);
        if (!diff.empty()) {
            throw ConfigMismatchError("cannot resume: checkpoint config differs (checkpoint != requested):" +
                                      join_lines(diff));
        }
        check_data();
        Rng rng(cfg_.seed);
        const ParameterSet<float> layout = net_.init<float>(rng);
        for (const auto& [name, v] : layout.values()) {
            if (!ck.params.contains(name) || !ck.params.value(name).same_shape(v)) {
                throw CorruptionError("checkpoint is missing parameter '" + name + "' or has the wrong shape");
            }
        }
        if (ck.params.values().size() != layout.values().size()) {
            throw CorruptionError("checkpoint has parameters the model does not define");
        }
        for (const auto& [name, v] : ck.params.values()) params_.add(name, v);
        adam_.first_moments() = ck.adam_m;
        adam_.second_moments() = ck.adam_v;
        step_ = ck.step;
        rng_state_ = ck.rng_state;
    }

    const TrainConfig& config() const { return cfg_; }
    const CloudRemovalNet& net() const { return net_; }
    ParameterSet<float>& params() { return params_; }
    const ParameterSet<float>& params() const { return params_; }
    std::uint64_t step_count() const { return step_; }
    const std::vector<Sample>& train_set() const { return train_; }

    // Sample indices of the batch used at update number `step`: epochs are
    // seed-determined permutations, so the order does not depend on history.
    std::vector<std::size_t> batch_indices(std::uint64_t step) const {
        const std::size_t n = train_.size(), b = cfg_.batch_size;
        std::vector<std::size_t> out;
        for (std::uint64_t k = step * b; k < (step + 1) * b; ++k) {
            const std::uint64_t epoch = k / n;
            if (epoch != cached_epoch_) {
                cached_perm_.resize(n);
                std::iota(cached_perm_.begin(), cached_perm_.end(), std::size_t{0});
                std::mt19937_64 rng(cfg_.seed ^ (0x9E3779B97F4A7C15ull * (epoch + 1)));
                for (std::size_t i = n; i > 1; --i) {
                    std::swap(cached_perm_[i - 1], cached_perm_[rng() % i]);
                }
                cached_epoch_ = epoch;
            }
            out.push_back(cached_perm_[k % n]);
        }
        return out;
    }

    const Tensor<float>& weight_of(const Sample& s) const { return cfg_.ablation_uniform_weight ? s.uniform : s.weight; }

    // Fills parameter gradients for the next batch and returns its mean loss.
    double compute_gradients() {
        const auto idx = batch_indices(step_);
        const LossConfig lc = cfg_.loss();
        params_.zero_grad();
        double total = 0;
        const float inv_b = 1.0f / float(idx.size());
        for (std::size_t i : idx) {
            const Sample& s = train_[i];
            Graph<float> g;
            Var<float> pred = net_(g, params_, g.input(s.triplet.cloudy.bands), g.input(s.triplet.sar.channels));
            LossResult<float> r = cloud_aware_loss_with_grad(pred.value(), s.triplet.clear.bands, weight_of(s), lc);
            for (auto& v : r.grad.values()) v *= inv_b;
            g.backward(pred, r.grad);
            total += double(r.value);
        }
        last_batch_ = idx;
        const double loss = total / double(idx.size());
        guard(loss);
        return loss;
    }

    void apply_update(double lr) {
        adam_.update(params_, lr, step_ + 1);
        ++step_;
    }

    StepLog step() {
        StepLog log;
        log.loss = compute_gradients();
        apply_update(cfg_.learning_rate);
        log.step = step_;
        for (std::size_t i : last_batch_) log.batch.push_back(train_[i].triplet.id);
        if (cfg_.validate_every > 0 && !val_.empty() && step_ % cfg_.validate_every == 0) {
            const MetricsReport r = evaluate_samples(val_);
            log.val_mae = r.mae;
            log.val_psnr_db = r.psnr_db;
        }
        return log;
    }

    // Runs until `cfg.steps` updates have been applied in total.
    std::vector<StepLog> run(const std::function<void(const StepLog&)>& on_step = {}) {
        std::vector<StepLog> logs;
        while (step_ < cfg_.steps) {
            logs.push_back(step());
            if (on_step) on_step(logs.back());
        }
        return logs;
    }

    // Mean objective over `data` (training set by default) without updating.
    double dataset_loss(const std::vector<Sample>* data = nullptr, std::optional<bool> uniform = {}) const {
        const auto& set = data ? *data : train_;
        const bool use_uniform = uniform.value_or(cfg_.ablation_uniform_weight);
        double total = 0;
        for (const auto& s : set) {
            const Tensor<float> pred = predict_raw(s.triplet);
            total += double(cloud_aware_loss(pred, s.triplet.clear.bands, use_uniform ? s.uniform : s.weight, cfg_.loss()));
        }
        return total / double(set.size());
    }

    Tensor<float> predict_raw(const PatchTriplet& t) const {
        // Inference graphs never write gradients, so the parameters stay untouched.
        return net_.run(const_cast<ParameterSet<float>&>(params_), t.cloudy.bands, t.sar.channels);
    }

    MetricsReport evaluate_samples(const std::vector<Sample>& data) const {
        std::vector<PatchMetrics> out;
        for (const auto& s : data) {
            const Tensor<float> pred = clip_for_export(predict_raw(s.triplet));
            out.push_back(patch_metrics(s.triplet.id, s.triplet.clear.bands, pred, s.mask));
        }
        return aggregate(std::move(out));
    }

    Checkpoint checkpoint() const {
        Checkpoint ck;
        ck.config = cfg_;
        ck.step = step_;
        ck.rng_state = rng_state_;
        ck.params = params_;
        ck.adam_m = adam_.first_moments();
        ck.adam_v = adam_.second_moments();
        return ck;
    }

private:
    void check_data() const {
        if (train_.empty()) throw ValidationError("training set is empty");
        require_data_matches(cfg_.fusion, train_);
        require_data_matches(cfg_.fusion, val_);
    }

    void guard(double loss) const {
        bool finite = std::isfinite(loss);
        for (const auto& [_, g] : params_.grads()) finite = finite && all_finite(g);
        if (finite) return;
        std::ostringstream os;
        os << "non-finite loss or gradient at step " << step_ << " (loss " << loss << "), batch [";
        for (std::size_t k = 0; k < last_batch_.size(); ++k) os << (k ? ", " : "") << train_[last_batch_[k]].triplet.id;
        os << "]; parameter norms:";
        for (const auto& [name, v] : params_.values()) {
            os << "\n  " << name << " " << parameter_norm(v) << " (grad " << parameter_norm(params_.grad(name)) << ")";
        }
        throw NumericalError(os.str());
    }

    TrainConfig cfg_;
    CloudRemovalNet net_;
    std::vector<Sample> train_, val_;
    ParameterSet<float> params_;
    Adam adam_;
    std::uint64_t step_ = 0;
    std::string rng_state_;
    std::vector<std::size_t> last_batch_;
    mutable std::uint64_t cached_epoch_ = ~std::uint64_t{0};
    mutable std::vector<std::size_t> cached_perm_;
};

// Splits according to cfg.split: (train, validation).
inline std::pair<std::vector<Sample>, std::vector<Sample>> training_sets(const TrainConfig& cfg,
                                                                          std::vector<PatchTriplet> all) {
    std::vector<Sample> samples = make_samples(std::move(all), cfg.alpha);
    if (!cfg.split) return {std::move(samples), {}};
    auto id = [](const Sample& s) { return s.triplet.id; };
    auto train = select_role(samples, SplitRole::train, id);
    auto val = select_role(samples, SplitRole::validation, id);
    if (train.empty()) throw ValidationError("split leaves no training patches");
    return {std::move(train), std::move(val)};
}

// ---------------------------------------------------------------------------
// Evaluation.

inline MetricsReport evaluate(const Checkpoint& ck, const std::vector<PatchTriplet>& data) {
    if (data.empty()) throw ValidationError("evaluation set is empty");
    std::vector<Sample> samples = make_samples(data, ck.config.alpha);
    require_data_matches(ck.config.fusion, samples);
    Trainer t(ck, ck.config, samples);
    return t.evaluate_samples(samples);
}

inline MetricsReport evaluate(const Checkpoint& ck, const std::filesystem::path& dir) {
    return evaluate(ck, load_dataset(dir));
}

// ---------------------------------------------------------------------------
// Ablation: the cloud-weighted objective against W = 1.

struct AblationRow {
    std::uint64_t seed = 0;
    std::string arm;  // "weighted" or "uniform"
    std::string init_fingerprint;
    double step0_loss = 0;  // reference (weighted) objective before training
    double final_loss = 0;  // the arm's own objective after training
    MetricsReport metrics;
};

struct AblationDelta {
    std::uint64_t seed = 0;
    double cloud_mae = 0, cloud_mse = 0, cloud_psnr_db = 0;  // weighted - uniform
};

struct AblationReport {
    TrainConfig config;
    std::vector<std::string> arm_diff;
    std::vector<AblationRow> rows;
    std::vector<AblationDelta> deltas;
    AblationDelta median;  // seed field unused
};

inline double median(std::vector<double> v) {
    if (v.empty()) return 0;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Trains both arms per seed with everything else identical and evaluates
// them on `eval` (cloud metrics use the refined mask of the cloudy input).
inline AblationReport ablation_pair(const TrainConfig& cfg, const std::vector<PatchTriplet>& train,
                                    const std::vector<PatchTriplet>& eval, const std::vector<std::uint64_t>& seeds,
                                    const std::function<void(const std::string&)>& progress = {}) {
    if (seeds.size() < 3) throw ValidationError("ablation needs at least 3 seeds");
    if (eval.empty()) throw ValidationError("ablation evaluation set is empty");
    AblationReport rep;
    rep.config = cfg;
    TrainConfig weighted = cfg, uniform = cfg;
    weighted.ablation_uniform_weight = false;
    uniform.ablation_uniform_weight = true;
    rep.arm_diff = config_diff(weighted, uniform);
    const std::vector<Sample> train_samples = make_samples(train, cfg.alpha);
    const std::vector<Sample> eval_samples = make_samples(eval, cfg.alpha);
    for (std::uint64_t seed : seeds) {
        double cloud_mae[2] = {}, cloud_mse[2] = {}, cloud_psnr[2] = {};
        for (int arm = 0; arm < 2; ++arm) {
            TrainConfig c = arm == 0 ? weighted : uniform;
            c.seed = seed;
            Trainer t(c, train_samples);
            AblationRow row;
            row.seed = seed;
            row.arm = arm == 0 ? "weighted" : "uniform";
            row.init_fingerprint = fingerprint(t.params());
            row.step0_loss = t.dataset_loss(nullptr, /*uniform=*/false);
            t.run();
            row.final_loss = t.dataset_loss();
            row.metrics = t.evaluate_samples(eval_samples);
            if (!row.metrics.cloud_mae) throw ValidationError("ablation evaluation set has no cloud pixels");
            cloud_mae[arm] = *row.metrics.cloud_mae;
            cloud_mse[arm] = *row.metrics.cloud_mse;
            cloud_psnr[arm] = *row.metrics.cloud_psnr_db;
            if (progress) {
                progress("seed " + std::to_string(seed) + " " + row.arm + ": cloud MAE " + std::to_string(cloud_mae[arm]));
            }
            rep.rows.push_back(std::move(row));
        }
        rep.deltas.push_back({seed, cloud_mae[0] - cloud_mae[1], cloud_mse[0] - cloud_mse[1], cloud_psnr[0] - cloud_psnr[1]});
    }
    std::vector<double> a, b, c;
    for (const auto& d : rep.deltas) {
        a.push_back(d.cloud_mae);
        b.push_back(d.cloud_mse);
        c.push_back(d.cloud_psnr_db);
    }
    rep.median = {0, median(a), median(b), median(c)};
    return rep;
}

// ---------------------------------------------------------------------------
// JSON reports. PSNR of identical images is written as the string "+inf".

inline Json finite_or_inf(double v) {
    if (std::isinf(v)) return v > 0 ? "+inf" : "-inf";
    return v;
}

inline Json optional_json(const std::optional<double>& v) { return v ? finite_or_inf(*v) : Json(nullptr); }

inline Json to_json(const PatchMetrics& m) {
    return Json{{"id", m.id},
                {"psnr_db", finite_or_inf(m.psnr_db)},
                {"ssim", m.ssim},
                {"mae", m.mae},
                {"cloud_fraction", m.cloud_fraction},
                {"cloud_psnr_db", optional_json(m.cloud_psnr_db)},
                {"cloud_mae", optional_json(m.cloud_mae)},
                {"cloud_mse", optional_json(m.cloud_mse)}};
}

inline Json to_json(const MetricsReport& r) {
    Json patches = Json::array();
    for (const auto& p : r.patches) patches.push_back(to_json(p));
    return Json{{"aggregate",
                 {{"n_patches", r.n_patches},
                  {"psnr_db", finite_or_inf(r.psnr_db)},
                  {"ssim", r.ssim},
                  {"mae", r.mae},
                  {"cloud_psnr_db", optional_json(r.cloud_psnr_db)},
                  {"cloud_mae", optional_json(r.cloud_mae)},
                  {"cloud_mse", optional_json(r.cloud_mse)}}},
                {"patches", patches}};
}

inline Json to_json(const AblationReport& r) {
    Json rows = Json::array(), deltas = Json::array();
    for (const auto& row : r.rows) {
        rows.push_back({{"seed", row.seed},
                        {"arm", row.arm},
                        {"init_fingerprint", row.init_fingerprint},
                        {"step0_loss", row.step0_loss},
                        {"final_loss", row.final_loss},
                        {"metrics", to_json(row.metrics)["aggregate"]}});
    }
    for (const auto& d : r.deltas) {
        deltas.push_back({{"seed", d.seed},
                          {"cloud_mae", d.cloud_mae},
                          {"cloud_mse", d.cloud_mse},
                          {"cloud_psnr_db", finite_or_inf(d.cloud_psnr_db)}});
    }
    return Json{{"config", to_json(r.config)},
                {"arm_diff", r.arm_diff},
                {"rows", rows},
                {"deltas_weighted_minus_uniform", deltas},
                {"median_delta",
                 {{"cloud_mae", r.median.cloud_mae},
                  {"cloud_mse", r.median.cloud_mse},
                  {"cloud_psnr_db", finite_or_inf(r.median.cloud_psnr_db)}}}};
}

}  // namespace cloudfuse

#endif  // CLOUDFUSE_HARNESS_HPP
