#ifndef CLOUDFUSE_CHECKPOINT_HPP
#define CLOUDFUSE_CHECKPOINT_HPP

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cloudfuse/config.hpp"
#include "cloudfuse/errors.hpp"
#include "cloudfuse/graph.hpp"
#include "cloudfuse/raster_store.hpp"

namespace cloudfuse {

// Model parameters, optimizer state and the config that produced them.
//
//   8 bytes   magic "CLFUSECK"
//   u32       format version
//   u64 + N   config JSON (sorted keys)
//   u64       step counter
//   u64 + N   RNG state (std::mt19937_64 text form)
//   u32       tensor count, then per tensor:
//               u32 + N name, u32 rank, u64 dims[rank],
//               float32 value[n], float32 adam_m[n], float32 adam_v[n]
//
// All integers little-endian. No timestamps, so identical state gives
// identical bytes.
struct Checkpoint {
    TrainConfig config;
    std::uint64_t step = 0;
    std::string rng_state;
    ParameterSet<float> params;
    std::map<std::string, Tensor<float>> adam_m, adam_v;
};

inline constexpr char kCheckpointMagic[8] = {'C', 'L', 'F', 'U', 'S', 'E', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_string(std::vector<char>& buf, const std::string& s, bool wide = true) {
    if (wide) put_le<std::uint64_t>(buf, s.size());
    else put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(s.size()));
    buf.insert(buf.end(), s.begin(), s.end());
}

inline void put_floats(std::vector<char>& buf, const Tensor<float>& t) {
    for (float v : t.values()) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        put_le(buf, bits);
    }
}

class Reader {
public:
    explicit Reader(const std::vector<char>& buf) : buf_(buf) {}

    template <typename U>
    U get() {
        need(sizeof(U));
        U v = get_le<U>(buf_.data() + pos_);
        pos_ += sizeof(U);
        return v;
    }

    std::string string(bool wide = true) {
        const std::uint64_t n = wide ? get<std::uint64_t>() : get<std::uint32_t>();
        need(n);
        std::string s(buf_.data() + pos_, n);
        pos_ += n;
        return s;
    }

    void floats(Tensor<float>& t) {
        need(t.size() * 4);
        for (auto& v : t.values()) {
            const auto bits = get<std::uint32_t>();
            std::memcpy(&v, &bits, 4);
        }
    }

    bool done() const { return pos_ == buf_.size(); }

private:
    void need(std::uint64_t n) const {
        if (n > buf_.size() - pos_) throw CorruptionError("checkpoint truncated");
    }

    const std::vector<char>& buf_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<char> encode_checkpoint(const Checkpoint& ck) {
    std::vector<char> buf(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
    detail::put_le(buf, kCheckpointVersion);
    detail::put_string(buf, to_json(ck.config).dump());
    detail::put_le<std::uint64_t>(buf, ck.step);
    detail::put_string(buf, ck.rng_state);
    detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(ck.params.values().size()));
    for (const auto& [name, v] : ck.params.values()) {
        detail::put_string(buf, name, /*wide=*/false);
        detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(v.rank()));
        for (std::size_t d : v.shape()) detail::put_le<std::uint64_t>(buf, d);
        detail::put_floats(buf, v);
        for (const auto* moments : {&ck.adam_m, &ck.adam_v}) {
            auto it = moments->find(name);
            if (it != moments->end() && it->second.same_shape(v)) {
                detail::put_floats(buf, it->second);
            } else {
                detail::put_floats(buf, Tensor<float>(v.shape()));
            }
        }
    }
    return buf;
}

inline Checkpoint decode_checkpoint(const std::vector<char>& buf) {
    if (buf.size() < 12 || std::memcmp(buf.data(), kCheckpointMagic, 8) != 0) {
        throw FormatError("not a checkpoint (bad magic)");
    }
    detail::Reader r(buf);
    for (int i = 0; i < 8; ++i) r.get<std::uint8_t>();
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    }
    Checkpoint ck;
    try {
        ck.config = config_from_json(Json::parse(r.string()));
    } catch (const Json::exception& e) {
        throw CorruptionError(std::string("checkpoint config: ") + e.what());
    }
    ck.step = r.get<std::uint64_t>();
    ck.rng_state = r.string();
    const auto count = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = r.string(/*wide=*/false);
        const auto rank = r.get<std::uint32_t>();
        if (rank > 8) throw CorruptionError("checkpoint tensor '" + name + "' has rank " + std::to_string(rank));
        Shape shape(rank);
        for (auto& d : shape) d = r.get<std::uint64_t>();
        Tensor<float>& v = ck.params.add(name, Tensor<float>(shape));
        r.floats(v);
        r.floats(ck.adam_m[name] = Tensor<float>(shape));
        r.floats(ck.adam_v[name] = Tensor<float>(shape));
    }
    if (!r.done()) throw CorruptionError("checkpoint has trailing bytes");
    return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
    detail::write_file(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(detail::read_file(path));
}

// Refuses `ck` unless its architecture matches `expected`; the message
// lists every differing key.
inline void require_compatible(const Checkpoint& ck, const TrainConfig& expected) {
    const auto diff = config_diff(ck.config, expected, architecture_keys());
    if (!diff.empty()) {
        throw ConfigMismatchError("checkpoint config does not match (checkpoint != requested):" + join_lines(diff));
    }
}

}  // namespace cloudfuse

#endif  // CLOUDFUSE_CHECKPOINT_HPP
