#ifndef CLOUDFUSE_RASTER_STORE_HPP
#define CLOUDFUSE_RASTER_STORE_HPP

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "cloudfuse/errors.hpp"
#include "cloudfuse/tensor.hpp"

namespace cloudfuse {

// Sentinel-2 L1C band order.
enum Band : std::size_t { B1, B2, B3, B4, B5, B6, B7, B8, B8A, B9, B10, B11, B12 };
inline constexpr std::size_t kOpticalBands = 13;
inline constexpr std::array<std::string_view, kOpticalBands> kBandNames{
    "B1", "B2", "B3", "B4", "B5", "B6", "B7", "B8", "B8A", "B9", "B10", "B11", "B12"};

enum SarChannel : std::size_t { VV, VH };
inline constexpr std::size_t kSarChannels = 2;
inline constexpr std::array<std::string_view, kSarChannels> kSarNames{"VV", "VH"};

// SAR backscatter clip ranges in dB, mapped affinely onto [0, 1].
inline constexpr double kVvMinDb = -25.0;
inline constexpr double kVhMinDb = -32.5;
inline constexpr double kReflectanceScale = 10000.0;

struct OpticalPatch {
    Tensor<float> bands;  // (13, H, W)
    bool normalized = true;

    std::size_t height() const { return bands.height(); }
    std::size_t width() const { return bands.width(); }
};

struct SarPatch {
    Tensor<float> channels;  // (2, H, W)
    bool normalized = true;

    std::size_t height() const { return channels.height(); }
    std::size_t width() const { return channels.width(); }
};

struct PatchTriplet {
    std::string id;
    OpticalPatch cloudy;
    OpticalPatch clear;
    SarPatch sar;
};

// ---------------------------------------------------------------------------
// Binary patch format
//
//   16 bytes  magic "CLFUSEv1" NUL-padded
//    1 byte   kind (0 optical, 1 sar, 2 single-channel map)
//    2 bytes  C   (u16 LE)
//    4 bytes  H   (u32 LE)
//    4 bytes  W   (u32 LE)
//    1 byte   normalized flag
//   C*H*W     float32 LE, row-major (C, H, W)
// ---------------------------------------------------------------------------

enum class PatchKind : std::uint8_t { optical = 0, sar = 1, map = 2 };

inline constexpr std::array<char, 16> kPatchMagic{'C', 'L', 'F', 'U', 'S', 'E', 'v', '1'};
inline constexpr std::size_t kPatchHeaderBytes = 16 + 1 + 2 + 4 + 4 + 1;

struct StoredPatch {
    PatchKind kind = PatchKind::optical;
    bool normalized = true;
    Tensor<float> data;
};

inline std::size_t expected_channels(PatchKind kind) {
    switch (kind) {
        case PatchKind::optical: return kOpticalBands;
        case PatchKind::sar: return kSarChannels;
        case PatchKind::map: return 1;
    }
    return 0;
}

inline const char* kind_name(PatchKind kind) {
    switch (kind) {
        case PatchKind::optical: return "optical";
        case PatchKind::sar: return "sar";
        case PatchKind::map: return "map";
    }
    return "?";
}

namespace detail {

template <typename U>
void put_le(std::vector<char>& buf, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <typename U>
U get_le(const char* p) {
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(p[i])) << (8 * i);
    return v;
}

inline std::vector<char> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open '" + path.string() + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::vector<char>& buf) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot write '" + path.string() + "'");
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw Error("short write to '" + path.string() + "'");
}

}  // namespace detail

inline std::vector<char> encode_patch(const Tensor<float>& data, PatchKind kind, bool normalized) {
    if (data.rank() != 3) throw ShapeError("encode_patch: expected (C, H, W), got " + shape_str(data.shape()));
    if (data.channels() != expected_channels(kind)) {
        throw ShapeError(std::string("encode_patch: ") + kind_name(kind) + " patch needs " +
                         std::to_string(expected_channels(kind)) + " channels, got " +
                         std::to_string(data.channels()));
    }
    std::vector<char> buf(kPatchMagic.begin(), kPatchMagic.end());
    buf.reserve(kPatchHeaderBytes + 4 * data.size());
    buf.push_back(static_cast<char>(kind));
    detail::put_le<std::uint16_t>(buf, static_cast<std::uint16_t>(data.channels()));
    detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(data.height()));
    detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(data.width()));
    buf.push_back(normalized ? 1 : 0);
    for (float v : data.values()) detail::put_le<std::uint32_t>(buf, std::bit_cast<std::uint32_t>(v));
    return buf;
}

inline StoredPatch decode_patch(const std::vector<char>& buf) {
    if (buf.size() < kPatchHeaderBytes) throw FormatError("patch header truncated");
    if (!std::equal(kPatchMagic.begin(), kPatchMagic.end(), buf.begin())) throw FormatError("bad patch magic");
    const char* p = buf.data() + 16;
    const auto kind_byte = static_cast<std::uint8_t>(p[0]);
    if (kind_byte > static_cast<std::uint8_t>(PatchKind::map)) {
        throw FormatError("unknown patch kind " + std::to_string(kind_byte));
    }
    const auto flag = static_cast<std::uint8_t>(p[11]);
    if (flag > 1) throw FormatError("normalized flag must be 0 or 1");
    StoredPatch out;
    out.kind = static_cast<PatchKind>(kind_byte);
    out.normalized = flag == 1;
    const std::size_t c = detail::get_le<std::uint16_t>(p + 1);
    const std::size_t h = detail::get_le<std::uint32_t>(p + 3);
    const std::size_t w = detail::get_le<std::uint32_t>(p + 7);
    if (c != expected_channels(out.kind)) {
        throw CorruptionError(std::string("header declares ") + kind_name(out.kind) + " with C=" +
                              std::to_string(c) + ", expected " + std::to_string(expected_channels(out.kind)));
    }
    if (h == 0 || w == 0) throw CorruptionError("header declares empty spatial extent");
    const std::size_t payload = buf.size() - kPatchHeaderBytes;
    if (payload != 4 * c * h * w) {
        throw CorruptionError("payload has " + std::to_string(payload) + " bytes, header implies " +
                              std::to_string(4 * c * h * w));
    }
    out.data = Tensor<float>::chw(c, h, w);
    const char* q = buf.data() + kPatchHeaderBytes;
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        out.data[i] = std::bit_cast<float>(detail::get_le<std::uint32_t>(q + 4 * i));
    }
    return out;
}

inline void save_patch(const std::filesystem::path& path, const Tensor<float>& data, PatchKind kind,
                       bool normalized = true) {
    detail::write_file(path, encode_patch(data, kind, normalized));
}

inline void save_patch(const std::filesystem::path& path, const OpticalPatch& p) {
    save_patch(path, p.bands, PatchKind::optical, p.normalized);
}

inline void save_patch(const std::filesystem::path& path, const SarPatch& p) {
    save_patch(path, p.channels, PatchKind::sar, p.normalized);
}

inline StoredPatch load_patch(const std::filesystem::path& path, PatchKind kind) {
    StoredPatch p = decode_patch(detail::read_file(path));
    if (p.kind != kind) {
        throw CorruptionError("'" + path.string() + "' holds a " + kind_name(p.kind) + " patch, expected " +
                              kind_name(kind));
    }
    return p;
}

inline OpticalPatch load_optical(const std::filesystem::path& path) {
    StoredPatch p = load_patch(path, PatchKind::optical);
    return {std::move(p.data), p.normalized};
}

inline SarPatch load_sar(const std::filesystem::path& path) {
    StoredPatch p = load_patch(path, PatchKind::sar);
    return {std::move(p.data), p.normalized};
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

// DN / 10000 clipped to [0, 1].
template <typename Int>
OpticalPatch normalize_optical(const Tensor<Int>& raw) {
    if (raw.rank() != 3 || raw.channels() != kOpticalBands) {
        throw ShapeError("normalize_optical: expected (13, H, W), got " + shape_str(raw.shape()));
    }
    OpticalPatch out{Tensor<float>(raw.shape()), true};
    for (std::size_t i = 0; i < raw.size(); ++i) {
        const double dn = static_cast<double>(raw[i]);
        if (!(dn >= 0)) throw ValidationError("normalize_optical: negative or non-finite digital number");
        out.bands[i] = static_cast<float>(std::min(dn / kReflectanceScale, 1.0));
    }
    return out;
}

inline SarPatch normalize_sar(const Tensor<float>& raw_db) {
    if (raw_db.rank() != 3 || raw_db.channels() != kSarChannels) {
        throw ShapeError("normalize_sar: expected (2, H, W), got " + shape_str(raw_db.shape()));
    }
    SarPatch out{Tensor<float>(raw_db.shape()), true};
    const std::array<double, kSarChannels> lo{kVvMinDb, kVhMinDb};
    for (std::size_t c = 0; c < kSarChannels; ++c) {
        auto src = raw_db.channel(c);
        auto dst = out.channels.channel(c);
        for (std::size_t i = 0; i < src.size(); ++i) {
            const double v = src[i];
            if (!std::isfinite(v)) throw ValidationError("normalize_sar: non-finite backscatter");
            dst[i] = static_cast<float>((std::clamp(v, lo[c], 0.0) - lo[c]) / -lo[c]);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic triplets
// ---------------------------------------------------------------------------

namespace detail {

// Sum of random low-frequency plane waves, scaled into [-1, 1].
inline std::vector<double> smooth_field(std::mt19937_64& rng, std::size_t h, std::size_t w, std::size_t waves = 6) {
    std::uniform_real_distribution<double> freq(-2.5, 2.5), phase(0.0, 2 * std::numbers::pi), amp(0.3, 1.0);
    std::vector<double> f(h * w, 0.0);
    double total = 0;
    for (std::size_t k = 0; k < waves; ++k) {
        const double fy = freq(rng), fx = freq(rng), ph = phase(rng), a = amp(rng);
        total += a;
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                f[y * w + x] += a * std::sin(2 * std::numbers::pi * (fy * double(y) / double(h) + fx * double(x) / double(w)) + ph);
            }
        }
    }
    for (auto& v : f) v /= total;
    return f;
}

inline double gradient_magnitude(const Tensor<float>& t, std::size_t c, std::size_t y, std::size_t x) {
    const std::size_t h = t.height(), w = t.width();
    const double gx = double(t.at(c, y, std::min(x + 1, w - 1))) - double(t.at(c, y, x > 0 ? x - 1 : 0));
    const double gy = double(t.at(c, std::min(y + 1, h - 1), x)) - double(t.at(c, y > 0 ? y - 1 : 0, x));
    return 0.5 * std::hypot(gx, gy);
}

}  // namespace detail

struct SyntheticBandProfile {
    double mean, amplitude, cloud_gain;
};

// Mean reflectance, spatial variability and additive cloud gain per band.
// Clear-sky B1 stays below 0.13, which caps the cloud score at 0.15; the
// cloud gain lifts B1/B2/B3/B4/B10 over every cloud-score ratio while B11
// rises enough to keep NDSI of cloud pixels below the snow cutoff.
inline constexpr std::array<SyntheticBandProfile, kOpticalBands> kSyntheticBands{{
    {0.070, 0.030, 1.0},   // B1
    {0.085, 0.040, 1.0},   // B2
    {0.095, 0.050, 1.0},   // B3
    {0.090, 0.060, 1.0},   // B4
    {0.130, 0.060, 0.0},   // B5
    {0.200, 0.080, 0.0},   // B6
    {0.240, 0.090, 0.0},   // B7
    {0.260, 0.100, 0.0},   // B8
    {0.280, 0.100, 0.0},   // B8A
    {0.100, 0.040, 0.0},   // B9
    {0.015, 0.008, 0.6},   // B10
    {0.200, 0.080, 0.5},   // B11
    {0.130, 0.060, 0.0},   // B12
}};

inline constexpr double kSyntheticB1Max = 0.13;
inline constexpr double kSyntheticMaxOpacity = 0.7;
inline constexpr double kSyntheticEdgeRamp = 4.0;

inline PatchTriplet make_synthetic_triplet(std::uint64_t seed, std::size_t h, std::size_t w, double cloud_fraction,
                                           std::size_t size_multiple = 16) {
    if (!(cloud_fraction >= 0.0 && cloud_fraction <= 1.0)) {
        throw ValidationError("cloud_fraction must lie in [0, 1]");
    }
    if (h == 0 || w == 0 || h % size_multiple != 0 || w % size_multiple != 0) {
        throw ShapeError("synthetic patch size " + std::to_string(h) + "x" + std::to_string(w) +
                         " must be a positive multiple of " + std::to_string(size_multiple));
    }
    std::mt19937_64 rng(seed);
    const std::size_t n = h * w;

    // Clear sky: three shared latent fields mixed per band.
    std::array<std::vector<double>, 3> latent;
    for (auto& f : latent) f = detail::smooth_field(rng, h, w);
    std::uniform_real_distribution<double> mix(-1.0, 1.0);
    Tensor<float> clear = Tensor<float>::chw(kOpticalBands, h, w);
    for (std::size_t b = 0; b < kOpticalBands; ++b) {
        std::array<double, 3> m{mix(rng), mix(rng), mix(rng)};
        const double norm = std::abs(m[0]) + std::abs(m[1]) + std::abs(m[2]) + 1e-9;
        const auto& prof = kSyntheticBands[b];
        for (std::size_t i = 0; i < n; ++i) {
            double v = prof.mean + prof.amplitude * (m[0] * latent[0][i] + m[1] * latent[1][i] + m[2] * latent[2][i]) / norm;
            v = std::clamp(v, 0.0, b == B1 ? kSyntheticB1Max : 1.0);
            clear[b * n + i] = static_cast<float>(v);
        }
    }

    // Clouds: Gaussian blobs; the top cloud_fraction of pixels by blob
    // density are covered. Opacity ramps up from zero at the cloud edge, so
    // thin margins fall below the cloud-score threshold like real cloud rims.
    std::vector<double> density(n, 0.0);
    std::uniform_real_distribution<double> cy(0.0, double(h)), cx(0.0, double(w)), sig(0.12, 0.3);
    const std::size_t blobs = 4;
    for (std::size_t k = 0; k < blobs; ++k) {
        const double by = cy(rng), bx = cx(rng), s = sig(rng) * double(std::min(h, w));
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                const double dy = double(y) - by, dx = double(x) - bx;
                density[y * w + x] += std::exp(-(dy * dy + dx * dx) / (2 * s * s));
            }
        }
    }
    const auto covered = static_cast<std::size_t>(std::llround(cloud_fraction * double(n)));
    std::vector<double> opacity(n, 0.0);
    if (covered > 0) {
        std::vector<std::size_t> order(n);
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return density[a] > density[b]; });
        const double top = density[order.front()], edge = density[order[covered - 1]];
        const double span = std::max(top - edge, 1e-12);
        for (std::size_t r = 0; r < covered; ++r) {
            const std::size_t i = order[r];
            opacity[i] = kSyntheticMaxOpacity * (1.0 - std::exp(-kSyntheticEdgeRamp * (density[i] - edge) / span));
        }
    }
    Tensor<float> cloudy = clear;
    for (std::size_t b = 0; b < kOpticalBands; ++b) {
        const double gain = kSyntheticBands[b].cloud_gain;
        if (gain == 0.0) continue;
        for (std::size_t i = 0; i < n; ++i) {
            if (opacity[i] > 0.0) {
                cloudy[b * n + i] = static_cast<float>(std::min(1.0, double(clear[b * n + i]) + gain * opacity[i]));
            }
        }
    }

    // SAR: structure (edges) and intensity of the clear scene plus speckle-like noise.
    Tensor<float> sar = Tensor<float>::chw(kSarChannels, h, w);
    std::normal_distribution<double> noise(0.0, 0.01);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const std::size_t i = y * w + x;
            const double vv = 0.35 + 0.9 * (double(clear[B8 * n + i]) - 0.26) + 2.0 * detail::gradient_magnitude(clear, B4, y, x);
            const double vh = 0.25 + 0.7 * (double(clear[B11 * n + i]) - 0.2) + 1.5 * detail::gradient_magnitude(clear, B8, y, x);
            sar[VV * n + i] = static_cast<float>(std::clamp(vv + noise(rng), 0.0, 1.0));
            sar[VH * n + i] = static_cast<float>(std::clamp(vh + noise(rng), 0.0, 1.0));
        }
    }

    PatchTriplet t;
    t.id = "synth_" + std::to_string(seed);
    t.clear = {std::move(clear), true};
    t.cloudy = {std::move(cloudy), true};
    t.sar = {std::move(sar), true};
    return t;
}

// <dir>/<id>.cloudy.bin, <id>.clear.bin, <id>.sar.bin
inline void save_triplet(const std::filesystem::path& dir, const PatchTriplet& t) {
    save_patch(dir / (t.id + ".cloudy.bin"), t.cloudy);
    save_patch(dir / (t.id + ".clear.bin"), t.clear);
    save_patch(dir / (t.id + ".sar.bin"), t.sar);
}

inline PatchTriplet load_triplet(const std::filesystem::path& dir, const std::string& id) {
    PatchTriplet t;
    t.id = id;
    t.cloudy = load_optical(dir / (id + ".cloudy.bin"));
    t.clear = load_optical(dir / (id + ".clear.bin"));
    t.sar = load_sar(dir / (id + ".sar.bin"));
    if (!t.cloudy.bands.same_shape(t.clear.bands) || t.sar.height() != t.clear.height() ||
        t.sar.width() != t.clear.width()) {
        throw ShapeError("triplet '" + id + "' has inconsistent spatial extents");
    }
    return t;
}

// Triplet ids present in `dir`, sorted.
inline std::vector<std::string> list_triplets(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw ValidationError("'" + dir.string() + "' is not a directory");
    std::vector<std::string> ids;
    constexpr std::string_view suffix = ".cloudy.bin";
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (name.size() > suffix.size() && name.ends_with(suffix)) {
            ids.push_back(name.substr(0, name.size() - suffix.size()));
        }
    }
    std::sort(ids.begin(), ids.end());
    return ids;
}

}  // namespace cloudfuse

#endif  // CLOUDFUSE_RASTER_STORE_HPP
