#ifndef CLOUDFUSE_TEST_MASK_ORACLES_HPP
#define CLOUDFUSE_TEST_MASK_ORACLES_HPP

// Scalar per-pixel references for the cloud mask, written straight from the
// printed formulas.

namespace cloudfuse::testing {

inline float score_oracle(float b1, float b2, float b3, float b4, float b10) {
    auto clamp01 = [](double v) {
        if (v < 0) return 0.0;
        if (v > 1) return 1.0;
        return v;
    };
    // Breakpoints at storage (float) precision.
    const double t01 = 0.1f, t015 = 0.15f, t02 = 0.2f, t03 = 0.3f, t05 = 0.5f, t08 = 0.8f;
    double s = clamp01((double(b2) - t01) / (t05 - t01));
    const double others[] = {clamp01((double(b1) - t01) / (t03 - t01)),
                             clamp01((double(b10) + double(b1) - t015) / (t02 - t015)),
                             clamp01((double(b4) + double(b3) + double(b2) - t02) / (t08 - t02))};
    for (double r : others) {
        if (r < s) s = r;
    }
    return float(s);
}

inline float ndsi_oracle(float b3, float b11) {
    if (double(b3) + double(b11) == 0) return 0.0f;
    return float((double(b3) - double(b11)) / (double(b3) + double(b11)));
}

inline bool binarize_oracle(float score) { return score > 0.2f; }

inline bool refine_oracle(bool cloud, float ndsi) { return cloud && ndsi <= 0.6f; }

inline float weight_oracle(bool cloud) { return cloud ? 0.8f : 0.2f; }

}  // namespace cloudfuse::testing

#endif  // CLOUDFUSE_TEST_MASK_ORACLES_HPP
