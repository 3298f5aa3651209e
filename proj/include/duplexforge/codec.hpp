#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace duplexforge {

enum class LayoutKind { independent, layered };

std::string layout_kind_name(LayoutKind kind);
LayoutKind layout_kind_from_name(const std::string& name);

struct CodebookLayout {
    LayoutKind kind = LayoutKind::independent;
    int n_codebooks = 4;
    int codebook_size = 4032;
    double frame_rate_hz = 12.5;

    double frame_duration_s() const { return 1.0 / frame_rate_hz; }
};

CodebookLayout default_layout(LayoutKind kind);

// One timestep of discrete acoustic units, one code per codebook.
struct DauFrame {
    std::vector<int32_t> codes;

    bool operator==(const DauFrame&) const = default;
};

// Per-frame pseudo-phoneme ids; id 0 is silence.
struct SymbolTrack {
    std::vector<int32_t> symbols;
    double frame_duration_s = 0.08;
};

inline constexpr int32_t kSilenceSymbol = 0;
inline constexpr int kSymbolAlphabetSize = 64;

// Multipliers for the synthetic codec, each coprime with 4032.
inline constexpr int32_t kCodecMultipliers[8] = {5, 11, 13, 17, 19, 23, 25, 29};

// Modular inverse via the extended Euclidean algorithm. Throws if gcd(a, m) != 1.
int64_t mod_inverse(int64_t a, int64_t m);

DauFrame silence_frame(const CodebookLayout& layout);
DauFrame encode_symbol(int32_t symbol, const CodebookLayout& layout);

// Inverts encode_symbol; nullopt marks a frame no symbol re-encodes to.
std::optional<int32_t> decode_frame(const DauFrame& frame, const CodebookLayout& layout);

bool is_silence(const DauFrame& frame);

std::vector<DauFrame> track_to_frames(const SymbolTrack& track, const CodebookLayout& layout);

// Frame grid arithmetic. Timestamps arrive as decimal seconds, so the
// products are nudged by an epsilon before rounding to keep e.g.
// 1.2 * 12.5 on frame 15 instead of 14.
inline int64_t frame_of_time(double t_s, double rate_hz) {
    return static_cast<int64_t>(std::floor(t_s * rate_hz + 1e-9));
}

// Exclusive end frame of an interval ending at t_s.
inline int64_t frame_end_of_time(double t_s, double rate_hz) {
    return static_cast<int64_t>(std::ceil(t_s * rate_hz - 1e-9));
}

}  // namespace duplexforge
