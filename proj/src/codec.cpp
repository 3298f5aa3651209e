#include "duplexforge/codec.hpp"

#include <stdexcept>

namespace duplexforge {

std::string layout_kind_name(LayoutKind kind) {
    return kind == LayoutKind::independent ? "independent" : "layered";
}

LayoutKind layout_kind_from_name(const std::string& name) {
    if (name == "independent") return LayoutKind::independent;
    if (name == "layered") return LayoutKind::layered;
    throw std::invalid_argument("unknown codebook layout kind: " + name);
}

CodebookLayout default_layout(LayoutKind kind) {
    CodebookLayout layout;
    layout.kind = kind;
    layout.n_codebooks = kind == LayoutKind::independent ? 4 : 8;
    layout.codebook_size = 4032;
    layout.frame_rate_hz = 12.5;
    return layout;
}

int64_t mod_inverse(int64_t a, int64_t m) {
    int64_t r0 = m, r1 = ((a % m) + m) % m;
    int64_t t0 = 0, t1 = 1;
    while (r1 != 0) {
        int64_t q = r0 / r1;
        int64_t r = r0 - q * r1;
        r0 = r1;
        r1 = r;
        int64_t t = t0 - q * t1;
        t0 = t1;
        t1 = t;
    }
    if (r0 != 1) {
        throw std::invalid_argument("mod_inverse: arguments are not coprime");
    }
    return ((t0 % m) + m) % m;
}

DauFrame silence_frame(const CodebookLayout& layout) {
    DauFrame f;
    f.codes.assign(static_cast<size_t>(layout.n_codebooks), 0);
    return f;
}

DauFrame encode_symbol(int32_t symbol, const CodebookLayout& layout) {
    if (symbol < 0 || symbol >= layout.codebook_size) {
        throw std::out_of_range("encode_symbol: symbol " + std::to_string(symbol) +
                                " out of range");
    }
    DauFrame f;
    f.codes.resize(static_cast<size_t>(layout.n_codebooks));
    for (int i = 0; i < layout.n_codebooks; ++i) {
        int64_t code = static_cast<int64_t>(symbol) * kCodecMultipliers[i];
        f.codes[static_cast<size_t>(i)] = static_cast<int32_t>(code % layout.codebook_size);
    }
    return f;
}

std::optional<int32_t> decode_frame(const DauFrame& frame, const CodebookLayout& layout) {
    if (frame.codes.size() != static_cast<size_t>(layout.n_codebooks)) {
        throw std::invalid_argument("decode_frame: frame width does not match layout");
    }
    int64_t inv = mod_inverse(kCodecMultipliers[0], layout.codebook_size);
    int64_t s = (static_cast<int64_t>(frame.codes[0]) * inv) % layout.codebook_size;
    DauFrame expect = encode_symbol(static_cast<int32_t>(s), layout);
    if (expect.codes != frame.codes) {
        return std::nullopt;
    }
    return static_cast<int32_t>(s);
}

bool is_silence(const DauFrame& frame) {
    for (int32_t c : frame.codes) {
        if (c != 0) return false;
    }
    return true;
}

std::vector<DauFrame> track_to_frames(const SymbolTrack& track, const CodebookLayout& layout) {
    std::vector<DauFrame> frames;
    frames.reserve(track.symbols.size());
    for (int32_t s : track.symbols) {
        frames.push_back(encode_symbol(s, layout));
    }
    return frames;
}

}  // namespace duplexforge
