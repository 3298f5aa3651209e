#pragma once

#include <vector>

namespace duplexforge {

struct Segment {
    double start_s = 0.0;
    double end_s = 0.0;

    double duration() const { return end_s - start_s; }
    bool operator==(const Segment&) const = default;
};

// Ordered, non-overlapping speech segments of one speaker.
struct Timeline {
    std::vector<Segment> segments;

    bool empty() const { return segments.empty(); }
    double speech_seconds() const;
    double end_time() const;
};

}  // namespace duplexforge
