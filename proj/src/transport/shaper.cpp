#include "swarm/transport/shaper.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>

#include "swarm/common.hpp"

namespace swarm::transport {

LinkShape LinkShape::parse(const std::string& spec) {
    LinkShape s;
    if (spec.empty() || spec == "none") return s;
    const auto colon = spec.find(':');
    if (colon == std::string::npos) throw InputError("shape must be latency_ms:bandwidth_mbps, got '" + spec + "'");
    try {
        s.latency_ms = std::stod(spec.substr(0, colon));
        const std::string bw = spec.substr(colon + 1);
        if (bw != "inf" && !bw.empty()) s.bandwidth_bps = std::stod(bw) * 1e6;
    } catch (const std::logic_error&) {
        throw InputError("shape must be latency_ms:bandwidth_mbps, got '" + spec + "'");
    }
    if (!(s.latency_ms >= 0.0) || !(s.bandwidth_bps > 0.0)) throw InputError("shape values must be non-negative");
    return s;
}

LinkShape LinkShape::from_env() {
    const char* v = std::getenv("SWARM_SHAPE");
    return v ? parse(v) : LinkShape{};
}

std::string LinkShape::str() const {
    const std::string bw = std::isinf(bandwidth_bps) ? "inf" : std::to_string(bandwidth_bps / 1e6);
    return std::to_string(latency_ms) + ":" + bw;
}

Shaper::Shaper(LinkShape shape) : shape_(shape) {}

double Shaper::schedule(size_t bytes, double now) {
    if (shape_.passthrough()) return now;
    std::lock_guard lock(mu_);
    const double tx = std::isinf(shape_.bandwidth_bps) ? 0.0 : double(bytes) * 8.0 / shape_.bandwidth_bps;
    free_at_ = std::max(now, free_at_) + tx;
    return free_at_ + shape_.latency_ms / 1000.0;
}

double Shaper::schedule(size_t bytes) { return schedule(bytes, monotonic_seconds()); }

}  // namespace swarm::transport
