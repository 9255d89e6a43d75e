#pragma once

#include <limits>
#include <mutex>
#include <string>

namespace swarm::transport {

/// Emulated link: one-way latency plus a bandwidth cap.
struct LinkShape {
    double latency_ms = 0.0;
    double bandwidth_bps = std::numeric_limits<double>::infinity();

    bool passthrough() const { return latency_ms <= 0.0 && bandwidth_bps == std::numeric_limits<double>::infinity(); }
    /// "latency_ms:bandwidth_mbps"; "inf" allowed for bandwidth, empty means passthrough.
    static LinkShape parse(const std::string& spec);
    /// Reads SWARM_SHAPE, passthrough when unset.
    static LinkShape from_env();
    std::string str() const;
};

/// Token-bucket egress scheduler shared by every connection of one process.
/// A message of n bytes leaves the bucket n*8/bandwidth seconds after the
/// previous one finished and arrives one latency later.
class Shaper {
public:
    explicit Shaper(LinkShape shape = {});
    /// Delivery time (monotonic seconds) of a message of `bytes` sent at `now`.
    double schedule(size_t bytes, double now);
    double schedule(size_t bytes);
    const LinkShape& shape() const { return shape_; }

private:
    LinkShape shape_;
    std::mutex mu_;
    double free_at_ = 0.0;
};

}  // namespace swarm::transport
