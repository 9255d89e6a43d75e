#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace swarm {

/// Half-open interval of transformer blocks [start, end).
struct BlockRange {
    int start = 0;
    int end = 0;

    int size() const { return end - start; }
    bool contains(int block) const { return start <= block && block < end; }
    bool intersects(const BlockRange& o) const { return start < o.end && o.start < end; }
    bool covers(const BlockRange& o) const { return start <= o.start && o.end <= end; }
    bool valid(int n_blocks) const { return 0 <= start && start < end && end <= n_blocks; }
    std::string str() const { return "[" + std::to_string(start) + "," + std::to_string(end) + ")"; }

    auto operator<=>(const BlockRange&) const = default;
};

}  // namespace swarm

namespace swarm::allocation {

struct ServerLoad {
    std::string id;
    BlockRange range;
    float throughput = 0.0f;
};

struct SwarmView {
    int n_blocks = 0;
    std::vector<ServerLoad> servers;
};

/// Summed throughput of the servers hosting each block (0 when uncovered).
std::vector<float> block_throughputs(const SwarmView& view);

/// Bottleneck throughput: the minimum over blocks.
float swarm_throughput(std::span<const float> per_block);

/// Start index of the span-`k` interval a new server with `my_throughput`
/// should take. Candidates are ranked by the ascending-sorted post-join
/// throughput vector, compared lexicographically; ties go to the smallest start.
int choose_interval(std::span<const float> per_block, int k, float my_throughput);

/// Whether server `self_id` should move, and where.
///
/// The server is removed from the view and re-placed with choose_interval.
/// A move is proposed when the resulting bottleneck is at least (1 + eps)
/// times the current one, or, while some block is uncovered, when the move
/// closes every gap. If a gap exists that no single move can close, the
/// server falls back to its slot in a from-scratch greedy placement of the
/// whole swarm (see greedy_placement), which covers all blocks whenever the
/// summed spans reach n_blocks.
std::optional<int> should_rebalance(const SwarmView& view, const std::string& self_id, float eps = 0.2f);

/// Places every server of the view from an empty swarm, in order of
/// descending throughput then id, each with choose_interval and its current
/// span. Returns the start chosen for each server, aligned with view.servers.
std::vector<int> greedy_placement(const SwarmView& view);

/// min(compute, network) in tokens/s.
float server_throughput(float compute_tps, float net_bytes_per_s, float bytes_per_token);

}  // namespace swarm::allocation
