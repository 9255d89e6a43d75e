#include "swarm/allocation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "swarm/common.hpp"

namespace swarm::allocation {

std::vector<float> block_throughputs(const SwarmView& view) {
    std::vector<float> t(size_t(std::max(view.n_blocks, 0)), 0.0f);
    for (const auto& s : view.servers)
        for (int b = std::max(s.range.start, 0); b < std::min(s.range.end, view.n_blocks); ++b) t[b] += s.throughput;
    return t;
}

float swarm_throughput(std::span<const float> per_block) {
    if (per_block.empty()) return 0.0f;
    return *std::min_element(per_block.begin(), per_block.end());
}

namespace {

std::vector<float> sorted_with(std::span<const float> t, int start, int k, float add) {
    std::vector<float> v(t.begin(), t.end());
    for (int b = start; b < start + k; ++b) v[b] += add;
    std::sort(v.begin(), v.end());
    return v;
}

std::vector<float> with_added(std::span<const float> t, int start, int k, float add) {
    std::vector<float> v(t.begin(), t.end());
    for (int b = start; b < start + k; ++b) v[b] += add;
    return v;
}

}  // namespace

int choose_interval(std::span<const float> per_block, int k, float my_throughput) {
    const int n = int(per_block.size());
    if (k < 1 || k > n) throw InputError("choose_interval: span must be in [1, L]");
    int best = 0;
    std::vector<float> best_vec = sorted_with(per_block, 0, k, my_throughput);
    for (int i = 1; i + k <= n; ++i) {
        auto v = sorted_with(per_block, i, k, my_throughput);
        if (std::lexicographical_compare(best_vec.begin(), best_vec.end(), v.begin(), v.end())) {
            best = i;
            best_vec = std::move(v);
        }
    }
    return best;
}

std::vector<int> greedy_placement(const SwarmView& view) {
    std::vector<size_t> order(view.servers.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        const auto &x = view.servers[a], &y = view.servers[b];
        if (x.throughput != y.throughput) return x.throughput > y.throughput;
        return x.id < y.id;
    });
    std::vector<float> t(size_t(view.n_blocks), 0.0f);
    std::vector<int> starts(view.servers.size(), 0);
    for (size_t idx : order) {
        const auto& s = view.servers[idx];
        const int k = std::min(s.range.size(), view.n_blocks);
        const int start = choose_interval(t, k, s.throughput);
        for (int b = start; b < start + k; ++b) t[b] += s.throughput;
        starts[idx] = start;
    }
    return starts;
}

namespace {

struct LocalMove {
    int start;
    float bottleneck;
};

// Remove server `idx` and re-place it with choose_interval.
std::optional<LocalMove> local_move(const SwarmView& view, size_t idx) {
    const auto& self = view.servers[idx];
    const int k = self.range.size();
    if (k < 1 || k > view.n_blocks) return std::nullopt;
    SwarmView without = view;
    without.servers.erase(without.servers.begin() + std::ptrdiff_t(idx));
    const auto t_without = block_throughputs(without);
    const int candidate = choose_interval(t_without, k, self.throughput);
    return LocalMove{candidate, swarm_throughput(with_added(t_without, candidate, k, self.throughput))};
}

}  // namespace

std::optional<int> should_rebalance(const SwarmView& view, const std::string& self_id, float eps) {
    auto self = std::find_if(view.servers.begin(), view.servers.end(), [&](const auto& s) { return s.id == self_id; });
    if (self == view.servers.end()) return std::nullopt;
    const size_t self_idx = size_t(self - view.servers.begin());
    const auto mine = local_move(view, self_idx);
    if (!mine) return std::nullopt;

    const float current = swarm_throughput(block_throughputs(view));
    if (mine->start != self->range.start) {
        if (current <= 0.0f ? mine->bottleneck > 0.0f : mine->bottleneck >= (1.0f + eps) * current) return mine->start;
    }
    if (current > 0.0f) return std::nullopt;

    // Leave single-move repairs to the server that can make them.
    for (size_t i = 0; i < view.servers.size(); ++i) {
        if (i == self_idx) continue;
        const auto other = local_move(view, i);
        if (other && other->start != view.servers[i].range.start && other->bottleneck > 0.0f) return std::nullopt;
    }

    // A gap no single move can close: migrate toward the global greedy layout.
    const auto plan = greedy_placement(view);
    SwarmView planned = view;
    for (size_t i = 0; i < planned.servers.size(); ++i) {
        auto& s = planned.servers[i];
        const int span = std::min(s.range.size(), view.n_blocks);
        s.range = {plan[i], plan[i] + span};
    }
    if (swarm_throughput(block_throughputs(planned)) <= 0.0f) return std::nullopt;
    const int target = plan[size_t(self - view.servers.begin())];
    if (target == self->range.start) return std::nullopt;
    return target;
}

float server_throughput(float compute_tps, float net_bytes_per_s, float bytes_per_token) {
    if (!(compute_tps > 0.0f) || !(net_bytes_per_s > 0.0f) || !(bytes_per_token > 0.0f))
        throw InputError("server_throughput: inputs must be positive");
    return std::min(compute_tps, net_bytes_per_s / bytes_per_token);
}

}  // namespace swarm::allocation
