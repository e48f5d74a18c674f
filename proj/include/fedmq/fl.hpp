#ifndef FEDMQ_FL_HPP
#define FEDMQ_FL_HPP

// Desk-scale federated workload: synthetic two-class Gaussian shards, a
// logistic-regression model trained by full-batch gradient descent, and
// sample-weighted federated averaging.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fedmq/errors.hpp"
#include "fedmq/payload.hpp"

namespace fedmq {

/// Row-major feature matrix with binary labels.
struct dataset {
    std::size_t dim = 0;
    std::vector<double> features;
    std::vector<std::uint8_t> labels;

    std::size_t size() const noexcept { return labels.size(); }
    std::span<const double> row(std::size_t i) const { return {features.data() + i * dim, dim}; }
};

/// Two Gaussian classes (unit variance) whose centres sit `separation` apart
/// along the diagonal direction. The seed also draws a per-shard offset
/// orthogonal to that direction, so distinct seeds give non-IID shards that
/// still share one optimal decision boundary. `sample_stream` redraws the
/// points without moving the centres (used for held-out sets).
inline dataset synth_dataset(std::uint64_t seed, std::size_t n, std::size_t dim, double separation,
                             std::uint64_t sample_stream = 0) {
    if (dim == 0) throw fl_error(fl_errc::layout_mismatch, "dataset dimension must be >= 1");
    std::normal_distribution<double> normal(0.0, 1.0);

    std::seed_seq centre_seed{seed, std::uint64_t{0x5eed}};
    std::mt19937_64 centre_rng(centre_seed);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(dim));
    std::vector<double> offset(dim);
    double along = 0.0;
    for (auto& o : offset) {
        o = normal(centre_rng);
        along += o * inv_sqrt_d;
    }
    for (auto& o : offset) o -= along * inv_sqrt_d;

    std::seed_seq sample_seed{seed, sample_stream + 1};
    std::mt19937_64 rng(sample_seed);
    dataset ds;
    ds.dim = dim;
    ds.features.resize(n * dim);
    ds.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint8_t label = i % 2;
        const double sign = label ? 0.5 : -0.5;
        ds.labels[i] = label;
        for (std::size_t k = 0; k < dim; ++k)
            ds.features[i * dim + k] = offset[k] + sign * separation * inv_sqrt_d + normal(rng);
    }
    return ds;
}

/// Concatenates shards (held-out evaluation over several clients).
inline dataset concat(std::span<const dataset> parts) {
    dataset out;
    if (parts.empty()) return out;
    out.dim = parts.front().dim;
    for (const auto& p : parts) {
        if (p.dim != out.dim) throw fl_error(fl_errc::layout_mismatch, "shard dimensions differ");
        out.features.insert(out.features.end(), p.features.begin(), p.features.end());
        out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Logistic regression

/// Zero-initialised template: layout {weights: dim, bias: 1}.
inline parameter_set logistic_template(std::size_t dim) {
    parameter_set p;
    p.layout = {{"weights", static_cast<std::uint32_t>(dim)}, {"bias", 1}};
    p.values.assign(dim + 1, 0.0);
    return p;
}

namespace detail {

inline void check_logistic(const parameter_set& p, const dataset& data) {
    if (p.layout.size() != 2 || p.layout[0].length != data.dim || p.layout[1].length != 1 ||
        p.values.size() != data.dim + 1)
        throw fl_error(fl_errc::layout_mismatch, "parameters do not match a logistic model of this dimension");
}

inline double logit(std::span<const double> theta, std::span<const double> x) {
    double z = theta[x.size()];
    for (std::size_t k = 0; k < x.size(); ++k) z += theta[k] * x[k];
    return z;
}

inline double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    double e = std::exp(z);
    return e / (1.0 + e);
}

// log(1 + e^z) without overflow
inline double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

} // namespace detail

/// Mean binary cross-entropy.
inline double logistic_loss(const parameter_set& p, const dataset& data) {
    detail::check_logistic(p, data);
    if (data.size() == 0) throw fl_error(fl_errc::empty_dataset, "empty dataset");
    double total = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        double z = detail::logit(p.values, data.row(i));
        total += detail::softplus(z) - data.labels[i] * z;
    }
    return total / static_cast<double>(data.size());
}

/// Gradient of logistic_loss with respect to (weights, bias).
inline std::vector<double> logistic_gradient(const parameter_set& p, const dataset& data) {
    detail::check_logistic(p, data);
    if (data.size() == 0) throw fl_error(fl_errc::empty_dataset, "empty dataset");
    std::vector<double> g(data.dim + 1, 0.0);
    for (std::size_t i = 0; i < data.size(); ++i) {
        auto x = data.row(i);
        double err = detail::sigmoid(detail::logit(p.values, x)) - data.labels[i];
        for (std::size_t k = 0; k < data.dim; ++k) g[k] += err * x[k];
        g[data.dim] += err;
    }
    for (auto& v : g) v /= static_cast<double>(data.size());
    return g;
}

inline double accuracy(const parameter_set& p, const dataset& data) {
    detail::check_logistic(p, data);
    if (data.size() == 0) throw fl_error(fl_errc::empty_dataset, "empty dataset");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        std::uint8_t predicted = detail::logit(p.values, data.row(i)) >= 0 ? 1 : 0;
        correct += predicted == data.labels[i];
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

/// `epochs` steps of full-batch gradient descent; the result carries
/// num_samples = |data|.
inline parameter_set local_train(const parameter_set& start, const dataset& data, std::uint32_t epochs,
                                 double learning_rate) {
    if (data.size() == 0) throw fl_error(fl_errc::empty_dataset, "cannot train on an empty dataset");
    detail::check_logistic(start, data);
    parameter_set p = start;
    for (std::uint32_t e = 0; e < epochs; ++e) {
        auto g = logistic_gradient(p, data);
        for (std::size_t k = 0; k < p.values.size(); ++k) p.values[k] -= learning_rate * g[k];
    }
    p.num_samples = data.size();
    return p;
}

// ---------------------------------------------------------------------------
// Aggregation

struct client_update {
    std::string client_id;
    parameter_set params;
};

class aggregation_policy {
public:
    virtual ~aggregation_policy() = default;
    /// `updates` arrive sorted by client_id.
    virtual parameter_set aggregate(std::span<const client_update> updates) const = 0;
};

namespace detail {

inline void check_updates(std::span<const parameter_set* const> updates) {
    if (updates.empty()) throw fl_error(fl_errc::empty_update_set, "no updates to aggregate");
    const auto& first = *updates.front();
    std::uint64_t total = 0;
    for (const auto* u : updates) {
        if (u->layout != first.layout || u->values.size() != first.values.size())
            throw fl_error(fl_errc::layout_mismatch, "updates have different layouts");
        total += u->num_samples;
    }
    if (total == 0) throw fl_error(fl_errc::zero_total_weight, "updates carry no samples");
}

/// Sample-weighted mean, summed in the given order.
inline parameter_set weighted_mean(std::span<const parameter_set* const> updates) {
    check_updates(updates);
    std::uint64_t total = 0;
    for (const auto* u : updates) total += u->num_samples;
    parameter_set out;
    out.layout = updates.front()->layout;
    out.values.assign(updates.front()->values.size(), 0.0);
    out.num_samples = total;
    for (const auto* u : updates) {
        const double w = static_cast<double>(u->num_samples) / static_cast<double>(total);
        for (std::size_t j = 0; j < out.values.size(); ++j) out.values[j] += w * u->values[j];
    }
    return out;
}

} // namespace detail

/// Federated averaging: value_j = sum_i n_i v_ij / sum_i n_i.
class federated_averaging final : public aggregation_policy {
public:
    parameter_set aggregate(std::span<const client_update> updates) const override {
        std::vector<const parameter_set*> ordered;
        ordered.reserve(updates.size());
        for (const auto& u : updates) ordered.push_back(&u.params);
        return detail::weighted_mean(ordered);
    }
};

/// FedAvg over client updates, ordered by client_id first so that the
/// result does not depend on arrival order.
inline parameter_set aggregate(std::span<const client_update> updates,
                               const aggregation_policy& policy = federated_averaging{}) {
    std::vector<client_update> sorted(updates.begin(), updates.end());
    std::stable_sort(sorted.begin(), sorted.end(),
                     [](const client_update& a, const client_update& b) { return a.client_id < b.client_id; });
    return policy.aggregate(sorted);
}

/// FedAvg over anonymous updates. Summation follows a canonical order
/// (num_samples, then value bit patterns) for exact permutation invariance.
inline parameter_set aggregate(std::span<const parameter_set> updates) {
    std::vector<const parameter_set*> ordered;
    for (const auto& u : updates) ordered.push_back(&u);
    auto key_less = [](const parameter_set* a, const parameter_set* b) {
        if (a->num_samples != b->num_samples) return a->num_samples < b->num_samples;
        return std::lexicographical_compare(a->values.begin(), a->values.end(), b->values.begin(), b->values.end(),
                                            [](double x, double y) {
                                                return std::bit_cast<std::uint64_t>(x) <
                                                       std::bit_cast<std::uint64_t>(y);
                                            });
    };
    std::stable_sort(ordered.begin(), ordered.end(), key_less);
    return detail::weighted_mean(ordered);
}

} // namespace fedmq

#endif // FEDMQ_FL_HPP
