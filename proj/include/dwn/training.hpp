#pragma once

/// @file training.hpp
/// Losses with exact gradients, bias-corrected Adam, pixel metrics, and the
/// deterministic training/evaluation loops.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <vector>

#include "dwn/dataio.hpp"
#include "dwn/models.hpp"

namespace dwn {

enum class LossKind { BCE, L2 };

struct TrainConfig {
    LossKind loss = LossKind::BCE;
    double learning_rate = 1e-3;
    int batch_size = 8;
    int epochs = 50;
    std::uint64_t seed = 0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;

    void validate() const {
        if (!(learning_rate > 0.0)) throw config_error("TrainConfig: learning rate must be positive");
        if (batch_size < 1) throw config_error("TrainConfig: batch size must be >= 1");
        if (epochs < 0) throw config_error("TrainConfig: epochs must be >= 0");
        if (!(adam_beta1 > 0.0 && adam_beta1 < 1.0 && adam_beta2 > 0.0 && adam_beta2 < 1.0))
            throw config_error("TrainConfig: Adam betas must lie in (0,1)");
        if (!(adam_eps > 0.0)) throw config_error("TrainConfig: Adam eps must be positive");
    }
};

/// Mean loss over pixels plus its exact gradient with respect to pred.
/// BCE clamps probabilities to [1e-12, 1-1e-12]; the gradient is that of the
/// clamped expression (zero where the clamp is active).
inline std::pair<double, Field> loss_and_grad(const Field& pred, const Field& mask, LossKind kind) {
    if (!pred.same_shape(mask)) throw config_error("loss_and_grad: pred and mask shapes differ");
    const std::size_t n = pred.size();
    Field grad(pred.height(), pred.width(), pred.channels());
    const double* pp = pred.data();
    const double* pm = mask.data();
    double* pg = grad.data();
    double loss = 0.0;
    if (kind == LossKind::L2) {
        for (std::size_t k = 0; k < n; ++k) {
            const double d = pp[k] - pm[k];
            loss += d * d;
            pg[k] = 2.0 * d / static_cast<double>(n);
        }
        loss /= static_cast<double>(n);
    } else {
        constexpr double kClamp = 1e-12;
        for (std::size_t k = 0; k < n; ++k) {
            const double raw = pp[k];
            const double p = std::min(1.0 - kClamp, std::max(kClamp, raw));
            const double g = pm[k];
            loss -= g * std::log(p) + (1.0 - g) * std::log(1.0 - p);
            const bool clamped = raw < kClamp || raw > 1.0 - kClamp;
            pg[k] = clamped ? 0.0 : (p - g) / (p * (1.0 - p) * static_cast<double>(n));
        }
        loss /= static_cast<double>(n);
    }
    return {loss, std::move(grad)};
}

/// Per-tensor first/second moment accumulators mirroring a parameter manifest.
struct AdamState {
    std::vector<std::vector<double>> m, v;
    std::int64_t t = 0;

    explicit AdamState(const std::vector<TensorView>& manifest) {
        m.reserve(manifest.size());
        v.reserve(manifest.size());
        for (const TensorView& tv : manifest) {
            m.emplace_back(tv.size, 0.0);
            v.emplace_back(tv.size, 0.0);
        }
    }
};

/// Standard bias-corrected Adam, applied tensor-wise in manifest order.
inline void adam_step(std::vector<TensorView>& params, const std::vector<TensorView>& grads,
                      AdamState& state, const TrainConfig& cfg) {
    if (params.size() != grads.size() || params.size() != state.m.size())
        throw config_error("adam_step: manifest/state size mismatch");
    state.t += 1;
    const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
    for (std::size_t k = 0; k < params.size(); ++k) {
        if (params[k].size != grads[k].size)
            throw config_error("adam_step: gradient shape mismatch for " + params[k].name);
        double* p = params[k].data;
        const double* g = grads[k].data;
        double* m = state.m[k].data();
        double* v = state.v[k].data();
        for (std::size_t e = 0; e < params[k].size; ++e) {
            m[e] = b1 * m[e] + (1.0 - b1) * g[e];
            v[e] = b2 * v[e] + (1.0 - b2) * g[e] * g[e];
            const double mhat = m[e] / c1;
            const double vhat = v[e] / c2;
            p[e] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_eps);
        }
    }
}

enum class AccuracyMode {
    Agreement, // fraction of pixels where prediction equals the mask
    LiteralAnd // fraction of pixels where prediction AND mask are both 1
};

/// Mean per-image pixel accuracy in percent over binary fields.
inline double accuracy(const std::vector<Field>& preds, const std::vector<Field>& masks,
                       AccuracyMode mode = AccuracyMode::Agreement) {
    if (preds.size() != masks.size() || preds.empty())
        throw config_error("accuracy: need matching non-empty prediction/mask lists");
    double acc = 0.0;
    for (std::size_t k = 0; k < preds.size(); ++k) {
        const Field& p = preds[k];
        const Field& g = masks[k];
        if (!p.same_shape(g)) throw config_error("accuracy: shape mismatch at item " + std::to_string(k));
        std::size_t hits = 0;
        const double* pp = p.data();
        const double* pg = g.data();
        for (std::size_t e = 0; e < p.size(); ++e) {
            const bool a = pp[e] != 0.0, b = pg[e] != 0.0;
            if (mode == AccuracyMode::Agreement ? a == b : (a && b)) ++hits;
        }
        acc += 100.0 * static_cast<double>(hits) / static_cast<double>(p.size());
    }
    return acc / static_cast<double>(preds.size());
}

/// Mean dice score 2|p and g| / (|p| + |g|); both-empty counts as 1.
inline double dice(const std::vector<Field>& preds, const std::vector<Field>& masks) {
    if (preds.size() != masks.size() || preds.empty())
        throw config_error("dice: need matching non-empty prediction/mask lists");
    double total = 0.0;
    for (std::size_t k = 0; k < preds.size(); ++k) {
        const Field& p = preds[k];
        const Field& g = masks[k];
        if (!p.same_shape(g)) throw config_error("dice: shape mismatch at item " + std::to_string(k));
        std::size_t np = 0, ng = 0, overlap = 0;
        const double* pp = p.data();
        const double* pg = g.data();
        for (std::size_t e = 0; e < p.size(); ++e) {
            const bool a = pp[e] != 0.0, b = pg[e] != 0.0;
            np += a;
            ng += b;
            overlap += a && b;
        }
        total += (np + ng) == 0 ? 1.0 : 2.0 * static_cast<double>(overlap) / static_cast<double>(np + ng);
    }
    return total / static_cast<double>(preds.size());
}

namespace detail {
inline Field model_forward(const DNIParams& m, const Field& f) { return dn1_forward(f, m).pred; }
inline Field model_forward(const DNIIParams& m, const Field& f) { return dn2_forward(f, m).pred; }

inline void accumulate(DNIParams& acc, const DNIParams& g) {
    auto va = acc.manifest();
    auto vg = const_cast<DNIParams&>(g).manifest();
    for (std::size_t k = 0; k < va.size(); ++k)
        for (std::size_t e = 0; e < va[k].size; ++e) va[k].data[e] += vg[k].data[e];
}
inline void accumulate(DNIIParams& acc, const DNIIParams& g) {
    auto va = acc.manifest();
    auto vg = const_cast<DNIIParams&>(g).manifest();
    for (std::size_t k = 0; k < va.size(); ++k)
        for (std::size_t e = 0; e < va[k].size; ++e) va[k].data[e] += vg[k].data[e];
}

template <class Model>
inline bool all_finite(Model& m) {
    for (const TensorView& t : m.manifest())
        for (std::size_t e = 0; e < t.size; ++e)
            if (!std::isfinite(t.data[e])) return false;
    return true;
}

/// Deterministic Fisher-Yates permutation.
inline std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
    std::vector<std::size_t> idx(n);
    for (std::size_t k = 0; k < n; ++k) idx[k] = k;
    for (std::size_t k = n; k > 1; --k) std::swap(idx[k - 1], idx[rng.below(k)]);
    return idx;
}
} // namespace detail

/// Forward + threshold + metrics over a dataset.
template <class Model>
inline MetricsRecord evaluate(const Model& model, const Dataset& data,
                              LossKind loss_kind = LossKind::BCE,
                              AccuracyMode mode = AccuracyMode::Agreement) {
    if (data.size() == 0) throw config_error("evaluate: dataset is empty");
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<Field> preds;
    preds.reserve(data.size());
    double mean_loss = 0.0;
    for (std::size_t k = 0; k < data.size(); ++k) {
        Field pred = detail::model_forward(model, data.images[k]);
        mean_loss += loss_and_grad(pred, data.masks[k], loss_kind).first;
        preds.push_back(threshold(pred));
    }
    mean_loss /= static_cast<double>(data.size());
    MetricsRecord r;
    r.epoch = 0;
    r.mean_loss = mean_loss;
    r.accuracy_pct = accuracy(preds, data.masks, mode);
    r.dice = dice(preds, data.masks);
    r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

/// Minibatch training: epochs x seeded-shuffled batches of
/// forward -> loss -> backward -> Adam, with per-epoch metrics on a held-out
/// split (the last 20% of the dataset by index, fixed before any shuffling;
/// when that split would be empty the full dataset is used for metrics).
/// Throws divergence_error as soon as a non-finite loss or parameter appears.
template <class Model>
inline std::vector<MetricsRecord> train(Model& model, const Dataset& data, const TrainConfig& cfg) {
    cfg.validate();
    if (data.size() == 0) throw config_error("train: dataset is empty");
    for (std::size_t k = 0; k < data.size(); ++k) {
        if (data.images[k].channels() != model.image_channels())
            throw config_error("train: image " + data.names[k] + " has " +
                               std::to_string(data.images[k].channels()) +
                               " channels, model expects " + std::to_string(model.image_channels()));
        if (data.masks[k].height() != data.images[k].height() ||
            data.masks[k].width() != data.images[k].width() || data.masks[k].channels() != 1)
            throw config_error("train: mask shape mismatch for " + data.names[k]);
    }

    const std::size_t held = data.size() / 5;
    const std::size_t n_train = data.size() - held;
    Dataset held_out;
    for (std::size_t k = n_train; k < data.size(); ++k) {
        held_out.images.push_back(data.images[k]);
        held_out.masks.push_back(data.masks[k]);
        held_out.names.push_back(data.names[k]);
    }
    const Dataset& metric_set = held > 0 ? held_out : data;

    auto params = model.manifest();
    AdamState adam(params);
    Rng shuffle_rng(substream(cfg.seed, 0x7368756646));
    std::vector<MetricsRecord> records;
    records.reserve(cfg.epochs);
    const auto t0 = std::chrono::steady_clock::now();

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto order = detail::shuffled_indices(n_train, shuffle_rng);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
            Model grads = zeros_like(model);
            for (std::size_t b = start; b < stop; ++b) {
                const std::size_t idx = order[b];
                auto fw = [&] {
                    if constexpr (std::is_same_v<Model, DNIParams>)
                        return dn1_forward(data.images[idx], model);
                    else
                        return dn2_forward(data.images[idx], model);
                }();
                auto [lv, lg] = loss_and_grad(fw.pred, data.masks[idx], cfg.loss);
                if (!std::isfinite(lv))
                    throw divergence_error("train: non-finite loss at epoch " + std::to_string(epoch));
                epoch_loss += lv;
                detail::accumulate(grads, dn_backward(model, fw.tape, lg));
            }
            const double inv = 1.0 / static_cast<double>(stop - start);
            auto gviews = grads.manifest();
            for (TensorView& t : gviews)
                for (std::size_t e = 0; e < t.size; ++e) t.data[e] *= inv;
            adam_step(params, gviews, adam, cfg);
        }
        if (!detail::all_finite(model))
            throw divergence_error("train: non-finite parameter after epoch " + std::to_string(epoch));

        MetricsRecord r = evaluate(model, metric_set, cfg.loss);
        r.epoch = epoch;
        r.mean_loss = n_train > 0 ? epoch_loss / static_cast<double>(n_train) : 0.0;
        r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        records.push_back(r);
    }
    return records;
}

} // namespace dwn
