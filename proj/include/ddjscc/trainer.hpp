#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ddjscc/channel.hpp"
#include "ddjscc/checkpoint.hpp"
#include "ddjscc/codec.hpp"
#include "ddjscc/dataset.hpp"
#include "ddjscc/pipeline.hpp"

namespace ddjscc {

enum class TrainMode { Dynamic, Fixed };

struct TrainConfig {
    std::size_t epochs = 0;          // E
    std::size_t batch_size = 16;     // B
    double lr = 1e-4;                // Adam learning rate
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    double snr_min = 0.0, snr_max = 27.0;  // dB
    double cr_min = 0.1, cr_max = 0.9;
    double p_max = 1.0;
    std::uint64_t seed = 0;
    TrainMode mode = TrainMode::Dynamic;
    std::size_t fixed_n = 0;  // active-prefix depth when mode == Fixed
    ChannelMode channel = ChannelMode::Awgn;

    void check(std::size_t layers) const {
        if (epochs < 1) throw UsageError("train: epochs must be >= 1");
        if (batch_size < 1) throw UsageError("train: batch_size must be >= 1");
        if (lr < 0.0) throw UsageError("train: negative learning rate");
        if (!(snr_min <= snr_max)) throw UsageError("train: snr range is empty");
        if (!(cr_min > 0.0 && cr_min <= cr_max && cr_max <= 1.0)) {
            throw UsageError("train: cr range must satisfy 0 < cr_min <= cr_max <= 1");
        }
        if (mode == TrainMode::Fixed && (fixed_n < 2 || fixed_n > layers - 1)) {
            throw UsageError("train: fixed_n must lie in [2, L-1]");
        }
    }

    nlohmann::json to_json() const {
        return {{"epochs", epochs},
                {"batch_size", batch_size},
                {"lr", lr},
                {"beta1", beta1},
                {"beta2", beta2},
                {"eps", eps},
                {"snr_range", {snr_min, snr_max}},
                {"cr_range", {cr_min, cr_max}},
                {"p_max", p_max},
                {"seed", seed},
                {"mode", mode == TrainMode::Dynamic ? "dynamic" : "fixed"},
                {"fixed_n", fixed_n},
                {"channel", channel == ChannelMode::Awgn ? "awgn" : "rayleigh"}};
    }
};

// One randomized training episode: depth n, SNR and CR, drawn per mini-batch.
struct Episode {
    std::size_t n = 0;
    double snr_db = 0.0;
    double cr = 0.0;
};

// n uniform over {2..L-1} (constant in fixed mode), snr and cr uniform over
// their configured ranges. Draw order is part of the determinism contract.
inline Episode sample_episode(const TrainConfig& cfg, std::size_t layers, Rng& rng) {
    Episode ep;
    if (cfg.mode == TrainMode::Fixed) {
        ep.n = cfg.fixed_n;
    } else {
        ep.n = static_cast<std::size_t>(rng.uniform_int(2, static_cast<std::int64_t>(layers) - 1));
    }
    ep.snr_db = rng.uniform(cfg.snr_min, cfg.snr_max);
    ep.cr = rng.uniform(cfg.cr_min, cfg.cr_max);
    return ep;
}

struct EpochStats {
    std::size_t epoch = 0;
    double mean_loss = 0.0;
    double duration_s = 0.0;
    double val_psnr_db = 0.0;
    std::vector<std::size_t> per_n_counts;  // index 0 corresponds to n = 2
};

namespace detail {

inline void check_batch_range(const Tensor& batch) {
    for (std::size_t i = 0; i < batch.size(); ++i) {
        if (!(batch[i] >= 0.0 && batch[i] <= 1.0)) {
            throw UsageError("train_step: batch pixels must lie in [0,1]");
        }
    }
}

inline std::vector<ChannelRealization> episode_channels(const Episode& ep,
                                                        const TrainConfig& cfg,
                                                        std::size_t rows, Rng& rng) {
    std::vector<ChannelRealization> chans;
    chans.reserve(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const std::complex<double> h = sample_fading(rng, cfg.channel);
        chans.push_back(make_realization(ep.snr_db, h, cfg.p_max));
    }
    return chans;
}

}  // namespace detail

// Forward pass only; used for descent diagnostics with frozen noise.
inline double eval_step_loss(const Tensor& batch, const Episode& ep, DynamicCodec& codec,
                             const std::vector<ChannelRealization>& chans, const Tensor& noise) {
    const LayerConfig layer_cfg = config_from_n(ep.n, codec.spec().layers);
    const Conditioning cond{ep.snr_db, ep.cr};
    Tape tape;
    VarId x = tape.leaf(batch, false);
    auto run = run_pipeline(tape, codec, x, cond, layer_cfg, chans, noise);
    return tape.value(tape.mse(x, run.recon))[0];
}

// One randomized training step: route by config_from_n(n), run the
// transmit chain, backprop the MSE and Adam-update the touched (active)
// parameters. Inactive layers see exactly zero gradient, so their Adam state
// is untouched.
inline double train_step(const Tensor& batch, const Episode& ep, DynamicCodec& codec,
                         const TrainConfig& cfg, const std::vector<ChannelRealization>& chans,
                         const Tensor& noise) {
    detail::check_batch_range(batch);
    const LayerConfig layer_cfg = config_from_n(ep.n, codec.spec().layers);
    const Conditioning cond{ep.snr_db, ep.cr};
    Tape tape;
    VarId x = tape.leaf(batch, false);
    auto run = run_pipeline(tape, codec, x, cond, layer_cfg, chans, noise);
    VarId loss = tape.mse(x, run.recon);
    const double loss_v = tape.value(loss)[0];
    if (!std::isfinite(loss_v)) {
        throw DivergenceError("train_step: non-finite loss at episode n=" + std::to_string(ep.n) +
                              " snr_db=" + std::to_string(ep.snr_db) +
                              " cr=" + std::to_string(ep.cr));
    }
    codec.params().zero_grads();
    tape.backward(loss);
    adam_step(codec.params(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    return loss_v;
}

// Convenience overload drawing channel state and noise from one stream.
inline double train_step(const Tensor& batch, const Episode& ep, DynamicCodec& codec,
                         const TrainConfig& cfg, Rng& rng) {
    auto chans = detail::episode_channels(ep, cfg, batch.dim(0), rng);
    const std::size_t two_k = 2 * symbols_for(ep.cr, codec.spec().n_pixels());
    std::vector<double> sig;
    sig.reserve(chans.size());
    for (const auto& ch : chans) sig.push_back(ch.sigma2);
    Tensor noise = draw_noise(rng, batch.dim(0), two_k, sig);
    return train_step(batch, ep, codec, cfg, chans, noise);
}

struct TrainResult {
    DynamicCodec codec;
    std::vector<EpochStats> stats;
    std::string run_dir;   // empty when no directory was written
    double best_val_psnr_db = 0.0;
    std::size_t best_epoch = 0;
};

namespace detail {

// Cheap deterministic validation PSNR on a fixed subset at mid-range
// conditions; drives best-checkpoint retention only.
inline double validation_psnr(DynamicCodec& codec, const ImageSet& data,
                              const TrainConfig& cfg, std::size_t epoch) {
    const std::size_t n_val = std::min<std::size_t>(32, data.size());
    const std::size_t depth = cfg.mode == TrainMode::Fixed ? cfg.fixed_n
                                                           : codec.spec().layers - 1;
    const Episode ep{depth, 0.5 * (cfg.snr_min + cfg.snr_max), 0.5 * (cfg.cr_min + cfg.cr_max)};
    const LayerConfig layer_cfg = config_from_n(ep.n, codec.spec().layers);
    const Conditioning cond{ep.snr_db, ep.cr};
    Rng rng(derive_seed(derive_seed(cfg.seed, 0x7a1), epoch));

    Tensor batch({n_val, codec.spec().img_channels, codec.spec().img_h, codec.spec().img_w});
    const std::size_t img_len = codec.spec().n_pixels();
    for (std::size_t i = 0; i < n_val; ++i) {
        for (std::size_t j = 0; j < img_len; ++j) batch[i * img_len + j] = data.images[i][j];
    }
    auto chans = episode_channels(ep, cfg, n_val, rng);
    Tape tape;
    VarId x = tape.leaf(batch, false);
    auto run = run_pipeline(tape, codec, x, cond, layer_cfg, chans, rng);
    Tensor recon = clamp01(tape.value(run.recon));
    double mse = 0.0;
    for (std::size_t i = 0; i < recon.size(); ++i) {
        const double d = recon[i] - batch[i];
        mse += d * d;
    }
    mse /= static_cast<double>(recon.size());
    return mse == 0.0 ? 99.0 : 10.0 * std::log10(1.0 / mse);
}

inline void write_stats_csv(const std::string& path, const std::vector<EpochStats>& stats,
                            std::size_t layers) {
    std::ofstream os(path);
    if (!os) throw IoError("train: cannot write '" + path + "'");
    os << "epoch,mean_loss,duration_s";
    for (std::size_t n = 2; n <= layers - 1; ++n) os << ",count_n" << n;
    os << ",val_psnr_db\n";
    char buf[64];
    for (const auto& s : stats) {
        os << s.epoch;
        std::snprintf(buf, sizeof buf, "%.17g", s.mean_loss);
        os << ',' << buf;
        std::snprintf(buf, sizeof buf, "%.6f", s.duration_s);
        os << ',' << buf;
        for (std::size_t c : s.per_n_counts) os << ',' << c;
        std::snprintf(buf, sizeof buf, "%.17g", s.val_psnr_db);
        os << ',' << buf << '\n';
    }
}

}  // namespace detail

// The training loop: initialize once, then for every epoch and mini-batch draw one
// (n, snr, cr) episode and apply a shared-parameter update. Fully
// deterministic given cfg.seed; fixed mode covers the baseline protocol.
inline TrainResult train(const ImageSet& dataset, const TrainConfig& cfg, const CodecSpec& arch,
                         const std::string& run_dir = "") {
    namespace fs = std::filesystem;
    if (dataset.size() == 0) throw UsageError("train: empty dataset");
    cfg.check(arch.layers);
    if (cfg.cr_max > arch.r_max) {
        throw UsageError("train: cr_max exceeds the architecture's r_max");
    }

    // independent initialization stream per (seed, mode, n)
    const std::uint64_t init_salt =
        cfg.mode == TrainMode::Dynamic ? 0xd711 : 0xf100 + cfg.fixed_n;
    TrainResult result{DynamicCodec(arch, derive_seed(cfg.seed, init_salt)), {}, run_dir, 0.0, 0};
    DynamicCodec& codec = result.codec;

    if (!run_dir.empty()) {
        fs::create_directories(run_dir);
        std::ofstream os(fs::path(run_dir) / "config.json");
        nlohmann::json j = cfg.to_json();
        j["arch"] = {{"layers", arch.layers},     {"width1", arch.width1},
                     {"width2", arch.width2},     {"r_max", arch.r_max},
                     {"img_h", arch.img_h},       {"img_w", arch.img_w},
                     {"img_channels", arch.img_channels}};
        os << j.dump(2) << '\n';
    }

    Rng episode_rng(derive_seed(cfg.seed, init_salt ^ 0xabcdef));
    CheckpointMeta meta;
    meta.seed = cfg.seed;
    meta.snr_min = cfg.snr_min;
    meta.snr_max = cfg.snr_max;
    meta.cr_min = cfg.cr_min;
    meta.cr_max = cfg.cr_max;
    meta.mode = cfg.mode == TrainMode::Dynamic ? "dynamic" : "fixed";
    meta.fixed_n = cfg.fixed_n;

    result.best_val_psnr_db = -1e300;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        EpochStats es;
        es.epoch = epoch;
        es.per_n_counts.assign(arch.layers - 2, 0);
        auto batches = batch_iter(dataset, cfg.batch_size, cfg.seed, epoch);
        double loss_acc = 0.0;
        std::size_t batch_index = 0;
        for (const Tensor& batch : batches) {
            const Episode ep = sample_episode(cfg, arch.layers, episode_rng);
            double loss;
            try {
                loss = train_step(batch, ep, codec, cfg, episode_rng);
            } catch (const DivergenceError& e) {
                throw DivergenceError(std::string(e.what()) + " (epoch " + std::to_string(epoch) +
                                      ", batch " + std::to_string(batch_index) + ")");
            }
            loss_acc += loss;
            es.per_n_counts[ep.n - 2] += 1;
            ++batch_index;
        }
        es.mean_loss = loss_acc / static_cast<double>(batches.size());
        es.val_psnr_db = detail::validation_psnr(codec, dataset, cfg, epoch);
        es.duration_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.stats.push_back(es);

        if (!run_dir.empty()) {
            meta.epoch = static_cast<std::int64_t>(epoch);
            save_checkpoint((fs::path(run_dir) / ("epoch_" + std::to_string(epoch) + ".ckpt")).string(),
                            codec, meta);
            if (es.val_psnr_db > result.best_val_psnr_db) {
                save_checkpoint((fs::path(run_dir) / "best.ckpt").string(), codec, meta);
            }
        }
        if (es.val_psnr_db > result.best_val_psnr_db) {
            result.best_val_psnr_db = es.val_psnr_db;
            result.best_epoch = epoch;
        }
    }

    if (!run_dir.empty()) {
        detail::write_stats_csv((fs::path(run_dir) / "stats.csv").string(), result.stats,
                                arch.layers);
    }
    return result;
}

// The comparison-protocol baseline: same loop with a constant n and its own
// parameter initialization.
inline TrainResult train_fixed_baseline(const ImageSet& dataset, const TrainConfig& cfg,
                                        const CodecSpec& arch, const std::string& run_dir = "") {
    if (cfg.mode != TrainMode::Fixed) {
        throw UsageError("train_fixed_baseline: config mode must be fixed(n)");
    }
    return train(dataset, cfg, arch, run_dir);
}

}  // namespace ddjscc
