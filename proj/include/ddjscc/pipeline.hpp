#pragma once

#include <vector>

#include "ddjscc/channel.hpp"
#include "ddjscc/codec.hpp"

namespace ddjscc {

struct PipelineOut {
    SemanticCode code;   // encoder output, pre-normalization
    VarId normalized;    // power-normalized symbols s
    VarId received;      // post-channel, post-equalization symbols
    VarId recon;         // decoder output, unclamped
};

// Full transmit chain encode -> power-normalize -> channel -> decode with one
// configuration applied to both ends (L_d = L_e by construction). Noise is
// passed in explicitly, so a caller can freeze it across repeated passes.
inline PipelineOut run_pipeline(Tape& tape, DynamicCodec& codec, VarId x,
                                const Conditioning& cond, const LayerConfig& cfg,
                                const std::vector<ChannelRealization>& chans,
                                const Tensor& noise) {
    if (chans.empty()) throw UsageError("run_pipeline: need one channel realization per row");
    const double p_max = chans.front().p_max;
    for (const auto& ch : chans) {
        if (ch.p_max != p_max) throw UsageError("run_pipeline: p_max must be uniform over batch");
    }
    if (p_max <= 0.0) throw UsageError("run_pipeline: p_max must be > 0");
    PipelineOut out;
    out.code = codec.encode(tape, x, cond, cfg);
    out.normalized = tape.power_normalize(out.code.var, p_max);
    VarId zt = transmit(tape, out.normalized, chans, noise);
    out.received = equalize(tape, zt, chans);
    out.recon = codec.decode(tape, SemanticCode{out.received, out.code.k}, cond, cfg);
    return out;
}

inline PipelineOut run_pipeline(Tape& tape, DynamicCodec& codec, VarId x,
                                const Conditioning& cond, const LayerConfig& cfg,
                                const std::vector<ChannelRealization>& chans, Rng& rng) {
    const std::size_t rows = tape.value(x).dim(0);
    const std::size_t two_k = 2 * symbols_for(cond.cr, codec.spec().n_pixels());
    std::vector<double> sigma2;
    sigma2.reserve(chans.size());
    for (const auto& ch : chans) sigma2.push_back(ch.sigma2);
    return run_pipeline(tape, codec, x, cond, cfg, chans, draw_noise(rng, rows, two_k, sigma2));
}

inline Tensor clamp01(Tensor t) {
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (t[i] < 0.0) t[i] = 0.0;
        if (t[i] > 1.0) t[i] = 1.0;
    }
    return t;
}

}  // namespace ddjscc
