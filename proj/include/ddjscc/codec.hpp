#pragma once

#include <cmath>
#include <complex>
#include <cstdint>
#include <string>
#include <vector>

#include "ddjscc/autodiff.hpp"
#include "ddjscc/error.hpp"
#include "ddjscc/optim.hpp"
#include "ddjscc/rng.hpp"
#include "ddjscc/tensor.hpp"

namespace ddjscc {

// Activation bit-vector over L layers, 1-based layer indices. Layers 1, 2 and
// L are always active; an interior layer may be active only when all interior
// layers before it are.
struct LayerConfig {
    std::vector<std::uint8_t> bits;

    std::size_t layer_count() const { return bits.size(); }
    bool active(std::size_t layer_1based) const { return bits.at(layer_1based - 1) != 0; }

    // "Set128"-style name listing active layer indices
    std::string name() const {
        std::string s = "Set";
        for (std::size_t i = 0; i < bits.size(); ++i) {
            if (bits[i]) s += std::to_string(i + 1);
        }
        return s;
    }
};

inline bool validate_config(const LayerConfig& cfg) {
    const std::size_t l = cfg.bits.size();
    if (l < 4) throw DimensionError("validate_config: need at least 4 layers, got " +
                                    std::to_string(l));
    if (!cfg.bits[0] || !cfg.bits[1] || !cfg.bits[l - 1]) return false;
    for (std::size_t i = 2; i < l - 1; ++i) {
        if (cfg.bits[i] > cfg.bits[i - 1]) return false;
    }
    return true;
}

// Layers {1..n} plus layer L active; n in {2..L-1}.
inline LayerConfig config_from_n(std::size_t n, std::size_t l) {
    if (l < 4) throw UsageError("config_from_n: need at least 4 layers");
    if (n < 2 || n > l - 1) {
        throw UsageError("config_from_n: n must lie in [2, " + std::to_string(l - 1) + "], got " +
                         std::to_string(n));
    }
    LayerConfig cfg;
    cfg.bits.assign(l, 0);
    for (std::size_t i = 1; i <= l; ++i) {
        if (i <= n || i == l) cfg.bits[i - 1] = 1;
    }
    return cfg;
}

// All valid hierarchical configurations: exactly L-2 of them, one per n,
// versus 2^(L-3) unconstrained interior patterns.
inline std::vector<LayerConfig> enumerate_valid_configs(std::size_t l) {
    if (l < 4) throw UsageError("enumerate_valid_configs: need at least 4 layers");
    std::vector<LayerConfig> out;
    out.reserve(l - 2);
    for (std::size_t n = 2; n <= l - 1; ++n) out.push_back(config_from_n(n, l));
    return out;
}

// Channel-state side information fed to both ends: SNR in dB and the
// compression ratio R = K/N.
struct Conditioning {
    double snr_db = 0.0;
    double cr = 0.0;

    void check() const {
        if (!(cr > 0.0 && cr <= 1.0)) {
            throw UsageError("conditioning: cr must lie in (0, 1], got " + std::to_string(cr));
        }
        if (!std::isfinite(snr_db)) throw UsageError("conditioning: snr_db must be finite");
    }
};

// Complex-symbol bookkeeping: K symbols carry 2K reals, K = floor(cr*N/2).
inline std::size_t symbols_for(double cr, std::size_t n_pixels) {
    return static_cast<std::size_t>(std::floor(cr * static_cast<double>(n_pixels) / 2.0));
}

// Interleaved real pairs <-> complex symbols. The layouts carry identical
// numbers so norms agree between the two views.
inline std::vector<std::complex<double>> pack_complex(const Tensor& v) {
    if (v.size() % 2 != 0) throw DimensionError("pack_complex: odd-length input");
    std::vector<std::complex<double>> z(v.size() / 2);
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = {v[2 * i], v[2 * i + 1]};
    return z;
}

inline Tensor unpack_complex(const std::vector<std::complex<double>>& z) {
    Tensor v({2 * z.size()});
    for (std::size_t i = 0; i < z.size(); ++i) {
        v[2 * i] = z[i].real();
        v[2 * i + 1] = z[i].imag();
    }
    return v;
}

// Keep the first 2K of the final layer's 2K_max outputs; the tail is dead for
// this transmission and receives zero gradient.
inline VarId apply_cr_mask(Tape& tape, VarId v, double cr, std::size_t n_pixels) {
    const std::size_t k = symbols_for(cr, n_pixels);
    if (k < 1) throw UsageError("apply_cr_mask: cr so small that no symbol fits");
    const Tensor& t = tape.value(v);
    if (t.ndim() != 2) throw DimensionError("apply_cr_mask: expects [B, 2K_max]");
    if (2 * k > t.dim(1)) {
        throw UsageError("apply_cr_mask: cr " + std::to_string(cr) + " exceeds code capacity");
    }
    return tape.slice_cols(v, 2 * k);
}

// Static architecture description. Defaults follow the reference stack:
// conv 3->w1 stride 2, conv w1->w2 stride 2, shape-preserving residual
// interiors, then a head conv wide enough to carry 2*K_max flattened reals.
// The decoder mirrors with transposed convs. All strides/kernels are fixed so
// interior layers stay individually skippable.
struct CodecSpec {
    std::size_t layers = 8;  // L
    std::size_t img_channels = 3;
    std::size_t img_h = 32;
    std::size_t img_w = 32;
    std::size_t width1 = 32;  // after layer 1
    std::size_t width2 = 64;  // interior trunk
    double r_max = 0.9;
    double snr_cond_min = 0.0;  // conditioning rescale range, dB
    double snr_cond_max = 27.0;

    std::size_t n_pixels() const { return img_channels * img_h * img_w; }
    std::size_t k_max() const { return symbols_for(r_max, n_pixels()); }
    std::size_t feat_h() const { return img_h / 4; }
    std::size_t feat_w() const { return img_w / 4; }
    // head channels: smallest count whose flattened size covers 2*K_max
    std::size_t code_channels() const {
        const std::size_t spatial = feat_h() * feat_w();
        return (2 * k_max() + spatial - 1) / spatial;
    }
    std::size_t flat_code_len() const { return code_channels() * feat_h() * feat_w(); }

    void check() const {
        if (layers < 4) throw UsageError("codec: need at least 4 layers");
        if (img_h % 4 != 0 || img_w % 4 != 0) {
            throw UsageError("codec: image height/width must be multiples of 4");
        }
        if (!(r_max > 0.0 && r_max <= 1.0)) throw UsageError("codec: r_max must lie in (0, 1]");
        if (k_max() < 1) throw UsageError("codec: r_max yields no symbols");
        if (width1 < 1 || width2 < 1) throw UsageError("codec: widths must be positive");
        if (!(snr_cond_max > snr_cond_min)) {
            throw UsageError("codec: snr conditioning range must be nonempty");
        }
    }

    // gamma_dB linearly rescaled so the training range maps to [0,1];
    // out-of-range SNRs extrapolate linearly
    double snr_feature(double snr_db) const {
        return (snr_db - snr_cond_min) / (snr_cond_max - snr_cond_min);
    }
};

// Channel-symbol vector on a tape: [B, 2K] interleaved reals viewed as K
// complex symbols per row.
struct SemanticCode {
    VarId var = -1;
    std::size_t k = 0;
};

// The dynamic encoder/decoder pair. All L layers' parameters exist regardless
// of which layers a forward pass activates; a configuration only routes.
class DynamicCodec {
  public:
    explicit DynamicCodec(CodecSpec spec, std::uint64_t init_seed) : spec_(spec) {
        spec_.check();
        init_params(init_seed);
    }

    // Construction from checkpointed parameters.
    DynamicCodec(CodecSpec spec, ParamStore params) : spec_(spec), params_(std::move(params)) {
        spec_.check();
        for (std::size_t i = 1; i <= spec_.layers; ++i) {
            for (const auto& side : {"enc", "dec"}) {
                for (const auto& n : layer_param_names(side, i)) {
                    if (!params_.has(n)) throw UsageError("codec params missing '" + n + "'");
                }
            }
        }
    }

    const CodecSpec& spec() const { return spec_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    std::vector<std::string> layer_param_names(const std::string& side, std::size_t i) const {
        const std::string p = side + ".l" + std::to_string(i) + ".";
        if (i == spec_.layers) return {p + "w", p + "b"};
        return {p + "w", p + "b", p + "slope"};
    }

    // x:[B,C,H,W] -> K complex symbols per batch row, K = floor(cr*N/2).
    // Active layers run in ascending order, each consuming the most recent
    // active predecessor's output; inactive layers contribute nothing.
    SemanticCode encode(Tape& tape, VarId x, const Conditioning& cond,
                        const LayerConfig& cfg) {
        check_run_args(tape.value(x), cond, cfg, true);
        VarId h = with_conditioning(tape, x, cond);
        for (std::size_t i = 1; i <= spec_.layers; ++i) {
            if (cfg.active(i)) h = apply_encoder_layer(tape, i, h);
        }
        VarId flat = tape.flatten_rows(h);
        // the head's declared output is exactly 2*K_max reals
        VarId budget = tape.slice_cols(flat, 2 * spec_.k_max());
        VarId masked = apply_cr_mask(tape, budget, cond.cr, spec_.n_pixels());
        return SemanticCode{masked, symbols_for(cond.cr, spec_.n_pixels())};
    }

    // Mirror of encode over the received symbols; masked positions are
    // zero-filled before the decoder stack runs. No clamping here; evaluation
    // clamps reconstructions, training must not.
    VarId decode(Tape& tape, const SemanticCode& code, const Conditioning& cond,
                 const LayerConfig& cfg) {
        const Tensor& cv = tape.value(code.var);
        check_run_args(cv, cond, cfg, false);
        const std::size_t k = symbols_for(cond.cr, spec_.n_pixels());
        if (cv.ndim() != 2 || cv.dim(1) != 2 * k || code.k != k) {
            throw DimensionError("decode: code length " + std::to_string(cv.dim(1)) +
                                 " does not match 2*K = " + std::to_string(2 * k) +
                                 " implied by cr");
        }
        VarId padded = tape.pad_cols(code.var, spec_.flat_code_len());
        VarId feat = tape.reshape(
            padded, {cv.dim(0), spec_.code_channels(), spec_.feat_h(), spec_.feat_w()});
        VarId h = with_conditioning(tape, feat, cond);
        for (std::size_t i = 1; i <= spec_.layers; ++i) {
            if (cfg.active(i)) h = apply_decoder_layer(tape, i, h);
        }
        return h;
    }

    // Single layer application; exposed so tests can hand-wire compositions.
    VarId apply_encoder_layer(Tape& tape, std::size_t i, VarId h) {
        const std::string p = "enc.l" + std::to_string(i) + ".";
        if (i == 1 || i == 2) {
            VarId c = tape.conv2d(h, tape.param(params_, p + "w"), tape.param(params_, p + "b"),
                                  2, 1);
            return tape.prelu(c, tape.param(params_, p + "slope"));
        }
        if (i == spec_.layers) {
            return tape.conv2d(h, tape.param(params_, p + "w"), tape.param(params_, p + "b"), 1,
                               1);
        }
        VarId c = tape.conv2d(h, tape.param(params_, p + "w"), tape.param(params_, p + "b"), 1, 1);
        return tape.add(h, tape.prelu(c, tape.param(params_, p + "slope")));
    }

    VarId apply_decoder_layer(Tape& tape, std::size_t i, VarId h) {
        const std::string p = "dec.l" + std::to_string(i) + ".";
        if (i == 1) {
            VarId c = tape.conv2d(h, tape.param(params_, p + "w"), tape.param(params_, p + "b"),
                                  1, 1);
            return tape.prelu(c, tape.param(params_, p + "slope"));
        }
        if (i == 2) {
            VarId c = tape.conv2d_transpose(h, tape.param(params_, p + "w"),
                                            tape.param(params_, p + "b"), 2, 1);
            return tape.prelu(c, tape.param(params_, p + "slope"));
        }
        if (i == spec_.layers) {
            return tape.conv2d_transpose(h, tape.param(params_, p + "w"),
                                         tape.param(params_, p + "b"), 2, 1);
        }
        VarId c = tape.conv2d(h, tape.param(params_, p + "w"), tape.param(params_, p + "b"), 1, 1);
        return tape.add(h, tape.prelu(c, tape.param(params_, p + "slope")));
    }

  private:
    void check_run_args(const Tensor& x, const Conditioning& cond, const LayerConfig& cfg,
                        bool encoder) const {
        cond.check();
        if (cfg.layer_count() != spec_.layers) {
            throw DimensionError("config has " + std::to_string(cfg.layer_count()) +
                                 " layers, codec has " + std::to_string(spec_.layers));
        }
        if (!validate_config(cfg)) throw UsageError("invalid layer configuration " + cfg.name());
        if (symbols_for(cond.cr, spec_.n_pixels()) < 1) {
            throw UsageError("cr too small: no symbol fits");
        }
        if (cond.cr > spec_.r_max) {
            throw UsageError("cr " + std::to_string(cond.cr) + " exceeds model r_max " +
                             std::to_string(spec_.r_max));
        }
        if (encoder) {
            if (x.ndim() != 4 || x.dim(1) != spec_.img_channels || x.dim(2) != spec_.img_h ||
                x.dim(3) != spec_.img_w) {
                throw DimensionError("encode: input shape " + x.shape_str() + " does not match " +
                                     "codec image geometry");
            }
        }
    }

    // Two constant feature channels (scaled SNR, CR) appended at the input of
    // either stack.
    VarId with_conditioning(Tape& tape, VarId x, const Conditioning& cond) {
        const Tensor& xv = tape.value(x);
        const std::size_t b = xv.dim(0), h = xv.dim(2), w = xv.dim(3);
        Tensor c({b, 2, h, w});
        const double sf = spec_.snr_feature(cond.snr_db);
        for (std::size_t bi = 0; bi < b; ++bi) {
            double* p = c.data() + bi * 2 * h * w;
            for (std::size_t i = 0; i < h * w; ++i) p[i] = sf;
            for (std::size_t i = 0; i < h * w; ++i) p[h * w + i] = cond.cr;
        }
        return tape.concat_channels(x, tape.leaf(std::move(c), false));
    }

    void init_params(std::uint64_t seed) {
        Rng rng(derive_seed(seed, 0x1a17));
        const std::size_t l = spec_.layers;
        for (std::size_t i = 1; i <= l; ++i) add_layer("enc", i, enc_shape(i), rng);
        for (std::size_t i = 1; i <= l; ++i) add_layer("dec", i, dec_shape(i), rng);
    }

    std::vector<std::size_t> enc_shape(std::size_t i) const {
        const std::size_t l = spec_.layers;
        if (i == 1) return {spec_.width1, spec_.img_channels + 2, 4, 4};
        if (i == 2) return {spec_.width2, spec_.width1, 4, 4};
        if (i == l) return {spec_.code_channels(), spec_.width2, 3, 3};
        return {spec_.width2, spec_.width2, 3, 3};
    }

    std::vector<std::size_t> dec_shape(std::size_t i) const {
        const std::size_t l = spec_.layers;
        if (i == 1) return {spec_.width2, spec_.code_channels() + 2, 3, 3};
        if (i == 2) return {spec_.width2, spec_.width1, 4, 4};   // transposed: w2 -> w1
        if (i == l) return {spec_.width1, spec_.img_channels, 4, 4};  // transposed: w1 -> img
        return {spec_.width1, spec_.width1, 3, 3};
    }

    void add_layer(const std::string& side, std::size_t i, std::vector<std::size_t> wshape,
                   Rng& rng) {
        const std::string p = side + ".l" + std::to_string(i) + ".";
        const bool transposed = side == "dec" && (i == 2 || i == spec_.layers);
        const std::size_t k2 = wshape[2] * wshape[3];
        const std::size_t fan_in = (transposed ? wshape[0] : wshape[1]) * k2;
        const std::size_t fan_out = (transposed ? wshape[1] : wshape[0]) * k2;
        const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        Tensor w(wshape);
        for (std::size_t j = 0; j < w.size(); ++j) w[j] = rng.uniform(-a, a);
        params_.add(p + "w", std::move(w));
        params_.add(p + "b", Tensor::zeros({transposed ? wshape[1] : wshape[0]}));
        if (i != spec_.layers) params_.add(p + "slope", Tensor::scalar(0.25));
    }

    CodecSpec spec_;
    ParamStore params_;
};

}  // namespace ddjscc
