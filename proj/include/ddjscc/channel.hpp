#pragma once

#include <cmath>
#include <complex>
#include <vector>

#include "ddjscc/autodiff.hpp"
#include "ddjscc/error.hpp"
#include "ddjscc/rng.hpp"
#include "ddjscc/tensor.hpp"

namespace ddjscc {

enum class ChannelMode { Awgn, Rayleigh };

// One transmission's channel state: complex gain h, total per-symbol noise
// variance sigma2 (split evenly between real and imaginary parts), and the
// power budget p_max. sigma2 == 0 is the noiseless case.
struct ChannelRealization {
    std::complex<double> h{1.0, 0.0};
    double sigma2 = 0.0;
    double p_max = 1.0;

    double snr() const { return std::norm(h) * p_max / sigma2; }
};

// sigma^2 = |h|^2 * p_max / 10^(snr_db/10)
inline double snr_db_to_sigma2(double snr_db, std::complex<double> h, double p_max) {
    if (p_max <= 0.0) throw UsageError("snr_db_to_sigma2: p_max must be > 0");
    return std::norm(h) * p_max / std::pow(10.0, snr_db / 10.0);
}

inline ChannelRealization make_realization(double snr_db, std::complex<double> h, double p_max) {
    return ChannelRealization{h, snr_db_to_sigma2(snr_db, h, p_max), p_max};
}

// Rayleigh flat fading: h ~ CN(0,1), so E[|h|^2] = 1. Awgn mode is the
// deterministic h = 1 special case.
inline std::complex<double> sample_fading(Rng& rng, ChannelMode mode) {
    if (mode == ChannelMode::Awgn) return {1.0, 0.0};
    const double s = std::sqrt(0.5);
    return {rng.normal(0.0, s), rng.normal(0.0, s)};
}

// i.i.d. circularly-symmetric complex Gaussian noise for a [B, 2K] code
// block; per-component complex variance sigma2[row].
inline Tensor draw_noise(Rng& rng, std::size_t rows, std::size_t two_k,
                         const std::vector<double>& sigma2) {
    if (sigma2.size() != rows) throw DimensionError("draw_noise: one sigma2 per row required");
    Tensor n({rows, two_k});
    for (std::size_t r = 0; r < rows; ++r) {
        const double s = std::sqrt(sigma2[r] / 2.0);
        for (std::size_t c = 0; c < two_k; ++c) n.at2(r, c) = s == 0.0 ? 0.0 : rng.normal(0.0, s);
    }
    return n;
}

namespace detail {
inline bool all_unit(const std::vector<ChannelRealization>& chans) {
    for (const auto& ch : chans) {
        if (ch.h != std::complex<double>(1.0, 0.0)) return false;
    }
    return true;
}
}  // namespace detail

// z~ = h*s + n with the noise frozen as a tape constant, so the pass stays
// differentiable w.r.t. s with d(z~)/d(s) = h.
inline VarId transmit(Tape& tape, VarId s, const std::vector<ChannelRealization>& chans,
                      const Tensor& noise) {
    const Tensor& sv = tape.value(s);
    if (sv.ndim() != 2) throw DimensionError("transmit: expects [B, 2K]");
    if (chans.size() != sv.dim(0)) throw DimensionError("transmit: one realization per row");
    VarId faded = s;
    if (!detail::all_unit(chans)) {
        std::vector<std::complex<double>> h;
        h.reserve(chans.size());
        for (const auto& ch : chans) h.push_back(ch.h);
        faded = tape.complex_scale(s, std::move(h));
    }
    return tape.add_const(faded, noise);
}

// Convenience overload drawing fresh noise per mini-batch element.
inline VarId transmit(Tape& tape, VarId s, const std::vector<ChannelRealization>& chans,
                      Rng& rng) {
    const Tensor& sv = tape.value(s);
    std::vector<double> sigma2;
    sigma2.reserve(chans.size());
    for (const auto& ch : chans) sigma2.push_back(ch.sigma2);
    return transmit(tape, s, chans, draw_noise(rng, sv.dim(0), sv.dim(1), sigma2));
}

// Receiver-side perfect-CSI equalization z~/h; identity in AWGN mode.
inline VarId equalize(Tape& tape, VarId z, const std::vector<ChannelRealization>& chans) {
    if (detail::all_unit(chans)) return z;
    std::vector<std::complex<double>> inv;
    inv.reserve(chans.size());
    for (const auto& ch : chans) {
        const double n2 = std::norm(ch.h);
        if (n2 == 0.0) throw DegenerateInputError("equalize: zero channel gain");
        inv.push_back(std::conj(ch.h) / n2);
    }
    return tape.complex_scale(z, std::move(inv));
}

}  // namespace ddjscc
