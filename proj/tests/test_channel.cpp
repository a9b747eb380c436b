#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <complex>

#include "ddjscc/channel.hpp"
#include "ddjscc/codec.hpp"

using namespace ddjscc;

namespace {

Tensor random_code(std::size_t rows, std::size_t two_k, Rng& rng) {
    Tensor t({rows, two_k});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-1.0, 1.0);
    return t;
}

double row_power(const Tensor& t, std::size_t r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < t.dim(1); ++c) acc += t.at2(r, c) * t.at2(r, c);
    return acc / (static_cast<double>(t.dim(1)) / 2.0);  // (1/K)||s||^2
}

}  // namespace

TEST_CASE("power_normalize: ||z||^2 = 2K with p_max = 1 scales by 1/sqrt(2)") {
    const std::size_t two_k = 8;
    Tensor z = Tensor::full({1, two_k}, 1.0);  // ||z||^2 = 8 = 2K
    Tape t;
    VarId s = t.power_normalize(t.leaf(z), 1.0);
    for (std::size_t c = 0; c < two_k; ++c) {
        CHECK(t.value(s).at2(0, c) == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-15));
    }
}

TEST_CASE("power_normalize: a code already at p_max is a fixed point") {
    Rng rng(3);
    Tensor z = random_code(1, 10, rng);
    // rescale so (1/K)||z||^2 == 1 exactly, then normalize again
    const double p = row_power(z, 0);
    for (std::size_t i = 0; i < z.size(); ++i) z[i] /= std::sqrt(p);
    Tape t;
    VarId s = t.power_normalize(t.leaf(z), 1.0);
    CHECK(max_abs_diff(t.value(s), z) <= 1e-12);
}

TEST_CASE("power_normalize: exact power law on random codes") {
    Rng rng(4);
    for (int rep = 0; rep < 50; ++rep) {
        Tensor z = random_code(3, 256, rng);  // K = 128
        Tape t;
        VarId s = t.power_normalize(t.leaf(z), 1.0);
        for (std::size_t r = 0; r < 3; ++r) {
            CHECK(std::abs(row_power(t.value(s), r) - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("power_normalize: all-zero code is degenerate") {
    Tape t;
    VarId z = t.leaf(Tensor::zeros({1, 6}));
    CHECK_THROWS_AS(t.power_normalize(z, 1.0), DegenerateInputError);
}

TEST_CASE("snr_db_to_sigma2 matches the dB definition") {
    CHECK(snr_db_to_sigma2(0.0, {1.0, 0.0}, 1.0) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(snr_db_to_sigma2(20.0, {1.0, 0.0}, 1.0) == doctest::Approx(0.01).epsilon(1e-15));
    CHECK(snr_db_to_sigma2(18.0, {1.0, 0.0}, 1.0) ==
          doctest::Approx(std::pow(10.0, -1.8)).epsilon(1e-15));
    // gain and power scale sigma2
    CHECK(snr_db_to_sigma2(0.0, {2.0, 0.0}, 1.0) == doctest::Approx(4.0).epsilon(1e-15));
    CHECK_THROWS_AS(snr_db_to_sigma2(0.0, {1.0, 0.0}, 0.0), UsageError);
}

TEST_CASE("snr consistency: make_realization reproduces the requested gamma") {
    Rng rng(5);
    for (int rep = 0; rep < 100; ++rep) {
        const double snr_db = rng.uniform(-10.0, 30.0);
        const std::complex<double> h{rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
        if (std::norm(h) == 0.0) continue;
        auto ch = make_realization(snr_db, h, 2.0);
        const double gamma = std::pow(10.0, snr_db / 10.0);
        CHECK(std::abs(ch.snr() - gamma) / gamma <= 1e-12);
    }
}

TEST_CASE("transmit: noiseless unit channel is the identity") {
    Rng rng(6);
    Tensor s = random_code(2, 10, rng);
    std::vector<ChannelRealization> chans(2, ChannelRealization{{1.0, 0.0}, 0.0, 1.0});
    Tape t;
    VarId out = transmit(t, t.leaf(s), chans, rng);
    CHECK(max_abs_diff(t.value(out), s) == 0.0);
}

TEST_CASE("transmit: h=2 with zero noise doubles the signal") {
    Rng rng(7);
    Tensor s = random_code(1, 8, rng);
    std::vector<ChannelRealization> chans(1, ChannelRealization{{2.0, 0.0}, 0.0, 1.0});
    Tape t;
    VarId out = transmit(t, t.leaf(s), chans, rng);
    for (std::size_t i = 0; i < s.size(); ++i) {
        CHECK(t.value(out)[i] == doctest::Approx(2.0 * s[i]).epsilon(1e-15));
    }
}

TEST_CASE("transmit: empirical noise power matches sigma2 (Monte Carlo)") {
    Rng rng(8);
    const std::size_t n_sym = 100000;  // 1e5 complex symbols
    Tensor s = Tensor::zeros({1, 2 * n_sym});
    std::vector<ChannelRealization> chans(1, ChannelRealization{{1.0, 0.0}, 0.01, 1.0});
    Tape t;
    VarId out = transmit(t, t.leaf(s), chans, rng);
    double acc = 0.0;
    for (std::size_t k = 0; k < n_sym; ++k) {
        const double re = t.value(out).at2(0, 2 * k), im = t.value(out).at2(0, 2 * k + 1);
        acc += re * re + im * im;
    }
    const double mean = acc / n_sym;
    CHECK(mean >= 0.0097);
    CHECK(mean <= 0.0103);
}

TEST_CASE("noise: real/imag parts uncorrelated and five-sigma consistent at several SNRs") {
    for (double snr_db : {0.0, 10.0, 20.0}) {
        Rng rng(9 + static_cast<std::uint64_t>(snr_db));
        const double sigma2 = snr_db_to_sigma2(snr_db, {1.0, 0.0}, 1.0);
        const std::size_t m = 100000;
        Tensor n = draw_noise(rng, 1, 2 * m, {sigma2});
        double power = 0.0, cross = 0.0;
        for (std::size_t k = 0; k < m; ++k) {
            const double re = n.at2(0, 2 * k), im = n.at2(0, 2 * k + 1);
            power += re * re + im * im;
            cross += re * im;
        }
        power /= m;
        cross /= m;
        // |n_k|^2 has mean sigma2 and stddev sigma2 -> SE = sigma2/sqrt(m)
        CHECK(std::abs(power - sigma2) <= 5.0 * sigma2 / std::sqrt(static_cast<double>(m)));
        // E[re*im] = 0 with stddev sigma2/2 per sample
        CHECK(std::abs(cross) <= 5.0 * (sigma2 / 2.0) / std::sqrt(static_cast<double>(m)));
    }
}

TEST_CASE("sample_fading: AWGN mode pins h = 1; Rayleigh is unit-power on average") {
    Rng rng(10);
    for (int i = 0; i < 16; ++i) {
        CHECK(sample_fading(rng, ChannelMode::Awgn) == std::complex<double>(1.0, 0.0));
    }
    Rng rr(11);
    double acc = 0.0;
    const int m = 100000;
    for (int i = 0; i < m; ++i) acc += std::norm(sample_fading(rr, ChannelMode::Rayleigh));
    CHECK(acc / m >= 0.99);
    CHECK(acc / m <= 1.01);

    Rng a(12), b(12);
    for (int i = 0; i < 64; ++i) {
        CHECK(sample_fading(a, ChannelMode::Rayleigh) == sample_fading(b, ChannelMode::Rayleigh));
    }
}

TEST_CASE("transmit is differentiable with d(zt)/d(s) = h (frozen noise)") {
    Rng rng(13);
    const std::complex<double> h{0.6, -0.8};
    std::vector<ChannelRealization> chans(1, ChannelRealization{h, 0.05, 1.0});
    Tensor noise = draw_noise(rng, 1, 4, {0.05});
    Tensor s = random_code(1, 4, rng);

    // analytic Jacobian block of the first symbol: [[a,-b],[b,a]]
    const double step = 1e-6;
    double jac[2][2];
    for (int in = 0; in < 2; ++in) {
        Tensor sp = s, sm = s;
        sp[in] += step;
        sm[in] -= step;
        Tape tp, tm;
        VarId op = transmit(tp, tp.leaf(sp), chans, noise);
        VarId om = transmit(tm, tm.leaf(sm), chans, noise);
        for (int outc = 0; outc < 2; ++outc) {
            jac[outc][in] = (tp.value(op)[outc] - tm.value(om)[outc]) / (2 * step);
        }
    }
    CHECK(jac[0][0] == doctest::Approx(h.real()).epsilon(1e-6));
    CHECK(jac[0][1] == doctest::Approx(-h.imag()).epsilon(1e-6));
    CHECK(jac[1][0] == doctest::Approx(h.imag()).epsilon(1e-6));
    CHECK(jac[1][1] == doctest::Approx(h.real()).epsilon(1e-6));
}

TEST_CASE("equalize inverts the channel gain under perfect CSI") {
    Rng rng(14);
    Tensor s = random_code(2, 6, rng);
    std::vector<ChannelRealization> chans = {{{0.3, 0.4}, 0.0, 1.0}, {{-1.2, 0.5}, 0.0, 1.0}};
    Tape t;
    VarId sent = t.leaf(s);
    VarId rec = equalize(t, transmit(t, sent, chans, rng), chans);
    CHECK(max_abs_diff(t.value(rec), s) <= 1e-12);
}
