#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ddjscc/autodiff.hpp"
#include "ddjscc/channel.hpp"
#include "ddjscc/codec.hpp"
#include "ddjscc/pipeline.hpp"
#include "ddjscc/rng.hpp"

namespace ddjscc {

// Central finite differences against the tape's analytic gradients.
// rel_err floors the denominator so near-zero gradients compare by an
// absolute criterion (|a-f| <= tol/100) instead of blowing up.
namespace gradcheck {

constexpr double kDefaultStep = 1e-4;
constexpr double kDefaultTol = 1e-4;

inline double rel_err(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-2});
    return std::abs(analytic - numeric) / denom;
}

struct Result {
    std::string name;
    double max_rel_err = 0.0;
    std::size_t checked = 0;
    bool pass = true;
};

struct Report {
    std::vector<Result> results;
    bool all_pass() const {
        for (const auto& r : results) {
            if (!r.pass) return false;
        }
        return true;
    }
};

// Checks d(loss)/d(inputs[i]) for every element of every input tensor.
// `build` must be a pure function of the given input values.
inline Result check_inputs(const std::string& name,
                           const std::function<VarId(Tape&, const std::vector<VarId>&)>& build,
                           std::vector<Tensor> inputs, double step = kDefaultStep,
                           double tol = kDefaultTol) {
    Result res;
    res.name = name;

    auto eval = [&](const std::vector<Tensor>& ins) {
        Tape t;
        std::vector<VarId> ids;
        ids.reserve(ins.size());
        for (const Tensor& in : ins) ids.push_back(t.leaf(in, false));
        return t.value(build(t, ids))[0];
    };

    // analytic gradients
    std::vector<Tensor> analytic;
    {
        Tape t;
        std::vector<VarId> ids;
        ids.reserve(inputs.size());
        for (const Tensor& in : inputs) ids.push_back(t.leaf(in, true));
        VarId loss = build(t, ids);
        t.backward(loss);
        for (VarId id : ids) analytic.push_back(t.grad(id));
    }

    for (std::size_t i = 0; i < inputs.size(); ++i) {
        for (std::size_t j = 0; j < inputs[i].size(); ++j) {
            const double orig = inputs[i][j];
            inputs[i][j] = orig + step;
            const double lp = eval(inputs);
            inputs[i][j] = orig - step;
            const double lm = eval(inputs);
            inputs[i][j] = orig;
            const double fd = (lp - lm) / (2.0 * step);
            res.max_rel_err = std::max(res.max_rel_err, rel_err(analytic[i][j], fd));
            ++res.checked;
        }
    }
    res.pass = res.max_rel_err <= tol;
    return res;
}

// Checks d(loss)/d(param) for every element of every parameter in the store.
// `build` must be a pure function of the store's current values.
inline Result check_params(const std::string& name, const std::function<VarId(Tape&)>& build,
                           ParamStore& ps, double step = kDefaultStep,
                           double tol = kDefaultTol) {
    Result res;
    res.name = name;

    auto eval = [&]() {
        Tape t;
        return t.value(build(t))[0];
    };

    ps.zero_grads();
    std::vector<Tensor> analytic;
    {
        Tape t;
        VarId loss = build(t);
        t.backward(loss);
        for (std::size_t i = 0; i < ps.size(); ++i) {
            analytic.push_back(ps.entry(static_cast<int>(i)).grad);
        }
        ps.zero_grads();
    }

    for (std::size_t i = 0; i < ps.size(); ++i) {
        Tensor& v = ps.entry(static_cast<int>(i)).value;
        for (std::size_t j = 0; j < v.size(); ++j) {
            const double orig = v[j];
            v[j] = orig + step;
            const double lp = eval();
            v[j] = orig - step;
            const double lm = eval();
            v[j] = orig;
            const double fd = (lp - lm) / (2.0 * step);
            res.max_rel_err = std::max(res.max_rel_err, rel_err(analytic[i][j], fd));
            ++res.checked;
        }
    }
    res.pass = res.max_rel_err <= tol;
    return res;
}

namespace detail {

inline Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double lo = -1.0,
                            double hi = 1.0) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

}  // namespace detail

// Per-operation checks at three random shapes each.
inline std::vector<Result> run_op_checks(std::uint64_t seed, const std::string& only = "") {
    Rng rng(derive_seed(seed, 0x9c));
    std::vector<Result> out;
    auto want = [&](const std::string& op) { return only.empty() || only == op; };
    auto sum_of = [](Tape& t, VarId v) { return t.sum(v); };

    if (want("conv2d")) {
        const struct {
            std::size_t b, c, h, w, f, k, s, p;
        } cases[3] = {{2, 3, 6, 6, 4, 3, 1, 1}, {1, 2, 8, 7, 3, 4, 2, 1}, {2, 1, 5, 5, 2, 1, 1, 0}};
        for (int ci = 0; ci < 3; ++ci) {
            const auto& cs = cases[ci];
            out.push_back(check_inputs(
                "conv2d/" + std::to_string(ci),
                [&cs, &sum_of](Tape& t, const std::vector<VarId>& in) {
                    return sum_of(t, t.conv2d(in[0], in[1], in[2], cs.s, cs.p));
                },
                {detail::random_tensor({cs.b, cs.c, cs.h, cs.w}, rng),
                 detail::random_tensor({cs.f, cs.c, cs.k, cs.k}, rng),
                 detail::random_tensor({cs.f}, rng)}));
        }
    }
    if (want("conv2d_transpose")) {
        const struct {
            std::size_t b, f, h, w, c, k, s, p;
        } cases[3] = {{2, 3, 4, 4, 2, 3, 1, 1}, {1, 2, 3, 4, 3, 4, 2, 1}, {2, 2, 3, 3, 1, 3, 2, 0}};
        for (int ci = 0; ci < 3; ++ci) {
            const auto& cs = cases[ci];
            out.push_back(check_inputs(
                "conv2d_transpose/" + std::to_string(ci),
                [&cs, &sum_of](Tape& t, const std::vector<VarId>& in) {
                    return sum_of(t, t.conv2d_transpose(in[0], in[1], in[2], cs.s, cs.p));
                },
                {detail::random_tensor({cs.b, cs.f, cs.h, cs.w}, rng),
                 detail::random_tensor({cs.f, cs.c, cs.k, cs.k}, rng),
                 detail::random_tensor({cs.c}, rng)}));
        }
    }
    if (want("dense")) {
        const std::size_t dims[3][3] = {{2, 3, 4}, {1, 5, 2}, {3, 4, 4}};
        for (int ci = 0; ci < 3; ++ci) {
            out.push_back(check_inputs(
                "dense/" + std::to_string(ci),
                [&sum_of](Tape& t, const std::vector<VarId>& in) {
                    return sum_of(t, t.dense(in[0], in[1], in[2]));
                },
                {detail::random_tensor({dims[ci][0], dims[ci][1]}, rng),
                 detail::random_tensor({dims[ci][1], dims[ci][2]}, rng),
                 detail::random_tensor({dims[ci][2]}, rng)}));
        }
    }
    if (want("prelu")) {
        for (int ci = 0; ci < 3; ++ci) {
            out.push_back(check_inputs(
                "prelu/" + std::to_string(ci),
                [&sum_of](Tape& t, const std::vector<VarId>& in) {
                    // square first so the loss is smooth where inputs cross 0
                    return sum_of(t, t.prelu(in[0], in[1]));
                },
                {detail::random_tensor({2, static_cast<std::size_t>(3 + ci), 4, 4}, rng),
                 Tensor::scalar(0.25 + 0.2 * ci)}));
        }
    }
    if (want("mse")) {
        for (int ci = 0; ci < 3; ++ci) {
            out.push_back(check_inputs(
                "mse/" + std::to_string(ci),
                [](Tape& t, const std::vector<VarId>& in) { return t.mse(in[0], in[1]); },
                {detail::random_tensor({2, static_cast<std::size_t>(5 + ci)}, rng),
                 detail::random_tensor({2, static_cast<std::size_t>(5 + ci)}, rng)}));
        }
    }
    if (want("power_normalize")) {
        for (int ci = 0; ci < 3; ++ci) {
            out.push_back(check_inputs(
                "power_normalize/" + std::to_string(ci),
                [ci](Tape& t, const std::vector<VarId>& in) {
                    return t.mse(t.power_normalize(in[0], 0.5 + 0.5 * ci), in[1]);
                },
                {detail::random_tensor({2, static_cast<std::size_t>(6 + 2 * ci)}, rng),
                 detail::random_tensor({2, static_cast<std::size_t>(6 + 2 * ci)}, rng)}));
        }
    }
    if (want("transmit")) {
        for (int ci = 0; ci < 3; ++ci) {
            const std::size_t rows = 2, two_k = 6 + 2 * static_cast<std::size_t>(ci);
            const std::complex<double> h =
                ci == 0 ? std::complex<double>(1.0, 0.0) : std::complex<double>(0.6, -0.8 + ci * 0.3);
            std::vector<ChannelRealization> chans(rows, ChannelRealization{h, 0.05, 1.0});
            Tensor noise = detail::random_tensor({rows, two_k}, rng, -0.1, 0.1);
            out.push_back(check_inputs(
                "transmit/" + std::to_string(ci),
                [chans, noise](Tape& t, const std::vector<VarId>& in) {
                    return t.mse(transmit(t, in[0], chans, noise), in[1]);
                },
                {detail::random_tensor({rows, two_k}, rng),
                 detail::random_tensor({rows, two_k}, rng)}));
        }
    }
    if (want("concat_channels")) {
        for (int ci = 0; ci < 3; ++ci) {
            out.push_back(check_inputs(
                "concat_channels/" + std::to_string(ci),
                [&sum_of](Tape& t, const std::vector<VarId>& in) {
                    return t.mse(t.concat_channels(in[0], in[1]), in[2]);
                },
                {detail::random_tensor({2, static_cast<std::size_t>(1 + ci), 3, 3}, rng),
                 detail::random_tensor({2, 2, 3, 3}, rng),
                 detail::random_tensor({2, static_cast<std::size_t>(3 + ci), 3, 3}, rng)}));
        }
    }
    if (want("mask")) {
        for (int ci = 0; ci < 3; ++ci) {
            const std::size_t m = 8 + 2 * static_cast<std::size_t>(ci);
            const std::size_t keep = 4 + 2 * static_cast<std::size_t>(ci);
            out.push_back(check_inputs(
                "mask/" + std::to_string(ci),
                [keep, m](Tape& t, const std::vector<VarId>& in) {
                    return t.mse(t.pad_cols(t.slice_cols(in[0], keep), m), in[1]);
                },
                {detail::random_tensor({2, m}, rng), detail::random_tensor({2, m}, rng)}));
        }
    }
    return out;
}

// End-to-end encode -> normalize -> transmit (frozen noise) -> decode -> MSE
// check over every codec parameter, at a randomly drawn configuration.
inline Result run_pipeline_check(std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0xe2e));
    CodecSpec spec;
    spec.layers = 5;
    spec.img_channels = 2;
    spec.img_h = 8;
    spec.img_w = 8;
    spec.width1 = 2;
    spec.width2 = 3;
    spec.r_max = 0.5;
    DynamicCodec codec(spec, rng.bits());

    const std::size_t n = static_cast<std::size_t>(rng.uniform_int(2, static_cast<std::int64_t>(spec.layers) - 1));
    const LayerConfig cfg = config_from_n(n, spec.layers);
    const Conditioning cond{rng.uniform(0.0, 27.0), rng.uniform(0.15, 0.45)};
    const std::size_t batch = 2;
    Tensor x = detail::random_tensor({batch, spec.img_channels, spec.img_h, spec.img_w}, rng, 0.0,
                                     1.0);
    std::vector<ChannelRealization> chans(
        batch, make_realization(cond.snr_db, {0.8, 0.6}, 1.0));
    const std::size_t two_k = 2 * symbols_for(cond.cr, spec.n_pixels());
    std::vector<double> sig(batch, chans[0].sigma2);
    Tensor noise = draw_noise(rng, batch, two_k, sig);

    return check_params("pipeline/" + cfg.name(),
                        [&](Tape& t) {
                            VarId xv = t.leaf(x, false);
                            auto run = run_pipeline(t, codec, xv, cond, cfg, chans, noise);
                            return t.mse(xv, run.recon);
                        },
                        codec.params());
}

inline Report run_all(std::uint64_t seed, const std::string& only = "") {
    Report rep;
    rep.results = run_op_checks(seed, only);
    if (only.empty() || only == "pipeline") rep.results.push_back(run_pipeline_check(seed));
    return rep;
}

}  // namespace gradcheck
}  // namespace ddjscc
