#pragma once

#include <complex>
#include <cstddef>
#include <functional>
#include <utility>
#include <vector>

#include "ddjscc/error.hpp"
#include "ddjscc/optim.hpp"
#include "ddjscc/tensor.hpp"

namespace ddjscc {

namespace detail {

// Row-major matmul kernels. Loop orders are chosen so the innermost loop is
// unit-stride in both operands, which gcc vectorizes well at -O3.

// In every call site M stays small (channel counts) while K*N is large, so
// each kernel streams its big operand exactly once and keeps the small ones
// cache-hot.

// C[MxN] += A[MxK] * B[KxN], B streamed once
inline void matmul_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                      std::size_t n) {
    for (std::size_t t = 0; t < k; ++t) {
        const double* bt = b + t * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = a[i * k + t];
            double* ci = c + i * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bt[j];
        }
    }
}

// C[MxN] += A[MxK] * B[NxK]^T, B streamed once. 4-wide column blocks reuse
// each A row across four dots; split accumulators keep the reductions
// vectorizable.
inline void matmul_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                      std::size_t n) {
    const std::size_t n4 = n - n % 4;
    const std::size_t k2 = k - k % 2;
    for (std::size_t j = 0; j < n4; j += 4) {
        const double* b0 = b + j * k;
        const double* b1 = b0 + k;
        const double* b2 = b1 + k;
        const double* b3 = b2 + k;
        for (std::size_t i = 0; i < m; ++i) {
            const double* ai = a + i * k;
            double s0a = 0.0, s0b = 0.0, s1a = 0.0, s1b = 0.0;
            double s2a = 0.0, s2b = 0.0, s3a = 0.0, s3b = 0.0;
            for (std::size_t t = 0; t < k2; t += 2) {
                const double x0 = ai[t], x1 = ai[t + 1];
                s0a += x0 * b0[t];
                s0b += x1 * b0[t + 1];
                s1a += x0 * b1[t];
                s1b += x1 * b1[t + 1];
                s2a += x0 * b2[t];
                s2b += x1 * b2[t + 1];
                s3a += x0 * b3[t];
                s3b += x1 * b3[t + 1];
            }
            for (std::size_t t = k2; t < k; ++t) {
                const double x0 = ai[t];
                s0a += x0 * b0[t];
                s1a += x0 * b1[t];
                s2a += x0 * b2[t];
                s3a += x0 * b3[t];
            }
            double* ci = c + i * n + j;
            ci[0] += s0a + s0b;
            ci[1] += s1a + s1b;
            ci[2] += s2a + s2b;
            ci[3] += s3a + s3b;
        }
    }
    for (std::size_t j = n4; j < n; ++j) {
        const double* bj = b + j * k;
        for (std::size_t i = 0; i < m; ++i) {
            const double* ai = a + i * k;
            double s0 = 0.0, s1 = 0.0;
            for (std::size_t t = 0; t < k2; t += 2) {
                s0 += ai[t] * bj[t];
                s1 += ai[t + 1] * bj[t + 1];
            }
            for (std::size_t t = k2; t < k; ++t) s0 += ai[t] * bj[t];
            c[i * n + j] += s0 + s1;
        }
    }
}

// C[MxN] += A[KxM]^T * B[KxN], C streamed once (K small everywhere)
inline void matmul_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                      std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        for (std::size_t t = 0; t < k; ++t) {
            const double av = a[t * m + i];
            const double* bt = b + t * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bt[j];
        }
    }
}

// Reusable per-thread work buffers for the conv kernels; slots are private to
// one forward or backward call.
inline std::vector<double>& scratch(int slot) {
    thread_local std::vector<double> bufs[4];
    return bufs[slot];
}

struct ConvGeometry {
    std::size_t batch, in_ch, in_h, in_w;
    std::size_t out_ch, ksize;
    std::size_t stride, pad;
    std::size_t out_h, out_w;
};

inline ConvGeometry conv_geometry(const Tensor& x, const Tensor& w, std::size_t stride,
                                  std::size_t pad) {
    if (x.ndim() != 4) throw DimensionError("conv2d: input must be 4-d, got " + x.shape_str());
    if (w.ndim() != 4) throw DimensionError("conv2d: kernel must be 4-d, got " + w.shape_str());
    if (w.dim(2) != w.dim(3)) throw DimensionError("conv2d: kernel must be square");
    if (x.dim(1) != w.dim(1)) {
        throw DimensionError("conv2d: input channels " + std::to_string(x.dim(1)) +
                             " != kernel channels " + std::to_string(w.dim(1)));
    }
    if (stride < 1) throw UsageError("conv2d: stride must be >= 1");
    ConvGeometry g;
    g.batch = x.dim(0);
    g.in_ch = x.dim(1);
    g.in_h = x.dim(2);
    g.in_w = x.dim(3);
    g.out_ch = w.dim(0);
    g.ksize = w.dim(2);
    g.stride = stride;
    g.pad = pad;
    if (g.in_h + 2 * pad < g.ksize || g.in_w + 2 * pad < g.ksize) {
        throw UsageError("conv2d: kernel larger than padded input");
    }
    g.out_h = (g.in_h + 2 * pad - g.ksize) / stride + 1;
    g.out_w = (g.in_w + 2 * pad - g.ksize) / stride + 1;
    return g;
}

// Valid output range [lo, hi) for which tap offset `koff` stays inside
// [0, in_dim) given out = idx*stride + koff - pad.
inline void tap_range(std::size_t out_dim, std::size_t in_dim, std::size_t stride,
                      std::size_t koff, std::size_t pad, std::size_t& lo, std::size_t& hi) {
    const long off = static_cast<long>(koff) - static_cast<long>(pad);
    const long s = static_cast<long>(stride);
    long l = 0;
    if (off < 0) l = (-off + s - 1) / s;
    long h = (static_cast<long>(in_dim) - 1 - off) / s + 1;
    if (h > static_cast<long>(out_dim)) h = static_cast<long>(out_dim);
    if (h < l) h = l;
    lo = static_cast<std::size_t>(l);
    hi = static_cast<std::size_t>(h);
}

// cols[(C*k*k) x (B*out_h*out_w)], zero-padded out-of-bounds taps.
inline void im2col(const Tensor& x, const ConvGeometry& g, std::vector<double>& cols) {
    const std::size_t hw = g.out_h * g.out_w;
    const std::size_t ncols = g.batch * hw;
    cols.assign(g.in_ch * g.ksize * g.ksize * ncols, 0.0);
    const double* in = x.data();
    const std::size_t in_hw = g.in_h * g.in_w;
    for (std::size_t c = 0; c < g.in_ch; ++c) {
        for (std::size_t ki = 0; ki < g.ksize; ++ki) {
            std::size_t y0, y1;
            tap_range(g.out_h, g.in_h, g.stride, ki, g.pad, y0, y1);
            for (std::size_t kj = 0; kj < g.ksize; ++kj) {
                std::size_t x0, x1;
                tap_range(g.out_w, g.in_w, g.stride, kj, g.pad, x0, x1);
                const std::size_t row = (c * g.ksize + ki) * g.ksize + kj;
                double* dst_row = cols.data() + row * ncols;
                const long xoff = static_cast<long>(kj) - static_cast<long>(g.pad);
                for (std::size_t b = 0; b < g.batch; ++b) {
                    const double* src = in + (b * g.in_ch + c) * in_hw;
                    double* dst = dst_row + b * hw;
                    for (std::size_t y = y0; y < y1; ++y) {
                        const std::size_t iy = y * g.stride + ki - g.pad;
                        const double* src_row = src + iy * g.in_w + xoff;
                        double* d = dst + y * g.out_w;
                        for (std::size_t xo = x0; xo < x1; ++xo) d[xo] = src_row[xo * g.stride];
                    }
                }
            }
        }
    }
}

// scatter-add inverse of im2col
inline void col2im_add(const std::vector<double>& cols, const ConvGeometry& g, Tensor& x) {
    const std::size_t hw = g.out_h * g.out_w;
    const std::size_t ncols = g.batch * hw;
    double* out = x.data();
    const std::size_t in_hw = g.in_h * g.in_w;
    for (std::size_t c = 0; c < g.in_ch; ++c) {
        for (std::size_t ki = 0; ki < g.ksize; ++ki) {
            std::size_t y0, y1;
            tap_range(g.out_h, g.in_h, g.stride, ki, g.pad, y0, y1);
            for (std::size_t kj = 0; kj < g.ksize; ++kj) {
                std::size_t x0, x1;
                tap_range(g.out_w, g.in_w, g.stride, kj, g.pad, x0, x1);
                const std::size_t row = (c * g.ksize + ki) * g.ksize + kj;
                const double* src_row = cols.data() + row * ncols;
                const long xoff = static_cast<long>(kj) - static_cast<long>(g.pad);
                for (std::size_t b = 0; b < g.batch; ++b) {
                    double* dst = out + (b * g.in_ch + c) * in_hw;
                    const double* src = src_row + b * hw;
                    for (std::size_t y = y0; y < y1; ++y) {
                        const std::size_t iy = y * g.stride + ki - g.pad;
                        double* dst_row = dst + iy * g.in_w + xoff;
                        const double* s = src + y * g.out_w;
                        for (std::size_t xo = x0; xo < x1; ++xo) dst_row[xo * g.stride] += s[xo];
                    }
                }
            }
        }
    }
}

// [B,F,H,W] -> mat[F x (B*H*W)] and back; the matmul-friendly layout.
inline void gather_fmajor(const Tensor& t, std::vector<double>& mat) {
    const std::size_t b_n = t.dim(0), f_n = t.dim(1), hw = t.dim(2) * t.dim(3);
    mat.resize(f_n * b_n * hw);
    const double* src = t.data();
    for (std::size_t b = 0; b < b_n; ++b) {
        for (std::size_t f = 0; f < f_n; ++f) {
            const double* s = src + (b * f_n + f) * hw;
            double* d = mat.data() + f * (b_n * hw) + b * hw;
            for (std::size_t i = 0; i < hw; ++i) d[i] = s[i];
        }
    }
}

inline void scatter_fmajor(const std::vector<double>& mat, Tensor& t) {
    const std::size_t b_n = t.dim(0), f_n = t.dim(1), hw = t.dim(2) * t.dim(3);
    double* dst = t.data();
    for (std::size_t b = 0; b < b_n; ++b) {
        for (std::size_t f = 0; f < f_n; ++f) {
            const double* s = mat.data() + f * (b_n * hw) + b * hw;
            double* d = dst + (b * f_n + f) * hw;
            for (std::size_t i = 0; i < hw; ++i) d[i] = s[i];
        }
    }
}

}  // namespace detail

// Tensor-level reverse-mode tape. Every op records its output as a node
// holding the forward value plus a closure that pushes gradients to its
// parents; nodes are appended in execution order, so reverse node order is a
// valid topological order for the backward sweep. A tape is single-threaded;
// independent tapes may run concurrently (they only read shared ParamStore
// values, never mutate them during forward passes).
class Tape {
  public:
    using VarId = int;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::size_t size() const { return nodes_.size(); }

    VarId leaf(Tensor v, bool needs_grad = false) {
        return push(std::move(v), needs_grad, {}, nullptr);
    }

    // Places a parameter on the tape; after backward() its gradient is
    // accumulated back into the store.
    VarId param(ParamStore& store, const std::string& name) {
        const int pi = store.index_of(name);
        VarId id = push(store.entry(pi).value, true, {}, nullptr);
        nodes_[id].store = &store;
        nodes_[id].param_index = pi;
        return id;
    }

    const Tensor& value(VarId id) const { return nodes_.at(id).value; }
    const Tensor& grad(VarId id) const { return nodes_.at(id).grad; }
    bool needs_grad(VarId id) const { return nodes_.at(id).needs_grad; }

    // out[B,F,H',W'] = cross-correlation(x[B,C,H,W], w[F,C,k,k]) + bias[F]
    VarId conv2d(VarId x, VarId w, VarId bias, std::size_t stride, std::size_t pad) {
        const Tensor& xv = value(x);
        const Tensor& wv = value(w);
        const auto g = detail::conv_geometry(xv, wv, stride, pad);
        if (bias >= 0 && value(bias).size() != g.out_ch) {
            throw DimensionError("conv2d: bias length != out channels");
        }
        auto& cols = detail::scratch(0);
        detail::im2col(xv, g, cols);
        const std::size_t ncols = g.batch * g.out_h * g.out_w;
        const std::size_t kk = g.in_ch * g.ksize * g.ksize;
        auto& out_mat = detail::scratch(1);
        out_mat.assign(g.out_ch * ncols, 0.0);
        detail::matmul_nn(wv.data(), cols.data(), out_mat.data(), g.out_ch, kk, ncols);
        Tensor out({g.batch, g.out_ch, g.out_h, g.out_w});
        detail::scatter_fmajor(out_mat, out);
        if (bias >= 0) add_channel_bias(out, value(bias));

        std::vector<VarId> parents = bias >= 0 ? std::vector<VarId>{x, w, bias}
                                               : std::vector<VarId>{x, w};
        return push(std::move(out), any_needs_grad(parents), parents,
                    [x, w, bias, g](Tape& t, VarId self) {
                        const Tensor& gr = t.nodes_[self].grad;
                        const std::size_t ncols2 = g.batch * g.out_h * g.out_w;
                        const std::size_t kk2 = g.in_ch * g.ksize * g.ksize;
                        auto& gmat = detail::scratch(0);
                        detail::gather_fmajor(gr, gmat);
                        if (bias >= 0 && t.wants(bias)) {
                            Tensor& db = t.nodes_[bias].grad;
                            for (std::size_t f = 0; f < g.out_ch; ++f) {
                                const double* row = gmat.data() + f * ncols2;
                                double acc = 0.0;
                                for (std::size_t i = 0; i < ncols2; ++i) acc += row[i];
                                db[f] += acc;
                            }
                        }
                        if (t.wants(w)) {
                            auto& cols2 = detail::scratch(1);
                            detail::im2col(t.value(x), g, cols2);
                            detail::matmul_nt(gmat.data(), cols2.data(), t.nodes_[w].grad.data(),
                                              g.out_ch, ncols2, kk2);
                        }
                        if (t.wants(x)) {
                            auto& dcols = detail::scratch(2);
                            dcols.assign(kk2 * ncols2, 0.0);
                            detail::matmul_tn(t.value(w).data(), gmat.data(), dcols.data(), kk2,
                                              g.out_ch, ncols2);
                            detail::col2im_add(dcols, g, t.nodes_[x].grad);
                        }
                    });
    }

    // Transposed convolution with the same [F,C,k,k] kernel layout as conv2d,
    // so conv2d_transpose(g, w) is exactly the input-gradient of conv2d(x, w).
    VarId conv2d_transpose(VarId x, VarId w, VarId bias, std::size_t stride, std::size_t pad) {
        const Tensor& xv = value(x);
        const Tensor& wv = value(w);
        if (xv.ndim() != 4) throw DimensionError("conv2d_transpose: input must be 4-d");
        if (wv.ndim() != 4) throw DimensionError("conv2d_transpose: kernel must be 4-d");
        if (xv.dim(1) != wv.dim(0)) {
            throw DimensionError("conv2d_transpose: input channels " + std::to_string(xv.dim(1)) +
                                 " != kernel filters " + std::to_string(wv.dim(0)));
        }
        if (stride < 1) throw UsageError("conv2d_transpose: stride must be >= 1");
        const std::size_t k = wv.dim(2);
        const std::size_t out_h = (xv.dim(2) - 1) * stride + k - 2 * pad;
        const std::size_t out_w = (xv.dim(3) - 1) * stride + k - 2 * pad;
        if ((xv.dim(2) - 1) * stride + k < 2 * pad + 1) {
            throw UsageError("conv2d_transpose: empty output");
        }
        // geometry of the forward conv whose input-gradient we are computing
        detail::ConvGeometry g;
        g.batch = xv.dim(0);
        g.in_ch = wv.dim(1);
        g.in_h = out_h;
        g.in_w = out_w;
        g.out_ch = wv.dim(0);
        g.ksize = k;
        g.stride = stride;
        g.pad = pad;
        g.out_h = xv.dim(2);
        g.out_w = xv.dim(3);

        const std::size_t ncols = g.batch * g.out_h * g.out_w;
        const std::size_t kk = g.in_ch * k * k;
        auto& xmat = detail::scratch(0);
        detail::gather_fmajor(xv, xmat);
        auto& cols = detail::scratch(1);
        cols.assign(kk * ncols, 0.0);
        detail::matmul_tn(wv.data(), xmat.data(), cols.data(), kk, g.out_ch, ncols);
        Tensor out({g.batch, g.in_ch, out_h, out_w});
        detail::col2im_add(cols, g, out);
        if (bias >= 0) {
            if (value(bias).size() != g.in_ch) {
                throw DimensionError("conv2d_transpose: bias length != out channels");
            }
            add_channel_bias(out, value(bias));
        }

        std::vector<VarId> parents = bias >= 0 ? std::vector<VarId>{x, w, bias}
                                               : std::vector<VarId>{x, w};
        return push(std::move(out), any_needs_grad(parents), parents,
                    [x, w, bias, g](Tape& t, VarId self) {
                        const Tensor& gr = t.nodes_[self].grad;  // [B, C, out_h, out_w]
                        const std::size_t ncols2 = g.batch * g.out_h * g.out_w;
                        const std::size_t kk2 = g.in_ch * g.ksize * g.ksize;
                        if (bias >= 0 && t.wants(bias)) {
                            Tensor& db = t.nodes_[bias].grad;
                            const std::size_t hw = g.in_h * g.in_w;
                            for (std::size_t b = 0; b < g.batch; ++b) {
                                for (std::size_t c = 0; c < g.in_ch; ++c) {
                                    const double* s = gr.data() + (b * g.in_ch + c) * hw;
                                    double acc = 0.0;
                                    for (std::size_t i = 0; i < hw; ++i) acc += s[i];
                                    db[c] += acc;
                                }
                            }
                        }
                        auto& cols_g = detail::scratch(0);
                        detail::im2col(gr, g, cols_g);
                        if (t.wants(x)) {
                            auto& dx_mat = detail::scratch(1);
                            dx_mat.assign(g.out_ch * ncols2, 0.0);
                            detail::matmul_nn(t.value(w).data(), cols_g.data(), dx_mat.data(),
                                              g.out_ch, kk2, ncols2);
                            Tensor dx({g.batch, g.out_ch, g.out_h, g.out_w});
                            detail::scatter_fmajor(dx_mat, dx);
                            Tensor& acc = t.nodes_[x].grad;
                            for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += dx[i];
                        }
                        if (t.wants(w)) {
                            auto& xmat2 = detail::scratch(1);
                            detail::gather_fmajor(t.value(x), xmat2);
                            detail::matmul_nt(xmat2.data(), cols_g.data(), t.nodes_[w].grad.data(),
                                              g.out_ch, ncols2, kk2);
                        }
                    });
    }

    // out[B,Dout] = x[B,Din] * w[Din,Dout] + bias[Dout]
    VarId dense(VarId x, VarId w, VarId bias) {
        const Tensor& xv = value(x);
        const Tensor& wv = value(w);
        if (xv.ndim() != 2 || wv.ndim() != 2) throw DimensionError("dense: expects 2-d operands");
        if (xv.dim(1) != wv.dim(0)) {
            throw DimensionError("dense: inner dims disagree, " + xv.shape_str() + " vs " +
                                 wv.shape_str());
        }
        const std::size_t b_n = xv.dim(0), din = xv.dim(1), dout = wv.dim(1);
        if (bias >= 0 && value(bias).size() != dout) {
            throw DimensionError("dense: bias length != output dim");
        }
        Tensor out({b_n, dout});
        detail::matmul_nn(xv.data(), wv.data(), out.data(), b_n, din, dout);
        if (bias >= 0) {
            const Tensor& bv = value(bias);
            for (std::size_t r = 0; r < b_n; ++r) {
                for (std::size_t c = 0; c < dout; ++c) out.at2(r, c) += bv[c];
            }
        }
        std::vector<VarId> parents = bias >= 0 ? std::vector<VarId>{x, w, bias}
                                               : std::vector<VarId>{x, w};
        return push(std::move(out), any_needs_grad(parents), parents,
                    [x, w, bias, b_n, din, dout](Tape& t, VarId self) {
                        const Tensor& gr = t.nodes_[self].grad;
                        if (bias >= 0 && t.wants(bias)) {
                            Tensor& db = t.nodes_[bias].grad;
                            for (std::size_t r = 0; r < b_n; ++r) {
                                for (std::size_t c = 0; c < dout; ++c) db[c] += gr.at2(r, c);
                            }
                        }
                        if (t.wants(w)) {
                            detail::matmul_tn(t.value(x).data(), gr.data(),
                                              t.nodes_[w].grad.data(), din, b_n, dout);
                        }
                        if (t.wants(x)) {
                            detail::matmul_nt(gr.data(), t.value(w).data(),
                                              t.nodes_[x].grad.data(), b_n, dout, din);
                        }
                    });
    }

    // x >= 0 ? x : slope*x, elementwise; slope is a scalar node.
    VarId prelu(VarId x, VarId slope) {
        const Tensor& xv = value(x);
        if (value(slope).size() != 1) throw DimensionError("prelu: slope must be scalar");
        const double a = value(slope)[0];
        Tensor out(xv.shape());
        for (std::size_t i = 0; i < xv.size(); ++i) {
            const double v = xv[i];
            out[i] = v >= 0.0 ? v : a * v;
        }
        return push(std::move(out), any_needs_grad({x, slope}), {x, slope},
                    [x, slope](Tape& t, VarId self) {
                        const Tensor& gr = t.nodes_[self].grad;
                        const Tensor& xv = t.value(x);
                        const double a = t.value(slope)[0];
                        if (t.wants(x)) {
                            Tensor& dx = t.nodes_[x].grad;
                            for (std::size_t i = 0; i < xv.size(); ++i) {
                                dx[i] += gr[i] * (xv[i] >= 0.0 ? 1.0 : a);
                            }
                        }
                        if (t.wants(slope)) {
                            double acc = 0.0;
                            for (std::size_t i = 0; i < xv.size(); ++i) {
                                if (xv[i] < 0.0) acc += gr[i] * xv[i];
                            }
                            t.nodes_[slope].grad[0] += acc;
                        }
                    });
    }

    VarId add(VarId a, VarId b) {
        const Tensor& av = value(a);
        const Tensor& bv = value(b);
        if (!av.same_shape(bv)) {
            throw DimensionError("add: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
        }
        Tensor out(av.shape());
        for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
        return push(std::move(out), any_needs_grad({a, b}), {a, b}, [a, b](Tape& t, VarId self) {
            const Tensor& gr = t.nodes_[self].grad;
            for (VarId p : {a, b}) {
                if (!t.wants(p)) continue;
                Tensor& d = t.nodes_[p].grad;
                for (std::size_t i = 0; i < gr.size(); ++i) d[i] += gr[i];
            }
        });
    }

    VarId scale(VarId x, double alpha) {
        const Tensor& xv = value(x);
        Tensor out(xv.shape());
        for (std::size_t i = 0; i < xv.size(); ++i) out[i] = alpha * xv[i];
        return push(std::move(out), any_needs_grad({x}), {x}, [x, alpha](Tape& t, VarId self) {
            if (!t.wants(x)) return;
            const Tensor& gr = t.nodes_[self].grad;
            Tensor& d = t.nodes_[x].grad;
            for (std::size_t i = 0; i < gr.size(); ++i) d[i] += alpha * gr[i];
        });
    }

    // [B,C1,H,W] ++ [B,C2,H,W] -> [B,C1+C2,H,W]
    VarId concat_channels(VarId a, VarId b) {
        const Tensor& av = value(a);
        const Tensor& bv = value(b);
        if (av.ndim() != 4 || bv.ndim() != 4 || av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(2) ||
            av.dim(3) != bv.dim(3)) {
            throw DimensionError("concat_channels: incompatible shapes " + av.shape_str() + ", " +
                                 bv.shape_str());
        }
        const std::size_t b_n = av.dim(0), c1 = av.dim(1), c2 = bv.dim(1),
                          hw = av.dim(2) * av.dim(3);
        Tensor out({b_n, c1 + c2, av.dim(2), av.dim(3)});
        for (std::size_t bi = 0; bi < b_n; ++bi) {
            double* dst = out.data() + bi * (c1 + c2) * hw;
            const double* s1 = av.data() + bi * c1 * hw;
            const double* s2 = bv.data() + bi * c2 * hw;
            for (std::size_t i = 0; i < c1 * hw; ++i) dst[i] = s1[i];
            for (std::size_t i = 0; i < c2 * hw; ++i) dst[c1 * hw + i] = s2[i];
        }
        return push(std::move(out), any_needs_grad({a, b}), {a, b},
                    [a, b, b_n, c1, c2, hw](Tape& t, VarId self) {
                        const Tensor& gr = t.nodes_[self].grad;
                        for (std::size_t bi = 0; bi < b_n; ++bi) {
                            const double* src = gr.data() + bi * (c1 + c2) * hw;
                            if (t.wants(a)) {
                                double* d = t.nodes_[a].grad.data() + bi * c1 * hw;
                                for (std::size_t i = 0; i < c1 * hw; ++i) d[i] += src[i];
                            }
                            if (t.wants(b)) {
                                double* d = t.nodes_[b].grad.data() + bi * c2 * hw;
                                for (std::size_t i = 0; i < c2 * hw; ++i) d[i] += src[c1 * hw + i];
                            }
                        }
                    });
    }

    // [B, ...] -> [B, prod(rest)]; shape-only, gradient passes through.
    VarId flatten_rows(VarId x) {
        const Tensor& xv = value(x);
        if (xv.ndim() < 2) throw DimensionError("flatten_rows: need at least 2 dims");
        std::size_t rest = 1;
        for (std::size_t i = 1; i < xv.ndim(); ++i) rest *= xv.dim(i);
        return reshape(x, {xv.dim(0), rest});
    }

    VarId reshape(VarId x, std::vector<std::size_t> shape) {
        Tensor out = value(x).reshaped(shape);
        return push(std::move(out), any_needs_grad({x}), {x}, [x](Tape& t, VarId self) {
            if (!t.wants(x)) return;
            const Tensor& gr = t.nodes_[self].grad;
            Tensor& d = t.nodes_[x].grad;
            for (std::size_t i = 0; i < gr.size(); ++i) d[i] += gr[i];
        });
    }

    // keep the first n columns of [B, M]
    VarId slice_cols(VarId x, std::size_t n) {
        const Tensor& xv = value(x);
        if (xv.ndim() != 2) throw DimensionError("slice_cols: expects 2-d input");
        const std::size_t b_n = xv.dim(0), m = xv.dim(1);
        if (n > m) throw DimensionError("slice_cols: n exceeds column count");
        Tensor out({b_n, n});
        for (std::size_t r = 0; r < b_n; ++r) {
            for (std::size_t c = 0; c < n; ++c) out.at2(r, c) = xv.at2(r, c);
        }
        return push(std::move(out), any_needs_grad({x}), {x}, [x, b_n, n](Tape& t, VarId self) {
            if (!t.wants(x)) return;
            const Tensor& gr = t.nodes_[self].grad;
            Tensor& d = t.nodes_[x].grad;
            for (std::size_t r = 0; r < b_n; ++r) {
                for (std::size_t c = 0; c < n; ++c) d.at2(r, c) += gr.at2(r, c);
            }
        });
    }

    // zero-extend [B, M] to [B, n]; the masked tail gets no gradient.
    VarId pad_cols(VarId x, std::size_t n) {
        const Tensor& xv = value(x);
        if (xv.ndim() != 2) throw DimensionError("pad_cols: expects 2-d input");
        const std::size_t b_n = xv.dim(0), m = xv.dim(1);
        if (n < m) throw DimensionError("pad_cols: n smaller than column count");
        Tensor out({b_n, n});
        for (std::size_t r = 0; r < b_n; ++r) {
            for (std::size_t c = 0; c < m; ++c) out.at2(r, c) = xv.at2(r, c);
        }
        return push(std::move(out), any_needs_grad({x}), {x}, [x, b_n, m](Tape& t, VarId self) {
            if (!t.wants(x)) return;
            const Tensor& gr = t.nodes_[self].grad;
            Tensor& d = t.nodes_[x].grad;
            for (std::size_t r = 0; r < b_n; ++r) {
                for (std::size_t c = 0; c < m; ++c) d.at2(r, c) += gr.at2(r, c);
            }
        });
    }

    // Row-wise power normalization of interleaved complex codes [B, 2K]:
    // s = sqrt(K*p_max/||z||^2) * z, so (1/K)||s||^2 == p_max per row.
    VarId power_normalize(VarId z, double p_max) {
        const Tensor& zv = value(z);
        if (zv.ndim() != 2) throw DimensionError("power_normalize: expects [B, 2K]");
        if (zv.dim(1) % 2 != 0) throw DimensionError("power_normalize: odd code length");
        if (p_max <= 0.0) throw UsageError("power_normalize: p_max must be > 0");
        const std::size_t b_n = zv.dim(0), m = zv.dim(1);
        const double k_sym = static_cast<double>(m) / 2.0;
        Tensor out({b_n, m});
        for (std::size_t r = 0; r < b_n; ++r) {
            double nrm2 = 0.0;
            for (std::size_t c = 0; c < m; ++c) nrm2 += zv.at2(r, c) * zv.at2(r, c);
            if (nrm2 == 0.0) {
                throw DegenerateInputError("power_normalize: all-zero code in row " +
                                           std::to_string(r));
            }
            const double scale = std::sqrt(k_sym * p_max / nrm2);
            for (std::size_t c = 0; c < m; ++c) out.at2(r, c) = scale * zv.at2(r, c);
        }
        return push(std::move(out), any_needs_grad({z}), {z},
                    [z, b_n, m, k_sym, p_max](Tape& t, VarId self) {
                        if (!t.wants(z)) return;
                        const Tensor& gr = t.nodes_[self].grad;
                        const Tensor& zv = t.value(z);
                        Tensor& d = t.nodes_[z].grad;
                        for (std::size_t r = 0; r < b_n; ++r) {
                            double nrm2 = 0.0, gdotz = 0.0;
                            for (std::size_t c = 0; c < m; ++c) {
                                nrm2 += zv.at2(r, c) * zv.at2(r, c);
                                gdotz += gr.at2(r, c) * zv.at2(r, c);
                            }
                            const double scale = std::sqrt(k_sym * p_max / nrm2);
                            for (std::size_t c = 0; c < m; ++c) {
                                d.at2(r, c) +=
                                    scale * (gr.at2(r, c) - zv.at2(r, c) * gdotz / nrm2);
                            }
                        }
                    });
    }

    // Multiply each row's interleaved complex entries by h[row]. Used for the
    // channel gain and for receiver-side equalization.
    VarId complex_scale(VarId x, std::vector<std::complex<double>> h) {
        const Tensor& xv = value(x);
        if (xv.ndim() != 2) throw DimensionError("complex_scale: expects [B, 2K]");
        if (xv.dim(1) % 2 != 0) throw DimensionError("complex_scale: odd code length");
        if (h.size() != xv.dim(0)) throw DimensionError("complex_scale: one h per row required");
        const std::size_t b_n = xv.dim(0), m = xv.dim(1);
        Tensor out({b_n, m});
        for (std::size_t r = 0; r < b_n; ++r) {
            const double a = h[r].real(), b = h[r].imag();
            for (std::size_t c = 0; c < m; c += 2) {
                const double re = xv.at2(r, c), im = xv.at2(r, c + 1);
                out.at2(r, c) = a * re - b * im;
                out.at2(r, c + 1) = b * re + a * im;
            }
        }
        return push(std::move(out), any_needs_grad({x}), {x},
                    [x, h = std::move(h), b_n, m](Tape& t, VarId self) {
                        if (!t.wants(x)) return;
                        const Tensor& gr = t.nodes_[self].grad;
                        Tensor& d = t.nodes_[x].grad;
                        for (std::size_t r = 0; r < b_n; ++r) {
                            const double a = h[r].real(), b = h[r].imag();
                            for (std::size_t c = 0; c < m; c += 2) {
                                const double gre = gr.at2(r, c), gim = gr.at2(r, c + 1);
                                d.at2(r, c) += a * gre + b * gim;
                                d.at2(r, c + 1) += -b * gre + a * gim;
                            }
                        }
                    });
    }

    // x + noise with the noise held constant on the tape, so d(out)/d(x) = I.
    VarId add_const(VarId x, const Tensor& noise) {
        const Tensor& xv = value(x);
        if (!xv.same_shape(noise)) throw DimensionError("add_const: shape mismatch");
        Tensor out(xv.shape());
        for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] + noise[i];
        return push(std::move(out), any_needs_grad({x}), {x}, [x](Tape& t, VarId self) {
            if (!t.wants(x)) return;
            const Tensor& gr = t.nodes_[self].grad;
            Tensor& d = t.nodes_[x].grad;
            for (std::size_t i = 0; i < gr.size(); ++i) d[i] += gr[i];
        });
    }

    // (1/N) * sum((a-b)^2), N = element count
    VarId mse(VarId a, VarId b) {
        const Tensor& av = value(a);
        const Tensor& bv = value(b);
        if (!av.same_shape(bv)) {
            throw DimensionError("mse: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
        }
        const double n = static_cast<double>(av.size());
        double acc = 0.0;
        for (std::size_t i = 0; i < av.size(); ++i) {
            const double d = av[i] - bv[i];
            acc += d * d;
        }
        return push(Tensor::scalar(acc / n), any_needs_grad({a, b}), {a, b},
                    [a, b, n](Tape& t, VarId self) {
                        const double g = t.nodes_[self].grad[0];
                        const Tensor& av = t.value(a);
                        const Tensor& bv = t.value(b);
                        const double c = 2.0 * g / n;
                        if (t.wants(a)) {
                            Tensor& d = t.nodes_[a].grad;
                            for (std::size_t i = 0; i < av.size(); ++i)
                                d[i] += c * (av[i] - bv[i]);
                        }
                        if (t.wants(b)) {
                            Tensor& d = t.nodes_[b].grad;
                            for (std::size_t i = 0; i < av.size(); ++i)
                                d[i] -= c * (av[i] - bv[i]);
                        }
                    });
    }

    VarId sum(VarId x) {
        const Tensor& xv = value(x);
        double acc = 0.0;
        for (std::size_t i = 0; i < xv.size(); ++i) acc += xv[i];
        return push(Tensor::scalar(acc), any_needs_grad({x}), {x}, [x](Tape& t, VarId self) {
            if (!t.wants(x)) return;
            const double g = t.nodes_[self].grad[0];
            Tensor& d = t.nodes_[x].grad;
            for (std::size_t i = 0; i < d.size(); ++i) d[i] += g;
        });
    }

    // Reverse sweep from a scalar loss. Visits every recorded op exactly once
    // in reverse execution order, then flushes parameter gradients into their
    // stores.
    void backward(VarId loss) {
        if (nodes_.empty()) throw UsageError("backward: empty tape");
        if (loss < 0 || loss >= static_cast<VarId>(nodes_.size())) {
            throw UsageError("backward: loss id not on this tape");
        }
        if (nodes_[loss].value.size() != 1) throw UsageError("backward: loss must be scalar");
        for (Node& n : nodes_) {
            if (n.needs_grad) n.grad = Tensor::zeros(n.value.shape());
        }
        if (!nodes_[loss].needs_grad) {
            // loss does not depend on anything differentiable; params keep
            // their zero gradients
            flush_param_grads();
            return;
        }
        nodes_[loss].grad[0] = 1.0;
        for (VarId id = static_cast<VarId>(nodes_.size()) - 1; id >= 0; --id) {
            Node& n = nodes_[id];
            if (n.backprop && n.needs_grad) n.backprop(*this, id);
        }
        flush_param_grads();
    }

  private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool needs_grad = false;
        std::vector<VarId> parents;
        std::function<void(Tape&, VarId)> backprop;
        ParamStore* store = nullptr;
        int param_index = -1;
    };

    bool wants(VarId id) const { return nodes_[id].needs_grad; }

    bool any_needs_grad(const std::vector<VarId>& ids) const {
        for (VarId id : ids) {
            if (id >= 0 && nodes_.at(id).needs_grad) return true;
        }
        return false;
    }

    static void add_channel_bias(Tensor& t, const Tensor& bias) {
        const std::size_t b_n = t.dim(0), c_n = t.dim(1), hw = t.dim(2) * t.dim(3);
        double* p = t.data();
        for (std::size_t b = 0; b < b_n; ++b) {
            for (std::size_t c = 0; c < c_n; ++c) {
                const double bv = bias[c];
                double* row = p + (b * c_n + c) * hw;
                for (std::size_t i = 0; i < hw; ++i) row[i] += bv;
            }
        }
    }

    VarId push(Tensor value, bool needs_grad, std::vector<VarId> parents,
               std::function<void(Tape&, VarId)> backprop) {
        Node n;
        n.value = std::move(value);
        n.needs_grad = needs_grad;
        n.parents = std::move(parents);
        n.backprop = std::move(backprop);
        nodes_.push_back(std::move(n));
        return static_cast<VarId>(nodes_.size()) - 1;
    }

    void flush_param_grads() {
        for (Node& n : nodes_) {
            if (n.store && n.grad.size() > 0) n.store->accumulate_grad(n.param_index, n.grad);
        }
    }

    std::vector<Node> nodes_;
};

using VarId = Tape::VarId;

}  // namespace ddjscc
