// Copyright 2026 MUJICA Authors
// SPDX-License-Identifier: Apache-2.0

#include "mujica/ops.hpp"

#include <Eigen/Core>
#include <cmath>

#include "mujica/error.hpp"
#include "mujica/parallel.hpp"

namespace mujica {
namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

Graph& graph_of(const Var& v) {
    if (!v.defined()) throw runtime_error("ops: undefined Var");
    return *v.graph();
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw runtime_error(std::string("ops: shape mismatch in ") + op + ": " +
                            shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

int last_dim(const std::vector<int>& shape) { return shape.empty() ? 1 : shape.back(); }

std::int64_t leading_count(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (size_t i = 0; i + 1 < shape.size(); ++i) n *= shape[i];
    return n;
}

// Generic elementwise binary op; partials receive (a, b, out).
template <class FV, class FDA, class FDB>
Var binary_op(Var a, Var b, const char* name, FV fv, FDA fda, FDB fdb) {
    require_same_shape(a, b, name);
    Graph& g = graph_of(a);
    const Tensor& av = a.val();
    const Tensor& bv = b.val();
    Tensor out(av.shape());
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = fv(av[i], bv[i]);
    const int aid = a.id(), bid = b.id();
    return g.make(std::move(out), {a, b}, [aid, bid, fda, fdb](Graph& gr, int self) {
        const Tensor& go = gr.grad_ref(self);
        const Tensor& va = gr.val(aid);
        const Tensor& vb = gr.val(bid);
        const Tensor& vo = gr.val(self);
        if (gr.needs_grad(aid)) {
            Tensor& ga = gr.grad_acc(aid);
            for (std::int64_t i = 0; i < go.size(); ++i) ga[i] += go[i] * fda(va[i], vb[i], vo[i]);
        }
        if (gr.needs_grad(bid)) {
            Tensor& gb = gr.grad_acc(bid);
            for (std::int64_t i = 0; i < go.size(); ++i) gb[i] += go[i] * fdb(va[i], vb[i], vo[i]);
        }
    });
}

// Generic elementwise unary op; partial receives (x, out).
template <class FV, class FDX>
Var unary_op(Var x, FV fv, FDX fdx) {
    Graph& g = graph_of(x);
    const Tensor& xv = x.val();
    Tensor out(xv.shape());
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = fv(xv[i]);
    const int xid = x.id();
    return g.make(std::move(out), {x}, [xid, fdx](Graph& gr, int self) {
        if (!gr.needs_grad(xid)) return;
        const Tensor& go = gr.grad_ref(self);
        const Tensor& vx = gr.val(xid);
        const Tensor& vo = gr.val(self);
        Tensor& gx = gr.grad_acc(xid);
        for (std::int64_t i = 0; i < go.size(); ++i) gx[i] += go[i] * fdx(vx[i], vo[i]);
    });
}

// Permutation op: `fwd_index` maps output element index -> input element index.
template <class FIdx>
Var permutation_op(Var x, std::vector<int> out_shape, FIdx fwd_index) {
    Graph& g = graph_of(x);
    const Tensor& xv = x.val();
    Tensor out(std::move(out_shape));
    if (out.size() != xv.size()) throw runtime_error("ops: permutation size mismatch");
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = xv[fwd_index(i)];
    const int xid = x.id();
    return g.make(std::move(out), {x}, [xid, fwd_index](Graph& gr, int self) {
        if (!gr.needs_grad(xid)) return;
        const Tensor& go = gr.grad_ref(self);
        Tensor& gx = gr.grad_acc(xid);
        for (std::int64_t i = 0; i < go.size(); ++i) gx[fwd_index(i)] += go[i];
    });
}

void softmax_rows_inplace(EMat& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        double mx = m.row(r).maxCoeff();
        double s = 0.0;
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            double e = std::exp(m(r, c) - mx);
            m(r, c) = e;
            s += e;
        }
        m.row(r) /= s;
    }
}

void im2col(const Tensor& x, int kh, int kw, int stride, int pad, int ho, int wo, double* col) {
    const int h = x.dim(0), w = x.dim(1), cin = x.dim(2);
    const int patch = kh * kw * cin;
    const double* xd = x.data();
    parallel_for(ho, [&](std::int64_t y0, std::int64_t y1) {
        for (std::int64_t oy = y0; oy < y1; ++oy) {
            for (int ox = 0; ox < wo; ++ox) {
                double* dst = col + (oy * wo + ox) * patch;
                for (int ky = 0; ky < kh; ++ky) {
                    const int iy = static_cast<int>(oy) * stride - pad + ky;
                    for (int kx = 0; kx < kw; ++kx) {
                        const int ix = ox * stride - pad + kx;
                        if (iy < 0 || iy >= h || ix < 0 || ix >= w) {
                            std::fill(dst, dst + cin, 0.0);
                        } else {
                            const double* src = xd + (static_cast<std::int64_t>(iy) * w + ix) * cin;
                            std::copy(src, src + cin, dst);
                        }
                        dst += cin;
                    }
                }
            }
        }
    });
}

void col2im_add(const double* col, int kh, int kw, int stride, int pad, int ho, int wo,
                Tensor& gx) {
    const int h = gx.dim(0), w = gx.dim(1), cin = gx.dim(2);
    const int patch = kh * kw * cin;
    double* xd = gx.data();
    for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
            const double* src = col + (static_cast<std::int64_t>(oy) * wo + ox) * patch;
            for (int ky = 0; ky < kh; ++ky) {
                const int iy = oy * stride - pad + ky;
                for (int kx = 0; kx < kw; ++kx) {
                    const int ix = ox * stride - pad + kx;
                    if (iy >= 0 && iy < h && ix >= 0 && ix < w) {
                        double* dst = xd + (static_cast<std::int64_t>(iy) * w + ix) * cin;
                        for (int c = 0; c < cin; ++c) dst[c] += src[c];
                    }
                    src += cin;
                }
            }
        }
    }
}

} // namespace

Var add(Var a, Var b) {
    return binary_op(
        a, b, "add", [](double x, double y) { return x + y; },
        [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
    return binary_op(
        a, b, "sub", [](double x, double y) { return x - y; },
        [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
    return binary_op(
        a, b, "mul", [](double x, double y) { return x * y; },
        [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

Var div(Var a, Var b) {
    return binary_op(
        a, b, "div", [](double x, double y) { return x / y; },
        [](double, double y, double) { return 1.0 / y; },
        [](double, double y, double o) { return -o / y; });
}

Var add_scalar(Var x, double c) {
    return unary_op(x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Var scale(Var x, double c) {
    return unary_op(x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

Var smul(Var x, Var s) {
    Graph& g = graph_of(x);
    if (s.val().size() != 1) throw runtime_error("ops: smul scale must be size 1");
    const double sv = s.val()[0];
    const Tensor& xv = x.val();
    Tensor out(xv.shape());
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = sv * xv[i];
    const int xid = x.id(), sid = s.id();
    return g.make(std::move(out), {x, s}, [xid, sid](Graph& gr, int self) {
        const Tensor& go = gr.grad_ref(self);
        const double sval = gr.val(sid)[0];
        if (gr.needs_grad(xid)) {
            Tensor& gx = gr.grad_acc(xid);
            for (std::int64_t i = 0; i < go.size(); ++i) gx[i] += go[i] * sval;
        }
        if (gr.needs_grad(sid)) {
            const Tensor& vx = gr.val(xid);
            double acc = 0.0;
            for (std::int64_t i = 0; i < go.size(); ++i) acc += go[i] * vx[i];
            gr.grad_acc(sid)[0] += acc;
        }
    });
}

Var square(Var x) {
    return unary_op(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Var sqrt(Var x) {
    return unary_op(x, [](double v) { return std::sqrt(v); },
                    [](double, double o) { return 0.5 / o; });
}

Var powi(Var x, int n) {
    return unary_op(
        x,
        [n](double v) {
            double y = 1.0;
            for (int i = 0; i < n; ++i) y *= v;
            return y;
        },
        [n](double v, double) {
            double y = 1.0;
            for (int i = 0; i + 1 < n; ++i) y *= v;
            return n * y;
        });
}

Var max_with(Var x, double c) {
    return unary_op(x, [c](double v) { return v > c ? v : c; },
                    [c](double v, double) { return v > c ? 1.0 : 0.0; });
}

Var min_with(Var x, double c) {
    return unary_op(x, [c](double v) { return v < c ? v : c; },
                    [c](double v, double) { return v < c ? 1.0 : 0.0; });
}

Var clamp01(Var x) {
    return unary_op(x, [](double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); },
                    [](double v, double) { return (v > 0.0 && v < 1.0) ? 1.0 : 0.0; });
}

Var leaky_relu(Var x, double negative_slope) {
    return unary_op(x, [negative_slope](double v) { return v >= 0.0 ? v : negative_slope * v; },
                    [negative_slope](double v, double) { return v >= 0.0 ? 1.0 : negative_slope; });
}

Var gelu(Var x) {
    constexpr double inv_sqrt2 = 0.7071067811865475;
    constexpr double inv_sqrt2pi = 0.3989422804014327;
    return unary_op(
        x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
        [](double v, double) {
            const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
            return cdf + v * pdf;
        });
}

Var sum(Var x) {
    Graph& g = graph_of(x);
    Tensor out({1});
    out[0] = x.val().sum();
    const int xid = x.id();
    return g.make(std::move(out), {x}, [xid](Graph& gr, int self) {
        if (!gr.needs_grad(xid)) return;
        const double go = gr.grad_ref(self)[0];
        Tensor& gx = gr.grad_acc(xid);
        for (std::int64_t i = 0; i < gx.size(); ++i) gx[i] += go;
    });
}

Var mean(Var x) {
    const double inv = 1.0 / static_cast<double>(x.val().size());
    return scale(sum(x), inv);
}

Var reshape(Var x, std::vector<int> shape) {
    if (Tensor::count(shape) != x.val().size()) {
        throw runtime_error("ops: reshape element count mismatch");
    }
    return permutation_op(x, std::move(shape), [](std::int64_t i) { return i; });
}

Var concat_lastdim(const std::vector<Var>& parts) {
    if (parts.empty()) throw runtime_error("ops: concat of nothing");
    if (parts.size() == 1) return parts[0];
    Graph& g = graph_of(parts[0]);
    const std::int64_t rows = leading_count(parts[0].shape());
    int total_c = 0;
    std::vector<int> offsets, widths;
    for (const Var& p : parts) {
        if (leading_count(p.shape()) != rows) {
            throw runtime_error("ops: concat leading-dim mismatch");
        }
        offsets.push_back(total_c);
        widths.push_back(last_dim(p.shape()));
        total_c += widths.back();
    }
    std::vector<int> out_shape = parts[0].shape();
    out_shape.back() = total_c;
    Tensor out(out_shape);
    for (size_t pi = 0; pi < parts.size(); ++pi) {
        const Tensor& pv = parts[pi].val();
        const int w = widths[pi], off = offsets[pi];
        for (std::int64_t r = 0; r < rows; ++r) {
            std::copy(pv.data() + r * w, pv.data() + (r + 1) * w, out.data() + r * total_c + off);
        }
    }
    std::vector<int> pids;
    for (const Var& p : parts) pids.push_back(p.id());
    return g.make(std::move(out), parts,
                  [pids, offsets, widths, rows, total_c](Graph& gr, int self) {
                      const Tensor& go = gr.grad_ref(self);
                      for (size_t pi = 0; pi < pids.size(); ++pi) {
                          if (!gr.needs_grad(pids[pi])) continue;
                          Tensor& gp = gr.grad_acc(pids[pi]);
                          const int w = widths[pi], off = offsets[pi];
                          for (std::int64_t r = 0; r < rows; ++r) {
                              const double* src = go.data() + r * total_c + off;
                              double* dst = gp.data() + r * w;
                              for (int c = 0; c < w; ++c) dst[c] += src[c];
                          }
                      }
                  });
}

Var slice_lastdim(Var x, int from, int count) {
    Graph& g = graph_of(x);
    const int c_in = last_dim(x.shape());
    if (from < 0 || count <= 0 || from + count > c_in) {
        throw runtime_error("ops: slice_lastdim out of range");
    }
    const std::int64_t rows = leading_count(x.shape());
    std::vector<int> out_shape = x.shape();
    out_shape.back() = count;
    Tensor out(out_shape);
    const Tensor& xv = x.val();
    for (std::int64_t r = 0; r < rows; ++r) {
        std::copy(xv.data() + r * c_in + from, xv.data() + r * c_in + from + count,
                  out.data() + r * count);
    }
    const int xid = x.id();
    return g.make(std::move(out), {x}, [xid, from, count, c_in, rows](Graph& gr, int self) {
        if (!gr.needs_grad(xid)) return;
        const Tensor& go = gr.grad_ref(self);
        Tensor& gx = gr.grad_acc(xid);
        for (std::int64_t r = 0; r < rows; ++r) {
            const double* src = go.data() + r * count;
            double* dst = gx.data() + r * c_in + from;
            for (int c = 0; c < count; ++c) dst[c] += src[c];
        }
    });
}

Var csum(Var x) {
    Graph& g = graph_of(x);
    const int c = last_dim(x.shape());
    const std::int64_t rows = leading_count(x.shape());
    std::vector<int> out_shape = x.shape();
    out_shape.back() = 1;
    Tensor out(out_shape);
    const Tensor& xv = x.val();
    for (std::int64_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (int i = 0; i < c; ++i) s += xv[r * c + i];
        out[r] = s;
    }
    const int xid = x.id();
    return g.make(std::move(out), {x}, [xid, c, rows](Graph& gr, int self) {
        if (!gr.needs_grad(xid)) return;
        const Tensor& go = gr.grad_ref(self);
        Tensor& gx = gr.grad_acc(xid);
        for (std::int64_t r = 0; r < rows; ++r) {
            for (int i = 0; i < c; ++i) gx[r * c + i] += go[r];
        }
    });
}

namespace {

// Shared core of cmul/cdiv-style row-broadcast binaries.
void require_broadcast(const Var& a, const Var& s, const char* op) {
    if (last_dim(s.shape()) != 1 || leading_count(a.shape()) != leading_count(s.shape())) {
        throw runtime_error(std::string("ops: bad broadcast shapes in ") + op);
    }
}

} // namespace

Var cmul(Var a, Var s) {
    require_broadcast(a, s, "cmul");
    Graph& g = graph_of(a);
    const int c = last_dim(a.shape());
    const std::int64_t rows = leading_count(a.shape());
    const Tensor& av = a.val();
    const Tensor& sv = s.val();
    Tensor out(a.shape());
    for (std::int64_t r = 0; r < rows; ++r) {
        for (int i = 0; i < c; ++i) out[r * c + i] = av[r * c + i] * sv[r];
    }
    const int aid = a.id(), sid = s.id();
    return g.make(std::move(out), {a, s}, [aid, sid, c, rows](Graph& gr, int self) {
        const Tensor& go = gr.grad_ref(self);
        const Tensor& va = gr.val(aid);
        const Tensor& vs = gr.val(sid);
        if (gr.needs_grad(aid)) {
            Tensor& ga = gr.grad_acc(aid);
            for (std::int64_t r = 0; r < rows; ++r) {
                for (int i = 0; i < c; ++i) ga[r * c + i] += go[r * c + i] * vs[r];
            }
        }
        if (gr.needs_grad(sid)) {
            Tensor& gs = gr.grad_acc(sid);
            for (std::int64_t r = 0; r < rows; ++r) {
                double acc = 0.0;
                for (int i = 0; i < c; ++i) acc += go[r * c + i] * va[r * c + i];
                gs[r] += acc;
            }
        }
    });
}

Var cdiv(Var a, Var s) {
    require_broadcast(a, s, "cdiv");
    Graph& g = graph_of(a);
    const int c = last_dim(a.shape());
    const std::int64_t rows = leading_count(a.shape());
    const Tensor& av = a.val();
    const Tensor& sv = s.val();
    Tensor out(a.shape());
    for (std::int64_t r = 0; r < rows; ++r) {
        for (int i = 0; i < c; ++i) out[r * c + i] = av[r * c + i] / sv[r];
    }
    const int aid = a.id(), sid = s.id();
    return g.make(std::move(out), {a, s}, [aid, sid, c, rows](Graph& gr, int self) {
        const Tensor& go = gr.grad_ref(self);
        const Tensor& vs = gr.val(sid);
        const Tensor& vo = gr.val(self);
        if (gr.needs_grad(aid)) {
            Tensor& ga = gr.grad_acc(aid);
            for (std::int64_t r = 0; r < rows; ++r) {
                for (int i = 0; i < c; ++i) ga[r * c + i] += go[r * c + i] / vs[r];
            }
        }
        if (gr.needs_grad(sid)) {
            Tensor& gs = gr.grad_acc(sid);
            for (std::int64_t r = 0; r < rows; ++r) {
                double acc = 0.0;
                for (int i = 0; i < c; ++i) acc -= go[r * c + i] * vo[r * c + i] / vs[r];
                gs[r] += acc;
            }
        }
    });
}

Var dot3(Var x, const std::array<double, 3>& v) {
    Graph& g = graph_of(x);
    if (last_dim(x.shape()) != 3) throw runtime_error("ops: dot3 needs 3 channels");
    const std::int64_t rows = leading_count(x.shape());
    std::vector<int> out_shape = x.shape();
    out_shape.back() = 1;
    Tensor out(out_shape);
    const Tensor& xv = x.val();
    for (std::int64_t r = 0; r < rows; ++r) {
        out[r] = xv[r * 3] * v[0] + xv[r * 3 + 1] * v[1] + xv[r * 3 + 2] * v[2];
    }
    const int xid = x.id();
    return g.make(std::move(out), {x}, [xid, v, rows](Graph& gr, int self) {
        if (!gr.needs_grad(xid)) return;
        const Tensor& go = gr.grad_ref(self);
        Tensor& gx = gr.grad_acc(xid);
        for (std::int64_t r = 0; r < rows; ++r) {
            gx[r * 3] += go[r] * v[0];
            gx[r * 3 + 1] += go[r] * v[1];
            gx[r * 3 + 2] += go[r] * v[2];
        }
    });
}

Var matmul(Var a, Var b) {
    Graph& g = graph_of(a);
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
        throw runtime_error("ops: matmul shape mismatch " + shape_str(sa) + " x " + shape_str(sb));
    }
    const int m = sa[0], k = sa[1], n = sb[1];
    Tensor out({m, n});
    EMap(out.data(), m, n).noalias() = ECMap(a.val().data(), m, k) * ECMap(b.val().data(), k, n);
    const int aid = a.id(), bid = b.id();
    return g.make(std::move(out), {a, b}, [aid, bid, m, k, n](Graph& gr, int self) {
        ECMap go(gr.grad_ref(self).data(), m, n);
        if (gr.needs_grad(aid)) {
            EMap(gr.grad_acc(aid).data(), m, k).noalias() +=
                go * ECMap(gr.val(bid).data(), k, n).transpose();
        }
        if (gr.needs_grad(bid)) {
            EMap(gr.grad_acc(bid).data(), k, n).noalias() +=
                ECMap(gr.val(aid).data(), m, k).transpose() * go;
        }
    });
}

Var matmul_nt(Var a, Var b) {
    Graph& g = graph_of(a);
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[1]) {
        throw runtime_error("ops: matmul_nt shape mismatch");
    }
    const int m = sa[0], k = sa[1], n = sb[0];
    Tensor out({m, n});
    EMap(out.data(), m, n).noalias() =
        ECMap(a.val().data(), m, k) * ECMap(b.val().data(), n, k).transpose();
    const int aid = a.id(), bid = b.id();
    return g.make(std::move(out), {a, b}, [aid, bid, m, k, n](Graph& gr, int self) {
        ECMap go(gr.grad_ref(self).data(), m, n);
        if (gr.needs_grad(aid)) {
            EMap(gr.grad_acc(aid).data(), m, k).noalias() += go * ECMap(gr.val(bid).data(), n, k);
        }
        if (gr.needs_grad(bid)) {
            EMap(gr.grad_acc(bid).data(), n, k).noalias() +=
                go.transpose() * ECMap(gr.val(aid).data(), m, k);
        }
    });
}

Var add_rowvec(Var x, Var b) {
    Graph& g = graph_of(x);
    const int c = last_dim(x.shape());
    if (b.shape() != std::vector<int>{c}) throw runtime_error("ops: add_rowvec width mismatch");
    const std::int64_t rows = leading_count(x.shape());
    Tensor out = x.val();
    const Tensor& bv = b.val();
    for (std::int64_t r = 0; r < rows; ++r) {
        for (int i = 0; i < c; ++i) out[r * c + i] += bv[i];
    }
    const int xid = x.id(), bid = b.id();
    return g.make(std::move(out), {x, b}, [xid, bid, c, rows](Graph& gr, int self) {
        const Tensor& go = gr.grad_ref(self);
        if (gr.needs_grad(xid)) {
            Tensor& gx = gr.grad_acc(xid);
            for (std::int64_t i = 0; i < go.size(); ++i) gx[i] += go[i];
        }
        if (gr.needs_grad(bid)) {
            Tensor& gb = gr.grad_acc(bid);
            for (std::int64_t r = 0; r < rows; ++r) {
                for (int i = 0; i < c; ++i) gb[i] += go[r * c + i];
            }
        }
    });
}

Var linear(Var x, Var w, Var b) {
    Graph& g = graph_of(x);
    const int cin = last_dim(x.shape());
    const auto& sw = w.shape();
    if (sw.size() != 2 || sw[0] != cin) throw runtime_error("ops: linear weight shape mismatch");
    const int cout = sw[1];
    if (b.shape() != std::vector<int>{cout}) throw runtime_error("ops: linear bias mismatch");
    const std::int64_t rows = leading_count(x.shape());
    std::vector<int> out_shape = x.shape();
    out_shape.back() = cout;
    Tensor out(out_shape);
    EMap om(out.data(), rows, cout);
    om.noalias() = ECMap(x.val().data(), rows, cin) * ECMap(w.val().data(), cin, cout);
    const Tensor& bv = b.val();
    for (std::int64_t r = 0; r < rows; ++r) {
        for (int i = 0; i < cout; ++i) out[r * cout + i] += bv[i];
    }
    const int xid = x.id(), wid = w.id(), bid = b.id();
    return g.make(std::move(out), {x, w, b}, [xid, wid, bid, rows, cin, cout](Graph& gr, int self) {
        ECMap go(gr.grad_ref(self).data(), rows, cout);
        if (gr.needs_grad(xid)) {
            EMap(gr.grad_acc(xid).data(), rows, cin).noalias() +=
                go * ECMap(gr.val(wid).data(), cin, cout).transpose();
        }
        if (gr.needs_grad(wid)) {
            EMap(gr.grad_acc(wid).data(), cin, cout).noalias() +=
                ECMap(gr.val(xid).data(), rows, cin).transpose() * go;
        }
        if (gr.needs_grad(bid)) {
            Tensor& gb = gr.grad_acc(bid);
            for (std::int64_t r = 0; r < rows; ++r) {
                for (int i = 0; i < cout; ++i) gb[i] += go(r, i);
            }
        }
    });
}

Var conv2d(Var x, Var w, Var b, int stride, int pad) {
    Graph& g = graph_of(x);
    const auto& sx = x.shape();
    const auto& sw = w.shape();
    if (sx.size() != 3 || sw.size() != 4 || sw[2] != sx[2]) {
        throw runtime_error("ops: conv2d shape mismatch " + shape_str(sx) + " w " + shape_str(sw));
    }
    const int h = sx[0], wd = sx[1], cin = sx[2];
    const int kh = sw[0], kw = sw[1], cout = sw[3];
    if (b.shape() != std::vector<int>{cout}) throw runtime_error("ops: conv2d bias mismatch");
    const int ho = (h + 2 * pad - kh) / stride + 1;
    const int wo = (wd + 2 * pad - kw) / stride + 1;
    if (ho <= 0 || wo <= 0) throw runtime_error("ops: conv2d empty output");
    const int patch = kh * kw * cin;
    const std::int64_t orows = static_cast<std::int64_t>(ho) * wo;

    Tensor col({static_cast<int>(orows), patch});
    im2col(x.val(), kh, kw, stride, pad, ho, wo, col.data());
    Tensor out({ho, wo, cout});
    EMap om(out.data(), orows, cout);
    om.noalias() = ECMap(col.data(), orows, patch) * ECMap(w.val().data(), patch, cout);
    const Tensor& bv = b.val();
    for (std::int64_t r = 0; r < orows; ++r) {
        for (int i = 0; i < cout; ++i) out[r * cout + i] += bv[i];
    }

    const int xid = x.id(), wid = w.id(), bid = b.id();
    return g.make(std::move(out), {x, w, b},
                  [xid, wid, bid, kh, kw, stride, pad, ho, wo, cin, cout, patch,
                   orows](Graph& gr, int self) {
                      ECMap go(gr.grad_ref(self).data(), orows, cout);
                      if (gr.needs_grad(wid) || gr.needs_grad(bid)) {
                          if (gr.needs_grad(bid)) {
                              Tensor& gb = gr.grad_acc(bid);
                              for (std::int64_t r = 0; r < orows; ++r) {
                                  for (int i = 0; i < cout; ++i) gb[i] += go(r, i);
                              }
                          }
                          if (gr.needs_grad(wid)) {
                              // column matrix is recomputed rather than kept on the tape
                              Tensor col({static_cast<int>(orows), patch});
                              im2col(gr.val(xid), kh, kw, stride, pad, ho, wo, col.data());
                              EMap(gr.grad_acc(wid).data(), patch, cout).noalias() +=
                                  ECMap(col.data(), orows, patch).transpose() * go;
                          }
                      }
                      if (gr.needs_grad(xid)) {
                          Tensor dcol({static_cast<int>(orows), patch});
                          EMap(dcol.data(), orows, patch).noalias() =
                              go * ECMap(gr.val(wid).data(), patch, cout).transpose();
                          col2im_add(dcol.data(), kh, kw, stride, pad, ho, wo, gr.grad_acc(xid));
                      }
                  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
    Graph& g = graph_of(x);
    const int c = last_dim(x.shape());
    if (gamma.shape() != std::vector<int>{c} || beta.shape() != std::vector<int>{c}) {
        throw runtime_error("ops: layer_norm parameter width mismatch");
    }
    const std::int64_t rows = leading_count(x.shape());
    const Tensor& xv = x.val();
    const Tensor& gv = gamma.val();
    const Tensor& bv = beta.val();
    Tensor out(x.shape());
    Tensor xhat(x.shape());
    Tensor inv_std({static_cast<int>(rows)});
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* row = xv.data() + r * c;
        double mu = 0.0;
        for (int i = 0; i < c; ++i) mu += row[i];
        mu /= c;
        double var = 0.0;
        for (int i = 0; i < c; ++i) var += (row[i] - mu) * (row[i] - mu);
        var /= c;
        const double istd = 1.0 / std::sqrt(var + eps);
        inv_std[r] = istd;
        for (int i = 0; i < c; ++i) {
            const double xh = (row[i] - mu) * istd;
            xhat[r * c + i] = xh;
            out[r * c + i] = gv[i] * xh + bv[i];
        }
    }
    const int xid = x.id(), gid = gamma.id(), bid = beta.id();
    return g.make(std::move(out), {x, gamma, beta},
                  [xid, gid, bid, c, rows, xhat = std::move(xhat),
                   inv_std = std::move(inv_std)](Graph& gr, int self) {
                      const Tensor& go = gr.grad_ref(self);
                      const Tensor& gv = gr.val(gid);
                      if (gr.needs_grad(gid)) {
                          Tensor& gg = gr.grad_acc(gid);
                          for (std::int64_t r = 0; r < rows; ++r) {
                              for (int i = 0; i < c; ++i) {
                                  gg[i] += go[r * c + i] * xhat[r * c + i];
                              }
                          }
                      }
                      if (gr.needs_grad(bid)) {
                          Tensor& gb = gr.grad_acc(bid);
                          for (std::int64_t r = 0; r < rows; ++r) {
                              for (int i = 0; i < c; ++i) gb[i] += go[r * c + i];
                          }
                      }
                      if (gr.needs_grad(xid)) {
                          Tensor& gx = gr.grad_acc(xid);
                          for (std::int64_t r = 0; r < rows; ++r) {
                              double m1 = 0.0, m2 = 0.0;
                              for (int i = 0; i < c; ++i) {
                                  const double dxh = go[r * c + i] * gv[i];
                                  m1 += dxh;
                                  m2 += dxh * xhat[r * c + i];
                              }
                              m1 /= c;
                              m2 /= c;
                              for (int i = 0; i < c; ++i) {
                                  const double dxh = go[r * c + i] * gv[i];
                                  gx[r * c + i] +=
                                      (dxh - m1 - xhat[r * c + i] * m2) * inv_std[r];
                              }
                          }
                      }
                  });
}

Var window_partition(Var x, int window) {
    const auto& s = x.shape();
    if (s.size() != 3) throw runtime_error("ops: window_partition needs (H,W,C)");
    const int h = s[0], w = s[1], c = s[2];
    if (h % window != 0 || w % window != 0) {
        throw runtime_error("ops: window size must divide spatial dims, got " + shape_str(s) +
                            " with S=" + std::to_string(window));
    }
    const int wx_count = w / window;
    const int t = window * window;
    const int n = (h / window) * wx_count;
    return permutation_op(x, {n, t, c}, [h, w, c, window, wx_count, t](std::int64_t i) {
        const int ci = static_cast<int>(i % c);
        const std::int64_t rc = i / c;
        const int ti = static_cast<int>(rc % t);
        const int ni = static_cast<int>(rc / t);
        const int wy = ni / wx_count, wx = ni % wx_count;
        const int iy = wy * window + ti / window;
        const int ix = wx * window + ti % window;
        return (static_cast<std::int64_t>(iy) * w + ix) * c + ci;
    });
}

Var window_reverse(Var x, int height, int width) {
    const auto& s = x.shape();
    if (s.size() != 3) throw runtime_error("ops: window_reverse needs (N,S2,C)");
    const int t = s[1], c = s[2];
    const int window = static_cast<int>(std::lround(std::sqrt(static_cast<double>(t))));
    if (window * window != t || height % window != 0 || width % window != 0 ||
        s[0] != (height / window) * (width / window)) {
        throw runtime_error("ops: window_reverse shape mismatch");
    }
    const int wx_count = width / window;
    return permutation_op(x, {height, width, c}, [width, c, window, wx_count, t](std::int64_t i) {
        const int ci = static_cast<int>(i % c);
        const std::int64_t rc = i / c;
        const int ix = static_cast<int>(rc % width);
        const int iy = static_cast<int>(rc / width);
        const int ni = (iy / window) * wx_count + ix / window;
        const int ti = (iy % window) * window + ix % window;
        return (static_cast<std::int64_t>(ni) * t + ti) * c + ci;
    });
}

Var split_heads(Var x, int heads) {
    const auto& s = x.shape();
    if (s.size() != 3 || s[2] % heads != 0) throw runtime_error("ops: split_heads shape mismatch");
    const int n = s[0], t = s[1], d = s[2];
    const int dh = d / heads;
    return permutation_op(x, {n * heads, t, dh}, [t, d, dh, heads](std::int64_t i) {
        const int j = static_cast<int>(i % dh);
        std::int64_t rest = i / dh;
        const int ti = static_cast<int>(rest % t);
        rest /= t;
        const int hh = static_cast<int>(rest % heads);
        const int ni = static_cast<int>(rest / heads);
        return (static_cast<std::int64_t>(ni) * t + ti) * d + hh * dh + j;
    });
}

Var merge_heads(Var x, int heads) {
    const auto& s = x.shape();
    if (s.size() != 3 || s[0] % heads != 0) throw runtime_error("ops: merge_heads shape mismatch");
    const int nh = s[0], t = s[1], dh = s[2];
    const int n = nh / heads, d = dh * heads;
    return permutation_op(x, {n, t, d}, [t, d, dh, heads](std::int64_t i) {
        const int di = static_cast<int>(i % d);
        std::int64_t rest = i / d;
        const int ti = static_cast<int>(rest % t);
        const int ni = static_cast<int>(rest / t);
        const int hh = di / dh, j = di % dh;
        return ((static_cast<std::int64_t>(ni) * heads + hh) * t + ti) * dh + j;
    });
}

Var pixel_shuffle(Var x, int s) {
    const auto& sh = x.shape();
    if (sh.size() != 3 || sh[2] % (s * s) != 0) {
        throw runtime_error("ops: pixel_shuffle needs C divisible by s^2");
    }
    const int h = sh[0], w = sh[1], cin = sh[2];
    const int cout = cin / (s * s);
    return permutation_op(x, {h * s, w * s, cout}, [w, cin, cout, s](std::int64_t i) {
        const int c = static_cast<int>(i % cout);
        std::int64_t rest = i / cout;
        const int ox = static_cast<int>(rest % (static_cast<std::int64_t>(w) * s));
        const int oy = static_cast<int>(rest / (static_cast<std::int64_t>(w) * s));
        const int iy = oy / s, dy = oy % s;
        const int ix = ox / s, dx = ox % s;
        return (static_cast<std::int64_t>(iy) * w + ix) * cin + c * s * s + dy * s + dx;
    });
}

Var pixel_unshuffle(Var x, int s) {
    const auto& sh = x.shape();
    if (sh.size() != 3 || sh[0] % s != 0 || sh[1] % s != 0) {
        throw runtime_error("ops: pixel_unshuffle needs spatial dims divisible by s");
    }
    const int h = sh[0], w = sh[1], cin = sh[2];
    const int ho = h / s, wo = w / s, cout = cin * s * s;
    return permutation_op(x, {ho, wo, cout}, [w, cin, cout, s](std::int64_t i) {
        const int c = static_cast<int>(i % cout);
        std::int64_t rest = i / cout;
        const int ox = static_cast<int>(rest % (w / s));
        const int oy = static_cast<int>(rest / (w / s));
        const int ch = c / (s * s);
        const int dy = (c % (s * s)) / s, dx = c % s;
        return (static_cast<std::int64_t>(oy * s + dy) * w + (ox * s + dx)) * cin + ch;
    });
}

std::vector<int> relative_position_index(int window) {
    const int t = window * window;
    std::vector<int> index(static_cast<size_t>(t) * t);
    for (int q = 0; q < t; ++q) {
        const int qy = q / window, qx = q % window;
        for (int k = 0; k < t; ++k) {
            const int ky = k / window, kx = k % window;
            index[static_cast<size_t>(q) * t + k] =
                (qy - ky + window - 1) * (2 * window - 1) + (qx - kx + window - 1);
        }
    }
    return index;
}

Var window_attention_sum(const std::vector<Var>& queries, Var keys, Var values,
                         const std::vector<Var>& bias_tables,
                         std::shared_ptr<const std::vector<int>> bias_index, int heads,
                         double scale, AttentionProbe* probe) {
    if (queries.empty() || queries.size() != bias_tables.size()) {
        throw runtime_error("ops: attention needs matching query and bias streams");
    }
    Graph& g = graph_of(keys);
    const auto& sk = keys.shape();
    if (sk.size() != 3) throw runtime_error("ops: attention streams must be (N*heads,T,dh)");
    const int nh = sk[0], t = sk[1], dh = sk[2];
    if (nh % heads != 0) throw runtime_error("ops: attention batch not divisible by heads");
    for (const Var& q : queries) require_same_shape(q, keys, "window_attention_sum");
    require_same_shape(values, keys, "window_attention_sum");
    if (static_cast<int>(bias_index->size()) != t * t) {
        throw runtime_error("ops: bias index size mismatch");
    }
    const int nq = static_cast<int>(queries.size());
    const int table_len = bias_tables[0].val().size() / heads;

    if (probe) probe->softmax.assign(static_cast<size_t>(nq), Tensor({nh, t, t}));

    Tensor out({nh, t, dh});
    {
        const int* idx = bias_index->data();
        parallel_for(nh, [&](std::int64_t b0, std::int64_t b1) {
            EMat s(t, t);
            for (std::int64_t bi = b0; bi < b1; ++bi) {
                const int head = static_cast<int>(bi % heads);
                ECMap km(keys.val().data() + bi * t * dh, t, dh);
                ECMap vm(values.val().data() + bi * t * dh, t, dh);
                EMap om(out.data() + bi * t * dh, t, dh);
                om.setZero();
                for (int qi = 0; qi < nq; ++qi) {
                    ECMap qm(queries[static_cast<size_t>(qi)].val().data() + bi * t * dh, t, dh);
                    s.noalias() = scale * (qm * km.transpose());
                    const double* tab =
                        bias_tables[static_cast<size_t>(qi)].val().data() + head * table_len;
                    for (int a = 0; a < t; ++a) {
                        for (int b = 0; b < t; ++b) s(a, b) += tab[idx[a * t + b]];
                    }
                    softmax_rows_inplace(s);
                    if (probe) {
                        std::copy(s.data(), s.data() + t * t,
                                  probe->softmax[static_cast<size_t>(qi)].data() + bi * t * t);
                    }
                    om.noalias() += s * vm;
                }
            }
        });
    }

    std::vector<Var> parents = queries;
    parents.push_back(keys);
    parents.push_back(values);
    for (const Var& bt : bias_tables) parents.push_back(bt);

    std::vector<int> qids, tids;
    for (const Var& q : queries) qids.push_back(q.id());
    for (const Var& bt : bias_tables) tids.push_back(bt.id());
    const int kid = keys.id(), vid = values.id();

    // TODO: chunk-local bias-table accumulators would let this loop run in
    // parallel over batches like the forward pass.
    return g.make(
        std::move(out), parents,
        [qids, tids, kid, vid, bias_index, heads, scale, nh, t, dh, table_len, nq](Graph& gr,
                                                                                   int self) {
            const Tensor& gov = gr.grad_ref(self);
            const int* idx = bias_index->data();
            EMat s(t, t), ds(t, t), dz(t, t);
            for (std::int64_t bi = 0; bi < nh; ++bi) {
                const int head = static_cast<int>(bi % heads);
                ECMap km(gr.val(kid).data() + bi * t * dh, t, dh);
                ECMap vm(gr.val(vid).data() + bi * t * dh, t, dh);
                ECMap gom(gov.data() + bi * t * dh, t, dh);
                for (int qi = 0; qi < nq; ++qi) {
                    const int qid = qids[static_cast<size_t>(qi)];
                    const int tid = tids[static_cast<size_t>(qi)];
                    ECMap qm(gr.val(qid).data() + bi * t * dh, t, dh);
                    s.noalias() = scale * (qm * km.transpose());
                    const double* tab = gr.val(tid).data() + head * table_len;
                    for (int a = 0; a < t; ++a) {
                        for (int b = 0; b < t; ++b) s(a, b) += tab[idx[a * t + b]];
                    }
                    softmax_rows_inplace(s);
                    if (gr.needs_grad(vid)) {
                        EMap(gr.grad_acc(vid).data() + bi * t * dh, t, dh).noalias() +=
                            s.transpose() * gom;
                    }
                    const bool need_q = gr.needs_grad(qid);
                    const bool need_k = gr.needs_grad(kid);
                    const bool need_b = gr.needs_grad(tid);
                    if (!(need_q || need_k || need_b)) continue;
                    ds.noalias() = gom * vm.transpose();
                    for (int a = 0; a < t; ++a) {
                        const double dot = ds.row(a).cwiseProduct(s.row(a)).sum();
                        for (int b = 0; b < t; ++b) dz(a, b) = s(a, b) * (ds(a, b) - dot);
                    }
                    if (need_q) {
                        EMap(gr.grad_acc(qid).data() + bi * t * dh, t, dh).noalias() +=
                            scale * (dz * km);
                    }
                    if (need_k) {
                        EMap(gr.grad_acc(kid).data() + bi * t * dh, t, dh).noalias() +=
                            scale * (dz.transpose() * qm);
                    }
                    if (need_b) {
                        double* gt = gr.grad_acc(tid).data() + head * table_len;
                        for (int a = 0; a < t; ++a) {
                            for (int b = 0; b < t; ++b) gt[idx[a * t + b]] += dz(a, b);
                        }
                    }
                }
            }
        });
}

} // namespace mujica
