#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dedit/rng.hpp"

// Dense row-major tensors with reverse-mode automatic differentiation.
// Scalar type is a template parameter: float for training and sampling,
// double for gradient checking. Tensors are cheap handles onto shared
// nodes; ops record the graph only when some input is tracked.

namespace dedit {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) n *= static_cast<std::size_t>(d);
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
    os << ']';
    return os.str();
}

inline void check_shape(const Shape& s, const char* op) {
    if (s.empty()) throw std::invalid_argument(std::string(op) + ": empty shape");
    for (int d : s)
        if (d <= 0) throw std::invalid_argument(std::string(op) + ": nonpositive extent in " + shape_str(s));
}

// Right-aligned broadcast shape of two operands; throws naming both shapes.
inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    const std::size_t r = std::max(a.size(), b.size());
    Shape out(r);
    for (std::size_t i = 0; i < r; ++i) {
        const int da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        const int db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1)
            throw std::invalid_argument(std::string(op) + ": shapes not broadcastable: " + shape_str(a) +
                                        " vs " + shape_str(b));
        out[i] = std::max(da, db);
    }
    return out;
}

// Element strides of `from` viewed through broadcast as `to` (0 on broadcast axes).
inline std::vector<std::size_t> bcast_strides(const Shape& from, const Shape& to) {
    std::vector<std::size_t> natural(from.size());
    std::size_t acc = 1;
    for (std::size_t i = from.size(); i-- > 0;) {
        natural[i] = acc;
        acc *= static_cast<std::size_t>(from[i]);
    }
    std::vector<std::size_t> out(to.size(), 0);
    const std::size_t off = to.size() - from.size();
    for (std::size_t i = 0; i < from.size(); ++i)
        out[off + i] = (from[i] == 1 && to[off + i] != 1) ? 0 : natural[i];
    return out;
}

// Walks the full index space of `out`, handing the callback the flat output
// index plus the offsets into both (possibly broadcast) operands.
template <class F>
void bcast_iterate(const Shape& out, const std::vector<std::size_t>& sa, const std::vector<std::size_t>& sb,
                   F&& f) {
    const int r = static_cast<int>(out.size());
    const std::size_t inner_n = static_cast<std::size_t>(out[r - 1]);
    const std::size_t ia_step = sa[r - 1], ib_step = sb[r - 1];
    std::vector<int> idx(r, 0);
    std::size_t oa = 0, ob = 0, io = 0;
    for (;;) {
        std::size_t a = oa, b = ob;
        for (std::size_t i = 0; i < inner_n; ++i, a += ia_step, b += ib_step, ++io) f(io, a, b);
        int d = r - 2;
        for (; d >= 0; --d) {
            oa += sa[d];
            ob += sb[d];
            if (++idx[d] < out[d]) break;
            oa -= sa[d] * static_cast<std::size_t>(out[d]);
            ob -= sb[d] * static_cast<std::size_t>(out[d]);
            idx[d] = 0;
        }
        if (d < 0) break;
    }
}

// Lanes along one axis: callback gets (base offset, lane length, stride).
template <class F>
void axis_iterate(const Shape& s, int axis, F&& f) {
    std::size_t stride = 1;
    for (std::size_t i = axis + 1; i < s.size(); ++i) stride *= static_cast<std::size_t>(s[i]);
    const std::size_t len = static_cast<std::size_t>(s[axis]);
    const std::size_t lanes = shape_numel(s) / len;
    for (std::size_t j = 0; j < lanes; ++j) {
        const std::size_t base = (j / stride) * stride * len + (j % stride);
        f(base, len, stride);
    }
}

template <class S>
struct TensorNode {
    Shape shape;
    std::vector<S> data;
    std::vector<S> grad;  // allocated on first use
    bool tracked = false;
    std::vector<std::shared_ptr<TensorNode<S>>> parents;
    std::function<void(TensorNode<S>&)> backprop;

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), S(0));
    }
};

template <class S>
class TensorT {
public:
    using Scalar = S;

    TensorT() = default;

    static TensorT zeros(Shape s) { return full(std::move(s), S(0)); }

    static TensorT full(Shape s, S v) {
        check_shape(s, "full");
        auto n = std::make_shared<TensorNode<S>>();
        n->data.assign(shape_numel(s), v);
        n->shape = std::move(s);
        return TensorT(std::move(n));
    }

    static TensorT from_data(Shape s, std::vector<S> v) {
        check_shape(s, "from_data");
        if (shape_numel(s) != v.size())
            throw std::invalid_argument("from_data: " + std::to_string(v.size()) + " values for shape " +
                                        shape_str(s));
        auto n = std::make_shared<TensorNode<S>>();
        n->shape = std::move(s);
        n->data = std::move(v);
        return TensorT(std::move(n));
    }

    static TensorT scalar(S v) { return from_data({1}, {v}); }

    static TensorT randn(Shape s, Rng& rng, double stddev = 1.0) {
        check_shape(s, "randn");
        std::vector<S> v(shape_numel(s));
        for (auto& x : v) x = static_cast<S>(rng.normal() * stddev);
        return from_data(std::move(s), std::move(v));
    }

    bool defined() const { return static_cast<bool>(n_); }
    const Shape& shape() const { return n_->shape; }
    std::size_t size() const { return n_->data.size(); }
    int rank() const { return static_cast<int>(n_->shape.size()); }

    S* data() { return n_->data.data(); }
    const S* data() const { return n_->data.data(); }
    std::span<const S> values() const { return {n_->data.data(), n_->data.size()}; }

    S value() const {
        if (size() != 1)
            throw std::invalid_argument("value(): tensor is not scalar, shape " + shape_str(shape()));
        return n_->data[0];
    }

    TensorT& set_tracked(bool on = true) {
        n_->tracked = on;
        if (on) n_->ensure_grad();
        return *this;
    }
    bool tracked() const { return n_ && n_->tracked; }

    std::span<const S> grad() const {
        if (!tracked()) throw std::logic_error("grad(): tensor is not tracked");
        const_cast<TensorNode<S>*>(n_.get())->ensure_grad();
        return {n_->grad.data(), n_->grad.size()};
    }
    void zero_grad() {
        if (n_) n_->grad.assign(n_->data.size(), S(0));
    }

    // Deep copy of the values as a fresh untracked leaf.
    TensorT clone() const { return from_data(n_->shape, n_->data); }

    std::shared_ptr<TensorNode<S>> node() const { return n_; }

private:
    explicit TensorT(std::shared_ptr<TensorNode<S>> n) : n_(std::move(n)) {}
    std::shared_ptr<TensorNode<S>> n_;
};

using TensorF = TensorT<float>;
using TensorD = TensorT<double>;

namespace detail {

template <class S>
TensorT<S> make_result(Shape shape, std::vector<S> data) {
    return TensorT<S>::from_data(std::move(shape), std::move(data));
}

template <class S>
void attach(TensorT<S>& out, std::type_identity_t<std::vector<std::shared_ptr<TensorNode<S>>>> parents,
            std::type_identity_t<std::function<void(TensorNode<S>&)>> backprop) {
    bool any = false;
    for (auto& p : parents) any = any || p->tracked;
    if (!any) return;
    out.node()->tracked = true;
    out.node()->parents = std::move(parents);
    out.node()->backprop = std::move(backprop);
}

}  // namespace detail

// ---- elementwise binary ops ----------------------------------------------

template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
    const Shape os = broadcast_shape(a.shape(), b.shape(), "add");
    auto sa = bcast_strides(a.shape(), os), sb = bcast_strides(b.shape(), os);
    std::vector<S> r(shape_numel(os));
    const S *pa = a.data(), *pb = b.data();
    bcast_iterate(os, sa, sb, [&](std::size_t io, std::size_t ia, std::size_t ib) { r[io] = pa[ia] + pb[ib]; });
    auto out = detail::make_result(os, std::move(r));
    auto na = a.node(), nb = b.node();
    detail::attach(out, {na, nb}, [na, nb, os, sa, sb](TensorNode<S>& self) {
        const S* g = self.grad.data();
        if (na->tracked) {
            na->ensure_grad();
            S* ga = na->grad.data();
            bcast_iterate(os, sa, sb, [&](std::size_t io, std::size_t ia, std::size_t) { ga[ia] += g[io]; });
        }
        if (nb->tracked) {
            nb->ensure_grad();
            S* gb = nb->grad.data();
            bcast_iterate(os, sa, sb, [&](std::size_t io, std::size_t, std::size_t ib) { gb[ib] += g[io]; });
        }
    });
    return out;
}

template <class S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
    const Shape os = broadcast_shape(a.shape(), b.shape(), "sub");
    auto sa = bcast_strides(a.shape(), os), sb = bcast_strides(b.shape(), os);
    std::vector<S> r(shape_numel(os));
    const S *pa = a.data(), *pb = b.data();
    bcast_iterate(os, sa, sb, [&](std::size_t io, std::size_t ia, std::size_t ib) { r[io] = pa[ia] - pb[ib]; });
    auto out = detail::make_result(os, std::move(r));
    auto na = a.node(), nb = b.node();
    detail::attach(out, {na, nb}, [na, nb, os, sa, sb](TensorNode<S>& self) {
        const S* g = self.grad.data();
        if (na->tracked) {
            na->ensure_grad();
            S* ga = na->grad.data();
            bcast_iterate(os, sa, sb, [&](std::size_t io, std::size_t ia, std::size_t) { ga[ia] += g[io]; });
        }
        if (nb->tracked) {
            nb->ensure_grad();
            S* gb = nb->grad.data();
            bcast_iterate(os, sa, sb, [&](std::size_t io, std::size_t, std::size_t ib) { gb[ib] -= g[io]; });
        }
    });
    return out;
}

template <class S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
    const Shape os = broadcast_shape(a.shape(), b.shape(), "mul");
    auto sa = bcast_strides(a.shape(), os), sb = bcast_strides(b.shape(), os);
    std::vector<S> r(shape_numel(os));
    const S *pa = a.data(), *pb = b.data();
    bcast_iterate(os, sa, sb, [&](std::size_t io, std::size_t ia, std::size_t ib) { r[io] = pa[ia] * pb[ib]; });
    auto out = detail::make_result(os, std::move(r));
    auto na = a.node(), nb = b.node();
    detail::attach(out, {na, nb}, [na, nb, os, sa, sb](TensorNode<S>& self) {
        const S* g = self.grad.data();
        if (na->tracked) {
            na->ensure_grad();
            S* ga = na->grad.data();
            const S* vb = nb->data.data();
            bcast_iterate(os, sa, sb,
                          [&](std::size_t io, std::size_t ia, std::size_t ib) { ga[ia] += g[io] * vb[ib]; });
        }
        if (nb->tracked) {
            nb->ensure_grad();
            S* gb = nb->grad.data();
            const S* va = na->data.data();
            bcast_iterate(os, sa, sb,
                          [&](std::size_t io, std::size_t ia, std::size_t ib) { gb[ib] += g[io] * va[ia]; });
        }
    });
    return out;
}

template <class S>
TensorT<S> div(const TensorT<S>& a, const TensorT<S>& b) {
    for (std::size_t i = 0; i < b.size(); ++i)
        if (b.data()[i] == S(0)) throw std::domain_error("div: division by zero");
    const Shape os = broadcast_shape(a.shape(), b.shape(), "div");
    auto sa = bcast_strides(a.shape(), os), sb = bcast_strides(b.shape(), os);
    std::vector<S> r(shape_numel(os));
    const S *pa = a.data(), *pb = b.data();
    bcast_iterate(os, sa, sb, [&](std::size_t io, std::size_t ia, std::size_t ib) { r[io] = pa[ia] / pb[ib]; });
    auto out = detail::make_result(os, std::move(r));
    auto na = a.node(), nb = b.node();
    detail::attach(out, {na, nb}, [na, nb, os, sa, sb](TensorNode<S>& self) {
        const S* g = self.grad.data();
        const S* va = na->data.data();
        const S* vb = nb->data.data();
        if (na->tracked) {
            na->ensure_grad();
            S* ga = na->grad.data();
            bcast_iterate(os, sa, sb,
                          [&](std::size_t io, std::size_t ia, std::size_t ib) { ga[ia] += g[io] / vb[ib]; });
        }
        if (nb->tracked) {
            nb->ensure_grad();
            S* gb = nb->grad.data();
            bcast_iterate(os, sa, sb, [&](std::size_t io, std::size_t ia, std::size_t ib) {
                gb[ib] -= g[io] * va[ia] / (vb[ib] * vb[ib]);
            });
        }
    });
    return out;
}

// ---- elementwise unary ops ------------------------------------------------

namespace detail {

template <class S, class Fwd, class Bwd>
TensorT<S> unary_op(const TensorT<S>& x, Fwd&& fwd, Bwd&& bwd) {
    std::vector<S> r(x.size());
    const S* px = x.data();
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = fwd(px[i]);
    auto out = make_result(x.shape(), std::move(r));
    auto nx = x.node();
    attach(out, {nx}, [nx, bwd](TensorNode<S>& self) {
        if (!nx->tracked) return;
        nx->ensure_grad();
        S* gx = nx->grad.data();
        const S* g = self.grad.data();
        const S* vx = nx->data.data();
        const S* vy = self.data.data();
        for (std::size_t i = 0; i < self.data.size(); ++i) gx[i] += bwd(g[i], vx[i], vy[i]);
    });
    return out;
}

}  // namespace detail

template <class S>
TensorT<S> neg(const TensorT<S>& x) {
    return detail::unary_op(
        x, [](S v) { return -v; }, [](S g, S, S) { return -g; });
}

template <class S>
TensorT<S> exp(const TensorT<S>& x) {
    return detail::unary_op(
        x, [](S v) { return std::exp(v); }, [](S g, S, S y) { return g * y; });
}

template <class S>
TensorT<S> log(const TensorT<S>& x) {
    for (std::size_t i = 0; i < x.size(); ++i)
        if (x.data()[i] <= S(0)) throw std::domain_error("log: nonpositive input");
    return detail::unary_op(
        x, [](S v) { return std::log(v); }, [](S g, S v, S) { return g / v; });
}

template <class S>
TensorT<S> sqrt(const TensorT<S>& x) {
    for (std::size_t i = 0; i < x.size(); ++i)
        if (x.data()[i] < S(0)) throw std::domain_error("sqrt: negative input");
    return detail::unary_op(
        x, [](S v) { return std::sqrt(v); }, [](S g, S, S y) { return y > S(0) ? g / (S(2) * y) : S(0); });
}

template <class S>
TensorT<S> silu(const TensorT<S>& x) {
    auto sig = [](S v) { return S(1) / (S(1) + std::exp(-v)); };
    return detail::unary_op(
        x, [sig](S v) { return v * sig(v); },
        [sig](S g, S v, S) {
            const S s = sig(v);
            return g * s * (S(1) + v * (S(1) - s));
        });
}

template <class S>
TensorT<S> scale(const TensorT<S>& x, S c) {
    return detail::unary_op(
        x, [c](S v) { return v * c; }, [c](S g, S, S) { return g * c; });
}

template <class S>
TensorT<S> add_const(const TensorT<S>& x, S c) {
    return detail::unary_op(
        x, [c](S v) { return v + c; }, [](S g, S, S) { return g; });
}

template <class S>
TensorT<S> square(const TensorT<S>& x) {
    return detail::unary_op(
        x, [](S v) { return v * v; }, [](S g, S v, S) { return S(2) * g * v; });
}

// ---- matmul ---------------------------------------------------------------

namespace detail {

// C[m,n] += A[m,k] * B[k,n]
template <class S>
void gemm_nn(const S* a, const S* b, S* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const S* ar = a + static_cast<std::size_t>(i) * k;
        S* cr = c + static_cast<std::size_t>(i) * n;
        for (int l = 0; l < k; ++l) {
            const S av = ar[l];
            const S* br = b + static_cast<std::size_t>(l) * n;
            for (int j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

// C[m,k] += G[m,n] * B[k,n]^T
template <class S>
void gemm_nt(const S* g, const S* b, S* c, int m, int n, int k) {
    for (int i = 0; i < m; ++i) {
        const S* gr = g + static_cast<std::size_t>(i) * n;
        S* cr = c + static_cast<std::size_t>(i) * k;
        for (int l = 0; l < k; ++l) {
            const S* br = b + static_cast<std::size_t>(l) * n;
            S acc = 0;
            for (int j = 0; j < n; ++j) acc += gr[j] * br[j];
            cr[l] += acc;
        }
    }
}

// C[k,n] += A[m,k]^T * G[m,n]
template <class S>
void gemm_tn(const S* a, const S* g, S* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const S* ar = a + static_cast<std::size_t>(i) * k;
        const S* gr = g + static_cast<std::size_t>(i) * n;
        for (int l = 0; l < k; ++l) {
            const S av = ar[l];
            S* cr = c + static_cast<std::size_t>(l) * n;
            for (int j = 0; j < n; ++j) cr[j] += av * gr[j];
        }
    }
}

}  // namespace detail

template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    if (as.size() < 2 || bs.size() < 2)
        throw std::invalid_argument("matmul: operands must have rank >= 2: " + shape_str(as) + " vs " +
                                    shape_str(bs));
    const int m = as[as.size() - 2], k = as.back();
    const int kb = bs[bs.size() - 2], n = bs.back();
    if (k != kb)
        throw std::invalid_argument("matmul: inner extents differ (" + std::to_string(k) + " vs " +
                                    std::to_string(kb) + "): " + shape_str(as) + " x " + shape_str(bs));
    const Shape abatch(as.begin(), as.end() - 2), bbatch(bs.begin(), bs.end() - 2);
    const Shape batch = broadcast_shape(abatch, bbatch, "matmul (batch dims)");
    Shape os = batch;
    os.push_back(m);
    os.push_back(n);

    const std::size_t ablock = static_cast<std::size_t>(m) * k;
    const std::size_t bblock = static_cast<std::size_t>(k) * n;
    const std::size_t oblock = static_cast<std::size_t>(m) * n;
    const std::size_t nbatch = shape_numel(batch);

    // Per-block data offsets for every flat batch index.
    auto offsets = [&](const Shape& opb, std::size_t block) {
        std::vector<std::size_t> off(nbatch, 0);
        if (batch.empty()) return off;
        auto strides = bcast_strides(opb, batch);
        std::vector<int> idx(batch.size(), 0);
        std::size_t cur = 0;
        for (std::size_t i = 0; i < nbatch; ++i) {
            off[i] = cur * block;
            for (int d = static_cast<int>(batch.size()) - 1; d >= 0; --d) {
                cur += strides[d];
                if (++idx[d] < batch[d]) break;
                cur -= strides[d] * static_cast<std::size_t>(batch[d]);
                idx[d] = 0;
            }
        }
        return off;
    };
    auto aoff = std::make_shared<std::vector<std::size_t>>(offsets(abatch, ablock));
    auto boff = std::make_shared<std::vector<std::size_t>>(offsets(bbatch, bblock));

    std::vector<S> r(shape_numel(os), S(0));
    for (std::size_t i = 0; i < nbatch; ++i)
        detail::gemm_nn(a.data() + (*aoff)[i], b.data() + (*boff)[i], r.data() + i * oblock, m, k, n);

    auto out = detail::make_result(os, std::move(r));
    auto na = a.node(), nb = b.node();
    detail::attach(out, {na, nb}, [na, nb, aoff, boff, nbatch, ablock, bblock, oblock, m, k, n](
                                      TensorNode<S>& self) {
        const S* g = self.grad.data();
        if (na->tracked) {
            na->ensure_grad();
            for (std::size_t i = 0; i < nbatch; ++i)
                detail::gemm_nt(g + i * oblock, nb->data.data() + (*boff)[i], na->grad.data() + (*aoff)[i],
                                m, n, k);
        }
        if (nb->tracked) {
            nb->ensure_grad();
            for (std::size_t i = 0; i < nbatch; ++i)
                detail::gemm_tn(na->data.data() + (*aoff)[i], g + i * oblock, nb->grad.data() + (*boff)[i],
                                m, k, n);
        }
    });
    return out;
}

// ---- shape ops ------------------------------------------------------------

template <class S>
TensorT<S> reshape(const TensorT<S>& x, Shape s) {
    check_shape(s, "reshape");
    if (shape_numel(s) != x.size())
        throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(s));
    auto out = detail::make_result(s, std::vector<S>(x.data(), x.data() + x.size()));
    auto nx = x.node();
    detail::attach(out, {nx}, [nx](TensorNode<S>& self) {
        if (!nx->tracked) return;
        nx->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) nx->grad[i] += self.grad[i];
    });
    return out;
}

template <class S>
TensorT<S> permute(const TensorT<S>& x, const std::vector<int>& axes) {
    const Shape& xs = x.shape();
    if (axes.size() != xs.size()) throw std::invalid_argument("permute: axes rank mismatch");
    std::vector<bool> seen(axes.size(), false);
    Shape os(axes.size());
    for (std::size_t i = 0; i < axes.size(); ++i) {
        if (axes[i] < 0 || axes[i] >= static_cast<int>(axes.size()) || seen[axes[i]])
            throw std::invalid_argument("permute: invalid axis list");
        seen[axes[i]] = true;
        os[i] = xs[axes[i]];
    }
    // out flat index -> in flat index
    std::vector<std::size_t> in_strides(xs.size());
    std::size_t acc = 1;
    for (std::size_t i = xs.size(); i-- > 0;) {
        in_strides[i] = acc;
        acc *= static_cast<std::size_t>(xs[i]);
    }
    auto map = std::make_shared<std::vector<std::size_t>>(x.size());
    std::vector<int> idx(os.size(), 0);
    for (std::size_t o = 0; o < x.size(); ++o) {
        std::size_t in = 0;
        for (std::size_t d = 0; d < os.size(); ++d) in += static_cast<std::size_t>(idx[d]) * in_strides[axes[d]];
        (*map)[o] = in;
        for (int d = static_cast<int>(os.size()) - 1; d >= 0; --d) {
            if (++idx[d] < os[d]) break;
            idx[d] = 0;
        }
    }
    std::vector<S> r(x.size());
    const S* px = x.data();
    for (std::size_t o = 0; o < r.size(); ++o) r[o] = px[(*map)[o]];
    auto out = detail::make_result(os, std::move(r));
    auto nx = x.node();
    detail::attach(out, {nx}, [nx, map](TensorNode<S>& self) {
        if (!nx->tracked) return;
        nx->ensure_grad();
        for (std::size_t o = 0; o < self.grad.size(); ++o) nx->grad[(*map)[o]] += self.grad[o];
    });
    return out;
}

template <class S>
TensorT<S> transpose_last(const TensorT<S>& x) {
    if (x.rank() < 2) throw std::invalid_argument("transpose_last: rank < 2");
    std::vector<int> axes(x.rank());
    for (int i = 0; i < x.rank(); ++i) axes[i] = i;
    std::swap(axes[x.rank() - 1], axes[x.rank() - 2]);
    return permute(x, axes);
}

// Reindexing by an explicit flat map: y[i] = x[map[i]]. Used for patch
//-tokenization and its inverse; gradient scatter-adds through the map.
template <class S>
TensorT<S> take(const TensorT<S>& x, std::shared_ptr<const std::vector<std::size_t>> map, Shape out_shape) {
    check_shape(out_shape, "take");
    if (shape_numel(out_shape) != map->size())
        throw std::invalid_argument("take: map size does not match output shape " + shape_str(out_shape));
    std::vector<S> r(map->size());
    const S* px = x.data();
    for (std::size_t i = 0; i < r.size(); ++i) {
        if ((*map)[i] >= x.size()) throw std::out_of_range("take: index beyond input");
        r[i] = px[(*map)[i]];
    }
    auto out = detail::make_result(std::move(out_shape), std::move(r));
    auto nx = x.node();
    detail::attach(out, {nx}, [nx, map](TensorNode<S>& self) {
        if (!nx->tracked) return;
        nx->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) nx->grad[(*map)[i]] += self.grad[i];
    });
    return out;
}

// Row lookup into a 2-D table: y[i, :] = table[ids[i], :].
template <class S>
TensorT<S> gather_rows(const TensorT<S>& table, const std::vector<int>& ids) {
    if (table.rank() != 2) throw std::invalid_argument("gather_rows: table must be 2-D");
    const int v = table.shape()[0], d = table.shape()[1];
    auto map = std::make_shared<std::vector<std::size_t>>();
    map->reserve(ids.size() * static_cast<std::size_t>(d));
    for (int id : ids) {
        if (id < 0 || id >= v)
            throw std::out_of_range("gather_rows: id " + std::to_string(id) + " outside table of " +
                                    std::to_string(v) + " rows");
        for (int j = 0; j < d; ++j) map->push_back(static_cast<std::size_t>(id) * d + j);
    }
    return take(table, std::move(map), {static_cast<int>(ids.size()), d});
}

// ---- reductions -----------------------------------------------------------

template <class S>
TensorT<S> sum(const TensorT<S>& x, int axis, bool keepdim = false) {
    const int r = x.rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw std::invalid_argument("sum: axis out of range");
    Shape os = x.shape();
    if (keepdim)
        os[axis] = 1;
    else
        os.erase(os.begin() + axis);
    if (os.empty()) os = {1};
    std::vector<S> out_data(shape_numel(os), S(0));
    const S* px = x.data();
    std::size_t lane = 0;
    axis_iterate(x.shape(), axis, [&](std::size_t base, std::size_t len, std::size_t stride) {
        S acc = 0;
        for (std::size_t i = 0; i < len; ++i) acc += px[base + i * stride];
        out_data[lane++] = acc;
    });
    auto out = detail::make_result(os, std::move(out_data));
    auto nx = x.node();
    const Shape xs = x.shape();
    detail::attach(out, {nx}, [nx, xs, axis](TensorNode<S>& self) {
        if (!nx->tracked) return;
        nx->ensure_grad();
        const S* g = self.grad.data();
        S* gx = nx->grad.data();
        std::size_t lane = 0;
        axis_iterate(xs, axis, [&](std::size_t base, std::size_t len, std::size_t stride) {
            const S gv = g[lane++];
            for (std::size_t i = 0; i < len; ++i) gx[base + i * stride] += gv;
        });
    });
    return out;
}

template <class S>
TensorT<S> mean(const TensorT<S>& x, int axis, bool keepdim = false) {
    const int r = x.rank();
    const int ax = axis < 0 ? axis + r : axis;
    if (ax < 0 || ax >= r) throw std::invalid_argument("mean: axis out of range");
    return scale(sum(x, ax, keepdim), S(1) / static_cast<S>(x.shape()[ax]));
}

template <class S>
TensorT<S> sum_all(const TensorT<S>& x) {
    std::vector<S> out_data(1, S(0));
    const S* px = x.data();
    for (std::size_t i = 0; i < x.size(); ++i) out_data[0] += px[i];
    auto out = detail::make_result({1}, std::move(out_data));
    auto nx = x.node();
    detail::attach(out, {nx}, [nx](TensorNode<S>& self) {
        if (!nx->tracked) return;
        nx->ensure_grad();
        const S g = self.grad[0];
        for (auto& gv : nx->grad) gv += g;
    });
    return out;
}

template <class S>
TensorT<S> mean_all(const TensorT<S>& x) {
    return scale(sum_all(x), S(1) / static_cast<S>(x.size()));
}

// ---- softmax --------------------------------------------------------------

// Numerically stable softmax along `axis` (max-subtracted); rows sum to one.
template <class S>
TensorT<S> softmax(const TensorT<S>& x, int axis = -1) {
    const int r = x.rank();
    const int ax = axis < 0 ? axis + r : axis;
    if (ax < 0 || ax >= r) throw std::invalid_argument("softmax: axis out of range");
    std::vector<S> out_data(x.size());
    const S* px = x.data();
    axis_iterate(x.shape(), ax, [&](std::size_t base, std::size_t len, std::size_t stride) {
        S mx = px[base];
        for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, px[base + i * stride]);
        S denom = 0;
        for (std::size_t i = 0; i < len; ++i) {
            const S e = std::exp(px[base + i * stride] - mx);
            out_data[base + i * stride] = e;
            denom += e;
        }
        for (std::size_t i = 0; i < len; ++i) out_data[base + i * stride] /= denom;
    });
    auto out = detail::make_result(x.shape(), std::move(out_data));
    auto nx = x.node();
    const Shape xs = x.shape();
    detail::attach(out, {nx}, [nx, xs, ax](TensorNode<S>& self) {
        if (!nx->tracked) return;
        nx->ensure_grad();
        const S* g = self.grad.data();
        const S* y = self.data.data();
        S* gx = nx->grad.data();
        axis_iterate(xs, ax, [&](std::size_t base, std::size_t len, std::size_t stride) {
            S dot = 0;
            for (std::size_t i = 0; i < len; ++i) dot += g[base + i * stride] * y[base + i * stride];
            for (std::size_t i = 0; i < len; ++i) {
                const std::size_t o = base + i * stride;
                gx[o] += y[o] * (g[o] - dot);
            }
        });
    });
    return out;
}

// ---- layer norm -----------------------------------------------------------

// Normalizes the last axis to zero mean / unit variance, then applies an
// affine gain and bias. Composed from primitive ops so the gradient follows
// from the graph.
template <class S>
TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& gain, const TensorT<S>& bias,
                      S eps = static_cast<S>(1e-5)) {
    const int d = x.shape().back();
    if (gain.size() != static_cast<std::size_t>(d) || bias.size() != static_cast<std::size_t>(d))
        throw std::invalid_argument("layer_norm: gain/bias must match last extent " + std::to_string(d));
    auto mu = mean(x, -1, /*keepdim=*/true);
    auto xc = sub(x, mu);
    auto var = mean(square(xc), -1, /*keepdim=*/true);
    auto denom = sqrt(add_const(var, eps));
    auto normed = div(xc, denom);
    return add(mul(normed, gain), bias);
}

// ---- backward -------------------------------------------------------------

// Reverse-mode sweep from a scalar loss. Interior gradients are cleared per
// call; leaf gradients accumulate until zero_grad, so repeated calls without a
// reset sum their contributions.
template <class S>
void backward(const TensorT<S>& loss) {
    if (!loss.defined()) throw std::invalid_argument("backward: undefined tensor");
    if (loss.size() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    auto root = loss.node();
    if (!root->tracked) return;

    std::vector<TensorNode<S>*> order;
    std::unordered_map<TensorNode<S>*, int> state;
    std::vector<TensorNode<S>*> stack{root.get()};
    while (!stack.empty()) {
        TensorNode<S>* nd = stack.back();
        int& st = state[nd];
        if (st == 0) {
            st = 1;
            for (auto& p : nd->parents)
                if (p->tracked && state.find(p.get()) == state.end()) stack.push_back(p.get());
        } else {
            stack.pop_back();
            if (st == 1) {
                st = 2;
                order.push_back(nd);
            }
        }
    }
    for (TensorNode<S>* nd : order) {
        nd->ensure_grad();
        if (!nd->parents.empty()) std::fill(nd->grad.begin(), nd->grad.end(), S(0));
    }
    root->grad[0] += S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backprop) (*it)->backprop(**it);
}

// ---- operators ------------------------------------------------------------

template <class S>
TensorT<S> operator+(const TensorT<S>& a, const TensorT<S>& b) {
    return add(a, b);
}
template <class S>
TensorT<S> operator-(const TensorT<S>& a, const TensorT<S>& b) {
    return sub(a, b);
}
template <class S>
TensorT<S> operator*(const TensorT<S>& a, const TensorT<S>& b) {
    return mul(a, b);
}
template <class S>
TensorT<S> operator/(const TensorT<S>& a, const TensorT<S>& b) {
    return div(a, b);
}
template <class S>
TensorT<S> operator-(const TensorT<S>& x) {
    return neg(x);
}

}  // namespace dedit
