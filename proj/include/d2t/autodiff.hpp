#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <random>
#include <vector>

#include "d2t/errors.hpp"
#include "d2t/params.hpp"
#include "d2t/tensor.hpp"
#include "d2t/util.hpp"

namespace d2t {

template <typename T>
class Graph;

/// Handle to a node inside one Graph. Only valid for the graph that made it.
template <typename T>
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

/// Dynamic tape for reverse-mode differentiation. A graph is built forward by
/// one thread, then backward() walks the tape in reverse. Values are checked
/// for finiteness as they are produced.
template <typename T>
class Graph {
  public:
    explicit Graph(bool training = false, std::mt19937_64* rng = nullptr)
        : training_(training), rng_(rng) {}

    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool training() const { return training_; }
    std::size_t size() const { return nodes_.size(); }

    const Tensor<T>& value(Var<T> v) const { return node(v).value; }
    const Tensor<T>& grad(Var<T> v) const { return node(v).grad; }

    // ---- leaves ----

    Var<T> input(Tensor<T> t) {
        return make_node("input", std::move(t), {});
    }

    Var<T> zeros(std::vector<std::size_t> shape) {
        return make_node("zeros", Tensor<T>::zeros(std::move(shape)), {});
    }

    Var<T> constant(T v) { return input(Tensor<T>::scalar(v)); }

    /// Leaf bound to a parameter store entry; gradients flow back into the
    /// entry. Repeated requests for the same entry return the same node so
    /// e.g. an embedding matrix used at every timestep accumulates correctly.
    Var<T> param(ParamEntry<T>& entry) {
        auto it = param_cache_.find(&entry);
        if (it != param_cache_.end()) return Var<T>{it->second};
        Var<T> v = make_node("param", entry.value, {});
        ParamEntry<T>* e = &entry;
        int id = v.id;
        nodes_[id].backward = [this, e, id] {
            const Tensor<T>& g = nodes_[id].grad;
            for (std::size_t i = 0; i < g.numel(); ++i) e->grad.data[i] += g.data[i];
        };
        param_cache_.emplace(&entry, v.id);
        return v;
    }

    // ---- elementwise ----

    Var<T> add(Var<T> a, Var<T> b) {
        require_same_shape(value(a), value(b), "add");
        Tensor<T> out = value(a);
        for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += value(b).data[i];
        Var<T> v = make_node("add", std::move(out), {a.id, b.id});
        set_backward(v, [this, v, a, b] {
            accumulate(a, nodes_[v.id].grad.data);
            accumulate(b, nodes_[v.id].grad.data);
        });
        return v;
    }

    Var<T> sub(Var<T> a, Var<T> b) {
        require_same_shape(value(a), value(b), "sub");
        Tensor<T> out = value(a);
        for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] -= value(b).data[i];
        Var<T> v = make_node("sub", std::move(out), {a.id, b.id});
        set_backward(v, [this, v, a, b] {
            const auto& g = nodes_[v.id].grad.data;
            auto& ga = nodes_[a.id].grad.data;
            auto& gb = nodes_[b.id].grad.data;
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga[i] += g[i];
                gb[i] -= g[i];
            }
        });
        return v;
    }

    Var<T> mul(Var<T> a, Var<T> b) {
        require_same_shape(value(a), value(b), "mul");
        Tensor<T> out = value(a);
        for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] *= value(b).data[i];
        Var<T> v = make_node("mul", std::move(out), {a.id, b.id});
        set_backward(v, [this, v, a, b] {
            const auto& g = nodes_[v.id].grad.data;
            const auto& va = nodes_[a.id].value.data;
            const auto& vb = nodes_[b.id].value.data;
            auto& ga = nodes_[a.id].grad.data;
            auto& gb = nodes_[b.id].grad.data;
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga[i] += g[i] * vb[i];
                gb[i] += g[i] * va[i];
            }
        });
        return v;
    }

    /// y = scale * x + shift, elementwise with compile-time constants.
    Var<T> affine(Var<T> x, T scale, T shift) {
        Tensor<T> out = value(x);
        for (T& e : out.data) e = scale * e + shift;
        Var<T> v = make_node("affine", std::move(out), {x.id});
        set_backward(v, [this, v, x, scale] {
            const auto& g = nodes_[v.id].grad.data;
            auto& gx = nodes_[x.id].grad.data;
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += scale * g[i];
        });
        return v;
    }

    /// y = x * s where s is a scalar node (broadcast).
    Var<T> scale_by(Var<T> x, Var<T> s) {
        if (!value(s).is_scalar()) throw ShapeMismatch("scale_by: s must be scalar");
        const T sv = value(s).data[0];
        Tensor<T> out = value(x);
        for (T& e : out.data) e *= sv;
        Var<T> v = make_node("scale_by", std::move(out), {x.id, s.id});
        set_backward(v, [this, v, x, s, sv] {
            const auto& g = nodes_[v.id].grad.data;
            const auto& vx = nodes_[x.id].value.data;
            auto& gx = nodes_[x.id].grad.data;
            T acc = T(0);
            for (std::size_t i = 0; i < g.size(); ++i) {
                gx[i] += g[i] * sv;
                acc += g[i] * vx[i];
            }
            nodes_[s.id].grad.data[0] += acc;
        });
        return v;
    }

    Var<T> tanh(Var<T> x) {
        Tensor<T> out = value(x);
        for (T& e : out.data) e = std::tanh(e);
        Var<T> v = make_node("tanh", std::move(out), {x.id});
        set_backward(v, [this, v, x] {
            const auto& g = nodes_[v.id].grad.data;
            const auto& y = nodes_[v.id].value.data;
            auto& gx = nodes_[x.id].grad.data;
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (T(1) - y[i] * y[i]);
        });
        return v;
    }

    Var<T> sigmoid(Var<T> x) {
        Tensor<T> out = value(x);
        for (T& e : out.data) e = sigmoid_scalar(e);
        Var<T> v = make_node("sigmoid", std::move(out), {x.id});
        set_backward(v, [this, v, x] {
            const auto& g = nodes_[v.id].grad.data;
            const auto& y = nodes_[v.id].value.data;
            auto& gx = nodes_[x.id].grad.data;
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (T(1) - y[i]);
        });
        return v;
    }

    /// log with the global epsilon guard: log(max(x, kLogEps)). The clamped
    /// region has zero derivative, consistent with finite differences.
    Var<T> log(Var<T> x) {
        const T eps = static_cast<T>(kLogEps);
        Tensor<T> out = value(x);
        for (T& e : out.data) e = std::log(std::max(e, eps));
        Var<T> v = make_node("log", std::move(out), {x.id});
        set_backward(v, [this, v, x, eps] {
            const auto& g = nodes_[v.id].grad.data;
            const auto& vx = nodes_[x.id].value.data;
            auto& gx = nodes_[x.id].grad.data;
            for (std::size_t i = 0; i < g.size(); ++i) {
                if (vx[i] > eps) gx[i] += g[i] / vx[i];
            }
        });
        return v;
    }

    /// log(sigmoid(x)), numerically stable for large |x|.
    Var<T> logsigmoid(Var<T> x) {
        Tensor<T> out = value(x);
        for (T& e : out.data) {
            const T m = std::min(e, T(0));
            e = m - std::log1p(std::exp(-std::abs(e)));
        }
        Var<T> v = make_node("logsigmoid", std::move(out), {x.id});
        set_backward(v, [this, v, x] {
            const auto& g = nodes_[v.id].grad.data;
            const auto& y = nodes_[v.id].value.data;
            auto& gx = nodes_[x.id].grad.data;
            // d/dx log sigma(x) = 1 - sigma(x) = 1 - exp(y)
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (T(1) - std::exp(y[i]));
        });
        return v;
    }

    /// Inverted dropout; identity (same node) when not training or p == 0.
    Var<T> dropout(Var<T> x, double p) {
        if (p < 0.0 || p >= 1.0) throw ConfigError("dropout: p must be in [0,1)");
        if (!training_ || p == 0.0) return x;
        if (rng_ == nullptr) throw ConfigError("dropout: training graph has no rng");
        const T inv_keep = static_cast<T>(1.0 / (1.0 - p));
        Tensor<T> mask(value(x).shape);
        std::bernoulli_distribution keep(1.0 - p);
        for (T& m : mask.data) m = keep(*rng_) ? inv_keep : T(0);
        Tensor<T> out = value(x);
        for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] *= mask.data[i];
        Var<T> v = make_node("dropout", std::move(out), {x.id});
        set_backward(v, [this, v, x, mask = std::move(mask)] {
            const auto& g = nodes_[v.id].grad.data;
            auto& gx = nodes_[x.id].grad.data;
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask.data[i];
        });
        return v;
    }

    // ---- reductions and vector ops ----

    Var<T> sum(Var<T> x) {
        T acc = T(0);
        for (const T& e : value(x).data) acc += e;
        Var<T> v = make_node("sum", Tensor<T>::scalar(acc), {x.id});
        set_backward(v, [this, v, x] {
            const T g = nodes_[v.id].grad.data[0];
            for (T& e : nodes_[x.id].grad.data) e += g;
        });
        return v;
    }

    Var<T> mean(Var<T> x) {
        const std::size_t n = value(x).numel();
        if (n == 0) throw ShapeMismatch("mean: empty tensor");
        T acc = T(0);
        for (const T& e : value(x).data) acc += e;
        Var<T> v = make_node("mean", Tensor<T>::scalar(acc / static_cast<T>(n)), {x.id});
        set_backward(v, [this, v, x, n] {
            const T g = nodes_[v.id].grad.data[0] / static_cast<T>(n);
            for (T& e : nodes_[x.id].grad.data) e += g;
        });
        return v;
    }

    Var<T> dot(Var<T> a, Var<T> b) {
        require_same_shape(value(a), value(b), "dot");
        T acc = T(0);
        for (std::size_t i = 0; i < value(a).numel(); ++i) {
            acc += value(a).data[i] * value(b).data[i];
        }
        Var<T> v = make_node("dot", Tensor<T>::scalar(acc), {a.id, b.id});
        set_backward(v, [this, v, a, b] {
            const T g = nodes_[v.id].grad.data[0];
            const auto& va = nodes_[a.id].value.data;
            const auto& vb = nodes_[b.id].value.data;
            auto& ga = nodes_[a.id].grad.data;
            auto& gb = nodes_[b.id].grad.data;
            for (std::size_t i = 0; i < va.size(); ++i) {
                ga[i] += g * vb[i];
                gb[i] += g * va[i];
            }
        });
        return v;
    }

    /// Softmax over the last axis; accepts 1-D vectors or 2-D (row-wise).
    Var<T> softmax(Var<T> x) {
        const Tensor<T>& in = value(x);
        if (in.ndim() > 2) throw ShapeMismatch("softmax: rank must be 1 or 2");
        Tensor<T> out = in;
        const std::size_t cols = in.ndim() == 2 ? in.cols() : in.numel();
        const std::size_t rows = out.numel() / cols;
        for (std::size_t r = 0; r < rows; ++r) {
            softmax_row(out.data.data() + r * cols, cols);
        }
        Var<T> v = make_node("softmax", std::move(out), {x.id});
        set_backward(v, [this, v, x, rows, cols] {
            const auto& g = nodes_[v.id].grad.data;
            const auto& y = nodes_[v.id].value.data;
            auto& gx = nodes_[x.id].grad.data;
            for (std::size_t r = 0; r < rows; ++r) {
                const std::size_t off = r * cols;
                T inner = T(0);
                for (std::size_t i = 0; i < cols; ++i) inner += g[off + i] * y[off + i];
                for (std::size_t i = 0; i < cols; ++i) {
                    gx[off + i] += y[off + i] * (g[off + i] - inner);
                }
            }
        });
        return v;
    }

    /// Fused log-softmax (max-subtracted), 1-D.
    Var<T> log_softmax(Var<T> x) {
        const Tensor<T>& in = value(x);
        if (in.ndim() != 1) throw ShapeMismatch("log_softmax: expects 1-D");
        Tensor<T> out = in;
        const T mx = *std::max_element(out.data.begin(), out.data.end());
        T acc = T(0);
        for (const T& e : out.data) acc += std::exp(e - mx);
        const T lse = mx + std::log(acc);
        for (T& e : out.data) e -= lse;
        Var<T> v = make_node("log_softmax", std::move(out), {x.id});
        set_backward(v, [this, v, x] {
            const auto& g = nodes_[v.id].grad.data;
            const auto& y = nodes_[v.id].value.data;
            auto& gx = nodes_[x.id].grad.data;
            T gsum = T(0);
            for (const T& e : g) gsum += e;
            for (std::size_t i = 0; i < g.size(); ++i) {
                gx[i] += g[i] - std::exp(y[i]) * gsum;
            }
        });
        return v;
    }

    /// log sum exp of a 1-D vector, as a scalar.
    Var<T> logsumexp(Var<T> x) {
        const Tensor<T>& in = value(x);
        if (in.ndim() != 1 || in.numel() == 0) throw ShapeMismatch("logsumexp: expects non-empty 1-D");
        const T mx = *std::max_element(in.data.begin(), in.data.end());
        T acc = T(0);
        for (const T& e : in.data) acc += std::exp(e - mx);
        const T lse = mx + std::log(acc);
        Var<T> v = make_node("logsumexp", Tensor<T>::scalar(lse), {x.id});
        set_backward(v, [this, v, x, lse] {
            const T g = nodes_[v.id].grad.data[0];
            const auto& vx = nodes_[x.id].value.data;
            auto& gx = nodes_[x.id].grad.data;
            for (std::size_t i = 0; i < vx.size(); ++i) {
                gx[i] += g * std::exp(vx[i] - lse);
            }
        });
        return v;
    }

    // ---- shape ops ----

    Var<T> concat(const std::vector<Var<T>>& parts) {
        if (parts.empty()) throw ShapeMismatch("concat: no inputs");
        std::size_t total = 0;
        for (Var<T> p : parts) {
            if (value(p).ndim() != 1) throw ShapeMismatch("concat: expects 1-D parts");
            total += value(p).numel();
        }
        Tensor<T> out({total});
        std::size_t off = 0;
        std::vector<int> ids;
        for (Var<T> p : parts) {
            const auto& d = value(p).data;
            std::copy(d.begin(), d.end(), out.data.begin() + off);
            off += d.size();
            ids.push_back(p.id);
        }
        Var<T> v = make_node("concat", std::move(out), ids);
        set_backward(v, [this, v, parts = parts] {
            const auto& g = nodes_[v.id].grad.data;
            std::size_t off2 = 0;
            for (Var<T> p : parts) {
                auto& gp = nodes_[p.id].grad.data;
                for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[off2 + i];
                off2 += gp.size();
            }
        });
        return v;
    }

    Var<T> slice(Var<T> x, std::size_t start, std::size_t len) {
        const Tensor<T>& in = value(x);
        if (in.ndim() != 1) throw ShapeMismatch("slice: expects 1-D");
        if (start + len > in.numel()) throw ShapeMismatch("slice: out of range");
        Tensor<T> out({len});
        std::copy(in.data.begin() + start, in.data.begin() + start + len, out.data.begin());
        Var<T> v = make_node("slice", std::move(out), {x.id});
        set_backward(v, [this, v, x, start, len] {
            const auto& g = nodes_[v.id].grad.data;
            auto& gx = nodes_[x.id].grad.data;
            for (std::size_t i = 0; i < len; ++i) gx[start + i] += g[i];
        });
        return v;
    }

    Var<T> pick(Var<T> x, std::size_t index) {
        const Tensor<T>& in = value(x);
        if (in.ndim() != 1) throw ShapeMismatch("pick: expects 1-D");
        if (index >= in.numel()) throw ShapeMismatch("pick: out of range");
        Var<T> v = make_node("pick", Tensor<T>::scalar(in.data[index]), {x.id});
        set_backward(v, [this, v, x, index] {
            nodes_[x.id].grad.data[index] += nodes_[v.id].grad.data[0];
        });
        return v;
    }

    Var<T> gather(Var<T> x, std::vector<std::size_t> indices) {
        const Tensor<T>& in = value(x);
        if (in.ndim() != 1) throw ShapeMismatch("gather: expects 1-D");
        Tensor<T> out({indices.size()});
        for (std::size_t i = 0; i < indices.size(); ++i) {
            if (indices[i] >= in.numel()) throw ShapeMismatch("gather: index out of range");
            out.data[i] = in.data[indices[i]];
        }
        Var<T> v = make_node("gather", std::move(out), {x.id});
        set_backward(v, [this, v, x, indices = std::move(indices)] {
            const auto& g = nodes_[v.id].grad.data;
            auto& gx = nodes_[x.id].grad.data;
            for (std::size_t i = 0; i < indices.size(); ++i) gx[indices[i]] += g[i];
        });
        return v;
    }

    /// y[slot[i]] += x[i]; used to project per-position attention onto an
    /// extended vocabulary.
    Var<T> scatter_sum(Var<T> x, std::vector<std::size_t> slots, std::size_t out_size) {
        const Tensor<T>& in = value(x);
        if (in.ndim() != 1) throw ShapeMismatch("scatter_sum: expects 1-D");
        if (slots.size() != in.numel()) throw ShapeMismatch("scatter_sum: slot count mismatch");
        Tensor<T> out({out_size});
        for (std::size_t i = 0; i < slots.size(); ++i) {
            if (slots[i] >= out_size) throw ShapeMismatch("scatter_sum: slot out of range");
            out.data[slots[i]] += in.data[i];
        }
        Var<T> v = make_node("scatter_sum", std::move(out), {x.id});
        set_backward(v, [this, v, x, slots = std::move(slots)] {
            const auto& g = nodes_[v.id].grad.data;
            auto& gx = nodes_[x.id].grad.data;
            for (std::size_t i = 0; i < slots.size(); ++i) gx[i] += g[slots[i]];
        });
        return v;
    }

    /// Zero-extend a 1-D vector to out_size.
    Var<T> pad_to(Var<T> x, std::size_t out_size) {
        const Tensor<T>& in = value(x);
        if (in.ndim() != 1) throw ShapeMismatch("pad_to: expects 1-D");
        if (out_size < in.numel()) throw ShapeMismatch("pad_to: target smaller than input");
        Tensor<T> out({out_size});
        std::copy(in.data.begin(), in.data.end(), out.data.begin());
        Var<T> v = make_node("pad_to", std::move(out), {x.id});
        set_backward(v, [this, v, x] {
            const auto& g = nodes_[v.id].grad.data;
            auto& gx = nodes_[x.id].grad.data;
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
        });
        return v;
    }

    /// Row of a 2-D matrix (embedding lookup).
    Var<T> lookup(Var<T> m, std::size_t row) {
        const Tensor<T>& in = value(m);
        if (in.ndim() != 2) throw ShapeMismatch("lookup: expects 2-D");
        if (row >= in.rows()) throw ShapeMismatch("lookup: row out of range");
        const std::size_t c = in.cols();
        Tensor<T> out({c});
        std::copy(in.data.begin() + row * c, in.data.begin() + (row + 1) * c, out.data.begin());
        Var<T> v = make_node("lookup", std::move(out), {m.id});
        set_backward(v, [this, v, m, row, c] {
            const auto& g = nodes_[v.id].grad.data;
            auto& gm = nodes_[m.id].grad.data;
            for (std::size_t i = 0; i < c; ++i) gm[row * c + i] += g[i];
        });
        return v;
    }

    /// Stack 1-D vectors of equal length into a [m, len] matrix.
    Var<T> stack_rows(const std::vector<Var<T>>& rows) {
        if (rows.empty()) throw ShapeMismatch("stack_rows: no inputs");
        const std::size_t c = value(rows[0]).numel();
        Tensor<T> out({rows.size(), c});
        std::vector<int> ids;
        for (std::size_t r = 0; r < rows.size(); ++r) {
            const Tensor<T>& in = value(rows[r]);
            if (in.ndim() != 1 || in.numel() != c) throw ShapeMismatch("stack_rows: ragged input");
            std::copy(in.data.begin(), in.data.end(), out.data.begin() + r * c);
            ids.push_back(rows[r].id);
        }
        Var<T> v = make_node("stack_rows", std::move(out), ids);
        set_backward(v, [this, v, rows = rows, c] {
            const auto& g = nodes_[v.id].grad.data;
            for (std::size_t r = 0; r < rows.size(); ++r) {
                auto& gr = nodes_[rows[r].id].grad.data;
                for (std::size_t i = 0; i < c; ++i) gr[i] += g[r * c + i];
            }
        });
        return v;
    }

    /// M + v broadcast over rows.
    Var<T> add_rowvec(Var<T> m, Var<T> x) {
        const Tensor<T>& mm = value(m);
        const Tensor<T>& vv = value(x);
        if (mm.ndim() != 2 || vv.ndim() != 1 || vv.numel() != mm.cols()) {
            throw ShapeMismatch("add_rowvec: incompatible shapes");
        }
        Tensor<T> out = mm;
        const std::size_t c = mm.cols();
        for (std::size_t r = 0; r < mm.rows(); ++r) {
            for (std::size_t i = 0; i < c; ++i) out.data[r * c + i] += vv.data[i];
        }
        Var<T> v = make_node("add_rowvec", std::move(out), {m.id, x.id});
        set_backward(v, [this, v, m, x, c] {
            const auto& g = nodes_[v.id].grad.data;
            auto& gm = nodes_[m.id].grad.data;
            auto& gx = nodes_[x.id].grad.data;
            for (std::size_t i = 0; i < g.size(); ++i) gm[i] += g[i];
            const std::size_t rows = g.size() / c;
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t i = 0; i < c; ++i) gx[i] += g[r * c + i];
            }
        });
        return v;
    }

    /// op(A) * op(B). A must be 2-D. B may be 2-D or a 1-D vector (then the
    /// result is 1-D and trans_b is rejected).
    Var<T> matmul(Var<T> a, Var<T> b, bool trans_a = false, bool trans_b = false) {
        const Tensor<T>& A = value(a);
        const Tensor<T>& B = value(b);
        if (A.ndim() != 2) throw ShapeMismatch("matmul: lhs must be 2-D");
        const std::size_t r = trans_a ? A.cols() : A.rows();
        const std::size_t k = trans_a ? A.rows() : A.cols();

        if (B.ndim() == 1) {
            if (trans_b) throw ShapeMismatch("matmul: trans_b with vector rhs");
            if (B.numel() != k) {
                throw ShapeMismatch("matmul: " + A.shape_str() + (trans_a ? "^T" : "") +
                                    " x " + B.shape_str());
            }
            Tensor<T> out({r});
            for (std::size_t i = 0; i < r; ++i) {
                T acc = T(0);
                for (std::size_t j = 0; j < k; ++j) {
                    acc += (trans_a ? A.at(j, i) : A.at(i, j)) * B.data[j];
                }
                out.data[i] = acc;
            }
            Var<T> v = make_node("matmul", std::move(out), {a.id, b.id});
            set_backward(v, [this, v, a, b, trans_a, r, k] {
                const auto& g = nodes_[v.id].grad.data;
                const Tensor<T>& Av = nodes_[a.id].value;
                const Tensor<T>& Bv = nodes_[b.id].value;
                Tensor<T>& Ag = nodes_[a.id].grad;
                Tensor<T>& Bg = nodes_[b.id].grad;
                for (std::size_t i = 0; i < r; ++i) {
                    for (std::size_t j = 0; j < k; ++j) {
                        if (trans_a) {
                            Ag.at(j, i) += g[i] * Bv.data[j];
                        } else {
                            Ag.at(i, j) += g[i] * Bv.data[j];
                        }
                        Bg.data[j] += (trans_a ? Av.at(j, i) : Av.at(i, j)) * g[i];
                    }
                }
            });
            return v;
        }

        if (B.ndim() != 2) throw ShapeMismatch("matmul: rhs must be 1-D or 2-D");
        const std::size_t k2 = trans_b ? B.cols() : B.rows();
        const std::size_t c = trans_b ? B.rows() : B.cols();
        if (k2 != k) {
            throw ShapeMismatch("matmul: " + A.shape_str() + (trans_a ? "^T" : "") + " x " +
                                B.shape_str() + (trans_b ? "^T" : ""));
        }
        Tensor<T> out({r, c});
        for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < c; ++j) {
                T acc = T(0);
                for (std::size_t kk = 0; kk < k; ++kk) {
                    const T av = trans_a ? A.at(kk, i) : A.at(i, kk);
                    const T bv = trans_b ? B.at(j, kk) : B.at(kk, j);
                    acc += av * bv;
                }
                out.at(i, j) = acc;
            }
        }
        Var<T> v = make_node("matmul", std::move(out), {a.id, b.id});
        set_backward(v, [this, v, a, b, trans_a, trans_b, r, c, k] {
            const Tensor<T>& G = nodes_[v.id].grad;
            const Tensor<T>& Av = nodes_[a.id].value;
            const Tensor<T>& Bv = nodes_[b.id].value;
            Tensor<T>& Ag = nodes_[a.id].grad;
            Tensor<T>& Bg = nodes_[b.id].grad;
            for (std::size_t i = 0; i < r; ++i) {
                for (std::size_t j = 0; j < c; ++j) {
                    const T g = G.at(i, j);
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        const T av = trans_a ? Av.at(kk, i) : Av.at(i, kk);
                        const T bv = trans_b ? Bv.at(j, kk) : Bv.at(kk, j);
                        if (trans_a) {
                            Ag.at(kk, i) += g * bv;
                        } else {
                            Ag.at(i, kk) += g * bv;
                        }
                        if (trans_b) {
                            Bg.at(j, kk) += g * av;
                        } else {
                            Bg.at(kk, j) += g * av;
                        }
                    }
                }
            }
        });
        return v;
    }

    // ---- reverse pass ----

    /// Accumulates d(loss)/d(param) into every reachable parameter entry.
    /// loss must be scalar. Call once per graph.
    void backward(Var<T> loss) {
        if (!value(loss).is_scalar()) throw ShapeMismatch("backward: loss must be scalar");
        nodes_[loss.id].grad.data[0] = T(1);
        for (int i = loss.id; i >= 0; --i) {
            if (nodes_[i].backward) nodes_[i].backward();
        }
        for (const auto& [entry, id] : param_cache_) {
            if (!entry->grad.all_finite()) {
                throw NonFiniteValue("non-finite gradient for parameter " + entry->name);
            }
        }
    }

  private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        std::vector<int> parents;
        std::function<void()> backward;
    };

    const Node& node(Var<T> v) const {
        if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
            throw ShapeMismatch("invalid graph node handle");
        }
        return nodes_[static_cast<std::size_t>(v.id)];
    }

    Var<T> make_node(const char* op, Tensor<T> val, std::vector<int> parents) {
        if (!val.all_finite()) {
            throw NonFiniteValue(std::string("non-finite value produced by ") + op);
        }
        Node n;
        n.grad = Tensor<T>::zeros(val.shape);
        n.value = std::move(val);
        n.parents = std::move(parents);
        nodes_.push_back(std::move(n));
        return Var<T>{static_cast<int>(nodes_.size()) - 1};
    }

    template <typename F>
    void set_backward(Var<T> v, F&& f) {
        nodes_[v.id].backward = std::forward<F>(f);
    }

    void accumulate(Var<T> target, const std::vector<T>& g) {
        auto& gt = nodes_[target.id].grad.data;
        for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
    }

    static T sigmoid_scalar(T x) {
        if (x >= T(0)) {
            const T e = std::exp(-x);
            return T(1) / (T(1) + e);
        }
        const T e = std::exp(x);
        return e / (T(1) + e);
    }

    static void softmax_row(T* row, std::size_t n) {
        const T mx = *std::max_element(row, row + n);
        T acc = T(0);
        for (std::size_t i = 0; i < n; ++i) {
            row[i] = std::exp(row[i] - mx);
            acc += row[i];
        }
        for (std::size_t i = 0; i < n; ++i) row[i] /= acc;
    }

    std::deque<Node> nodes_;
    std::map<const ParamEntry<T>*, int> param_cache_;
    bool training_;
    std::mt19937_64* rng_;
};

// ---------------------------------------------------------------------------
// Numerical gradient checking. build_loss is invoked once per function
// evaluation with a fresh graph whose rng is reseeded identically, so
// stochastic layers (dropout) see the same masks on every evaluation.
// ---------------------------------------------------------------------------

template <typename T, typename BuildLoss>
double grad_check(ParamStore<T>& store, BuildLoss&& build_loss, double eps,
                  std::size_t max_coords_per_param = 24, std::uint64_t seed = 1234,
                  bool train_mode = false) {
    static_assert(std::is_floating_point_v<T>);
    if (eps <= 0) throw ConfigError("grad_check: eps must be positive");

    auto evaluate = [&]() -> double {
        std::mt19937_64 rng(seed);
        Graph<T> g(train_mode, &rng);
        Var<T> loss = build_loss(g);
        return static_cast<double>(g.value(loss).item());
    };

    // Analytic pass.
    store.zero_grads();
    std::map<std::string, Tensor<T>> analytic;
    {
        std::mt19937_64 rng(seed);
        Graph<T> g(train_mode, &rng);
        Var<T> loss = build_loss(g);
        g.backward(loss);
    }
    for (const auto& [name, entry] : store) analytic.emplace(name, entry->grad);

    std::mt19937_64 pick_rng(seed ^ 0x9e3779b97f4a7c15ull);
    double max_rel_err = 0.0;
    for (auto& [name, entry] : store) {
        const std::size_t n = entry->value.numel();
        std::vector<std::size_t> coords;
        if (n <= max_coords_per_param) {
            coords.resize(n);
            for (std::size_t i = 0; i < n; ++i) coords[i] = i;
        } else {
            std::uniform_int_distribution<std::size_t> dist(0, n - 1);
            for (std::size_t i = 0; i < max_coords_per_param; ++i) coords.push_back(dist(pick_rng));
        }
        for (std::size_t c : coords) {
            const T saved = entry->value.data[c];
            entry->value.data[c] = saved + static_cast<T>(eps);
            const double f_plus = evaluate();
            entry->value.data[c] = saved - static_cast<T>(eps);
            const double f_minus = evaluate();
            entry->value.data[c] = saved;
            const double numeric = (f_plus - f_minus) / (2.0 * eps);
            const double a = static_cast<double>(analytic.at(name).data[c]);
            const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
            max_rel_err = std::max(max_rel_err, std::abs(a - numeric) / denom);
        }
    }
    return max_rel_err;
}

} // namespace d2t
