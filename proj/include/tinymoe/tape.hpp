// Copyright (c) 2026 tinymoe contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <utility>
#include <vector>

#include "tinymoe/common.hpp"
#include "tinymoe/tensor.hpp"

namespace tinymoe {

/// Handle to a tensor recorded on a Tape.
struct TensorId {
    uint32_t v = UINT32_MAX;
    bool valid() const { return v != UINT32_MAX; }
};

namespace kernels {

/// c[m,n] += a[m,k] * b[k,n]
template <typename T>
void matmul_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (int64_t kk = 0; kk < k; ++kk) {
            const T aik = arow[kk];
            if (aik == T(0)) continue;
            const T* brow = b + kk * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
        }
    }
}

/// da[m,k] += dc[m,n] * b[k,n]^T
template <typename T>
void matmul_acc_bt(const T* dc, const T* b, T* da, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const T* dcrow = dc + i * n;
        T* darow = da + i * k;
        for (int64_t kk = 0; kk < k; ++kk) {
            const T* brow = b + kk * n;
            T sum = 0;
            for (int64_t j = 0; j < n; ++j) sum += dcrow[j] * brow[j];
            darow[kk] += sum;
        }
    }
}

/// db[k,n] += a[m,k]^T * dc[m,n]
template <typename T>
void matmul_acc_at(const T* a, const T* dc, T* db, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        const T* dcrow = dc + i * n;
        for (int64_t kk = 0; kk < k; ++kk) {
            const T aik = arow[kk];
            if (aik == T(0)) continue;
            T* dbrow = db + kk * n;
            for (int64_t j = 0; j < n; ++j) dbrow[j] += aik * dcrow[j];
        }
    }
}

/// Stable softmax of one row; out may alias in.
template <typename T>
void softmax_row(const T* in, T* out, int64_t n) {
    T mx = in[0];
    for (int64_t i = 1; i < n; ++i) mx = std::max(mx, in[i]);
    double sum = 0;
    for (int64_t i = 0; i < n; ++i) {
        double e = std::exp(double(in[i] - mx));
        out[i] = T(e);
        sum += e;
    }
    const double inv = 1.0 / sum;
    for (int64_t i = 0; i < n; ++i) out[i] = T(double(out[i]) * inv);
}

/// Stable log-sum-exp of one row.
template <typename T>
double logsumexp_row(const T* in, int64_t n) {
    T mx = in[0];
    for (int64_t i = 1; i < n; ++i) mx = std::max(mx, in[i]);
    double sum = 0;
    for (int64_t i = 0; i < n; ++i) sum += std::exp(double(in[i] - mx));
    return double(mx) + std::log(sum);
}

} // namespace kernels

/// Indices of the k largest entries of `x`, descending by value, ties broken
/// by lowest index (so equal values list in ascending index order).
template <typename T>
std::vector<int32_t> topk_indices(const T* x, int64_t n, int64_t k) {
    check(k >= 1 && k <= n, "topk: k out of range");
    std::vector<int32_t> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](int32_t a, int32_t b) { return x[a] > x[b]; });
    idx.resize(size_t(k));
    return idx;
}

template <typename T>
std::pair<std::vector<int32_t>, std::vector<T>> topk(const Tensor<T>& x, int64_t k) {
    check<ShapeError>(x.rank() == 1, "topk expects a vector, got " + shape_str(x.shape));
    auto idx = topk_indices(x.data.data(), x.size(), k);
    std::vector<T> vals(idx.size());
    for (size_t i = 0; i < idx.size(); ++i) vals[i] = x.data[size_t(idx[i])];
    return {std::move(idx), std::move(vals)};
}

/// Reverse-mode autodiff tape. Operations are recorded in order; backward
/// traverses in exact reverse and sums gradient contributions. A tape and
/// its tensors belong to one thread; distinct tapes may run in parallel.
template <typename T>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    TensorId leaf(Tensor<T> value, bool requires_grad) {
        return push(std::move(value), requires_grad, nullptr);
    }

    TensorId constant(Tensor<T> value) { return leaf(std::move(value), false); }

    const Tensor<T>& value(TensorId id) const { return nodes_[id.v].val; }
    std::vector<T>& grad(TensorId id) { return nodes_[id.v].val.grad; }
    bool requires_grad(TensorId id) const { return nodes_[id.v].rg; }
    size_t size() const { return nodes_.size(); }

    /// Seeds d(loss)/d(loss) = 1 and propagates to all recorded inputs.
    void backward(TensorId loss) {
        check<ShapeError>(value(loss).size() == 1, "backward target must be scalar");
        check(nodes_[loss.v].rg, "backward target does not require grad");
        nodes_[loss.v].val.grad[0] = T(1);
        for (size_t i = nodes_.size(); i-- > 0;) {
            if (nodes_[i].back && nodes_[i].rg) nodes_[i].back(*this);
        }
    }

    // --- elementwise -------------------------------------------------------

    TensorId add(TensorId a, TensorId b) {
        const auto& ta = value(a);
        const auto& tb = value(b);
        check<ShapeError>(ta.shape == tb.shape,
                          "add shape mismatch " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
        Tensor<T> out(ta.shape);
        for (int64_t i = 0; i < ta.size(); ++i) out.data[i] = ta.data[i] + tb.data[i];
        return push(std::move(out), rg(a) || rg(b), [a, b](Tape& t) {
            auto& dy = t.node(t.last_).val.grad;
            if (t.rg(a)) {
                auto& da = t.gbuf(a);
                for (size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
            }
            if (t.rg(b)) {
                auto& db = t.gbuf(b);
                for (size_t i = 0; i < dy.size(); ++i) db[i] += dy[i];
            }
        });
    }

    TensorId mul(TensorId a, TensorId b) {
        const auto& ta = value(a);
        const auto& tb = value(b);
        check<ShapeError>(ta.shape == tb.shape,
                          "mul shape mismatch " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
        Tensor<T> out(ta.shape);
        for (int64_t i = 0; i < ta.size(); ++i) out.data[i] = ta.data[i] * tb.data[i];
        return push(std::move(out), rg(a) || rg(b), [a, b](Tape& t) {
            auto& dy = t.node(t.last_).val.grad;
            const auto& va = t.value(a).data;
            const auto& vb = t.value(b).data;
            if (t.rg(a)) {
                auto& da = t.gbuf(a);
                for (size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * vb[i];
            }
            if (t.rg(b)) {
                auto& db = t.gbuf(b);
                for (size_t i = 0; i < dy.size(); ++i) db[i] += dy[i] * va[i];
            }
        });
    }

    TensorId scale(TensorId a, double c) {
        const auto& ta = value(a);
        Tensor<T> out(ta.shape);
        for (int64_t i = 0; i < ta.size(); ++i) out.data[i] = T(double(ta.data[i]) * c);
        return push(std::move(out), rg(a), [a, c](Tape& t) {
            if (!t.rg(a)) return;
            auto& dy = t.node(t.last_).val.grad;
            auto& da = t.gbuf(a);
            for (size_t i = 0; i < dy.size(); ++i) da[i] += T(double(dy[i]) * c);
        });
    }

    TensorId silu(TensorId a) {
        const auto& ta = value(a);
        Tensor<T> out(ta.shape);
        for (int64_t i = 0; i < ta.size(); ++i) {
            double x = double(ta.data[i]);
            out.data[i] = T(x / (1.0 + std::exp(-x)));
        }
        return push(std::move(out), rg(a), [a](Tape& t) {
            if (!t.rg(a)) return;
            auto& dy = t.node(t.last_).val.grad;
            const auto& va = t.value(a).data;
            auto& da = t.gbuf(a);
            for (size_t i = 0; i < dy.size(); ++i) {
                double x = double(va[i]);
                double s = 1.0 / (1.0 + std::exp(-x));
                da[i] += T(double(dy[i]) * s * (1.0 + x * (1.0 - s)));
            }
        });
    }

    /// swiglu(gate, up) = silu(gate) * up
    TensorId swiglu(TensorId gate, TensorId up) { return mul(silu(gate), up); }

    // --- linear algebra ----------------------------------------------------

    TensorId matmul(TensorId a, TensorId b) {
        const auto& ta = value(a);
        const auto& tb = value(b);
        check<ShapeError>(ta.rank() == 2 && tb.rank() == 2 && ta.shape[1] == tb.shape[0],
                          "matmul shape mismatch " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
        const int64_t m = ta.shape[0], k = ta.shape[1], n = tb.shape[1];
        Tensor<T> out({m, n});
        kernels::matmul_acc(ta.data.data(), tb.data.data(), out.data.data(), m, k, n);
        return push(std::move(out), rg(a) || rg(b), [a, b, m, k, n](Tape& t) {
            const auto& dy = t.node(t.last_).val.grad;
            if (t.rg(a))
                kernels::matmul_acc_bt(dy.data(), t.value(b).data.data(), t.gbuf(a).data(), m, k, n);
            if (t.rg(b))
                kernels::matmul_acc_at(t.value(a).data.data(), dy.data(), t.gbuf(b).data(), m, k, n);
        });
    }

    // --- normalization and activation over the trailing axis ---------------

    TensorId softmax(TensorId a) {
        const auto& ta = value(a);
        check<ShapeError>(ta.rank() >= 1 && ta.shape.back() >= 1,
                          "softmax needs trailing axis, got " + shape_str(ta.shape));
        const int64_t n = ta.shape.back();
        const int64_t rows = ta.size() / n;
        Tensor<T> out(ta.shape);
        for (int64_t r = 0; r < rows; ++r)
            kernels::softmax_row(ta.data.data() + r * n, out.data.data() + r * n, n);
        return push(std::move(out), rg(a), [a, rows, n](Tape& t) {
            if (!t.rg(a)) return;
            const auto& y = t.node(t.last_).val.data;
            const auto& dy = t.node(t.last_).val.grad;
            auto& da = t.gbuf(a);
            for (int64_t r = 0; r < rows; ++r) {
                const T* yr = y.data() + r * n;
                const T* dyr = dy.data() + r * n;
                T* dar = da.data() + r * n;
                double dot = 0;
                for (int64_t i = 0; i < n; ++i) dot += double(dyr[i]) * double(yr[i]);
                for (int64_t i = 0; i < n; ++i)
                    dar[i] += T(double(yr[i]) * (double(dyr[i]) - dot));
            }
        });
    }

    /// y = x / sqrt(mean(x^2) + eps) * weight, over the trailing axis.
    TensorId rmsnorm(TensorId x, TensorId weight, double eps) {
        check(eps > 0, "rmsnorm eps must be > 0");
        const auto& tx = value(x);
        const auto& tw = value(weight);
        const int64_t d = tx.shape.back();
        check<ShapeError>(tw.rank() == 1 && tw.shape[0] == d,
                          "rmsnorm weight shape " + shape_str(tw.shape) + " vs input " + shape_str(tx.shape));
        const int64_t rows = tx.size() / d;
        Tensor<T> out(tx.shape);
        for (int64_t r = 0; r < rows; ++r) {
            const T* xr = tx.data.data() + r * d;
            T* yr = out.data.data() + r * d;
            double ms = 0;
            for (int64_t i = 0; i < d; ++i) ms += double(xr[i]) * double(xr[i]);
            const double inv = 1.0 / std::sqrt(ms / double(d) + eps);
            for (int64_t i = 0; i < d; ++i) yr[i] = T(double(xr[i]) * inv * double(tw.data[i]));
        }
        return push(std::move(out), rg(x) || rg(weight), [x, weight, rows, d, eps](Tape& t) {
            const auto& dy = t.node(t.last_).val.grad;
            const auto& xv = t.value(x).data;
            const auto& wv = t.value(weight).data;
            for (int64_t r = 0; r < rows; ++r) {
                const T* xr = xv.data() + r * d;
                const T* dyr = dy.data() + r * d;
                double ms = 0;
                for (int64_t i = 0; i < d; ++i) ms += double(xr[i]) * double(xr[i]);
                const double inv = 1.0 / std::sqrt(ms / double(d) + eps);
                if (t.rg(weight)) {
                    auto& dw = t.gbuf(weight);
                    for (int64_t i = 0; i < d; ++i)
                        dw[i] += T(double(dyr[i]) * double(xr[i]) * inv);
                }
                if (t.rg(x)) {
                    auto& dx = t.gbuf(x);
                    T* dxr = dx.data() + r * d;
                    double gu = 0; // sum_i g_i * u_i with g = dy*w, u = x*inv
                    for (int64_t i = 0; i < d; ++i)
                        gu += double(dyr[i]) * double(wv[i]) * double(xr[i]) * inv;
                    for (int64_t i = 0; i < d; ++i) {
                        double g = double(dyr[i]) * double(wv[i]);
                        double u = double(xr[i]) * inv;
                        dxr[i] += T(inv * (g - u * gu / double(d)));
                    }
                }
            }
        });
    }

    /// Non-parametric layer norm: y = (x - mean) / sqrt(var + eps).
    TensorId layernorm_np(TensorId x, double eps) {
        check(eps > 0, "layernorm eps must be > 0");
        const auto& tx = value(x);
        const int64_t d = tx.shape.back();
        const int64_t rows = tx.size() / d;
        Tensor<T> out(tx.shape);
        for (int64_t r = 0; r < rows; ++r) {
            const T* xr = tx.data.data() + r * d;
            T* yr = out.data.data() + r * d;
            double mean = 0;
            for (int64_t i = 0; i < d; ++i) mean += double(xr[i]);
            mean /= double(d);
            double var = 0;
            for (int64_t i = 0; i < d; ++i) {
                double c = double(xr[i]) - mean;
                var += c * c;
            }
            const double inv = 1.0 / std::sqrt(var / double(d) + eps);
            for (int64_t i = 0; i < d; ++i) yr[i] = T((double(xr[i]) - mean) * inv);
        }
        return push(std::move(out), rg(x), [x, rows, d, eps](Tape& t) {
            if (!t.rg(x)) return;
            const auto& dy = t.node(t.last_).val.grad;
            const auto& y = t.node(t.last_).val.data;
            const auto& xv = t.value(x).data;
            auto& dx = t.gbuf(x);
            for (int64_t r = 0; r < rows; ++r) {
                const T* xr = xv.data() + r * d;
                const T* yr = y.data() + r * d;
                const T* dyr = dy.data() + r * d;
                T* dxr = dx.data() + r * d;
                double mean = 0;
                for (int64_t i = 0; i < d; ++i) mean += double(xr[i]);
                mean /= double(d);
                double var = 0;
                for (int64_t i = 0; i < d; ++i) {
                    double c = double(xr[i]) - mean;
                    var += c * c;
                }
                const double inv = 1.0 / std::sqrt(var / double(d) + eps);
                double dmean = 0, dvar = 0;
                for (int64_t i = 0; i < d; ++i) {
                    dmean += double(dyr[i]);
                    dvar += double(dyr[i]) * double(yr[i]);
                }
                dmean /= double(d);
                dvar /= double(d);
                for (int64_t i = 0; i < d; ++i)
                    dxr[i] += T(inv * (double(dyr[i]) - dmean - double(yr[i]) * dvar));
            }
        });
    }

    /// Rotary embedding over the trailing axis: consecutive pairs (2i, 2i+1)
    /// of row r are rotated by positions[r] * theta^(-2i/d). Orthogonal, so
    /// backward rotates the gradient by the opposite angle.
    TensorId rope(TensorId x, std::vector<int32_t> positions, double theta) {
        const auto& tx = value(x);
        const int64_t d = tx.shape.back();
        check<ShapeError>(d % 2 == 0, "rope needs even trailing dim, got " + shape_str(tx.shape));
        const int64_t rows = tx.size() / d;
        check<ShapeError>(int64_t(positions.size()) == rows, "rope positions length mismatch");
        auto pos = std::make_shared<std::vector<int32_t>>(std::move(positions));
        Tensor<T> out(tx.shape);
        rope_apply(tx.data.data(), out.data.data(), rows, d, *pos, theta, +1.0);
        return push(std::move(out), rg(x), [x, pos, rows, d, theta](Tape& t) {
            if (!t.rg(x)) return;
            const auto& dy = t.node(t.last_).val.grad;
            std::vector<T> dx_local(dy.size());
            rope_apply(dy.data(), dx_local.data(), rows, d, *pos, theta, -1.0);
            auto& dx = t.gbuf(x);
            for (size_t i = 0; i < dx.size(); ++i) dx[i] += dx_local[i];
        });
    }

    // --- gather / scatter ---------------------------------------------------

    /// y[r] = table[ids[r]] for a [V, d] table.
    TensorId embedding(TensorId table, std::vector<int32_t> ids) {
        const auto& tt = value(table);
        check<ShapeError>(tt.rank() == 2, "embedding table must be 2-d");
        const int64_t v = tt.shape[0], d = tt.shape[1];
        for (int32_t id : ids)
            check(id >= 0 && id < v, "embedding id out of range: " + std::to_string(id));
        auto idp = std::make_shared<std::vector<int32_t>>(std::move(ids));
        const int64_t n = int64_t(idp->size());
        Tensor<T> out({n, d});
        for (int64_t r = 0; r < n; ++r)
            std::copy_n(tt.data.data() + int64_t((*idp)[r]) * d, d, out.data.data() + r * d);
        return push(std::move(out), rg(table), [table, idp, n, d](Tape& t) {
            if (!t.rg(table)) return;
            const auto& dy = t.node(t.last_).val.grad;
            auto& dt = t.gbuf(table);
            for (int64_t r = 0; r < n; ++r) {
                T* drow = dt.data() + int64_t((*idp)[r]) * d;
                const T* dyr = dy.data() + r * d;
                for (int64_t i = 0; i < d; ++i) drow[i] += dyr[i];
            }
        });
    }

    /// y[r] = x[rows[r]] for a [n, d] input.
    TensorId gather_rows(TensorId x, std::vector<int32_t> rows) {
        const auto& tx = value(x);
        check<ShapeError>(tx.rank() == 2, "gather_rows input must be 2-d");
        const int64_t n = tx.shape[0], d = tx.shape[1];
        for (int32_t r : rows) check(r >= 0 && r < n, "gather_rows index out of range");
        auto rp = std::make_shared<std::vector<int32_t>>(std::move(rows));
        const int64_t m = int64_t(rp->size());
        Tensor<T> out({m, d});
        for (int64_t r = 0; r < m; ++r)
            std::copy_n(tx.data.data() + int64_t((*rp)[r]) * d, d, out.data.data() + r * d);
        return push(std::move(out), rg(x), [x, rp, m, d](Tape& t) {
            if (!t.rg(x)) return;
            const auto& dy = t.node(t.last_).val.grad;
            auto& dx = t.gbuf(x);
            for (int64_t r = 0; r < m; ++r) {
                T* drow = dx.data() + int64_t((*rp)[r]) * d;
                const T* dyr = dy.data() + r * d;
                for (int64_t i = 0; i < d; ++i) drow[i] += dyr[i];
            }
        });
    }

    /// y is [n_rows, d], zero except y[rows[r]] += src[r]. Accumulation order
    /// is the order of `rows`, so results are deterministic.
    TensorId scatter_add_rows(TensorId src, std::vector<int32_t> rows, int64_t n_rows) {
        const auto& ts = value(src);
        check<ShapeError>(ts.rank() == 2, "scatter_add_rows src must be 2-d");
        const int64_t m = ts.shape[0], d = ts.shape[1];
        check<ShapeError>(int64_t(rows.size()) == m, "scatter_add_rows index count mismatch");
        for (int32_t r : rows) check(r >= 0 && r < n_rows, "scatter_add_rows index out of range");
        auto rp = std::make_shared<std::vector<int32_t>>(std::move(rows));
        Tensor<T> out({n_rows, d});
        for (int64_t r = 0; r < m; ++r) {
            T* drow = out.data.data() + int64_t((*rp)[r]) * d;
            const T* srow = ts.data.data() + r * d;
            for (int64_t i = 0; i < d; ++i) drow[i] += srow[i];
        }
        return push(std::move(out), rg(src), [src, rp, m, d](Tape& t) {
            if (!t.rg(src)) return;
            const auto& dy = t.node(t.last_).val.grad;
            auto& ds = t.gbuf(src);
            for (int64_t r = 0; r < m; ++r) {
                const T* dyr = dy.data() + int64_t((*rp)[r]) * d;
                T* dsr = ds.data() + r * d;
                for (int64_t i = 0; i < d; ++i) dsr[i] += dyr[i];
            }
        });
    }

    /// y[i] = x.flat[idx[i]]; gradient scatters back into x.
    TensorId gather_at(TensorId x, std::vector<int64_t> idx) {
        const auto& tx = value(x);
        for (int64_t i : idx) check(i >= 0 && i < tx.size(), "gather_at index out of range");
        auto ip = std::make_shared<std::vector<int64_t>>(std::move(idx));
        const int64_t n = int64_t(ip->size());
        Tensor<T> out({n});
        for (int64_t i = 0; i < n; ++i) out.data[i] = tx.data[size_t((*ip)[i])];
        return push(std::move(out), rg(x), [x, ip, n](Tape& t) {
            if (!t.rg(x)) return;
            const auto& dy = t.node(t.last_).val.grad;
            auto& dx = t.gbuf(x);
            for (int64_t i = 0; i < n; ++i) dx[size_t((*ip)[i])] += dy[i];
        });
    }

    /// y[r] = s[r] * x[r] for x [n, d], s [n].
    TensorId row_scale(TensorId x, TensorId s) {
        const auto& tx = value(x);
        const auto& ts = value(s);
        check<ShapeError>(tx.rank() == 2 && ts.rank() == 1 && ts.shape[0] == tx.shape[0],
                          "row_scale shapes " + shape_str(tx.shape) + " vs " + shape_str(ts.shape));
        const int64_t n = tx.shape[0], d = tx.shape[1];
        Tensor<T> out(tx.shape);
        for (int64_t r = 0; r < n; ++r) {
            const T sr = ts.data[size_t(r)];
            for (int64_t i = 0; i < d; ++i) out.data[r * d + i] = sr * tx.data[r * d + i];
        }
        return push(std::move(out), rg(x) || rg(s), [x, s, n, d](Tape& t) {
            const auto& dy = t.node(t.last_).val.grad;
            const auto& xv = t.value(x).data;
            const auto& sv = t.value(s).data;
            if (t.rg(x)) {
                auto& dx = t.gbuf(x);
                for (int64_t r = 0; r < n; ++r) {
                    const T sr = sv[size_t(r)];
                    for (int64_t i = 0; i < d; ++i) dx[r * d + i] += sr * dy[r * d + i];
                }
            }
            if (t.rg(s)) {
                auto& ds = t.gbuf(s);
                for (int64_t r = 0; r < n; ++r) {
                    double dot = 0;
                    for (int64_t i = 0; i < d; ++i)
                        dot += double(dy[r * d + i]) * double(xv[r * d + i]);
                    ds[size_t(r)] += T(dot);
                }
            }
        });
    }

    // --- reductions (accumulated in 64-bit) ---------------------------------

    TensorId sum(TensorId a) {
        const auto& ta = value(a);
        double s = 0;
        for (T v : ta.data) s += double(v);
        return push(Tensor<T>::scalar(T(s)), rg(a), [a](Tape& t) {
            if (!t.rg(a)) return;
            const T dy = t.node(t.last_).val.grad[0];
            auto& da = t.gbuf(a);
            for (auto& g : da) g += dy;
        });
    }

    TensorId mean(TensorId a) {
        const auto& ta = value(a);
        const int64_t n = ta.size();
        double s = 0;
        for (T v : ta.data) s += double(v);
        return push(Tensor<T>::scalar(T(s / double(n))), rg(a), [a, n](Tape& t) {
            if (!t.rg(a)) return;
            const double dy = double(t.node(t.last_).val.grad[0]) / double(n);
            auto& da = t.gbuf(a);
            for (auto& g : da) g += T(dy);
        });
    }

    /// Column means of a [n, d] matrix -> [d].
    TensorId col_mean(TensorId a) {
        const auto& ta = value(a);
        check<ShapeError>(ta.rank() == 2, "col_mean input must be 2-d");
        const int64_t n = ta.shape[0], d = ta.shape[1];
        std::vector<double> acc(size_t(d), 0.0);
        for (int64_t r = 0; r < n; ++r)
            for (int64_t i = 0; i < d; ++i) acc[size_t(i)] += double(ta.data[r * d + i]);
        Tensor<T> out({d});
        for (int64_t i = 0; i < d; ++i) out.data[size_t(i)] = T(acc[size_t(i)] / double(n));
        return push(std::move(out), rg(a), [a, n, d](Tape& t) {
            if (!t.rg(a)) return;
            const auto& dy = t.node(t.last_).val.grad;
            auto& da = t.gbuf(a);
            for (int64_t r = 0; r < n; ++r)
                for (int64_t i = 0; i < d; ++i)
                    da[r * d + i] += T(double(dy[size_t(i)]) / double(n));
        });
    }

    /// Row-wise log-sum-exp of a [n, d] matrix -> [n].
    TensorId logsumexp_rows(TensorId a) {
        const auto& ta = value(a);
        check<ShapeError>(ta.rank() == 2, "logsumexp_rows input must be 2-d");
        const int64_t n = ta.shape[0], d = ta.shape[1];
        Tensor<T> out({n});
        for (int64_t r = 0; r < n; ++r)
            out.data[size_t(r)] = T(kernels::logsumexp_row(ta.data.data() + r * d, d));
        return push(std::move(out), rg(a), [a, n, d](Tape& t) {
            if (!t.rg(a)) return;
            const auto& dy = t.node(t.last_).val.grad;
            const auto& xv = t.value(a).data;
            auto& da = t.gbuf(a);
            std::vector<T> p(static_cast<size_t>(d));
            for (int64_t r = 0; r < n; ++r) {
                kernels::softmax_row(xv.data() + r * d, p.data(), d);
                const double g = double(dy[size_t(r)]);
                for (int64_t i = 0; i < d; ++i) da[r * d + i] += T(g * double(p[size_t(i)]));
            }
        });
    }

    /// Mean negative log-softmax probability of targets for [n, v] logits.
    TensorId cross_entropy(TensorId logits, std::vector<int32_t> targets) {
        const auto& tl = value(logits);
        check<ShapeError>(tl.rank() == 2, "cross_entropy logits must be 2-d");
        const int64_t n = tl.shape[0], v = tl.shape[1];
        check<ShapeError>(int64_t(targets.size()) == n, "cross_entropy target count mismatch");
        for (int32_t tid : targets)
            check(tid >= 0 && tid < v, "cross_entropy target id out of range: " + std::to_string(tid));
        auto tp = std::make_shared<std::vector<int32_t>>(std::move(targets));
        double loss = 0;
        for (int64_t r = 0; r < n; ++r) {
            const double lse = kernels::logsumexp_row(tl.data.data() + r * v, v);
            loss += lse - double(tl.data[r * v + (*tp)[size_t(r)]]);
        }
        loss /= double(n);
        return push(Tensor<T>::scalar(T(loss)), rg(logits), [logits, tp, n, v](Tape& t) {
            if (!t.rg(logits)) return;
            const double dy = double(t.node(t.last_).val.grad[0]) / double(n);
            const auto& xv = t.value(logits).data;
            auto& dl = t.gbuf(logits);
            std::vector<T> p(static_cast<size_t>(v));
            for (int64_t r = 0; r < n; ++r) {
                kernels::softmax_row(xv.data() + r * v, p.data(), v);
                for (int64_t i = 0; i < v; ++i) dl[r * v + i] += T(dy * double(p[size_t(i)]));
                dl[r * v + (*tp)[size_t(r)]] -= T(dy);
            }
        });
    }

    // --- shape --------------------------------------------------------------

    TensorId reshape(TensorId a, Shape new_shape) {
        const auto& ta = value(a);
        check<ShapeError>(numel(new_shape) == ta.size(),
                          "reshape element count mismatch " + shape_str(ta.shape) + " -> " + shape_str(new_shape));
        Tensor<T> out(std::move(new_shape), ta.data);
        return push(std::move(out), rg(a), [a](Tape& t) {
            if (!t.rg(a)) return;
            const auto& dy = t.node(t.last_).val.grad;
            auto& da = t.gbuf(a);
            for (size_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
        });
    }

    // --- attention ----------------------------------------------------------

    /// Multi-head causal self-attention over B sequences of length S.
    /// q, k, v are [B*S, d] with d = n_heads * head_dim; head h occupies
    /// columns [h*head_dim, (h+1)*head_dim). Scores are scaled by
    /// 1/sqrt(head_dim); position i attends to positions <= i.
    TensorId causal_attention(TensorId q, TensorId k, TensorId v,
                              int64_t batch, int64_t seq, int64_t n_heads) {
        const auto& tq = value(q);
        const auto& tk = value(k);
        const auto& tv = value(v);
        check<ShapeError>(tq.shape == tk.shape && tq.shape == tv.shape,
                          "attention q/k/v shape mismatch");
        check<ShapeError>(tq.rank() == 2 && tq.shape[0] == batch * seq && tq.shape[1] % n_heads == 0,
                          "attention input shape " + shape_str(tq.shape));
        const int64_t d = tq.shape[1];
        const int64_t hd = d / n_heads;
        const double inv_sqrt = 1.0 / std::sqrt(double(hd));

        auto probs = std::make_shared<std::vector<T>>(size_t(batch * n_heads * seq * seq), T(0));
        Tensor<T> out({batch * seq, d});

        std::vector<T> qb(size_t(seq * hd)), kb(size_t(seq * hd)), vb(size_t(seq * hd));
        std::vector<T> ob(size_t(seq * hd));
        for (int64_t b = 0; b < batch; ++b) {
            for (int64_t h = 0; h < n_heads; ++h) {
                pack_head(tq.data.data(), qb.data(), b, h, seq, d, hd);
                pack_head(tk.data.data(), kb.data(), b, h, seq, d, hd);
                pack_head(tv.data.data(), vb.data(), b, h, seq, d, hd);
                T* pb = probs->data() + ((b * n_heads + h) * seq * seq);
                for (int64_t i = 0; i < seq; ++i) {
                    T* prow = pb + i * seq;
                    // scores for j <= i, then stable softmax over that prefix
                    double mx = -1e300;
                    for (int64_t j = 0; j <= i; ++j) {
                        double s = 0;
                        for (int64_t c = 0; c < hd; ++c)
                            s += double(qb[size_t(i * hd + c)]) * double(kb[size_t(j * hd + c)]);
                        s *= inv_sqrt;
                        prow[j] = T(s);
                        mx = std::max(mx, s);
                    }
                    double sum = 0;
                    for (int64_t j = 0; j <= i; ++j) {
                        double e = std::exp(double(prow[j]) - mx);
                        prow[j] = T(e);
                        sum += e;
                    }
                    const double inv = 1.0 / sum;
                    for (int64_t j = 0; j <= i; ++j) prow[j] = T(double(prow[j]) * inv);
                    T* orow = ob.data() + i * hd;
                    std::fill_n(orow, hd, T(0));
                    for (int64_t j = 0; j <= i; ++j) {
                        const T p = prow[j];
                        const T* vrow = vb.data() + j * hd;
                        for (int64_t c = 0; c < hd; ++c) orow[c] += p * vrow[c];
                    }
                }
                unpack_head(ob.data(), out.data.data(), b, h, seq, d, hd);
            }
        }
        const bool any = rg(q) || rg(k) || rg(v);
        return push(std::move(out), any,
                    [q, k, v, probs, batch, seq, n_heads, d, hd, inv_sqrt](Tape& t) {
            const auto& dy = t.node(t.last_).val.grad;
            const auto& qv = t.value(q).data;
            const auto& kv = t.value(k).data;
            const auto& vv = t.value(v).data;
            std::vector<T> qb(size_t(seq * hd)), kb(size_t(seq * hd)), vb(size_t(seq * hd));
            std::vector<T> dob(size_t(seq * hd));
            std::vector<T> dqb(size_t(seq * hd)), dkb(size_t(seq * hd)), dvb(size_t(seq * hd));
            std::vector<double> dp(static_cast<size_t>(seq));
            for (int64_t b = 0; b < batch; ++b) {
                for (int64_t h = 0; h < n_heads; ++h) {
                    pack_head(qv.data(), qb.data(), b, h, seq, d, hd);
                    pack_head(kv.data(), kb.data(), b, h, seq, d, hd);
                    pack_head(vv.data(), vb.data(), b, h, seq, d, hd);
                    pack_head(dy.data(), dob.data(), b, h, seq, d, hd);
                    std::fill(dqb.begin(), dqb.end(), T(0));
                    std::fill(dkb.begin(), dkb.end(), T(0));
                    std::fill(dvb.begin(), dvb.end(), T(0));
                    const T* pb = probs->data() + ((b * n_heads + h) * seq * seq);
                    for (int64_t i = 0; i < seq; ++i) {
                        const T* prow = pb + i * seq;
                        const T* dorow = dob.data() + i * hd;
                        // dV and dP
                        double dpp = 0; // sum_j dp_j * p_j
                        for (int64_t j = 0; j <= i; ++j) {
                            const T* vrow = vb.data() + j * hd;
                            double dpj = 0;
                            for (int64_t c = 0; c < hd; ++c)
                                dpj += double(dorow[c]) * double(vrow[c]);
                            dp[size_t(j)] = dpj;
                            dpp += dpj * double(prow[j]);
                            T* dvrow = dvb.data() + j * hd;
                            const T p = prow[j];
                            for (int64_t c = 0; c < hd; ++c) dvrow[c] += p * dorow[c];
                        }
                        // dScores -> dQ, dK
                        T* dqrow = dqb.data() + i * hd;
                        const T* qrow = qb.data() + i * hd;
                        for (int64_t j = 0; j <= i; ++j) {
                            const double ds = double(prow[j]) * (dp[size_t(j)] - dpp) * inv_sqrt;
                            const T* krow = kb.data() + j * hd;
                            T* dkrow = dkb.data() + j * hd;
                            for (int64_t c = 0; c < hd; ++c) {
                                dqrow[c] += T(ds * double(krow[c]));
                                dkrow[c] += T(ds * double(qrow[c]));
                            }
                        }
                    }
                    if (t.rg(q)) unpack_head_acc(dqb.data(), t.gbuf(q).data(), b, h, seq, d, hd);
                    if (t.rg(k)) unpack_head_acc(dkb.data(), t.gbuf(k).data(), b, h, seq, d, hd);
                    if (t.rg(v)) unpack_head_acc(dvb.data(), t.gbuf(v).data(), b, h, seq, d, hd);
                }
            }
        });
    }

private:
    struct Node {
        Tensor<T> val;
        bool rg = false;
        std::function<void(Tape&)> back;
    };

    Node& node(TensorId id) { return nodes_[id.v]; }
    bool rg(TensorId id) const { return nodes_[id.v].rg; }

    std::vector<T>& gbuf(TensorId id) {
        auto& n = nodes_[id.v];
        n.val.alloc_grad();
        return n.val.grad;
    }

    TensorId push(Tensor<T> val, bool requires_grad, std::function<void(Tape&)> back) {
        Node n;
        n.val = std::move(val);
        n.rg = requires_grad;
        if (requires_grad) n.val.alloc_grad();
        if (back) {
            // Wrap so the lambda can find its own node via last_.
            const uint32_t self = uint32_t(nodes_.size());
            n.back = [self, fn = std::move(back)](Tape& t) {
                t.last_ = TensorId{self};
                fn(t);
            };
        }
        nodes_.push_back(std::move(n));
        return TensorId{uint32_t(nodes_.size() - 1)};
    }

    static void pack_head(const T* src, T* dst, int64_t b, int64_t h,
                          int64_t seq, int64_t d, int64_t hd) {
        for (int64_t s = 0; s < seq; ++s)
            std::copy_n(src + (b * seq + s) * d + h * hd, hd, dst + s * hd);
    }

    static void unpack_head(const T* src, T* dst, int64_t b, int64_t h,
                            int64_t seq, int64_t d, int64_t hd) {
        for (int64_t s = 0; s < seq; ++s)
            std::copy_n(src + s * hd, hd, dst + (b * seq + s) * d + h * hd);
    }

    static void unpack_head_acc(const T* src, T* dst, int64_t b, int64_t h,
                                int64_t seq, int64_t d, int64_t hd) {
        for (int64_t s = 0; s < seq; ++s) {
            T* drow = dst + (b * seq + s) * d + h * hd;
            const T* srow = src + s * hd;
            for (int64_t c = 0; c < hd; ++c) drow[c] += srow[c];
        }
    }

    static void rope_apply(const T* in, T* out, int64_t rows, int64_t d,
                           const std::vector<int32_t>& pos, double theta, double sign) {
        const int64_t half = d / 2;
        for (int64_t r = 0; r < rows; ++r) {
            const double p = double(pos[size_t(r)]);
            for (int64_t i = 0; i < half; ++i) {
                const double freq = std::pow(theta, -2.0 * double(i) / double(d));
                const double ang = sign * p * freq;
                const double c = std::cos(ang), s = std::sin(ang);
                const double x0 = double(in[r * d + 2 * i]);
                const double x1 = double(in[r * d + 2 * i + 1]);
                out[r * d + 2 * i] = T(x0 * c - x1 * s);
                out[r * d + 2 * i + 1] = T(x0 * s + x1 * c);
            }
        }
    }

    std::vector<Node> nodes_;
    TensorId last_{};
};

} // namespace tinymoe
