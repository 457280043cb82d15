#include "alope/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace alope {

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

namespace {

template <typename T>
Tensor<T> make_op(Shape shape, std::vector<T> values, std::vector<Tensor<T>> parents,
                  std::function<void(TensorNode<T>&)> backprop) {
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = std::move(shape);
    n->data = std::move(values);
    for (auto& p : parents) {
        n->parents.push_back(p.node());
        if (p.requires_grad()) n->requires_grad = true;
    }
    if (n->requires_grad) {
        n->grad.assign(n->data.size(), T(0));
        n->backprop = std::move(backprop);
    }
    return Tensor<T>(std::move(n));
}

template <typename T>
void check_rank2(const Tensor<T>& t, const char* op) {
    if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got shape " + shape_str(t.shape()));
}

// C[m×n] += A[m×k]·B[k×n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (std::int64_t l = 0; l < k; ++l) {
            const T av = arow[l];
            if (av == T(0)) continue;
            const T* brow = b + l * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m×n] += A[m×k]·(B[n×k])ᵀ
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (std::int64_t j = 0; j < n; ++j) {
            const T* brow = b + j * k;
            T acc = 0;
            for (std::int64_t l = 0; l < k; ++l) acc += arow[l] * brow[l];
            crow[j] += acc;
        }
    }
}

// C[m×n] += (A[k×m])ᵀ·B[k×n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
    for (std::int64_t l = 0; l < k; ++l) {
        const T* arow = a + l * m;
        const T* brow = b + l * n;
        for (std::int64_t i = 0; i < m; ++i) {
            const T av = arow[i];
            if (av == T(0)) continue;
            T* crow = c + i * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
    return from_data(shape, std::vector<T>(static_cast<std::size_t>(shape_numel(shape)), T(0)), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
    return from_data(shape, std::vector<T>(static_cast<std::size_t>(shape_numel(shape)), value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from_data(Shape shape, std::vector<T> values, bool requires_grad) {
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
        throw ShapeError("tensor data length " + std::to_string(values.size()) + " does not match shape " +
                         shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data = std::move(values);
    n->requires_grad = requires_grad;
    if (requires_grad) n->grad.assign(n->data.size(), T(0));
    return Tensor(std::move(n));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
    return from_data({}, {value}, requires_grad);
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    const bool bias_row = a.rank() == 2 && b.rank() == 1 && a.dim(1) == b.dim(0);
    if (!bias_row && a.shape() != b.shape())
        throw ShapeError("add: shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<T> out(a.data().begin(), a.data().end());
    if (bias_row) {
        const std::int64_t m = a.dim(0), n = a.dim(1);
        for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < n; ++j) out[i * n + j] += b.at(j);
    } else {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.data()[i];
    }
    auto an = a.node();
    auto bn = b.node();
    return make_op<T>(a.shape(), std::move(out), {a, b}, [an, bn, bias_row](TensorNode<T>& self) {
        if (an->requires_grad)
            for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
        if (bn->requires_grad) {
            if (bias_row) {
                const std::int64_t n = static_cast<std::int64_t>(bn->data.size());
                const std::int64_t m = static_cast<std::int64_t>(self.data.size()) / n;
                for (std::int64_t i = 0; i < m; ++i)
                    for (std::int64_t j = 0; j < n; ++j) bn->grad[j] += self.grad[i * n + j];
            } else {
                for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i];
            }
        }
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("sub: shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<T> out(a.data().begin(), a.data().end());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.data()[i];
    auto an = a.node();
    auto bn = b.node();
    return make_op<T>(a.shape(), std::move(out), {a, b}, [an, bn](TensorNode<T>& self) {
        if (an->requires_grad)
            for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
        if (bn->requires_grad)
            for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] -= self.grad[i];
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("mul: shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<T> out(a.data().begin(), a.data().end());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.data()[i];
    auto an = a.node();
    auto bn = b.node();
    return make_op<T>(a.shape(), std::move(out), {a, b}, [an, bn](TensorNode<T>& self) {
        if (an->requires_grad)
            for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * bn->data[i];
        if (bn->requires_grad)
            for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i] * an->data[i];
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
    std::vector<T> out(a.data().begin(), a.data().end());
    for (auto& v : out) v *= factor;
    auto an = a.node();
    return make_op<T>(a.shape(), std::move(out), {a}, [an, factor](TensorNode<T>& self) {
        if (an->requires_grad)
            for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * factor;
    });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    check_rank2(a, "matmul");
    check_rank2(b, "matmul");
    if (a.dim(1) != b.dim(0))
        throw ShapeError("matmul: inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<T> out(static_cast<std::size_t>(m * n), T(0));
    gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
    auto an = a.node();
    auto bn = b.node();
    return make_op<T>({m, n}, std::move(out), {a, b}, [an, bn, m, k, n](TensorNode<T>& self) {
        if (an->requires_grad) gemm_nt(self.grad.data(), bn->data.data(), an->grad.data(), m, n, k);
        if (bn->requires_grad) gemm_tn(an->data.data(), self.grad.data(), bn->grad.data(), k, m, n);
    });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w) {
    check_rank2(w, "linear");
    const bool vec = x.rank() == 1;
    if (!vec) check_rank2(x, "linear");
    const std::int64_t m = vec ? 1 : x.dim(0);
    const std::int64_t k = vec ? x.dim(0) : x.dim(1);
    const std::int64_t n = w.dim(0);
    if (w.dim(1) != k)
        throw ShapeError("linear: input width does not match weight: " + shape_str(x.shape()) + " x " +
                         shape_str(w.shape()));
    std::vector<T> out(static_cast<std::size_t>(m * n), T(0));
    gemm_nt(x.data().data(), w.data().data(), out.data(), m, k, n);
    auto xn = x.node();
    auto wn = w.node();
    Shape oshape = vec ? Shape{n} : Shape{m, n};
    return make_op<T>(std::move(oshape), std::move(out), {x, w}, [xn, wn, m, k, n](TensorNode<T>& self) {
        if (xn->requires_grad) gemm_nn(self.grad.data(), wn->data.data(), xn->grad.data(), m, n, k);
        if (wn->requires_grad) gemm_tn(self.grad.data(), xn->data.data(), wn->grad.data(), n, m, k);
    });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    check_rank2(a, "transpose");
    const std::int64_t m = a.dim(0), n = a.dim(1);
    std::vector<T> out(static_cast<std::size_t>(m * n));
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) out[j * m + i] = a.at(i, j);
    auto an = a.node();
    return make_op<T>({n, m}, std::move(out), {a}, [an, m, n](TensorNode<T>& self) {
        if (!an->requires_grad) return;
        for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < n; ++j) an->grad[i * n + j] += self.grad[j * m + i];
    });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
    std::vector<T> out(a.numel());
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        const T x = a.data()[i];
        const T s = T(1) / (T(1) + std::exp(-x));
        out[i] = x * s;
    }
    auto an = a.node();
    return make_op<T>(a.shape(), std::move(out), {a}, [an](TensorNode<T>& self) {
        if (!an->requires_grad) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const T x = an->data[i];
            const T s = T(1) / (T(1) + std::exp(-x));
            an->grad[i] += self.grad[i] * s * (T(1) + x * (T(1) - s));
        }
    });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
    static const T inv_sqrt2 = T(0.70710678118654752440);
    static const T inv_sqrt2pi = T(0.39894228040143267794);
    std::vector<T> out(a.numel());
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        const T x = a.data()[i];
        out[i] = T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2));
    }
    auto an = a.node();
    return make_op<T>(a.shape(), std::move(out), {a}, [an](TensorNode<T>& self) {
        if (!an->requires_grad) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const T x = an->data[i];
            const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
            const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x * x);
            an->grad[i] += self.grad[i] * (cdf + x * pdf);
        }
    });
}

template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain, T eps) {
    const bool vec = x.rank() == 1;
    if (!vec) check_rank2(x, "rms_norm");
    if (gain.rank() != 1)
        throw ShapeError("rms_norm: gain must be 1-D, got shape " + shape_str(gain.shape()));
    const std::int64_t m = vec ? 1 : x.dim(0);
    const std::int64_t d = vec ? x.dim(0) : x.dim(1);
    if (gain.dim(0) != d)
        throw ShapeError("rms_norm: gain width " + shape_str(gain.shape()) + " does not match input " +
                         shape_str(x.shape()));
    std::vector<T> out(static_cast<std::size_t>(m * d));
    std::vector<T> inv(static_cast<std::size_t>(m));
    for (std::int64_t i = 0; i < m; ++i) {
        T ss = 0;
        for (std::int64_t j = 0; j < d; ++j) {
            const T v = x.data()[i * d + j];
            ss += v * v;
        }
        inv[i] = T(1) / std::sqrt(ss / T(d) + eps);
        for (std::int64_t j = 0; j < d; ++j) out[i * d + j] = x.data()[i * d + j] * gain.at(j) * inv[i];
    }
    auto xn = x.node();
    auto gn = gain.node();
    return make_op<T>(x.shape(), std::move(out), {x, gain},
                      [xn, gn, m, d, inv = std::move(inv)](TensorNode<T>& self) {
                          for (std::int64_t i = 0; i < m; ++i) {
                              const T* g = self.grad.data() + i * d;
                              const T* xv = xn->data.data() + i * d;
                              if (gn->requires_grad)
                                  for (std::int64_t j = 0; j < d; ++j) gn->grad[j] += g[j] * xv[j] * inv[i];
                              if (xn->requires_grad) {
                                  T s = 0;
                                  for (std::int64_t j = 0; j < d; ++j) s += g[j] * gn->data[j] * xv[j];
                                  const T inv3 = inv[i] * inv[i] * inv[i];
                                  for (std::int64_t j = 0; j < d; ++j)
                                      xn->grad[i * d + j] += inv[i] * gn->data[j] * g[j] - xv[j] * inv3 * s / T(d);
                              }
                          }
                      });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
    if (x.rank() != 1 || x.numel() == 0)
        throw DegenerateInputError("softmax: expected a non-empty 1-D tensor, got shape " + shape_str(x.shape()));
    const std::int64_t n = x.dim(0);
    T mx = x.data()[0];
    for (std::int64_t i = 1; i < n; ++i) mx = std::max(mx, x.data()[i]);
    std::vector<T> out(static_cast<std::size_t>(n));
    T z = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        out[i] = std::exp(x.data()[i] - mx);
        z += out[i];
    }
    for (auto& v : out) v /= z;
    auto xn = x.node();
    return make_op<T>(x.shape(), std::move(out), {x}, [xn, n](TensorNode<T>& self) {
        if (!xn->requires_grad) return;
        T dotgy = 0;
        for (std::int64_t i = 0; i < n; ++i) dotgy += self.grad[i] * self.data[i];
        for (std::int64_t i = 0; i < n; ++i) xn->grad[i] += self.data[i] * (self.grad[i] - dotgy);
    });
}

template <typename T>
Tensor<T> masked_row_softmax(const Tensor<T>& scores, const std::vector<std::uint8_t>& mask) {
    check_rank2(scores, "masked_row_softmax");
    const std::int64_t m = scores.dim(0), n = scores.dim(1);
    if (static_cast<std::int64_t>(mask.size()) != m * n)
        throw ShapeError("masked_row_softmax: mask length " + std::to_string(mask.size()) +
                         " does not match scores " + shape_str(scores.shape()));
    std::vector<T> out(static_cast<std::size_t>(m * n), T(0));
    for (std::int64_t i = 0; i < m; ++i) {
        T mx = 0;
        bool any = false;
        for (std::int64_t j = 0; j < n; ++j) {
            if (!mask[i * n + j]) continue;
            const T v = scores.at(i, j);
            mx = any ? std::max(mx, v) : v;
            any = true;
        }
        if (!any) throw ShapeError("masked_row_softmax: row " + std::to_string(i) + " has no unmasked entries");
        T z = 0;
        for (std::int64_t j = 0; j < n; ++j) {
            if (!mask[i * n + j]) continue;
            out[i * n + j] = std::exp(scores.at(i, j) - mx);
            z += out[i * n + j];
        }
        for (std::int64_t j = 0; j < n; ++j) out[i * n + j] /= z;
    }
    auto sn = scores.node();
    return make_op<T>(scores.shape(), std::move(out), {scores}, [sn, m, n, mask](TensorNode<T>& self) {
        if (!sn->requires_grad) return;
        for (std::int64_t i = 0; i < m; ++i) {
            T dotgy = 0;
            for (std::int64_t j = 0; j < n; ++j)
                if (mask[i * n + j]) dotgy += self.grad[i * n + j] * self.data[i * n + j];
            for (std::int64_t j = 0; j < n; ++j)
                if (mask[i * n + j])
                    sn->grad[i * n + j] += self.data[i * n + j] * (self.grad[i * n + j] - dotgy);
        }
    });
}

template <typename T>
Tensor<T> embedding_gather(const Tensor<T>& table, const std::vector<std::int32_t>& ids) {
    check_rank2(table, "embedding_gather");
    const std::int64_t v = table.dim(0), d = table.dim(1);
    const std::int64_t n = static_cast<std::int64_t>(ids.size());
    std::vector<T> out(static_cast<std::size_t>(n * d));
    for (std::int64_t i = 0; i < n; ++i) {
        if (ids[i] < 0 || ids[i] >= v)
            throw ShapeError("embedding_gather: id " + std::to_string(ids[i]) + " outside table of " +
                             std::to_string(v) + " rows");
        std::copy_n(table.data().data() + static_cast<std::int64_t>(ids[i]) * d, d, out.data() + i * d);
    }
    auto tn = table.node();
    return make_op<T>({n, d}, std::move(out), {table}, [tn, d, ids](TensorNode<T>& self) {
        if (!tn->requires_grad) return;
        for (std::size_t i = 0; i < ids.size(); ++i)
            for (std::int64_t j = 0; j < d; ++j)
                tn->grad[static_cast<std::int64_t>(ids[i]) * d + j] += self.grad[i * d + j];
    });
}

template <typename T>
Tensor<T> row_slice(const Tensor<T>& x, std::int64_t row) {
    check_rank2(x, "row_slice");
    const std::int64_t m = x.dim(0), n = x.dim(1);
    if (row < 0 || row >= m)
        throw ShapeError("row_slice: row " + std::to_string(row) + " outside matrix " + shape_str(x.shape()));
    std::vector<T> out(x.data().begin() + row * n, x.data().begin() + (row + 1) * n);
    auto xn = x.node();
    return make_op<T>({n}, std::move(out), {x}, [xn, row, n](TensorNode<T>& self) {
        if (!xn->requires_grad) return;
        for (std::int64_t j = 0; j < n; ++j) xn->grad[row * n + j] += self.grad[j];
    });
}

template <typename T>
Tensor<T> col_slice(const Tensor<T>& x, std::int64_t col0, std::int64_t width) {
    check_rank2(x, "col_slice");
    const std::int64_t m = x.dim(0), n = x.dim(1);
    if (col0 < 0 || width < 1 || col0 + width > n)
        throw ShapeError("col_slice: columns [" + std::to_string(col0) + ", " + std::to_string(col0 + width) +
                         ") outside matrix " + shape_str(x.shape()));
    std::vector<T> out(static_cast<std::size_t>(m * width));
    for (std::int64_t i = 0; i < m; ++i)
        std::copy_n(x.data().data() + i * n + col0, width, out.data() + i * width);
    auto xn = x.node();
    return make_op<T>({m, width}, std::move(out), {x}, [xn, col0, width, m, n](TensorNode<T>& self) {
        if (!xn->requires_grad) return;
        for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < width; ++j) xn->grad[i * n + col0 + j] += self.grad[i * width + j];
    });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs) {
    if (xs.empty()) throw ShapeError("concat: empty input list");
    std::vector<T> out;
    std::vector<std::int64_t> sizes;
    for (const auto& x : xs) {
        if (x.rank() > 1) throw ShapeError("concat: expected 1-D tensors, got shape " + shape_str(x.shape()));
        sizes.push_back(x.numel());
        out.insert(out.end(), x.data().begin(), x.data().end());
    }
    auto bwd = [sizes, nodes = [&] {
        std::vector<std::shared_ptr<TensorNode<T>>> ns;
        for (const auto& x : xs) ns.push_back(x.node());
        return ns;
    }()](TensorNode<T>& self) {
        std::int64_t off = 0;
        for (std::size_t p = 0; p < nodes.size(); ++p) {
            if (nodes[p]->requires_grad)
                for (std::int64_t j = 0; j < sizes[p]; ++j) nodes[p]->grad[j] += self.grad[off + j];
            off += sizes[p];
        }
    };
    const std::int64_t total = static_cast<std::int64_t>(out.size());
    return make_op<T>({total}, std::move(out), xs, std::move(bwd));
}

template <typename T>
Tensor<T> stack_rows(const std::vector<Tensor<T>>& rows) {
    if (rows.empty()) throw ShapeError("stack_rows: empty input list");
    const std::int64_t d = rows[0].numel();
    std::vector<T> out;
    out.reserve(rows.size() * d);
    for (const auto& r : rows) {
        if (r.rank() != 1 || r.numel() != d)
            throw ShapeError("stack_rows: rows must share 1-D shape; got " + shape_str(r.shape()));
        out.insert(out.end(), r.data().begin(), r.data().end());
    }
    auto bwd = [d, nodes = [&] {
        std::vector<std::shared_ptr<TensorNode<T>>> ns;
        for (const auto& r : rows) ns.push_back(r.node());
        return ns;
    }()](TensorNode<T>& self) {
        for (std::size_t p = 0; p < nodes.size(); ++p) {
            if (!nodes[p]->requires_grad) continue;
            for (std::int64_t j = 0; j < d; ++j) nodes[p]->grad[j] += self.grad[p * d + j];
        }
    };
    const std::int64_t n_rows = static_cast<std::int64_t>(rows.size());
    return make_op<T>({n_rows, d}, std::move(out), rows, std::move(bwd));
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& xs) {
    if (xs.empty()) throw ShapeError("concat_cols: empty input list");
    const std::int64_t m = xs[0].dim(0);
    std::int64_t total = 0;
    for (const auto& x : xs) {
        check_rank2(x, "concat_cols");
        if (x.dim(0) != m)
            throw ShapeError("concat_cols: row counts differ: " + shape_str(xs[0].shape()) + " vs " +
                             shape_str(x.shape()));
        total += x.dim(1);
    }
    std::vector<T> out(static_cast<std::size_t>(m * total));
    std::int64_t off = 0;
    std::vector<std::int64_t> widths;
    for (const auto& x : xs) {
        const std::int64_t w = x.dim(1);
        widths.push_back(w);
        for (std::int64_t i = 0; i < m; ++i)
            std::copy_n(x.data().data() + i * w, w, out.data() + i * total + off);
        off += w;
    }
    auto bwd = [m, total, widths, nodes = [&] {
        std::vector<std::shared_ptr<TensorNode<T>>> ns;
        for (const auto& x : xs) ns.push_back(x.node());
        return ns;
    }()](TensorNode<T>& self) {
        std::int64_t off2 = 0;
        for (std::size_t p = 0; p < nodes.size(); ++p) {
            const std::int64_t w = widths[p];
            if (nodes[p]->requires_grad)
                for (std::int64_t i = 0; i < m; ++i)
                    for (std::int64_t j = 0; j < w; ++j)
                        nodes[p]->grad[i * w + j] += self.grad[i * total + off2 + j];
            off2 += w;
        }
    };
    return make_op<T>({m, total}, std::move(out), xs, std::move(bwd));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.numel())
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(new_shape) +
                         " (element counts differ)");
    auto xn = x.node();
    std::vector<T> out(x.data().begin(), x.data().end());
    return make_op<T>(std::move(new_shape), std::move(out), {x}, [xn](TensorNode<T>& self) {
        if (!xn->requires_grad) return;
        for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += self.grad[i];
    });
}

template <typename T>
Tensor<T> element(const Tensor<T>& x, std::int64_t i) {
    if (x.rank() != 1) throw ShapeError("element: expected a 1-D tensor, got shape " + shape_str(x.shape()));
    if (i < 0 || i >= x.numel())
        throw ShapeError("element: index " + std::to_string(i) + " out of range for shape " +
                         shape_str(x.shape()));
    auto xn = x.node();
    return make_op<T>({}, {x.at(i)}, {x}, [xn, i](TensorNode<T>& self) {
        if (xn->requires_grad) xn->grad[static_cast<std::size_t>(i)] += self.grad[0];
    });
}

template <typename T>
Tensor<T> scale_t(const Tensor<T>& x, const Tensor<T>& s) {
    if (s.numel() != 1) throw ShapeError("scale_t: factor must be a scalar, got shape " + shape_str(s.shape()));
    const T f = s.data()[0];
    std::vector<T> out(x.data().begin(), x.data().end());
    for (auto& v : out) v *= f;
    auto xn = x.node();
    auto sn = s.node();
    return make_op<T>(x.shape(), std::move(out), {x, s}, [xn, sn](TensorNode<T>& self) {
        const T fac = sn->data[0];
        if (xn->requires_grad)
            for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += self.grad[i] * fac;
        if (sn->requires_grad) {
            T acc = 0;
            for (std::size_t i = 0; i < xn->data.size(); ++i) acc += self.grad[i] * xn->data[i];
            sn->grad[0] += acc;
        }
    });
}

template <typename T>
Tensor<T> broadcast_scalar(const Tensor<T>& s, std::int64_t n) {
    if (s.numel() != 1) throw ShapeError("broadcast_scalar: expected a scalar, got shape " + shape_str(s.shape()));
    if (n < 1) throw ShapeError("broadcast_scalar: length must be >= 1");
    auto sn = s.node();
    return make_op<T>({n}, std::vector<T>(static_cast<std::size_t>(n), s.data()[0]), {s},
                      [sn](TensorNode<T>& self) {
                          if (!sn->requires_grad) return;
                          T acc = 0;
                          for (auto g : self.grad) acc += g;
                          sn->grad[0] += acc;
                      });
}

template <typename T>
Tensor<T> dot(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 1 || b.rank() != 1 || a.numel() != b.numel())
        throw ShapeError("dot: expected equal-length 1-D tensors: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    T acc = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i) acc += a.data()[i] * b.data()[i];
    auto an = a.node();
    auto bn = b.node();
    return make_op<T>({}, {acc}, {a, b}, [an, bn](TensorNode<T>& self) {
        const T g = self.grad[0];
        if (an->requires_grad)
            for (std::size_t i = 0; i < an->data.size(); ++i) an->grad[i] += g * bn->data[i];
        if (bn->requires_grad)
            for (std::size_t i = 0; i < bn->data.size(); ++i) bn->grad[i] += g * an->data[i];
    });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T acc = 0;
    for (auto v : x.data()) acc += v;
    auto xn = x.node();
    return make_op<T>({}, {acc}, {x}, [xn](TensorNode<T>& self) {
        if (!xn->requires_grad) return;
        for (auto& g : xn->grad) g += self.grad[0];
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    if (x.numel() == 0) throw ShapeError("mean: empty tensor");
    T acc = 0;
    for (auto v : x.data()) acc += v;
    acc /= T(x.numel());
    auto xn = x.node();
    const T invn = T(1) / T(x.numel());
    return make_op<T>({}, {acc}, {x}, [xn, invn](TensorNode<T>& self) {
        if (!xn->requires_grad) return;
        for (auto& g : xn->grad) g += self.grad[0] * invn;
    });
}

template <typename T>
Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
    if (pred.numel() != target.numel())
        throw ShapeError("mse_loss: lengths differ: " + shape_str(pred.shape()) + " vs " +
                         shape_str(target.shape()));
    if (pred.numel() == 0) throw ShapeError("mse_loss: empty input");
    const std::int64_t n = pred.numel();
    T acc = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        const T r = pred.data()[i] - target.data()[i];
        acc += r * r;
    }
    acc /= T(n);
    auto pn = pred.node();
    auto tn = target.node();
    return make_op<T>({}, {acc}, {pred, target}, [pn, tn, n](TensorNode<T>& self) {
        const T c = self.grad[0] * T(2) / T(n);
        for (std::int64_t i = 0; i < n; ++i) {
            const T r = pn->data[i] - tn->data[i];
            if (pn->requires_grad) pn->grad[i] += c * r;
            if (tn->requires_grad) tn->grad[i] -= c * r;
        }
    });
}

namespace {

// Post-order over the tape, each node exactly once.
template <typename T>
std::vector<TensorNode<T>*> topo_order(TensorNode<T>* root) {
    std::vector<TensorNode<T>*> order;
    std::unordered_set<TensorNode<T>*> visited;
    std::vector<std::pair<TensorNode<T>*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            TensorNode<T>* p = node->parents[idx++].get();
            if (visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order;
}

}  // namespace

template <typename T>
void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1)
        throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    if (!loss.requires_grad()) return;  // constant graph: nothing depends on parameters
    auto order = topo_order(loss.node().get());
    for (auto* n : order)
        if (!n->leaf() && n->requires_grad) std::fill(n->grad.begin(), n->grad.end(), T(0));
    loss.node()->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode<T>* n = *it;
        if (n->requires_grad && n->backprop) n->backprop(*n);
    }
}

template <typename T>
void zero_grads(const std::vector<Tensor<T>>& params) {
    for (auto p : params) p.zero_grad();
}

// --- explicit instantiations -------------------------------------------------

template class Tensor<float>;
template class Tensor<double>;

#define ALOPE_INSTANTIATE_OPS(T)                                                                       \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                        \
    template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                        \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                        \
    template Tensor<T> scale(const Tensor<T>&, T);                                                     \
    template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                     \
    template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&);                                     \
    template Tensor<T> transpose(const Tensor<T>&);                                                    \
    template Tensor<T> silu(const Tensor<T>&);                                                         \
    template Tensor<T> gelu(const Tensor<T>&);                                                         \
    template Tensor<T> rms_norm(const Tensor<T>&, const Tensor<T>&, T);                                \
    template Tensor<T> softmax(const Tensor<T>&);                                                      \
    template Tensor<T> masked_row_softmax(const Tensor<T>&, const std::vector<std::uint8_t>&);          \
    template Tensor<T> embedding_gather(const Tensor<T>&, const std::vector<std::int32_t>&);            \
    template Tensor<T> row_slice(const Tensor<T>&, std::int64_t);                                      \
    template Tensor<T> col_slice(const Tensor<T>&, std::int64_t, std::int64_t);                        \
    template Tensor<T> concat(const std::vector<Tensor<T>>&);                                          \
    template Tensor<T> stack_rows(const std::vector<Tensor<T>>&);                                      \
    template Tensor<T> concat_cols(const std::vector<Tensor<T>>&);                                     \
    template Tensor<T> reshape(const Tensor<T>&, Shape);                                               \
    template Tensor<T> element(const Tensor<T>&, std::int64_t);                                        \
    template Tensor<T> scale_t(const Tensor<T>&, const Tensor<T>&);                                    \
    template Tensor<T> broadcast_scalar(const Tensor<T>&, std::int64_t);                               \
    template Tensor<T> dot(const Tensor<T>&, const Tensor<T>&);                                        \
    template Tensor<T> sum(const Tensor<T>&);                                                          \
    template Tensor<T> mean(const Tensor<T>&);                                                         \
    template Tensor<T> mse_loss(const Tensor<T>&, const Tensor<T>&);                                   \
    template void backward(const Tensor<T>&);                                                          \
    template void zero_grads(const std::vector<Tensor<T>>&);

ALOPE_INSTANTIATE_OPS(float)
ALOPE_INSTANTIATE_OPS(double)

#undef ALOPE_INSTANTIATE_OPS

}  // namespace alope
