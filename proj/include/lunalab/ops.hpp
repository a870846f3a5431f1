#pragma once

// Differentiable operations over lunalab::Tensor. Matrices are row-major
// [rows x cols]; "length-wise" ops treat rows as sequence positions and
// columns as feature channels.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "lunalab/tensor.hpp"

namespace lunalab {

namespace detail {

template <typename T>
void require_matrix(const Tensor<T>& t, const char* op) {
    if (!t.defined() || t.rank() != 2) {
        throw ConfigError(std::string(op) + ": expected a matrix, got " +
                          (t.defined() ? shape_str(t.shape()) : std::string("<undefined>")));
    }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ConfigError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
    }
}

template <typename T>
bool wants_grad(const std::shared_ptr<TensorNode<T>>& n) {
    return n->requires_grad;
}

// Same-coverage padding for a length-wise window op.
struct WindowGeometry {
    std::size_t out_len;
    std::ptrdiff_t left_pad;
};

inline WindowGeometry window_geometry(std::size_t len, std::size_t kernel, std::size_t stride) {
    const std::size_t out_len = (len + stride - 1) / stride;
    const std::ptrdiff_t needed = static_cast<std::ptrdiff_t>((out_len - 1) * stride + kernel) -
                                  static_cast<std::ptrdiff_t>(len);
    const std::ptrdiff_t pad = std::max<std::ptrdiff_t>(0, needed);
    return {out_len, pad / 2};
}

} // namespace detail

// a[m x k] * b[k x n]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_matrix(a, "matmul");
    detail::require_matrix(b, "matmul");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) {
        throw ConfigError("matmul: inner extents disagree, " + shape_str(a.shape()) + " x " +
                          shape_str(b.shape()));
    }
    std::vector<T> out(m * n, T(0));
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        T* row = out.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = pa[i * k + p];
            const T* brow = pb + p * n;
            for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
        }
    }
    record_flops(static_cast<std::uint64_t>(m) * n * k);
    return Tensor<T>::from_op({m, n}, std::move(out), {a.node(), b.node()}, [m, k, n](TensorNode<T>& self) {
        auto& na = *self.parents[0];
        auto& nb = *self.parents[1];
        const T* g = self.grad.data();
        if (na.requires_grad) {
            T* ga = na.grad.data();
            const T* vb = nb.value.data();
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t p = 0; p < k; ++p) {
                    T acc = 0;
                    const T* brow = vb + p * n;
                    const T* grow = g + i * n;
                    for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                    ga[i * k + p] += acc;
                }
            }
        }
        if (nb.requires_grad) {
            T* gb = nb.grad.data();
            const T* va = na.value.data();
            for (std::size_t i = 0; i < m; ++i) {
                const T* grow = g + i * n;
                for (std::size_t p = 0; p < k; ++p) {
                    const T av = va[i * k + p];
                    T* gbrow = gb + p * n;
                    for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                }
            }
        }
    });
}

// a[m x k] * b[n x k]^T, the query-key product.
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_matrix(a, "matmul_nt");
    detail::require_matrix(b, "matmul_nt");
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    if (b.cols() != k) {
        throw ConfigError("matmul_nt: inner extents disagree, " + shape_str(a.shape()) + " x " +
                          shape_str(b.shape()) + "^T");
    }
    std::vector<T> out(m * n);
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            T acc = 0;
            for (std::size_t p = 0; p < k; ++p) acc += pa[i * k + p] * pb[j * k + p];
            out[i * n + j] = acc;
        }
    }
    record_flops(static_cast<std::uint64_t>(m) * n * k);
    return Tensor<T>::from_op({m, n}, std::move(out), {a.node(), b.node()}, [m, k, n](TensorNode<T>& self) {
        auto& na = *self.parents[0];
        auto& nb = *self.parents[1];
        const T* g = self.grad.data();
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                const T gv = g[i * n + j];
                if (gv == T(0)) continue;
                if (na.requires_grad) {
                    T* ga = na.grad.data() + i * k;
                    const T* vb = nb.value.data() + j * k;
                    for (std::size_t p = 0; p < k; ++p) ga[p] += gv * vb[p];
                }
                if (nb.requires_grad) {
                    T* gb = nb.grad.data() + j * k;
                    const T* va = na.value.data() + i * k;
                    for (std::size_t p = 0; p < k; ++p) gb[p] += gv * va[p];
                }
            }
        }
    });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return Tensor<T>::from_op(a.shape(), std::move(out), {a.node(), b.node()}, [](TensorNode<T>& self) {
        for (auto& p : self.parents) {
            if (!p->requires_grad) continue;
            for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
        }
    });
}

// a[m x n] + b broadcast over rows; b holds n elements.
template <typename T>
Tensor<T> add_row(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_matrix(a, "add_row");
    const std::size_t m = a.rows(), n = a.cols();
    if (b.numel() != n) {
        throw ConfigError("add_row: row vector " + shape_str(b.shape()) + " does not match " +
                          shape_str(a.shape()));
    }
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.data()[i * n + j] + b.data()[j];
    return Tensor<T>::from_op(a.shape(), std::move(out), {a.node(), b.node()}, [m, n](TensorNode<T>& self) {
        auto& na = *self.parents[0];
        auto& nb = *self.parents[1];
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                const T g = self.grad[i * n + j];
                if (na.requires_grad) na.grad[i * n + j] += g;
                if (nb.requires_grad) nb.grad[j] += g;
            }
        }
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return Tensor<T>::from_op(a.shape(), std::move(out), {a.node(), b.node()}, [](TensorNode<T>& self) {
        auto& na = *self.parents[0];
        auto& nb = *self.parents[1];
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (na.requires_grad) na.grad[i] += self.grad[i] * nb.value[i];
            if (nb.requires_grad) nb.grad[i] += self.grad[i] * na.value[i];
        }
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
    return Tensor<T>::from_op(a.shape(), std::move(out), {a.node()}, [factor](TensorNode<T>& self) {
        auto& na = *self.parents[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i) na.grad[i] += self.grad[i] * factor;
    });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T total = 0;
    for (T v : a.data()) total += v;
    return Tensor<T>::from_op({1}, {total}, {a.node()}, [](TensorNode<T>& self) {
        auto& na = *self.parents[0];
        const T g = self.grad[0];
        for (auto& v : na.grad) v += g;
    });
}

// Mean over rows -> [1 x n]. With a row mask only rows flagged true count.
template <typename T>
Tensor<T> mean_rows(const Tensor<T>& a, const std::vector<bool>* row_mask = nullptr) {
    detail::require_matrix(a, "mean_rows");
    const std::size_t m = a.rows(), n = a.cols();
    if (row_mask && row_mask->size() != m) throw ConfigError("mean_rows: mask length mismatch");
    std::vector<T> weights(m, T(0));
    std::size_t count = 0;
    for (std::size_t i = 0; i < m; ++i) count += (!row_mask || (*row_mask)[i]) ? 1 : 0;
    if (count == 0) throw InputError("mean_rows: every row is masked");
    for (std::size_t i = 0; i < m; ++i) {
        weights[i] = (!row_mask || (*row_mask)[i]) ? T(1) / static_cast<T>(count) : T(0);
    }
    std::vector<T> out(n, T(0));
    for (std::size_t i = 0; i < m; ++i) {
        if (weights[i] == T(0)) continue;
        for (std::size_t j = 0; j < n; ++j) out[j] += a.data()[i * n + j];
    }
    for (auto& v : out) v /= static_cast<T>(count);
    return Tensor<T>::from_op({1, n}, std::move(out), {a.node()}, [m, n, weights](TensorNode<T>& self) {
        auto& na = *self.parents[0];
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) na.grad[i * n + j] += self.grad[j] * weights[i];
    });
}

// x * exp(-t) for a scalar tensor t: dividing logits by a positive temperature exp(t).
template <typename T>
Tensor<T> div_exp(const Tensor<T>& x, const Tensor<T>& t) {
    if (t.numel() != 1) throw ConfigError("div_exp: temperature must be a scalar, got " + shape_str(t.shape()));
    const T divisor = std::exp(t.item());
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] / divisor;
    return Tensor<T>::from_op(x.shape(), std::move(out), {x.node(), t.node()}, [divisor](TensorNode<T>& self) {
        auto& nx = *self.parents[0];
        auto& nt = *self.parents[1];
        T gt = 0;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (nx.requires_grad) nx.grad[i] += self.grad[i] / divisor;
            gt -= self.grad[i] * self.value[i];
        }
        if (nt.requires_grad) nt.grad[0] += gt;
    });
}

// Row-wise softmax over the last extent. `column_mask` (length = cols) marks
// valid keys; masked logits behave as -inf.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x, const std::vector<bool>* column_mask = nullptr) {
    const std::size_t n = x.cols();
    const std::size_t m = x.numel() / n;
    if (column_mask && column_mask->size() != n) throw ConfigError("softmax_rows: mask length mismatch");
    if (column_mask && std::none_of(column_mask->begin(), column_mask->end(), [](bool b) { return b; })) {
        throw InputError("softmax_rows: every key is masked");
    }
    std::vector<T> out(x.numel());
    const T* in = x.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        const T* row = in + i * n;
        T* y = out.data() + i * n;
        T peak = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
            if (std::isnan(row[j])) throw NumericError("softmax_rows: NaN logit");
            if (!column_mask || (*column_mask)[j]) peak = std::max(peak, row[j]);
        }
        T total = 0;
        for (std::size_t j = 0; j < n; ++j) {
            y[j] = (!column_mask || (*column_mask)[j]) ? std::exp(row[j] - peak) : T(0);
            total += y[j];
        }
        for (std::size_t j = 0; j < n; ++j) y[j] /= total;
    }
    return Tensor<T>::from_op(x.shape(), std::move(out), {x.node()}, [m, n](TensorNode<T>& self) {
        auto& nx = *self.parents[0];
        for (std::size_t i = 0; i < m; ++i) {
            const T* y = self.value.data() + i * n;
            const T* g = self.grad.data() + i * n;
            T dot = 0;
            for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
            T* gx = nx.grad.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) gx[j] += y[j] * (g[j] - dot);
        }
    });
}

inline constexpr double kLayerNormEps = 1e-5;

// Per-row normalization over the last extent, then gamma * xhat + beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = static_cast<T>(kLayerNormEps)) {
    const std::size_t d = x.cols();
    const std::size_t m = x.numel() / d;
    if (gamma.numel() != d || beta.numel() != d) {
        throw ConfigError("layer_norm: gain/bias width does not match " + shape_str(x.shape()));
    }
    std::vector<T> out(x.numel());
    std::vector<T> xhat(x.numel());
    std::vector<T> inv_std(m);
    const T* in = x.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        const T* row = in + i * d;
        T mean = 0;
        for (std::size_t j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<T>(d);
        T var = 0;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= static_cast<T>(d);
        const T inv = T(1) / std::sqrt(var + eps);
        inv_std[i] = inv;
        for (std::size_t j = 0; j < d; ++j) {
            xhat[i * d + j] = (row[j] - mean) * inv;
            out[i * d + j] = xhat[i * d + j] * gamma.data()[j] + beta.data()[j];
        }
    }
    return Tensor<T>::from_op(
        x.shape(), std::move(out), {x.node(), gamma.node(), beta.node()},
        [m, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](TensorNode<T>& self) {
            auto& nx = *self.parents[0];
            auto& ng = *self.parents[1];
            auto& nb = *self.parents[2];
            std::vector<T> gxhat(d);
            for (std::size_t i = 0; i < m; ++i) {
                const T* g = self.grad.data() + i * d;
                const T* xh = xhat.data() + i * d;
                T sum_g = 0, sum_gx = 0;
                for (std::size_t j = 0; j < d; ++j) {
                    if (ng.requires_grad) ng.grad[j] += g[j] * xh[j];
                    if (nb.requires_grad) nb.grad[j] += g[j];
                    gxhat[j] = g[j] * ng.value[j];
                    sum_g += gxhat[j];
                    sum_gx += gxhat[j] * xh[j];
                }
                if (!nx.requires_grad) continue;
                const T scale_factor = inv_std[i] / static_cast<T>(d);
                T* gx = nx.grad.data() + i * d;
                for (std::size_t j = 0; j < d; ++j) {
                    gx[j] += scale_factor * (static_cast<T>(d) * gxhat[j] - sum_g - xh[j] * sum_gx);
                }
            }
        });
}

// Exact GELU: 0.5 x (1 + erf(x / sqrt 2)).
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T v = x.data()[i];
        out[i] = T(0.5) * v * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>));
    }
    return Tensor<T>::from_op(x.shape(), std::move(out), {x.node()}, [](TensorNode<T>& self) {
        auto& nx = *self.parents[0];
        const T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> / std::numbers::sqrt2_v<T>;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const T v = nx.value[i];
            const T cdf = T(0.5) * (T(1) + std::erf(v / std::numbers::sqrt2_v<T>));
            const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
            nx.grad[i] += self.grad[i] * (cdf + v * pdf);
        }
    });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t count) {
    detail::require_matrix(x, "slice_cols");
    const std::size_t m = x.rows(), n = x.cols();
    if (count == 0 || begin + count > n) throw ConfigError("slice_cols: range out of bounds for " + shape_str(x.shape()));
    std::vector<T> out(m * count);
    for (std::size_t i = 0; i < m; ++i)
        std::copy_n(x.data().data() + i * n + begin, count, out.data() + i * count);
    return Tensor<T>::from_op({m, count}, std::move(out), {x.node()}, [m, n, begin, count](TensorNode<T>& self) {
        auto& nx = *self.parents[0];
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < count; ++j) nx.grad[i * n + begin + j] += self.grad[i * count + j];
    });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t count) {
    detail::require_matrix(x, "slice_rows");
    const std::size_t m = x.rows(), n = x.cols();
    if (count == 0 || begin + count > m) throw ConfigError("slice_rows: range out of bounds for " + shape_str(x.shape()));
    std::vector<T> out(x.data().begin() + begin * n, x.data().begin() + (begin + count) * n);
    return Tensor<T>::from_op({count, n}, std::move(out), {x.node()}, [n, begin](TensorNode<T>& self) {
        auto& nx = *self.parents[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i) nx.grad[begin * n + i] += self.grad[i];
    });
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ConfigError("concat_cols: no inputs");
    const std::size_t m = parts.front().rows();
    std::size_t n = 0;
    std::vector<std::size_t> offsets;
    std::vector<std::shared_ptr<TensorNode<T>>> nodes;
    for (const auto& p : parts) {
        detail::require_matrix(p, "concat_cols");
        if (p.rows() != m) throw ConfigError("concat_cols: row counts differ");
        offsets.push_back(n);
        n += p.cols();
        nodes.push_back(p.node());
    }
    std::vector<T> out(m * n);
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const std::size_t w = parts[k].cols();
        for (std::size_t i = 0; i < m; ++i)
            std::copy_n(parts[k].data().data() + i * w, w, out.data() + i * n + offsets[k]);
    }
    return Tensor<T>::from_op({m, n}, std::move(out), std::move(nodes), [m, n, offsets](TensorNode<T>& self) {
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
            auto& p = *self.parents[k];
            if (!p.requires_grad) continue;
            const std::size_t w = p.shape.back();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < w; ++j) p.grad[i * w + j] += self.grad[i * n + offsets[k] + j];
        }
    });
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ConfigError("concat_rows: no inputs");
    const std::size_t n = parts.front().cols();
    std::size_t m = 0;
    std::vector<std::shared_ptr<TensorNode<T>>> nodes;
    std::vector<T> out;
    for (const auto& p : parts) {
        detail::require_matrix(p, "concat_rows");
        if (p.cols() != n) throw ConfigError("concat_rows: column counts differ");
        m += p.rows();
        out.insert(out.end(), p.data().begin(), p.data().end());
        nodes.push_back(p.node());
    }
    return Tensor<T>::from_op({m, n}, std::move(out), std::move(nodes), [](TensorNode<T>& self) {
        std::size_t offset = 0;
        for (auto& p : self.parents) {
            const std::size_t len = p->value.size();
            if (p->requires_grad)
                for (std::size_t i = 0; i < len; ++i) p->grad[i] += self.grad[offset + i];
            offset += len;
        }
    });
}

// Gathers rows of table[V x d] by id.
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<int>& ids) {
    detail::require_matrix(table, "embedding");
    const std::size_t vocab = table.rows(), d = table.cols();
    if (ids.empty()) throw InputError("embedding: empty id sequence");
    std::vector<T> out(ids.size() * d);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
            throw InputError("embedding: token id " + std::to_string(ids[i]) + " outside vocabulary of size " +
                             std::to_string(vocab));
        }
        std::copy_n(table.data().data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
    }
    return Tensor<T>::from_op({ids.size(), d}, std::move(out), {table.node()}, [ids, d](TensorNode<T>& self) {
        auto& nt = *self.parents[0];
        for (std::size_t i = 0; i < ids.size(); ++i) {
            T* g = nt.grad.data() + static_cast<std::size_t>(ids[i]) * d;
            for (std::size_t j = 0; j < d; ++j) g[j] += self.grad[i * d + j];
        }
    });
}

// Zeroes rows whose mask entry is false.
template <typename T>
Tensor<T> mask_rows(const Tensor<T>& x, const std::vector<bool>& row_mask) {
    detail::require_matrix(x, "mask_rows");
    const std::size_t m = x.rows(), n = x.cols();
    if (row_mask.size() != m) throw ConfigError("mask_rows: mask length mismatch");
    std::vector<T> out(x.data().begin(), x.data().end());
    for (std::size_t i = 0; i < m; ++i)
        if (!row_mask[i]) std::fill_n(out.data() + i * n, n, T(0));
    return Tensor<T>::from_op(x.shape(), std::move(out), {x.node()}, [m, n, row_mask](TensorNode<T>& self) {
        auto& nx = *self.parents[0];
        for (std::size_t i = 0; i < m; ++i)
            if (row_mask[i])
                for (std::size_t j = 0; j < n; ++j) nx.grad[i * n + j] += self.grad[i * n + j];
    });
}

// Inverted dropout. Returns x unchanged when rate is zero.
template <typename T, typename Rng>
Tensor<T> dropout(const Tensor<T>& x, double rate, Rng& rng) {
    if (rate <= 0.0) return x;
    if (rate >= 1.0) throw ConfigError("dropout: rate must be below 1");
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    std::vector<T> factor(x.numel());
    for (auto& f : factor) f = uniform(rng) < rate ? T(0) : keep_scale;
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * factor[i];
    return Tensor<T>::from_op(x.shape(), std::move(out), {x.node()}, [factor = std::move(factor)](TensorNode<T>& self) {
        auto& nx = *self.parents[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i) nx.grad[i] += self.grad[i] * factor[i];
    });
}

// Length-wise max pooling with kernel (K, 1), stride (S, 1) and -inf padding.
template <typename T>
Tensor<T> maxpool_length(const Tensor<T>& x, std::size_t kernel, std::size_t stride) {
    detail::require_matrix(x, "maxpool_length");
    if (kernel < 1 || stride < 1) throw ConfigError("maxpool_length: kernel and stride must be >= 1");
    const std::size_t len = x.rows(), d = x.cols();
    const auto geo = detail::window_geometry(len, kernel, stride);
    std::vector<T> out(geo.out_len * d);
    std::vector<std::size_t> argmax(geo.out_len * d);
    const T* in = x.data().data();
    for (std::size_t t = 0; t < geo.out_len; ++t) {
        const std::ptrdiff_t start = static_cast<std::ptrdiff_t>(t * stride) - geo.left_pad;
        for (std::size_t c = 0; c < d; ++c) {
            T best = -std::numeric_limits<T>::infinity();
            std::size_t where = 0;
            for (std::size_t k = 0; k < kernel; ++k) {
                const std::ptrdiff_t pos = start + static_cast<std::ptrdiff_t>(k);
                if (pos < 0 || pos >= static_cast<std::ptrdiff_t>(len)) continue;
                const T v = in[static_cast<std::size_t>(pos) * d + c];
                if (v > best) {
                    best = v;
                    where = static_cast<std::size_t>(pos);
                }
            }
            out[t * d + c] = best;
            argmax[t * d + c] = where;
        }
    }
    return Tensor<T>::from_op({geo.out_len, d}, std::move(out), {x.node()},
                              [d, argmax = std::move(argmax)](TensorNode<T>& self) {
                                  auto& nx = *self.parents[0];
                                  for (std::size_t i = 0; i < argmax.size(); ++i)
                                      nx.grad[argmax[i] * d + i % d] += self.grad[i];
                              });
}

// Depthwise length-wise convolution (cross-correlation): every channel c has
// its own kernel column weights[:, c] and bias[c]; zero padding.
template <typename T>
Tensor<T> conv_length(const Tensor<T>& x, const Tensor<T>& weights, const Tensor<T>& bias, std::size_t stride) {
    detail::require_matrix(x, "conv_length");
    detail::require_matrix(weights, "conv_length");
    const std::size_t len = x.rows(), d = x.cols(), kernel = weights.rows();
    if (stride < 1) throw ConfigError("conv_length: stride must be >= 1");
    if (weights.cols() != d || bias.numel() != d) {
        throw ConfigError("conv_length: kernel " + shape_str(weights.shape()) + " does not match input " +
                          shape_str(x.shape()));
    }
    const auto geo = detail::window_geometry(len, kernel, stride);
    std::vector<T> out(geo.out_len * d);
    const T* in = x.data().data();
    const T* w = weights.data().data();
    for (std::size_t t = 0; t < geo.out_len; ++t) {
        const std::ptrdiff_t start = static_cast<std::ptrdiff_t>(t * stride) - geo.left_pad;
        T* y = out.data() + t * d;
        for (std::size_t c = 0; c < d; ++c) y[c] = bias.data()[c];
        for (std::size_t k = 0; k < kernel; ++k) {
            const std::ptrdiff_t pos = start + static_cast<std::ptrdiff_t>(k);
            if (pos < 0 || pos >= static_cast<std::ptrdiff_t>(len)) continue;
            const T* row = in + static_cast<std::size_t>(pos) * d;
            for (std::size_t c = 0; c < d; ++c) y[c] += w[k * d + c] * row[c];
        }
    }
    record_flops(static_cast<std::uint64_t>(geo.out_len) * kernel * d);
    return Tensor<T>::from_op(
        {geo.out_len, d}, std::move(out), {x.node(), weights.node(), bias.node()},
        [len, d, kernel, stride, geo](TensorNode<T>& self) {
            auto& nx = *self.parents[0];
            auto& nw = *self.parents[1];
            auto& nb = *self.parents[2];
            for (std::size_t t = 0; t < geo.out_len; ++t) {
                const std::ptrdiff_t start = static_cast<std::ptrdiff_t>(t * stride) - geo.left_pad;
                const T* g = self.grad.data() + t * d;
                if (nb.requires_grad)
                    for (std::size_t c = 0; c < d; ++c) nb.grad[c] += g[c];
                for (std::size_t k = 0; k < kernel; ++k) {
                    const std::ptrdiff_t pos = start + static_cast<std::ptrdiff_t>(k);
                    if (pos < 0 || pos >= static_cast<std::ptrdiff_t>(len)) continue;
                    const std::size_t row = static_cast<std::size_t>(pos) * d;
                    for (std::size_t c = 0; c < d; ++c) {
                        if (nx.requires_grad) nx.grad[row + c] += g[c] * nw.value[k * d + c];
                        if (nw.requires_grad) nw.grad[k * d + c] += g[c] * nx.value[row + c];
                    }
                }
            }
        });
}

} // namespace lunalab
