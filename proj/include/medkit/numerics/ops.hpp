#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "medkit/errors.hpp"
#include "medkit/numerics/tensor.hpp"

// Differentiable tensor operations. Every op validates shapes, computes its
// forward value eagerly and records a backward closure when any input needs
// a gradient.
namespace medkit::ops {

namespace detail {

using medkit::detail::Node;

// Parent k's gradient buffer, or nullptr when that parent is constant.
inline std::vector<double>* grad_of(Node& n, std::size_t k) {
    Node& p = *n.parents[k];
    return p.requires_grad ? &p.grad : nullptr;
}

inline const std::vector<double>& value_of(Node& n, std::size_t k) { return n.parents[k]->data; }

inline void require(bool cond, const std::string& msg) {
    if (!cond) {
        throw DimensionError(msg);
    }
}

// Splits a shape around `axis` into (outer, n, inner) extents.
struct AxisView {
    std::size_t outer = 1;
    std::size_t n = 1;
    std::size_t inner = 1;
};

inline AxisView axis_view(const Shape& shape, int axis) {
    const int r = static_cast<int>(shape.size());
    if (r == 0) {
        return {};
    }
    if (axis < 0) {
        axis += r;
    }
    require(axis >= 0 && axis < r, "axis out of range for shape " + shape_str(shape));
    AxisView v;
    for (int i = 0; i < axis; ++i) {
        v.outer *= shape[i];
    }
    v.n = shape[axis];
    for (int i = axis + 1; i < r; ++i) {
        v.inner *= shape[i];
    }
    return v;
}

}  // namespace detail

// a: [m x k] or [k];  b: [k x n].  Result [m x n] (or [n] for a vector a).
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require(b.rank() == 2 && (a.rank() == 1 || a.rank() == 2),
                    "matmul expects [m x k] or [k] times [k x n], got " + shape_str(a.shape()) +
                        " and " + shape_str(b.shape()));
    const std::size_t m = a.rank() == 2 ? a.dim(0) : 1;
    const std::size_t k = a.cols();
    const std::size_t n = b.dim(1);
    detail::require(b.dim(0) == k, "matmul inner dimensions differ: " + shape_str(a.shape()) + " x " +
                                       shape_str(b.shape()));
    std::vector<double> out(m * n, 0.0);
    const auto A = a.data();
    const auto B = b.data();
    for (std::size_t i = 0; i < m; ++i) {
        double* orow = out.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = A[i * k + p];
            if (av == 0.0) {
                continue;
            }
            const double* brow = B.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                orow[j] += av * brow[j];
            }
        }
    }
    Shape shape = a.rank() == 2 ? Shape{m, n} : Shape{n};
    return Tensor::make_result(
        std::move(shape), std::move(out), {a, b},
        [m, k, n](detail::Node& self) {
            const auto& G = self.grad;
            const auto& A = detail::value_of(self, 0);
            const auto& B = detail::value_of(self, 1);
            if (auto* ga = detail::grad_of(self, 0)) {
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t p = 0; p < k; ++p) {
                        double s = 0.0;
                        for (std::size_t j = 0; j < n; ++j) {
                            s += G[i * n + j] * B[p * n + j];
                        }
                        (*ga)[i * k + p] += s;
                    }
                }
            }
            if (auto* gb = detail::grad_of(self, 1)) {
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t p = 0; p < k; ++p) {
                        const double av = A[i * k + p];
                        for (std::size_t j = 0; j < n; ++j) {
                            (*gb)[p * n + j] += av * G[i * n + j];
                        }
                    }
                }
            }
        },
        "matmul");
}

inline Tensor transpose(const Tensor& a) {
    detail::require(a.rank() == 2, "transpose expects a matrix");
    const std::size_t m = a.dim(0);
    const std::size_t n = a.dim(1);
    std::vector<double> out(m * n);
    const auto A = a.data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out[j * m + i] = A[i * n + j];
        }
    }
    return Tensor::make_result(
        Shape{n, m}, std::move(out), {a},
        [m, n](detail::Node& self) {
            auto& ga = *detail::grad_of(self, 0);
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    ga[i * n + j] += self.grad[j * m + i];
                }
            }
        },
        "transpose");
}

// Elementwise sum. b may also be a vector matching a's last dimension, in which
// case it is broadcast over a's rows.
inline Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() == b.shape()) {
        std::vector<double> out(a.data().begin(), a.data().end());
        const auto B = b.data();
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] += B[i];
        }
        return Tensor::make_result(
            a.shape(), std::move(out), {a, b},
            [](detail::Node& self) {
                for (std::size_t k = 0; k < 2; ++k) {
                    if (auto* g = detail::grad_of(self, k)) {
                        for (std::size_t i = 0; i < self.grad.size(); ++i) {
                            (*g)[i] += self.grad[i];
                        }
                    }
                }
            },
            "add");
    }
    detail::require(a.rank() == 2 && b.rank() == 1 && b.dim(0) == a.dim(1),
                    "add: cannot broadcast " + shape_str(b.shape()) + " onto " + shape_str(a.shape()));
    const std::size_t m = a.dim(0);
    const std::size_t n = a.dim(1);
    std::vector<double> out(a.data().begin(), a.data().end());
    const auto B = b.data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out[i * n + j] += B[j];
        }
    }
    return Tensor::make_result(
        a.shape(), std::move(out), {a, b},
        [m, n](detail::Node& self) {
            if (auto* ga = detail::grad_of(self, 0)) {
                for (std::size_t i = 0; i < m * n; ++i) {
                    (*ga)[i] += self.grad[i];
                }
            }
            if (auto* gb = detail::grad_of(self, 1)) {
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                        (*gb)[j] += self.grad[i * n + j];
                    }
                }
            }
        },
        "add");
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require(a.shape() == b.shape(), "sub: shape mismatch " + shape_str(a.shape()) + " vs " +
                                                shape_str(b.shape()));
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a[i] - b[i];
    }
    return Tensor::make_result(
        a.shape(), std::move(out), {a, b},
        [](detail::Node& self) {
            if (auto* ga = detail::grad_of(self, 0)) {
                for (std::size_t i = 0; i < self.grad.size(); ++i) {
                    (*ga)[i] += self.grad[i];
                }
            }
            if (auto* gb = detail::grad_of(self, 1)) {
                for (std::size_t i = 0; i < self.grad.size(); ++i) {
                    (*gb)[i] -= self.grad[i];
                }
            }
        },
        "sub");
}

// Elementwise (Hadamard) product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require(a.shape() == b.shape(), "mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                                                shape_str(b.shape()));
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a[i] * b[i];
    }
    return Tensor::make_result(
        a.shape(), std::move(out), {a, b},
        [](detail::Node& self) {
            const auto& A = detail::value_of(self, 0);
            const auto& B = detail::value_of(self, 1);
            if (auto* ga = detail::grad_of(self, 0)) {
                for (std::size_t i = 0; i < self.grad.size(); ++i) {
                    (*ga)[i] += self.grad[i] * B[i];
                }
            }
            if (auto* gb = detail::grad_of(self, 1)) {
                for (std::size_t i = 0; i < self.grad.size(); ++i) {
                    (*gb)[i] += self.grad[i] * A[i];
                }
            }
        },
        "mul");
}

inline Tensor square(const Tensor& a) { return mul(a, a); }

inline Tensor scale(const Tensor& a, double s) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a[i] * s;
    }
    return Tensor::make_result(
        a.shape(), std::move(out), {a},
        [s](detail::Node& self) {
            auto& ga = *detail::grad_of(self, 0);
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                ga[i] += self.grad[i] * s;
            }
        },
        "scale");
}

namespace detail {

// Pointwise op given f(x) and f'(x) expressed through (x, y).
template <typename F, typename DF>
Tensor pointwise(const Tensor& a, F f, DF df, const char* name) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = f(a[i]);
    }
    return Tensor::make_result(
        a.shape(), std::move(out), {a},
        [df](Node& self) {
            const auto& X = value_of(self, 0);
            auto& ga = *grad_of(self, 0);
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                ga[i] += self.grad[i] * df(X[i], self.data[i]);
            }
        },
        name);
}

}  // namespace detail

inline Tensor tanh(const Tensor& a) {
    return detail::pointwise(
        a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; }, "tanh");
}

inline Tensor sigmoid(const Tensor& a) {
    return detail::pointwise(
        a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
        [](double, double y) { return y * (1.0 - y); }, "sigmoid");
}

// tanh approximation of GELU.
inline Tensor gelu(const Tensor& a) {
    constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    return detail::pointwise(
        a,
        [](double x) { return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x))); },
        [](double x, double) {
            const double u = c * (x + 0.044715 * x * x * x);
            const double t = std::tanh(u);
            const double du = c * (1.0 + 3.0 * 0.044715 * x * x);
            return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
        },
        "gelu");
}

inline Tensor log(const Tensor& a) {
    return detail::pointwise(
        a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; }, "log");
}

// Softmax along `axis` (negative counts from the back), max-shifted.
inline Tensor softmax(const Tensor& a, int axis = -1) {
    const auto v = detail::axis_view(a.shape(), axis);
    std::vector<double> out(a.size());
    const auto A = a.data();
    for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t in = 0; in < v.inner; ++in) {
            const std::size_t base = o * v.n * v.inner + in;
            double mx = A[base];
            for (std::size_t i = 1; i < v.n; ++i) {
                mx = std::max(mx, A[base + i * v.inner]);
            }
            double z = 0.0;
            for (std::size_t i = 0; i < v.n; ++i) {
                const double e = std::exp(A[base + i * v.inner] - mx);
                out[base + i * v.inner] = e;
                z += e;
            }
            for (std::size_t i = 0; i < v.n; ++i) {
                out[base + i * v.inner] /= z;
            }
        }
    }
    return Tensor::make_result(
        a.shape(), std::move(out), {a},
        [v](detail::Node& self) {
            auto& ga = *detail::grad_of(self, 0);
            const auto& Y = self.data;
            const auto& G = self.grad;
            for (std::size_t o = 0; o < v.outer; ++o) {
                for (std::size_t in = 0; in < v.inner; ++in) {
                    const std::size_t base = o * v.n * v.inner + in;
                    double dot = 0.0;
                    for (std::size_t i = 0; i < v.n; ++i) {
                        dot += G[base + i * v.inner] * Y[base + i * v.inner];
                    }
                    for (std::size_t i = 0; i < v.n; ++i) {
                        const std::size_t idx = base + i * v.inner;
                        ga[idx] += Y[idx] * (G[idx] - dot);
                    }
                }
            }
        },
        "softmax");
}

// Row-wise softmax over a [rows x cols] score matrix where allowed[r*cols+c]
// marks the admissible entries. Excluded entries get probability exactly 0. A
// row with nothing admissible puts all its mass on column 0.
inline Tensor masked_softmax(const Tensor& scores, std::span<const std::uint8_t> allowed) {
    detail::require(scores.rank() == 2, "masked_softmax expects a matrix");
    const std::size_t rows = scores.dim(0);
    const std::size_t cols = scores.dim(1);
    detail::require(allowed.size() == rows * cols, "masked_softmax: mask size mismatch");
    std::vector<double> out(rows * cols, 0.0);
    const auto S = scores.data();
    for (std::size_t r = 0; r < rows; ++r) {
        double mx = 0.0;
        bool any = false;
        for (std::size_t c = 0; c < cols; ++c) {
            if (allowed[r * cols + c]) {
                mx = any ? std::max(mx, S[r * cols + c]) : S[r * cols + c];
                any = true;
            }
        }
        if (!any) {
            out[r * cols] = 1.0;
            continue;
        }
        double z = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            if (allowed[r * cols + c]) {
                const double e = std::exp(S[r * cols + c] - mx);
                out[r * cols + c] = e;
                z += e;
            }
        }
        for (std::size_t c = 0; c < cols; ++c) {
            out[r * cols + c] /= z;
        }
    }
    return Tensor::make_result(
        scores.shape(), std::move(out), {scores},
        [rows, cols](detail::Node& self) {
            auto& ga = *detail::grad_of(self, 0);
            const auto& Y = self.data;
            const auto& G = self.grad;
            for (std::size_t r = 0; r < rows; ++r) {
                double dot = 0.0;
                for (std::size_t c = 0; c < cols; ++c) {
                    dot += G[r * cols + c] * Y[r * cols + c];
                }
                for (std::size_t c = 0; c < cols; ++c) {
                    ga[r * cols + c] += Y[r * cols + c] * (G[r * cols + c] - dot);
                }
            }
        },
        "masked_softmax");
}

// Log-softmax along the last axis.
inline Tensor log_softmax(const Tensor& a) {
    const std::size_t n = a.cols();
    const std::size_t m = a.size() / n;
    std::vector<double> out(a.size());
    const auto A = a.data();
    for (std::size_t r = 0; r < m; ++r) {
        double mx = A[r * n];
        for (std::size_t i = 1; i < n; ++i) {
            mx = std::max(mx, A[r * n + i]);
        }
        double z = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            z += std::exp(A[r * n + i] - mx);
        }
        const double lse = mx + std::log(z);
        for (std::size_t i = 0; i < n; ++i) {
            out[r * n + i] = A[r * n + i] - lse;
        }
    }
    return Tensor::make_result(
        a.shape(), std::move(out), {a},
        [m, n](detail::Node& self) {
            auto& ga = *detail::grad_of(self, 0);
            for (std::size_t r = 0; r < m; ++r) {
                double gsum = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    gsum += self.grad[r * n + i];
                }
                for (std::size_t i = 0; i < n; ++i) {
                    ga[r * n + i] += self.grad[r * n + i] - std::exp(self.data[r * n + i]) * gsum;
                }
            }
        },
        "log_softmax");
}

// Normalizes each row over the last axis to zero mean / unit variance, then
// applies gain and bias. eps sits inside the square root.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
    const std::size_t n = x.cols();
    detail::require(x.rank() >= 1 && gain.rank() == 1 && bias.rank() == 1 && gain.dim(0) == n &&
                        bias.dim(0) == n,
                    "layer_norm: gain/bias must match the last dimension of " + shape_str(x.shape()));
    const std::size_t m = x.size() / n;
    std::vector<double> out(x.size());
    std::vector<double> xhat(x.size());
    std::vector<double> inv_std(m);
    const auto X = x.data();
    const auto Gn = gain.data();
    const auto Bs = bias.data();
    for (std::size_t r = 0; r < m; ++r) {
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            mean += X[r * n + i];
        }
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double d = X[r * n + i] - mean;
            var += d * d;
        }
        var /= static_cast<double>(n);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t i = 0; i < n; ++i) {
            xhat[r * n + i] = (X[r * n + i] - mean) * inv_std[r];
            out[r * n + i] = xhat[r * n + i] * Gn[i] + Bs[i];
        }
    }
    return Tensor::make_result(
        x.shape(), std::move(out), {x, gain, bias},
        [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
            const auto& G = self.grad;
            const auto& Gn = detail::value_of(self, 1);
            if (auto* gg = detail::grad_of(self, 1)) {
                for (std::size_t r = 0; r < m; ++r) {
                    for (std::size_t i = 0; i < n; ++i) {
                        (*gg)[i] += G[r * n + i] * xhat[r * n + i];
                    }
                }
            }
            if (auto* gb = detail::grad_of(self, 2)) {
                for (std::size_t r = 0; r < m; ++r) {
                    for (std::size_t i = 0; i < n; ++i) {
                        (*gb)[i] += G[r * n + i];
                    }
                }
            }
            if (auto* gx = detail::grad_of(self, 0)) {
                const double nn = static_cast<double>(n);
                for (std::size_t r = 0; r < m; ++r) {
                    double sum_d = 0.0;
                    double sum_dx = 0.0;
                    for (std::size_t i = 0; i < n; ++i) {
                        const double d = G[r * n + i] * Gn[i];
                        sum_d += d;
                        sum_dx += d * xhat[r * n + i];
                    }
                    for (std::size_t i = 0; i < n; ++i) {
                        const double d = G[r * n + i] * Gn[i];
                        (*gx)[r * n + i] +=
                            inv_std[r] / nn * (nn * d - sum_d - xhat[r * n + i] * sum_dx);
                    }
                }
            }
        },
        "layer_norm");
}

// Gathers rows of a [V x H] table.
inline Tensor embedding(const Tensor& table, std::span<const std::size_t> ids) {
    detail::require(table.rank() == 2, "embedding table must be a matrix");
    detail::require(!ids.empty(), "embedding: empty id list");
    const std::size_t vocab = table.dim(0);
    const std::size_t h = table.dim(1);
    std::vector<double> out(ids.size() * h);
    const auto T = table.data();
    for (std::size_t r = 0; r < ids.size(); ++r) {
        detail::require(ids[r] < vocab, "embedding: id " + std::to_string(ids[r]) +
                                            " outside table of " + std::to_string(vocab) + " rows");
        std::copy_n(T.begin() + static_cast<std::ptrdiff_t>(ids[r] * h), h, out.begin() + static_cast<std::ptrdiff_t>(r * h));
    }
    std::vector<std::size_t> idcopy(ids.begin(), ids.end());
    return Tensor::make_result(
        Shape{ids.size(), h}, std::move(out), {table},
        [h, idcopy = std::move(idcopy)](detail::Node& self) {
            auto& gt = *detail::grad_of(self, 0);
            for (std::size_t r = 0; r < idcopy.size(); ++r) {
                for (std::size_t j = 0; j < h; ++j) {
                    gt[idcopy[r] * h + j] += self.grad[r * h + j];
                }
            }
        },
        "embedding");
}

// Rows [begin, end) of a matrix.
inline Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
    detail::require(a.rank() == 2 && begin < end && end <= a.dim(0), "slice_rows out of range");
    const std::size_t n = a.dim(1);
    std::vector<double> out(a.data().begin() + static_cast<std::ptrdiff_t>(begin * n),
                            a.data().begin() + static_cast<std::ptrdiff_t>(end * n));
    return Tensor::make_result(
        Shape{end - begin, n}, std::move(out), {a},
        [begin, n](detail::Node& self) {
            auto& ga = *detail::grad_of(self, 0);
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                ga[begin * n + i] += self.grad[i];
            }
        },
        "slice_rows");
}

// Columns [begin, end) of a matrix.
inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
    detail::require(a.rank() == 2 && begin < end && end <= a.dim(1), "slice_cols out of range");
    const std::size_t m = a.dim(0);
    const std::size_t n = a.dim(1);
    const std::size_t w = end - begin;
    std::vector<double> out(m * w);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
            out[i * w + j] = a[i * n + begin + j];
        }
    }
    return Tensor::make_result(
        Shape{m, w}, std::move(out), {a},
        [m, n, w, begin](detail::Node& self) {
            auto& ga = *detail::grad_of(self, 0);
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < w; ++j) {
                    ga[i * n + begin + j] += self.grad[i * w + j];
                }
            }
        },
        "slice_cols");
}

// Elements [begin, end) of a vector.
inline Tensor slice(const Tensor& a, std::size_t begin, std::size_t end) {
    detail::require(a.rank() == 1 && begin < end && end <= a.dim(0), "slice out of range");
    std::vector<double> out(a.data().begin() + static_cast<std::ptrdiff_t>(begin),
                            a.data().begin() + static_cast<std::ptrdiff_t>(end));
    return Tensor::make_result(
        Shape{end - begin}, std::move(out), {a},
        [begin](detail::Node& self) {
            auto& ga = *detail::grad_of(self, 0);
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                ga[begin + i] += self.grad[i];
            }
        },
        "slice");
}

// Row i of a matrix as a vector.
inline Tensor row(const Tensor& a, std::size_t i) {
    detail::require(a.rank() == 2 && i < a.dim(0), "row index out of range");
    const std::size_t n = a.dim(1);
    std::vector<double> out(a.data().begin() + static_cast<std::ptrdiff_t>(i * n),
                            a.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * n));
    return Tensor::make_result(
        Shape{n}, std::move(out), {a},
        [i, n](detail::Node& self) {
            auto& ga = *detail::grad_of(self, 0);
            for (std::size_t j = 0; j < n; ++j) {
                ga[i * n + j] += self.grad[j];
            }
        },
        "row");
}

inline Tensor reshape(const Tensor& a, Shape shape) {
    detail::require(shape_size(shape) == a.size(),
                    "reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
    std::vector<double> out(a.data().begin(), a.data().end());
    return Tensor::make_result(
        std::move(shape), std::move(out), {a},
        [](detail::Node& self) {
            auto& ga = *detail::grad_of(self, 0);
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                ga[i] += self.grad[i];
            }
        },
        "reshape");
}

// Concatenates vectors end to end (axis 0), stacks matrices by rows (axis 0),
// or joins matrices side by side (axis 1).
inline Tensor concat(const std::vector<Tensor>& parts, int axis = 0) {
    detail::require(!parts.empty(), "concat of nothing");
    const std::size_t r = parts.front().rank();
    for (const auto& p : parts) {
        detail::require(p.rank() == r, "concat: mixed ranks");
    }
    if (r == 1 || (r == 2 && axis == 0)) {
        const std::size_t w = r == 2 ? parts.front().dim(1) : 0;
        std::size_t total = 0;
        std::vector<double> out;
        std::vector<std::size_t> offsets;
        for (const auto& p : parts) {
            if (r == 2) {
                detail::require(p.dim(1) == w, "concat rows: column counts differ");
                total += p.dim(0);
            } else {
                total += p.dim(0);
            }
            offsets.push_back(out.size());
            out.insert(out.end(), p.data().begin(), p.data().end());
        }
        Shape shape = r == 2 ? Shape{total, w} : Shape{total};
        return Tensor::make_result(
            std::move(shape), std::move(out), parts,
            [offsets](detail::Node& self) {
                for (std::size_t k = 0; k < self.parents.size(); ++k) {
                    if (auto* g = detail::grad_of(self, k)) {
                        for (std::size_t i = 0; i < g->size(); ++i) {
                            (*g)[i] += self.grad[offsets[k] + i];
                        }
                    }
                }
            },
            "concat");
    }
    detail::require(r == 2 && axis == 1, "concat: unsupported axis");
    const std::size_t m = parts.front().dim(0);
    std::size_t total = 0;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
        detail::require(p.dim(0) == m, "concat cols: row counts differ");
        widths.push_back(p.dim(1));
        total += p.dim(1);
    }
    std::vector<double> out(m * total);
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < widths[k]; ++j) {
                out[i * total + off + j] = parts[k][i * widths[k] + j];
            }
        }
        off += widths[k];
    }
    return Tensor::make_result(
        Shape{m, total}, std::move(out), parts,
        [m, total, widths](detail::Node& self) {
            std::size_t off = 0;
            for (std::size_t k = 0; k < self.parents.size(); ++k) {
                if (auto* g = detail::grad_of(self, k)) {
                    for (std::size_t i = 0; i < m; ++i) {
                        for (std::size_t j = 0; j < widths[k]; ++j) {
                            (*g)[i * widths[k] + j] += self.grad[i * total + off + j];
                        }
                    }
                }
                off += widths[k];
            }
        },
        "concat");
}

// Stacks equal-length vectors as the rows of a matrix.
inline Tensor stack_rows(const std::vector<Tensor>& rows) {
    detail::require(!rows.empty(), "stack_rows of nothing");
    const std::size_t n = rows.front().size();
    std::vector<double> out;
    out.reserve(rows.size() * n);
    for (const auto& r : rows) {
        detail::require(r.rank() == 1 && r.size() == n, "stack_rows: vectors differ in length");
        out.insert(out.end(), r.data().begin(), r.data().end());
    }
    return Tensor::make_result(
        Shape{rows.size(), n}, std::move(out), rows,
        [n](detail::Node& self) {
            for (std::size_t k = 0; k < self.parents.size(); ++k) {
                if (auto* g = detail::grad_of(self, k)) {
                    for (std::size_t j = 0; j < n; ++j) {
                        (*g)[j] += self.grad[k * n + j];
                    }
                }
            }
        },
        "stack_rows");
}

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) {
        s += v;
    }
    return Tensor::make_result(
        Shape{}, {s}, {a},
        [](detail::Node& self) {
            auto& ga = *detail::grad_of(self, 0);
            for (auto& g : ga) {
                g += self.grad[0];
            }
        },
        "sum");
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

// Sum of scalar tensors.
inline Tensor add_n(const std::vector<Tensor>& terms) {
    detail::require(!terms.empty(), "add_n of nothing");
    Tensor acc = terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i) {
        acc = add(acc, terms[i]);
    }
    return acc;
}

// -log(probs[target]) on an explicit distribution. A zero probability is
// clamped to 1e-12 and reported through `clamped`.
inline Tensor cross_entropy(const Tensor& probs, std::size_t target, bool* clamped = nullptr) {
    detail::require(probs.rank() == 1, "cross_entropy expects a probability vector");
    detail::require(target < probs.size(), "cross_entropy: target index out of range");
    constexpr double floor = 1e-12;
    const double p = probs[target];
    const bool was_clamped = p < floor;
    if (clamped) {
        *clamped = was_clamped;
    }
    const double pc = was_clamped ? floor : p;
    return Tensor::make_result(
        Shape{}, {-std::log(pc)}, {probs},
        [target, pc](detail::Node& self) {
            auto& gp = *detail::grad_of(self, 0);
            gp[target] += -self.grad[0] / pc;
        },
        "cross_entropy");
}

// Mean over the listed (row, target) pairs of -log softmax(logits[row])[target].
// Works on a vector of logits (row must be 0) or a [rows x classes] matrix.
inline Tensor cross_entropy_logits(const Tensor& logits, std::span<const std::size_t> rows,
                                   std::span<const std::size_t> targets) {
    detail::require(rows.size() == targets.size() && !rows.empty(),
                    "cross_entropy_logits: need matching, non-empty row/target lists");
    const std::size_t n = logits.cols();
    const std::size_t m = logits.size() / n;
    const auto Z = logits.data();
    std::vector<double> probs(rows.size() * n);
    double total = 0.0;
    for (std::size_t k = 0; k < rows.size(); ++k) {
        detail::require(rows[k] < m && targets[k] < n, "cross_entropy_logits: index out of range");
        const double* z = Z.data() + rows[k] * n;
        double mx = z[0];
        for (std::size_t i = 1; i < n; ++i) {
            mx = std::max(mx, z[i]);
        }
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            probs[k * n + i] = std::exp(z[i] - mx);
            s += probs[k * n + i];
        }
        for (std::size_t i = 0; i < n; ++i) {
            probs[k * n + i] /= s;
        }
        total += (mx + std::log(s)) - z[targets[k]];
    }
    const double count = static_cast<double>(rows.size());
    std::vector<std::size_t> rcopy(rows.begin(), rows.end());
    std::vector<std::size_t> tcopy(targets.begin(), targets.end());
    return Tensor::make_result(
        Shape{}, {total / count}, {logits},
        [n, count, probs = std::move(probs), rcopy = std::move(rcopy),
         tcopy = std::move(tcopy)](detail::Node& self) {
            auto& gz = *detail::grad_of(self, 0);
            const double g = self.grad[0] / count;
            for (std::size_t k = 0; k < rcopy.size(); ++k) {
                double* row = gz.data() + rcopy[k] * n;
                for (std::size_t i = 0; i < n; ++i) {
                    row[i] += g * probs[k * n + i];
                }
                row[tcopy[k]] -= g;
            }
        },
        "cross_entropy_logits");
}

}  // namespace medkit::ops
