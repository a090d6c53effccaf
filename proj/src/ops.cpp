#include "maco/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>

#include <Eigen/Core>

#include "maco/errors.hpp"

namespace maco {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// C[m x n] += A[m x k] * B[k x n]
void gemm_nn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    const auto mi = static_cast<Eigen::Index>(m), ki = static_cast<Eigen::Index>(k), ni = static_cast<Eigen::Index>(n);
    MutMap(c, mi, ni).noalias() += ConstMap(a, mi, ki) * ConstMap(b, ki, ni);
}

// C[k x n] += A[m x k]^T * G[m x n]
void gemm_tn_acc(const double* a, const double* g, double* c, std::size_t m, std::size_t k, std::size_t n) {
    const auto mi = static_cast<Eigen::Index>(m), ki = static_cast<Eigen::Index>(k), ni = static_cast<Eigen::Index>(n);
    MutMap(c, ki, ni).noalias() += ConstMap(a, mi, ki).transpose() * ConstMap(g, mi, ni);
}

// C[m x k] += G[m x n] * B[k x n]^T
void gemm_nt_acc(const double* g, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k) {
    const auto mi = static_cast<Eigen::Index>(m), ki = static_cast<Eigen::Index>(k), ni = static_cast<Eigen::Index>(n);
    MutMap(c, mi, ki).noalias() += ConstMap(g, mi, ni) * ConstMap(b, ki, ni).transpose();
}

std::vector<double> transposed(const double* a, std::size_t rows, std::size_t cols) {
    std::vector<double> t(rows * cols);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = a[i * cols + j];
    return t;
}

void require_same_shape(Var a, Var b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " differ");
}

void require_same_tape(Var a, Var b) {
    if (a.tape != b.tape) throw StateError("operands recorded on different tapes");
}

void require_matrix(Var a, const char* op) {
    if (a.shape().size() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
}

// Elementwise unary op with derivative expressed through input and output values.
template <class Fwd, class Deriv>
Var unary(Var a, Fwd fwd, Deriv deriv) {
    const auto& av = a.value();
    Tensor out(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
    return a.tape->record(std::move(out), {a.id}, [ia = a.id, deriv](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        const auto& x = t.value(ia);
        const auto& y = t.value(self);
        auto& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * deriv(x[i], y[i]);
    });
}

}  // namespace

void matmul_into(std::span<const double> a, std::span<const double> b, std::span<double> out, std::size_t m,
                 std::size_t k, std::size_t n) {
    std::fill(out.begin(), out.end(), 0.0);
    gemm_nn_acc(a.data(), b.data(), out.data(), m, k, n);
}

double softplus_scalar(double x) {
    if (x > 0.0) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

namespace {

struct UpsampleTap {
    std::size_t y0, y1, x0, x1;
    double fy, fx;
};

void check_upsample(const Shape& shape, std::size_t out_h, std::size_t out_w) {
    if (shape.size() != 2) throw ShapeError("bilinear_upsample: expected a matrix, got " + shape_str(shape));
    if (out_h == 0 || out_w == 0) throw ParameterError("bilinear_upsample: output dimensions must be positive");
    if (shape[0] == 0 || shape[1] == 0) throw ShapeError("bilinear_upsample: empty input map");
    if (out_h < shape[0] || out_w < shape[1])
        throw ParameterError("bilinear_upsample: output " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                             " smaller than input " + shape_str(shape));
}

// Align-corners source coordinate of output index i.
double source_coord(std::size_t i, std::size_t in, std::size_t out) {
    if (out == 1 || in == 1) return 0.0;
    return static_cast<double>(i) * static_cast<double>(in - 1) / static_cast<double>(out - 1);
}

UpsampleTap tap_for(std::size_t i, std::size_t j, std::size_t h, std::size_t w, std::size_t oh, std::size_t ow) {
    const double y = source_coord(i, h, oh), x = source_coord(j, w, ow);
    const auto y0 = std::min(static_cast<std::size_t>(std::floor(y)), h - 1);
    const auto x0 = std::min(static_cast<std::size_t>(std::floor(x)), w - 1);
    return {y0, std::min(y0 + 1, h - 1), x0, std::min(x0 + 1, w - 1), y - static_cast<double>(y0),
            x - static_cast<double>(x0)};
}

}  // namespace

Tensor bilinear_upsample(const Tensor& map, std::size_t out_h, std::size_t out_w) {
    check_upsample(map.shape(), out_h, out_w);
    const std::size_t h = map.rows(), w = map.cols();
    Tensor out({out_h, out_w});
    for (std::size_t i = 0; i < out_h; ++i)
        for (std::size_t j = 0; j < out_w; ++j) {
            const auto t = tap_for(i, j, h, w, out_h, out_w);
            // Interpolate as a + f * (b - a) so constant maps stay exact.
            const double a = map.at(t.y0, t.x0), c = map.at(t.y1, t.x0);
            const double top = a + t.fx * (map.at(t.y0, t.x1) - a);
            const double bot = c + t.fx * (map.at(t.y1, t.x1) - c);
            const double v = top + t.fy * (bot - top);
            out.at(i, j) = v;
        }
    return out;
}

Tensor softmax(const Tensor& x, double temperature) {
    if (!(temperature > 0.0)) throw ParameterError("softmax: temperature must be positive");
    Tensor out(x.shape());
    const std::size_t n = x.cols(), m = x.size() / std::max<std::size_t>(n, 1);
    for (std::size_t r = 0; r < m; ++r) {
        const double* in = x.values().data() + r * n;
        double* o = out.values().data() + r * n;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, in[j] / temperature);
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += (o[j] = std::exp(in[j] / temperature - mx));
        for (std::size_t j = 0; j < n; ++j) o[j] /= s;
    }
    return out;
}

}  // namespace maco

namespace maco::ops {

Var add(Var a, Var b) {
    require_same_tape(a, b);
    require_same_shape(a, b, "add");
    Tensor out(a.shape());
    const auto &av = a.value(), &bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return a.tape->record(std::move(out), {a.id, b.id}, [ia = a.id, ib = b.id](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        for (auto id : {ia, ib}) {
            if (!t.requires_grad(id)) continue;
            auto& gx = t.grad_buffer(id);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
    });
}

Var sub(Var a, Var b) {
    require_same_tape(a, b);
    require_same_shape(a, b, "sub");
    Tensor out(a.shape());
    const auto &av = a.value(), &bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    return a.tape->record(std::move(out), {a.id, b.id}, [ia = a.id, ib = b.id](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        if (t.requires_grad(ia)) {
            auto& gx = t.grad_buffer(ia);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (t.requires_grad(ib)) {
            auto& gx = t.grad_buffer(ib);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] -= g[i];
        }
    });
}

Var mul(Var a, Var b) {
    require_same_tape(a, b);
    require_same_shape(a, b, "mul");
    Tensor out(a.shape());
    const auto &av = a.value(), &bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return a.tape->record(std::move(out), {a.id, b.id}, [ia = a.id, ib = b.id](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        const auto &av = t.value(ia), &bv = t.value(ib);
        if (t.requires_grad(ia)) {
            auto& gx = t.grad_buffer(ia);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * bv[i];
        }
        if (t.requires_grad(ib)) {
            auto& gx = t.grad_buffer(ib);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * av[i];
        }
    });
}

Var scale(Var a, double s) {
    Tensor out(a.shape());
    const auto& av = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
    return a.tape->record(std::move(out), {a.id}, [ia = a.id, s](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        auto& gx = t.grad_buffer(ia);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s;
    });
}

Var add_scalar(Var a, double s) {
    Tensor out(a.shape());
    const auto& av = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + s;
    return a.tape->record(std::move(out), {a.id}, [ia = a.id](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        auto& gx = t.grad_buffer(ia);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
}

Var mul_scalar(Var a, Var s) {
    require_same_tape(a, s);
    if (s.size() != 1) throw ShapeError("mul_scalar: scalar operand has shape " + shape_str(s.shape()));
    const double sv = s.item();
    Tensor out(a.shape());
    const auto& av = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * sv;
    return a.tape->record(std::move(out), {a.id, s.id}, [ia = a.id, is = s.id](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        const auto& av = t.value(ia);
        const double sv = t.value(is)[0];
        if (t.requires_grad(ia)) {
            auto& gx = t.grad_buffer(ia);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * sv;
        }
        if (t.requires_grad(is)) {
            double acc = 0.0;
            for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * av[i];
            t.grad_buffer(is)[0] += acc;
        }
    });
}

Var add_row_vector(Var a, Var bias) {
    require_same_tape(a, bias);
    require_matrix(a, "add_row_vector");
    const std::size_t m = a.rows(), n = a.cols();
    if (bias.size() != n)
        throw ShapeError("add_row_vector: bias " + shape_str(bias.shape()) + " vs matrix " + shape_str(a.shape()));
    Tensor out(a.shape());
    const auto &av = a.value(), &bv = bias.value();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = av[i * n + j] + bv[j];
    return a.tape->record(std::move(out), {a.id, bias.id}, [ia = a.id, ib = bias.id, m, n](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        if (t.requires_grad(ia)) {
            auto& gx = t.grad_buffer(ia);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (t.requires_grad(ib)) {
            auto& gb = t.grad_buffer(ib);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
        }
    });
}

Var mul_rows(Var a, Var w) {
    require_same_tape(a, w);
    require_matrix(a, "mul_rows");
    const std::size_t m = a.rows(), n = a.cols();
    if (w.size() != m)
        throw ShapeError("mul_rows: weights " + shape_str(w.shape()) + " vs matrix " + shape_str(a.shape()));
    Tensor out(a.shape());
    const auto &av = a.value(), &wv = w.value();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = av[i * n + j] * wv[i];
    return a.tape->record(std::move(out), {a.id, w.id}, [ia = a.id, iw = w.id, m, n](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        const auto &av = t.value(ia), &wv = t.value(iw);
        if (t.requires_grad(ia)) {
            auto& gx = t.grad_buffer(ia);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[i * n + j] * wv[i];
        }
        if (t.requires_grad(iw)) {
            auto& gw = t.grad_buffer(iw);
            for (std::size_t i = 0; i < m; ++i) {
                double acc = 0.0;
                for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * av[i * n + j];
                gw[i] += acc;
            }
        }
    });
}

Var matmul(Var a, Var b) {
    require_same_tape(a, b);
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
        throw ShapeError("matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    Tensor out({m, n});
    gemm_nn_acc(a.value().values().data(), b.value().values().data(), out.values().data(), m, k, n);
    return a.tape->record(std::move(out), {a.id, b.id}, [ia = a.id, ib = b.id, m, k, n](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        if (t.requires_grad(ia)) {
            auto& ga = t.grad_buffer(ia);
            gemm_nt_acc(g.data(), t.value(ib).values().data(), ga.data(), m, n, k);
        }
        if (t.requires_grad(ib)) {
            auto& gb = t.grad_buffer(ib);
            gemm_tn_acc(t.value(ia).values().data(), g.data(), gb.data(), m, k, n);
        }
    });
}

Var transpose(Var a) {
    require_matrix(a, "transpose");
    const std::size_t m = a.rows(), n = a.cols();
    Tensor out({n, m}, transposed(a.value().values().data(), m, n));
    return a.tape->record(std::move(out), {a.id}, [ia = a.id, m, n](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        auto& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
    });
}

Var reshape(Var a, Shape shape) {
    Tensor out = a.value().reshaped(std::move(shape));
    return a.tape->record(std::move(out), {a.id}, [ia = a.id](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        auto& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
}

Var exp(Var a) {
    return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
    return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var square(Var a) {
    return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var reciprocal(Var a) {
    return unary(a, [](double x) { return 1.0 / x; }, [](double, double y) { return -y * y; });
}

Var softplus(Var a) {
    return unary(a, softplus_scalar, [](double x, double) {
        // logistic sigmoid, branch-stable
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
    });
}

Var gelu(Var a) {
    constexpr double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    return unary(
        a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
        [inv_sqrt_2pi](double x, double) {
            return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
        });
}

Var sum(Var a) {
    double s = 0.0;
    for (double v : a.value().values()) s += v;
    return a.tape->record(Tensor::scalar(s), {a.id}, [ia = a.id](Tape& t, std::size_t self) {
        const double g = t.grad(self)[0];
        for (auto& x : t.grad_buffer(ia)) x += g;
    });
}

Var mean(Var a) {
    if (a.size() == 0) throw ShapeError("mean of an empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Var row_sum(Var a) {
    const std::size_t n = a.cols(), m = a.size() / n;
    Tensor out({m});
    const auto& av = a.value();
    for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += av[i * n + j];
        out[i] = s;
    }
    return a.tape->record(std::move(out), {a.id}, [ia = a.id, m, n](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        auto& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[i];
    });
}

Var softmax_rows(Var a, double temperature) {
    Tensor out = maco::softmax(a.value(), temperature);
    const std::size_t n = a.cols(), m = a.size() / n;
    return a.tape->record(std::move(out), {a.id}, [ia = a.id, m, n, temperature](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        const auto& y = t.value(self);
        auto& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < m; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
            for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += y[i * n + j] * (g[i * n + j] - dot) / temperature;
        }
    });
}

Var log_softmax_rows(Var a) {
    const std::size_t n = a.cols(), m = a.size() / n;
    const auto& av = a.value();
    Tensor out(a.shape());
    for (std::size_t i = 0; i < m; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, av[i * n + j]);
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += std::exp(av[i * n + j] - mx);
        const double lse = mx + std::log(s);
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = av[i * n + j] - lse;
    }
    return a.tape->record(std::move(out), {a.id}, [ia = a.id, m, n](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        const auto& y = t.value(self);
        auto& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < m; ++i) {
            double gs = 0.0;
            for (std::size_t j = 0; j < n; ++j) gs += g[i * n + j];
            for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[i * n + j] - std::exp(y[i * n + j]) * gs;
        }
    });
}

Var diag(Var a) {
    require_matrix(a, "diag");
    const std::size_t n = a.rows();
    if (a.cols() != n) throw ShapeError("diag: matrix " + shape_str(a.shape()) + " is not square");
    Tensor out({n});
    for (std::size_t i = 0; i < n; ++i) out[i] = a.value()[i * n + i];
    return a.tape->record(std::move(out), {a.id}, [ia = a.id, n](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        auto& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < n; ++i) ga[i * n + i] += g[i];
    });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
    require_same_tape(x, gamma);
    require_same_tape(x, beta);
    const std::size_t n = x.cols(), m = x.size() / n;
    if (gamma.size() != n || beta.size() != n)
        throw ShapeError("layer_norm: affine parameters " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                         " vs input " + shape_str(x.shape()));
    const auto &xv = x.value(), &gv = gamma.value(), &bv = beta.value();
    Tensor out(x.shape());
    auto xhat = std::make_shared<std::vector<double>>(x.size());
    auto inv_std = std::make_shared<std::vector<double>>(m);
    for (std::size_t i = 0; i < m; ++i) {
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += xv[i * n + j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double d = xv[i * n + j] - mu;
            var += d * d;
        }
        var /= static_cast<double>(n);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[i] = is;
        for (std::size_t j = 0; j < n; ++j) {
            const double h = (xv[i * n + j] - mu) * is;
            (*xhat)[i * n + j] = h;
            out[i * n + j] = h * gv[j] + bv[j];
        }
    }
    return x.tape->record(
        std::move(out), {x.id, gamma.id, beta.id},
        [ix = x.id, ig = gamma.id, ib = beta.id, m, n, xhat, inv_std](Tape& t, std::size_t self) {
            const auto& g = t.grad(self);
            const auto& gv = t.value(ig);
            if (t.requires_grad(ix)) {
                auto& gx = t.grad_buffer(ix);
                std::vector<double> dh(n);
                for (std::size_t i = 0; i < m; ++i) {
                    double mean_dh = 0.0, mean_dh_h = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        dh[j] = g[i * n + j] * gv[j];
                        mean_dh += dh[j];
                        mean_dh_h += dh[j] * (*xhat)[i * n + j];
                    }
                    mean_dh /= static_cast<double>(n);
                    mean_dh_h /= static_cast<double>(n);
                    for (std::size_t j = 0; j < n; ++j)
                        gx[i * n + j] += (*inv_std)[i] * (dh[j] - mean_dh - (*xhat)[i * n + j] * mean_dh_h);
                }
            }
            if (t.requires_grad(ig)) {
                auto& gg = t.grad_buffer(ig);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) gg[j] += g[i * n + j] * (*xhat)[i * n + j];
            }
            if (t.requires_grad(ib)) {
                auto& gb = t.grad_buffer(ib);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
            }
        });
}

Var l2_normalize_rows(Var x, double eps) {
    const std::size_t n = x.cols(), m = x.size() / n;
    const auto& xv = x.value();
    Tensor out(x.shape());
    auto norms = std::make_shared<std::vector<double>>(m);
    for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += xv[i * n + j] * xv[i * n + j];
        const double nrm = std::max(std::sqrt(s), eps);
        (*norms)[i] = nrm;
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xv[i * n + j] / nrm;
    }
    return x.tape->record(std::move(out), {x.id}, [ix = x.id, m, n, norms](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        const auto& y = t.value(self);
        auto& gx = t.grad_buffer(ix);
        for (std::size_t i = 0; i < m; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += y[i * n + j] * g[i * n + j];
            for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += (g[i * n + j] - y[i * n + j] * dot) / (*norms)[i];
        }
    });
}

Var gather_rows(Var a, std::span<const std::size_t> rows) {
    const std::size_t n = a.cols(), m = a.size() / n;
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    Tensor out({idx.size(), n});
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] >= m)
            throw ShapeError("gather_rows: row " + std::to_string(idx[r]) + " out of range for " + shape_str(a.shape()));
        std::copy_n(a.value().values().begin() + static_cast<std::ptrdiff_t>(idx[r] * n), n,
                    out.values().begin() + static_cast<std::ptrdiff_t>(r * n));
    }
    return a.tape->record(std::move(out), {a.id}, [ia = a.id, idx = std::move(idx), n](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        auto& ga = t.grad_buffer(ia);
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (std::size_t j = 0; j < n; ++j) ga[idx[r] * n + j] += g[r * n + j];
    });
}

Var scatter_rows(Var a, std::span<const std::size_t> rows, std::size_t n_rows, Var fill) {
    require_same_tape(a, fill);
    const std::size_t n = a.cols();
    if (rows.size() != a.size() / n)
        throw ShapeError("scatter_rows: " + std::to_string(rows.size()) + " indices for " + shape_str(a.shape()));
    if (fill.size() != n)
        throw ShapeError("scatter_rows: fill row " + shape_str(fill.shape()) + " vs width " + std::to_string(n));
    std::vector<std::ptrdiff_t> source(n_rows, -1);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] >= n_rows || source[rows[r]] != -1)
            throw ShapeError("scatter_rows: invalid or repeated destination row " + std::to_string(rows[r]));
        source[rows[r]] = static_cast<std::ptrdiff_t>(r);
    }
    Tensor out({n_rows, n});
    const auto &av = a.value(), &fv = fill.value();
    for (std::size_t i = 0; i < n_rows; ++i)
        for (std::size_t j = 0; j < n; ++j)
            out[i * n + j] = source[i] < 0 ? fv[j] : av[static_cast<std::size_t>(source[i]) * n + j];
    return a.tape->record(std::move(out), {a.id, fill.id},
                          [ia = a.id, ifl = fill.id, source = std::move(source), n](Tape& t, std::size_t self) {
                              const auto& g = t.grad(self);
                              if (t.requires_grad(ia)) {
                                  auto& ga = t.grad_buffer(ia);
                                  for (std::size_t i = 0; i < source.size(); ++i)
                                      if (source[i] >= 0)
                                          for (std::size_t j = 0; j < n; ++j)
                                              ga[static_cast<std::size_t>(source[i]) * n + j] += g[i * n + j];
                              }
                              if (t.requires_grad(ifl)) {
                                  auto& gf = t.grad_buffer(ifl);
                                  for (std::size_t i = 0; i < source.size(); ++i)
                                      if (source[i] < 0)
                                          for (std::size_t j = 0; j < n; ++j) gf[j] += g[i * n + j];
                              }
                          });
}

Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no operands");
    const std::size_t n = parts[0].cols();
    std::vector<std::size_t> ids, offsets;
    std::size_t total = 0;
    for (const auto& p : parts) {
        require_same_tape(parts[0], p);
        if (p.cols() != n)
            throw ShapeError("concat_rows: widths " + shape_str(parts[0].shape()) + " and " + shape_str(p.shape()));
        ids.push_back(p.id);
        offsets.push_back(total);
        total += p.size();
    }
    Tensor out({total / n, n});
    for (std::size_t k = 0; k < parts.size(); ++k)
        std::copy(parts[k].value().values().begin(), parts[k].value().values().end(),
                  out.values().begin() + static_cast<std::ptrdiff_t>(offsets[k]));
    auto parents = ids;
    return parts[0].tape->record(std::move(out), std::move(parents),
                                 [ids = std::move(ids), offsets = std::move(offsets)](Tape& t, std::size_t self) {
                                     const auto& g = t.grad(self);
                                     for (std::size_t k = 0; k < ids.size(); ++k) {
                                         if (!t.requires_grad(ids[k])) continue;
                                         auto& gx = t.grad_buffer(ids[k]);
                                         for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[offsets[k] + i];
                                     }
                                 });
}

Var segment_mean(Var a, std::size_t len) {
    const std::size_t n = a.cols(), m = a.size() / n;
    if (len == 0 || m % len != 0)
        throw ShapeError("segment_mean: " + std::to_string(m) + " rows not divisible into segments of " +
                         std::to_string(len));
    const std::size_t groups = m / len;
    const double inv = 1.0 / static_cast<double>(len);
    Tensor out({groups, n});
    const auto& av = a.value();
    for (std::size_t gi = 0; gi < groups; ++gi)
        for (std::size_t r = 0; r < len; ++r)
            for (std::size_t j = 0; j < n; ++j) out[gi * n + j] += av[(gi * len + r) * n + j] * inv;
    return a.tape->record(std::move(out), {a.id}, [ia = a.id, groups, len, n, inv](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        auto& ga = t.grad_buffer(ia);
        for (std::size_t gi = 0; gi < groups; ++gi)
            for (std::size_t r = 0; r < len; ++r)
                for (std::size_t j = 0; j < n; ++j) ga[(gi * len + r) * n + j] += g[gi * n + j] * inv;
    });
}

Var bilinear_upsample(Var a, std::size_t out_h, std::size_t out_w) {
    Tensor out = maco::bilinear_upsample(a.value(), out_h, out_w);
    const std::size_t h = a.rows(), w = a.cols();
    return a.tape->record(std::move(out), {a.id}, [ia = a.id, h, w, out_h, out_w](Tape& t, std::size_t self) {
        const auto& g = t.grad(self);
        auto& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < out_h; ++i)
            for (std::size_t j = 0; j < out_w; ++j) {
                const auto tp = tap_for(i, j, h, w, out_h, out_w);
                const double gv = g[i * out_w + j];
                ga[tp.y0 * w + tp.x0] += gv * (1.0 - tp.fy) * (1.0 - tp.fx);
                ga[tp.y0 * w + tp.x1] += gv * (1.0 - tp.fy) * tp.fx;
                ga[tp.y1 * w + tp.x0] += gv * tp.fy * (1.0 - tp.fx);
                ga[tp.y1 * w + tp.x1] += gv * tp.fy * tp.fx;
            }
    });
}

Var detach(Var a) { return a.tape->constant(a.value()); }

Var attention(Var q, Var k, Var v, std::size_t batch, std::size_t seq, std::size_t heads,
              std::span<const std::uint8_t> key_mask) {
    require_same_tape(q, k);
    require_same_tape(q, v);
    require_same_shape(q, k, "attention");
    require_same_shape(q, v, "attention");
    const std::size_t c = q.cols();
    if (q.rows() != batch * seq)
        throw ShapeError("attention: " + shape_str(q.shape()) + " is not " + std::to_string(batch) + " sequences of " +
                         std::to_string(seq));
    if (heads == 0 || c % heads != 0)
        throw ShapeError("attention: width " + std::to_string(c) + " not divisible by " + std::to_string(heads) +
                         " heads");
    if (!key_mask.empty() && key_mask.size() != batch * seq)
        throw ShapeError("attention: key mask has " + std::to_string(key_mask.size()) + " entries");
    std::vector<std::uint8_t> mask(key_mask.begin(), key_mask.end());
    const std::size_t d = c / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(d));
    auto probs = std::make_shared<std::vector<double>>(batch * heads * seq * seq, 0.0);
    const auto &qv = q.value(), &kv = k.value(), &vv = v.value();
    Tensor out({batch * seq, c});
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h) {
            double* p = probs->data() + (b * heads + h) * seq * seq;
            for (std::size_t i = 0; i < seq; ++i) {
                const double* qi = qv.values().data() + ((b * seq + i) * c + h * d);
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < seq; ++j) {
                    if (!mask.empty() && !mask[b * seq + j]) continue;
                    const double* kj = kv.values().data() + ((b * seq + j) * c + h * d);
                    double s = 0.0;
                    for (std::size_t e = 0; e < d; ++e) s += qi[e] * kj[e];
                    p[i * seq + j] = s * sc;
                    mx = std::max(mx, s * sc);
                }
                double z = 0.0;
                for (std::size_t j = 0; j < seq; ++j) {
                    if (!mask.empty() && !mask[b * seq + j]) continue;
                    z += (p[i * seq + j] = std::exp(p[i * seq + j] - mx));
                }
                double* oi = &out[(b * seq + i) * c + h * d];
                for (std::size_t j = 0; j < seq; ++j) {
                    if (!mask.empty() && !mask[b * seq + j]) continue;
                    p[i * seq + j] /= z;
                    const double* vj = vv.values().data() + ((b * seq + j) * c + h * d);
                    const double pij = p[i * seq + j];
                    for (std::size_t e = 0; e < d; ++e) oi[e] += pij * vj[e];
                }
            }
        }
    return q.tape->record(
        std::move(out), {q.id, k.id, v.id},
        [iq = q.id, ik = k.id, iv = v.id, batch, seq, heads, c, d, sc, probs](Tape& t, std::size_t self) {
            const auto& g = t.grad(self);
            const auto &qv = t.value(iq), &kv = t.value(ik), &vv = t.value(iv);
            std::vector<double> dummy;
            auto& gq = t.requires_grad(iq) ? t.grad_buffer(iq) : dummy;
            auto& gk = t.requires_grad(ik) ? t.grad_buffer(ik) : dummy;
            auto& gv = t.requires_grad(iv) ? t.grad_buffer(iv) : dummy;
            std::vector<double> dp(seq);
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t h = 0; h < heads; ++h) {
                    const double* p = probs->data() + (b * heads + h) * seq * seq;
                    for (std::size_t i = 0; i < seq; ++i) {
                        const double* gi = &g[(b * seq + i) * c + h * d];
                        double dot = 0.0;
                        for (std::size_t j = 0; j < seq; ++j) {
                            const double pij = p[i * seq + j];
                            if (pij == 0.0) {
                                dp[j] = 0.0;
                                continue;
                            }
                            const double* vj = vv.values().data() + ((b * seq + j) * c + h * d);
                            double s = 0.0;
                            for (std::size_t e = 0; e < d; ++e) s += gi[e] * vj[e];
                            dp[j] = s;
                            dot += s * pij;
                            if (!gv.empty()) {
                                double* gvj = &gv[(b * seq + j) * c + h * d];
                                for (std::size_t e = 0; e < d; ++e) gvj[e] += pij * gi[e];
                            }
                        }
                        const double* qi = qv.values().data() + ((b * seq + i) * c + h * d);
                        for (std::size_t j = 0; j < seq; ++j) {
                            const double pij = p[i * seq + j];
                            if (pij == 0.0) continue;
                            const double ds = pij * (dp[j] - dot) * sc;
                            const double* kj = kv.values().data() + ((b * seq + j) * c + h * d);
                            if (!gq.empty()) {
                                double* gqi = &gq[(b * seq + i) * c + h * d];
                                for (std::size_t e = 0; e < d; ++e) gqi[e] += ds * kj[e];
                            }
                            if (!gk.empty()) {
                                double* gkj = &gk[(b * seq + j) * c + h * d];
                                for (std::size_t e = 0; e < d; ++e) gkj[e] += ds * qi[e];
                            }
                        }
                    }
                }
        });
}

}  // namespace maco::ops
