#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

// Minimal reverse-mode autodiff over row-major dense matrices. A Tape records the forward
// pass as a list of nodes; backward() walks it in reverse and accumulates gradients into the
// Parameter objects that were registered with param().

namespace raydiff::nn {

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
struct Parameter {
    std::string name;
    Matrix<T> value;
    Matrix<T> grad;
    bool decay = true;  // participates in decoupled weight decay

    void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

/// Multiply-accumulate counts bucketed by forward stage.
enum class Stage : int { Embed = 0, Read, Latent, Write, Head, kCount };

struct OpCounter {
    std::array<std::uint64_t, static_cast<int>(Stage::kCount)> macs{};
    Stage stage = Stage::Embed;

    std::uint64_t operator[](Stage s) const { return macs[static_cast<int>(s)]; }
    void add(std::uint64_t n) { macs[static_cast<int>(stage)] += n; }
};

template <class T>
class Tape {
public:
    struct Var {
        int id = -1;
    };

    explicit Tape(bool record_grad = true) : record_(record_grad) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool records() const { return record_; }
    void set_counter(OpCounter* counter) { counter_ = counter; }
    void set_stage(Stage s) {
        if (counter_) counter_->stage = s;
    }

    Var constant(Matrix<T> value) { return push(std::move(value), false, nullptr, {}); }

    /// Registers a parameter without copying its value. Gradients flow into p.grad only on
    /// tapes that record gradients.
    Var param(Parameter<T>& p) {
        if (record_ && (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols())) p.zero_grad();
        Var v = push(Matrix<T>(), record_, record_ ? &p : nullptr, {});
        nodes_.back().external = &p.value;
        return v;
    }
    Var param(const Parameter<T>& p) {
        if (record_) throw std::logic_error("Tape::param: const parameter on a recording tape");
        Var v = push(Matrix<T>(), false, nullptr, {});
        nodes_.back().external = &p.value;
        return v;
    }

    const Matrix<T>& value(Var v) const {
        const Node& n = nodes_.at(v.id);
        return n.external ? *n.external : n.value;
    }
    std::size_t size() const { return nodes_.size(); }

    /// Accumulates d(out)/d(parameters) given d(loss)/d(out) = seed.
    void backward(Var out, const Matrix<T>& seed) {
        if (!record_) throw std::logic_error("Tape::backward on a tape recorded without gradients");
        const Matrix<T>& root = value(out);
        if (seed.rows() != root.rows() || seed.cols() != root.cols())
            throw std::invalid_argument("Tape::backward: seed shape mismatch");
        grad_ref(out.id) += seed;
        for (int i = out.id; i >= 0; --i) {
            Node& n = nodes_[i];
            if (!n.has_grad) continue;
            if (n.param) {
                n.param->grad += n.grad;
            } else if (n.backward) {
                n.backward(*this, i);
            }
        }
    }

    // ---- ops -------------------------------------------------------------------------------

    Var matmul(Var a, Var b) {
        const auto& A = value(a);
        const auto& B = value(b);
        if (A.cols() != B.rows()) throw std::invalid_argument("matmul: inner dimensions differ");
        count(static_cast<std::uint64_t>(A.rows()) * A.cols() * B.cols());
        Matrix<T> out;
        out.noalias() = A * B;
        return push(std::move(out), needs(a) || needs(b), nullptr, [a, b](Tape& t, int self) {
            const auto& G = t.nodes_[self].grad;
            if (t.needs(a)) t.grad_ref(a.id).noalias() += G * t.value(b).transpose();
            if (t.needs(b)) t.grad_ref(b.id).noalias() += t.value(a).transpose() * G;
        });
    }

    Var add(Var a, Var b) {
        const auto& A = value(a);
        const auto& B = value(b);
        if (A.rows() != B.rows() || A.cols() != B.cols()) throw std::invalid_argument("add: shape mismatch");
        return push(A + B, needs(a) || needs(b), nullptr, [a, b](Tape& t, int self) {
            const auto& G = t.nodes_[self].grad;
            if (t.needs(a)) t.grad_ref(a.id) += G;
            if (t.needs(b)) t.grad_ref(b.id) += G;
        });
    }

    /// a + broadcast(row) where row is 1 x cols.
    Var add_row(Var a, Var row) {
        const auto& A = value(a);
        const auto& r = value(row);
        if (r.rows() != 1 || r.cols() != A.cols()) throw std::invalid_argument("add_row: shape mismatch");
        Matrix<T> out = A;
        out.rowwise() += r.row(0);
        return push(std::move(out), needs(a) || needs(row), nullptr, [a, row](Tape& t, int self) {
            const auto& G = t.nodes_[self].grad;
            if (t.needs(a)) t.grad_ref(a.id) += G;
            if (t.needs(row)) t.grad_ref(row.id) += G.colwise().sum();
        });
    }

    Var linear(Var x, Var w, Var b) { return add_row(matmul(x, w), b); }

    Var gelu(Var a) {
        const auto& A = value(a);
        Matrix<T> out(A.rows(), A.cols());
        const T inv_sqrt2 = T(0.70710678118654752440);
        for (Eigen::Index i = 0; i < A.size(); ++i) {
            const T x = A.data()[i];
            out.data()[i] = T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2));
        }
        return push(std::move(out), needs(a), nullptr, [a](Tape& t, int self) {
            const auto& G = t.nodes_[self].grad;
            const auto& X = t.value(a);
            auto& ga = t.grad_ref(a.id);
            const T inv_sqrt2 = T(0.70710678118654752440);
            const T inv_sqrt2pi = T(0.39894228040143267794);
            for (Eigen::Index i = 0; i < X.size(); ++i) {
                const T x = X.data()[i];
                const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
                const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x * x);
                ga.data()[i] += G.data()[i] * (cdf + x * pdf);
            }
        });
    }

    /// Row-wise layer normalization with learned gain and bias (both 1 x cols).
    Var layer_norm(Var x, Var gamma, Var beta, T eps = T(1e-5)) {
        const auto& X = value(x);
        const auto& g = value(gamma);
        const auto& b = value(beta);
        const Eigen::Index n = X.cols();
        Matrix<T> xhat(X.rows(), n);
        std::vector<T> inv_std(X.rows());
        for (Eigen::Index r = 0; r < X.rows(); ++r) {
            const T mean = X.row(r).mean();
            const T var = (X.row(r).array() - mean).square().mean();
            inv_std[r] = T(1) / std::sqrt(var + eps);
            xhat.row(r) = (X.row(r).array() - mean) * inv_std[r];
        }
        Matrix<T> out = xhat;
        out.array().rowwise() *= g.row(0).array();
        out.rowwise() += b.row(0);
        const bool req = needs(x) || needs(gamma) || needs(beta);
        if (!record_ || !req) return push(std::move(out), false, nullptr, {});
        return push(std::move(out), true, nullptr,
                    [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, int self) {
                        const auto& G = t.nodes_[self].grad;
                        const auto& gv = t.value(gamma);
                        if (t.needs(gamma))
                            t.grad_ref(gamma.id) += (G.array() * xhat.array()).colwise().sum().matrix();
                        if (t.needs(beta)) t.grad_ref(beta.id) += G.colwise().sum();
                        if (t.needs(x)) {
                            auto& gx = t.grad_ref(x.id);
                            const T n = static_cast<T>(G.cols());
                            for (Eigen::Index r = 0; r < G.rows(); ++r) {
                                const RowVector<T> gh = (G.row(r).array() * gv.row(0).array()).matrix();
                                const T mean_g = gh.mean();
                                const T mean_gx = (gh.array() * xhat.row(r).array()).sum() / n;
                                gx.row(r).array() +=
                                    inv_std[r] * (gh.array() - mean_g - xhat.row(r).array() * mean_gx);
                            }
                        }
                    });
    }

    /// Multi-head scaled dot-product attention. q: Nq x D, k/v: Nk x D, D divisible by heads.
    Var attention(Var q, Var k, Var v, int heads) {
        const auto& Q = value(q);
        const auto& K = value(k);
        const auto& V = value(v);
        const Eigen::Index D = Q.cols();
        if (K.cols() != D || V.cols() != D || K.rows() != V.rows() || heads <= 0 || D % heads != 0)
            throw std::invalid_argument("attention: incompatible shapes");
        const Eigen::Index dh = D / heads;
        const T scale = T(1) / std::sqrt(static_cast<T>(dh));
        count(2ull * Q.rows() * K.rows() * D);
        Matrix<T> out(Q.rows(), D);
        const bool req = record_ && (needs(q) || needs(k) || needs(v));
        std::vector<Matrix<T>> probs;
        if (req) probs.reserve(heads);
        for (int h = 0; h < heads; ++h) {
            Matrix<T> S;
            S.noalias() = Q.middleCols(h * dh, dh) * K.middleCols(h * dh, dh).transpose();
            S *= scale;
            for (Eigen::Index r = 0; r < S.rows(); ++r) {
                const T m = S.row(r).maxCoeff();
                S.row(r) = (S.row(r).array() - m).exp();
                S.row(r) /= S.row(r).sum();
            }
            out.middleCols(h * dh, dh).noalias() = S * V.middleCols(h * dh, dh);
            if (req) probs.push_back(std::move(S));
        }
        if (!req) return push(std::move(out), false, nullptr, {});
        return push(std::move(out), true, nullptr,
                    [q, k, v, heads, dh, scale, probs = std::move(probs)](Tape& t, int self) {
                        const auto& G = t.nodes_[self].grad;
                        const auto& Q = t.value(q);
                        const auto& K = t.value(k);
                        const auto& V = t.value(v);
                        for (int h = 0; h < heads; ++h) {
                            const auto& P = probs[h];
                            const auto Gh = G.middleCols(h * dh, dh);
                            if (t.needs(v)) t.grad_ref(v.id).middleCols(h * dh, dh).noalias() += P.transpose() * Gh;
                            if (!t.needs(q) && !t.needs(k)) continue;
                            Matrix<T> dP;
                            dP.noalias() = Gh * V.middleCols(h * dh, dh).transpose();
                            // softmax backward: dS = P * (dP - rowsum(dP * P))
                            const auto rowdot = (dP.array() * P.array()).rowwise().sum();
                            Matrix<T> dS = (P.array() * (dP.array().colwise() - rowdot)).matrix() * scale;
                            if (t.needs(q)) t.grad_ref(q.id).middleCols(h * dh, dh).noalias() += dS * K.middleCols(h * dh, dh);
                            if (t.needs(k)) t.grad_ref(k.id).middleCols(h * dh, dh).noalias() += dS.transpose() * Q.middleCols(h * dh, dh);
                        }
                    });
    }

    /// Elementwise product with a constant matrix of the same shape.
    Var mul_const(Var a, Matrix<T> mask) {
        const auto& A = value(a);
        if (A.rows() != mask.rows() || A.cols() != mask.cols()) throw std::invalid_argument("mul_const: shape mismatch");
        Matrix<T> out = (A.array() * mask.array()).matrix();
        return push(std::move(out), needs(a), nullptr, [a, mask = std::move(mask)](Tape& t, int self) {
            t.grad_ref(a.id).array() += t.nodes_[self].grad.array() * mask.array();
        });
    }

    Var concat_cols(std::initializer_list<Var> parts) { return concat(std::vector<Var>(parts), true); }
    Var concat_rows(std::initializer_list<Var> parts) { return concat(std::vector<Var>(parts), false); }
    Var concat_rows(const std::vector<Var>& parts) { return concat(parts, false); }

    /// Selects rows (repetition allowed).
    Var gather_rows(Var a, std::vector<int> rows) {
        const auto& A = value(a);
        Matrix<T> out(static_cast<Eigen::Index>(rows.size()), A.cols());
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (rows[i] < 0 || rows[i] >= A.rows()) throw std::out_of_range("gather_rows: index");
            out.row(i) = A.row(rows[i]);
        }
        return push(std::move(out), needs(a), nullptr, [a, rows = std::move(rows)](Tape& t, int self) {
            const auto& G = t.nodes_[self].grad;
            auto& ga = t.grad_ref(a.id);
            for (std::size_t i = 0; i < rows.size(); ++i) ga.row(rows[i]) += G.row(i);
        });
    }

    /// Broadcasts a 1 x C row to n rows.
    Var repeat_row(Var row, Eigen::Index n) {
        const auto& r = value(row);
        if (r.rows() != 1) throw std::invalid_argument("repeat_row: expected a single row");
        Matrix<T> out = r.replicate(n, 1);
        return push(std::move(out), needs(row), nullptr, [row](Tape& t, int self) {
            t.grad_ref(row.id) += t.nodes_[self].grad.colwise().sum();
        });
    }

    /// Patch extraction for a convolution. x holds an H x W image with C channels as
    /// (H*W) x C; output has one row per output pixel and k*k*C columns ordered (ky, kx, c).
    Var im2col(Var x, int height, int width, int channels, int kernel, int stride, int pad) {
        const auto& X = value(x);
        if (X.rows() != static_cast<Eigen::Index>(height) * width || X.cols() != channels)
            throw std::invalid_argument("im2col: input shape mismatch");
        const int oh = (height + 2 * pad - kernel) / stride + 1;
        const int ow = (width + 2 * pad - kernel) / stride + 1;
        Matrix<T> out = Matrix<T>::Zero(static_cast<Eigen::Index>(oh) * ow, kernel * kernel * channels);
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox)
                for (int ky = 0; ky < kernel; ++ky)
                    for (int kx = 0; kx < kernel; ++kx) {
                        const int iy = oy * stride + ky - pad;
                        const int ix = ox * stride + kx - pad;
                        if (iy < 0 || iy >= height || ix < 0 || ix >= width) continue;
                        out.row(oy * ow + ox).segment((ky * kernel + kx) * channels, channels) =
                            X.row(iy * width + ix);
                    }
        return push(std::move(out), needs(x), nullptr,
                    [x, height, width, channels, kernel, stride, pad, oh, ow](Tape& t, int self) {
                        const auto& G = t.nodes_[self].grad;
                        auto& gx = t.grad_ref(x.id);
                        for (int oy = 0; oy < oh; ++oy)
                            for (int ox = 0; ox < ow; ++ox)
                                for (int ky = 0; ky < kernel; ++ky)
                                    for (int kx = 0; kx < kernel; ++kx) {
                                        const int iy = oy * stride + ky - pad;
                                        const int ix = ox * stride + kx - pad;
                                        if (iy < 0 || iy >= height || ix < 0 || ix >= width) continue;
                                        gx.row(iy * width + ix) +=
                                            G.row(oy * ow + ox).segment((ky * kernel + kx) * channels, channels);
                                    }
                    });
    }

private:
    using BackwardFn = std::function<void(Tape&, int)>;

    struct Node {
        Matrix<T> value;
        const Matrix<T>* external = nullptr;
        Matrix<T> grad;
        bool needs_grad = false;
        bool has_grad = false;
        Parameter<T>* param = nullptr;
        BackwardFn backward;
    };

    bool needs(Var v) const { return nodes_[v.id].needs_grad; }

    Matrix<T>& grad_ref(int id) {
        Node& n = nodes_[id];
        if (!n.has_grad) {
            const Matrix<T>& v = n.external ? *n.external : n.value;
            n.grad.setZero(v.rows(), v.cols());
            n.has_grad = true;
        }
        return n.grad;
    }

    void count(std::uint64_t macs) {
        if (counter_) counter_->add(macs);
    }

    Var push(Matrix<T> value, bool needs_grad, Parameter<T>* param, BackwardFn fn) {
        Node n;
        n.value = std::move(value);
        n.needs_grad = record_ && needs_grad;
        n.param = param;
        if (n.needs_grad) n.backward = std::move(fn);
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    Var concat(const std::vector<Var>& parts, bool along_cols) {
        if (parts.empty()) throw std::invalid_argument("concat: no inputs");
        Eigen::Index rows = 0, cols = 0;
        bool req = false;
        for (const Var& p : parts) {
            const auto& P = value(p);
            req = req || needs(p);
            if (along_cols) {
                if (rows == 0 && cols == 0) rows = P.rows();
                if (P.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
                cols += P.cols();
            } else {
                if (rows == 0 && cols == 0) cols = P.cols();
                if (P.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
                rows += P.rows();
            }
        }
        Matrix<T> out(rows, cols);
        Eigen::Index off = 0;
        for (const Var& p : parts) {
            const auto& P = value(p);
            if (along_cols) {
                out.middleCols(off, P.cols()) = P;
                off += P.cols();
            } else {
                out.middleRows(off, P.rows()) = P;
                off += P.rows();
            }
        }
        return push(std::move(out), req, nullptr, [parts, along_cols](Tape& t, int self) {
            const auto& G = t.nodes_[self].grad;
            Eigen::Index off = 0;
            for (const Var& p : parts) {
                const auto& P = t.value(p);
                if (along_cols) {
                    if (t.needs(p)) t.grad_ref(p.id) += G.middleCols(off, P.cols());
                    off += P.cols();
                } else {
                    if (t.needs(p)) t.grad_ref(p.id) += G.middleRows(off, P.rows());
                    off += P.rows();
                }
            }
        });
    }

    bool record_;
    OpCounter* counter_ = nullptr;
    std::vector<Node> nodes_;
};

}  // namespace raydiff::nn
