#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "brimpr/tensor.hpp"

namespace brimpr {

enum class OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    AddRow,
    SubRow,
    Scale,
    Exp,
    Log,
    Sqrt,
    Gelu,
    ClampMin,
    MatMul,
    Transpose,
    Softmax,
    LayerNorm,
    MeanRows,
    SumAll,
    ConcatRows,
    ConcatCols,
    TakeRows,
    SliceCols,
    Reshape,
    Norm,
    CosSim,
};

using NodeId = int;

struct TapeNode {
    OpKind kind = OpKind::Leaf;
    std::vector<NodeId> inputs;
    Tensor value;
    bool trainable = false;
    // Op-specific payload.
    double scalar = 0.0;            // Scale factor / ClampMin floor
    int col_begin = 0, col_extent = 0;
    std::vector<int> indices;       // TakeRows
    Tensor aux_a, aux_b;            // LayerNorm: normalized rows, inverse std
};

/// Gradients of a scalar loss with respect to the tape's trainable leaves,
/// in leaf insertion order. Leaves unreachable from the loss get zeros.
struct GradientMap {
    std::vector<std::pair<NodeId, Tensor>> entries;

    const Tensor* find(NodeId id) const {
        for (const auto& [node, grad] : entries)
            if (node == id) return &grad;
        return nullptr;
    }
};

/// Single-pass reverse-mode tape. Nodes are appended in evaluation order, so
/// every node's inputs precede it and backprop is a plain reverse sweep.
/// A tape and its tensors belong to one logical thread; independent tapes may
/// run in parallel.
class Tape {
public:
    static constexpr double kLayerNormEps = 1e-8;
    static constexpr double kCosineEps = 1e-8;
    static constexpr double kDenomGuard = 1e-12;

    NodeId leaf(Tensor t, bool trainable = false) {
        TapeNode n;
        n.kind = OpKind::Leaf;
        n.value = std::move(t);
        n.trainable = trainable;
        return push(std::move(n));
    }

    NodeId constant(Tensor t) { return leaf(std::move(t), false); }

    const Tensor& value(NodeId id) const { return nodes_.at(static_cast<std::size_t>(id)).value; }
    const TapeNode& node(NodeId id) const { return nodes_.at(static_cast<std::size_t>(id)); }
    std::size_t size() const { return nodes_.size(); }

    NodeId add(NodeId a, NodeId b) { return elementwise(OpKind::Add, a, b); }
    NodeId sub(NodeId a, NodeId b) { return elementwise(OpKind::Sub, a, b); }
    NodeId mul(NodeId a, NodeId b) { return elementwise(OpKind::Mul, a, b); }
    NodeId divide(NodeId a, NodeId b) { return elementwise(OpKind::Div, a, b); }

    /// (m x d) + d-vector broadcast over rows.
    NodeId add_rowvec(NodeId a, NodeId b) { return rowvec(OpKind::AddRow, a, b); }
    NodeId sub_rowvec(NodeId a, NodeId b) { return rowvec(OpKind::SubRow, a, b); }

    NodeId scale(NodeId a, double c) {
        TapeNode n = unary_like(OpKind::Scale, a);
        n.scalar = c;
        for (double& v : n.value.values) v *= c;
        return push(std::move(n));
    }

    NodeId exp(NodeId a) {
        TapeNode n = unary_like(OpKind::Exp, a);
        for (double& v : n.value.values) v = std::exp(v);
        return push(std::move(n));
    }

    NodeId log(NodeId a) {
        TapeNode n = unary_like(OpKind::Log, a);
        for (double& v : n.value.values) v = std::log(v);
        return push(std::move(n));
    }

    NodeId sqrt(NodeId a) {
        TapeNode n = unary_like(OpKind::Sqrt, a);
        for (double& v : n.value.values) v = std::sqrt(v);
        return push(std::move(n));
    }

    NodeId gelu(NodeId a) {
        TapeNode n = unary_like(OpKind::Gelu, a);
        for (double& v : n.value.values) v = 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2));
        return push(std::move(n));
    }

    NodeId clamp_min(NodeId a, double floor) {
        TapeNode n = unary_like(OpKind::ClampMin, a);
        n.scalar = floor;
        for (double& v : n.value.values) v = std::max(v, floor);
        return push(std::move(n));
    }

    NodeId matmul(NodeId a, NodeId b) {
        const Tensor& A = value(a);
        const Tensor& B = value(b);
        if (!A.is_matrix() || !B.is_matrix() || A.cols() != B.rows())
            throw std::invalid_argument("matmul: incompatible shapes " + A.shape_str() + " x " +
                                        B.shape_str());
        TapeNode n;
        n.kind = OpKind::MatMul;
        n.inputs = {a, b};
        n.value = matmul_raw(A, B);
        return push(std::move(n));
    }

    NodeId transpose(NodeId a) {
        const Tensor& A = value(a);
        if (!A.is_matrix())
            throw std::invalid_argument("transpose: expected matrix, got " + A.shape_str());
        TapeNode n;
        n.kind = OpKind::Transpose;
        n.inputs = {a};
        n.value = transpose_raw(A);
        return push(std::move(n));
    }

    /// Row-wise softmax (over the last axis). Vectors are treated as one row.
    NodeId softmax(NodeId a) {
        const Tensor& A = value(a);
        auto [r, c] = rows_cols(A, "softmax");
        TapeNode n;
        n.kind = OpKind::Softmax;
        n.inputs = {a};
        n.value = A;
        for (int i = 0; i < r; ++i) {
            double* row = n.value.values.data() + static_cast<std::size_t>(i) * c;
            double m = row[0];
            for (int j = 1; j < c; ++j) m = std::max(m, row[j]);
            double s = 0.0;
            for (int j = 0; j < c; ++j) {
                row[j] = std::exp(row[j] - m);
                s += row[j];
            }
            for (int j = 0; j < c; ++j) row[j] /= s;
        }
        return push(std::move(n));
    }

    /// Row-wise layer normalization over the last axis with affine scale/shift.
    /// gamma and beta are d-vectors.
    NodeId layer_norm(NodeId x, NodeId gamma, NodeId beta) {
        const Tensor& X = value(x);
        const Tensor& G = value(gamma);
        const Tensor& Bv = value(beta);
        auto [r, c] = rows_cols(X, "layer_norm");
        if (!G.is_vector() || G.shape[0] != c || !Bv.is_vector() || Bv.shape[0] != c)
            throw std::invalid_argument("layer_norm: affine params must be [" +
                                        std::to_string(c) + "], got " + G.shape_str() + ", " +
                                        Bv.shape_str());
        TapeNode n;
        n.kind = OpKind::LayerNorm;
        n.inputs = {x, gamma, beta};
        n.value = X;
        n.aux_a = X;                       // normalized rows
        n.aux_b = Tensor::zeros({r});      // inverse std per row
        for (int i = 0; i < r; ++i) {
            double* row = n.value.values.data() + static_cast<std::size_t>(i) * c;
            double* xh = n.aux_a.values.data() + static_cast<std::size_t>(i) * c;
            double mean = 0.0;
            for (int j = 0; j < c; ++j) mean += row[j];
            mean /= c;
            double var = 0.0;
            for (int j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
            var /= c;
            double inv = 1.0 / std::sqrt(var + kLayerNormEps);
            n.aux_b.values[static_cast<std::size_t>(i)] = inv;
            for (int j = 0; j < c; ++j) {
                xh[j] = (row[j] - mean) * inv;
                row[j] = G.values[static_cast<std::size_t>(j)] * xh[j] +
                         Bv.values[static_cast<std::size_t>(j)];
            }
        }
        return push(std::move(n));
    }

    /// Mean over the row axis: (m x d) -> d-vector.
    NodeId mean_rows(NodeId a) {
        const Tensor& A = value(a);
        if (!A.is_matrix())
            throw std::invalid_argument("mean_rows: expected matrix, got " + A.shape_str());
        int r = A.rows(), c = A.cols();
        TapeNode n;
        n.kind = OpKind::MeanRows;
        n.inputs = {a};
        n.value = Tensor::zeros({c});
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j)
                n.value.values[static_cast<std::size_t>(j)] += A.at(i, j);
        for (double& v : n.value.values) v /= r;
        return push(std::move(n));
    }

    NodeId sum_all(NodeId a) {
        const Tensor& A = value(a);
        double s = 0.0;
        for (double v : A.values) s += v;
        TapeNode n;
        n.kind = OpKind::SumAll;
        n.inputs = {a};
        n.value = Tensor::scalar(s);
        return push(std::move(n));
    }

    /// Token-axis concatenation of matrices with equal column counts.
    NodeId concat_rows(const std::vector<NodeId>& parts) {
        if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
        int c = value(parts[0]).cols();
        int r = 0;
        for (NodeId p : parts) {
            const Tensor& T = value(p);
            if (!T.is_matrix() || T.cols() != c)
                throw std::invalid_argument("concat_rows: mismatched shape " + T.shape_str());
            r += T.rows();
        }
        TapeNode n;
        n.kind = OpKind::ConcatRows;
        n.inputs = parts;
        n.value = Tensor::zeros({r, c});
        std::size_t off = 0;
        for (NodeId p : parts) {
            const Tensor& T = value(p);
            std::copy(T.values.begin(), T.values.end(), n.value.values.begin() + off);
            off += T.numel();
        }
        return push(std::move(n));
    }

    NodeId concat_cols(const std::vector<NodeId>& parts) {
        if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
        int r = value(parts[0]).rows();
        int c = 0;
        for (NodeId p : parts) {
            const Tensor& T = value(p);
            if (!T.is_matrix() || T.rows() != r)
                throw std::invalid_argument("concat_cols: mismatched shape " + T.shape_str());
            c += T.cols();
        }
        TapeNode n;
        n.kind = OpKind::ConcatCols;
        n.inputs = parts;
        n.value = Tensor::zeros({r, c});
        int off = 0;
        for (NodeId p : parts) {
            const Tensor& T = value(p);
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < T.cols(); ++j) n.value.at(i, off + j) = T.at(i, j);
            off += T.cols();
        }
        return push(std::move(n));
    }

    /// Token-axis gather: keeps the given rows in the given order.
    NodeId take_rows(NodeId a, std::vector<int> rows) {
        const Tensor& A = value(a);
        if (!A.is_matrix())
            throw std::invalid_argument("take_rows: expected matrix, got " + A.shape_str());
        for (int r : rows)
            if (r < 0 || r >= A.rows())
                throw std::invalid_argument("take_rows: index " + std::to_string(r) +
                                            " out of range for " + A.shape_str());
        TapeNode n;
        n.kind = OpKind::TakeRows;
        n.inputs = {a};
        n.value = Tensor::zeros({static_cast<int>(rows.size()), A.cols()});
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (int j = 0; j < A.cols(); ++j)
                n.value.at(static_cast<int>(i), j) = A.at(rows[i], j);
        n.indices = std::move(rows);
        return push(std::move(n));
    }

    NodeId slice_cols(NodeId a, int begin, int extent) {
        const Tensor& A = value(a);
        if (!A.is_matrix() || begin < 0 || extent <= 0 || begin + extent > A.cols())
            throw std::invalid_argument("slice_cols: invalid [" + std::to_string(begin) + "," +
                                        std::to_string(begin + extent) + ") for " +
                                        A.shape_str());
        TapeNode n;
        n.kind = OpKind::SliceCols;
        n.inputs = {a};
        n.col_begin = begin;
        n.col_extent = extent;
        n.value = Tensor::zeros({A.rows(), extent});
        for (int i = 0; i < A.rows(); ++i)
            for (int j = 0; j < extent; ++j) n.value.at(i, j) = A.at(i, begin + j);
        return push(std::move(n));
    }

    NodeId reshape(NodeId a, std::vector<int> shape) {
        const Tensor& A = value(a);
        Tensor out(std::move(shape), A.values);
        TapeNode n;
        n.kind = OpKind::Reshape;
        n.inputs = {a};
        n.value = std::move(out);
        return push(std::move(n));
    }

    /// Euclidean norm of a vector -> scalar.
    NodeId norm(NodeId a) {
        const Tensor& A = value(a);
        if (!A.is_vector())
            throw std::invalid_argument("norm: expected vector, got " + A.shape_str());
        double s = 0.0;
        for (double v : A.values) s += v * v;
        TapeNode n;
        n.kind = OpKind::Norm;
        n.inputs = {a};
        n.value = Tensor::scalar(std::sqrt(s));
        return push(std::move(n));
    }

    /// Cosine similarity of two vectors -> scalar, denominators guarded by eps.
    NodeId cosine_similarity(NodeId a, NodeId b) {
        const Tensor& A = value(a);
        const Tensor& B = value(b);
        if (!A.is_vector() || !B.is_vector() || A.shape != B.shape)
            throw std::invalid_argument("cosine_similarity: need equal-length vectors, got " +
                                        A.shape_str() + " vs " + B.shape_str());
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (std::size_t i = 0; i < A.numel(); ++i) {
            dot += A.values[i] * B.values[i];
            na += A.values[i] * A.values[i];
            nb += B.values[i] * B.values[i];
        }
        na = std::max(std::sqrt(na), kCosineEps);
        nb = std::max(std::sqrt(nb), kCosineEps);
        TapeNode n;
        n.kind = OpKind::CosSim;
        n.inputs = {a, b};
        n.value = Tensor::scalar(dot / (na * nb));
        return push(std::move(n));
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every trainable
    /// leaf; leaves the loss does not reach get zero gradients.
    GradientMap backward(NodeId loss) const {
        const Tensor& L = value(loss);
        if (!L.is_scalar())
            throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                        L.shape_str());
        std::vector<Tensor> grads(nodes_.size());
        std::vector<bool> touched(nodes_.size(), false);
        auto grad_of = [&](NodeId id) -> Tensor& {
            auto i = static_cast<std::size_t>(id);
            if (!touched[i]) {
                grads[i] = Tensor::zeros(nodes_[i].value.shape);
                touched[i] = true;
            }
            return grads[i];
        };
        grad_of(loss).values[0] = 1.0;

        for (NodeId id = loss; id >= 0; --id) {
            auto i = static_cast<std::size_t>(id);
            if (!touched[i] || nodes_[i].kind == OpKind::Leaf) continue;
            accumulate(nodes_[i], grads[i], grad_of);
        }

        GradientMap out;
        for (NodeId id = 0; id < static_cast<NodeId>(nodes_.size()); ++id) {
            auto i = static_cast<std::size_t>(id);
            if (!nodes_[i].trainable) continue;
            out.entries.emplace_back(id, touched[i] ? std::move(grads[i])
                                                    : Tensor::zeros(nodes_[i].value.shape));
        }
        return out;
    }

    static Tensor matmul_raw(const Tensor& A, const Tensor& B) {
        int p = A.rows(), q = A.cols(), r = B.cols();
        Tensor C = Tensor::zeros({p, r});
        for (int i = 0; i < p; ++i) {
            const double* arow = A.values.data() + static_cast<std::size_t>(i) * q;
            double* crow = C.values.data() + static_cast<std::size_t>(i) * r;
            for (int k = 0; k < q; ++k) {
                double a = arow[k];
                if (a == 0.0) continue;
                const double* brow = B.values.data() + static_cast<std::size_t>(k) * r;
                for (int j = 0; j < r; ++j) crow[j] += a * brow[j];
            }
        }
        return C;
    }

    static Tensor transpose_raw(const Tensor& A) {
        Tensor T = Tensor::zeros({A.cols(), A.rows()});
        for (int i = 0; i < A.rows(); ++i)
            for (int j = 0; j < A.cols(); ++j) T.at(j, i) = A.at(i, j);
        return T;
    }

private:
    std::vector<TapeNode> nodes_;

    NodeId push(TapeNode n) {
        nodes_.emplace_back(std::move(n));
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    static std::pair<int, int> rows_cols(const Tensor& T, const char* op) {
        if (T.is_matrix()) return {T.rows(), T.cols()};
        if (T.is_vector()) return {1, T.shape[0]};
        throw std::invalid_argument(std::string(op) + ": expected vector or matrix, got " +
                                    T.shape_str());
    }

    TapeNode unary_like(OpKind kind, NodeId a) {
        TapeNode n;
        n.kind = kind;
        n.inputs = {a};
        n.value = value(a);
        return n;
    }

    NodeId elementwise(OpKind kind, NodeId a, NodeId b) {
        const Tensor& A = value(a);
        const Tensor& B = value(b);
        if (A.shape != B.shape)
            throw std::invalid_argument("elementwise op: shape mismatch " + A.shape_str() +
                                        " vs " + B.shape_str());
        TapeNode n;
        n.kind = kind;
        n.inputs = {a, b};
        n.value = A;
        for (std::size_t i = 0; i < A.numel(); ++i) {
            switch (kind) {
                case OpKind::Add: n.value.values[i] = A.values[i] + B.values[i]; break;
                case OpKind::Sub: n.value.values[i] = A.values[i] - B.values[i]; break;
                case OpKind::Mul: n.value.values[i] = A.values[i] * B.values[i]; break;
                case OpKind::Div: n.value.values[i] = A.values[i] / B.values[i]; break;
                default: throw std::logic_error("elementwise: bad kind");
            }
        }
        return push(std::move(n));
    }

    NodeId rowvec(OpKind kind, NodeId a, NodeId b) {
        const Tensor& A = value(a);
        const Tensor& B = value(b);
        if (!A.is_matrix() || !B.is_vector() || B.shape[0] != A.cols())
            throw std::invalid_argument("row-broadcast op: shape mismatch " + A.shape_str() +
                                        " vs " + B.shape_str());
        TapeNode n;
        n.kind = kind;
        n.inputs = {a, b};
        n.value = A;
        double sgn = (kind == OpKind::AddRow) ? 1.0 : -1.0;
        for (int i = 0; i < A.rows(); ++i)
            for (int j = 0; j < A.cols(); ++j)
                n.value.at(i, j) = A.at(i, j) + sgn * B.values[static_cast<std::size_t>(j)];
        return push(std::move(n));
    }

    template <typename GradOf>
    void accumulate(const TapeNode& n, const Tensor& g, GradOf&& grad_of) const {
        switch (n.kind) {
            case OpKind::Leaf:
                break;
            case OpKind::Add: {
                axpy(grad_of(n.inputs[0]), g, 1.0);
                axpy(grad_of(n.inputs[1]), g, 1.0);
                break;
            }
            case OpKind::Sub: {
                axpy(grad_of(n.inputs[0]), g, 1.0);
                axpy(grad_of(n.inputs[1]), g, -1.0);
                break;
            }
            case OpKind::Mul: {
                const Tensor& A = value(n.inputs[0]);
                const Tensor& B = value(n.inputs[1]);
                Tensor& ga = grad_of(n.inputs[0]);
                Tensor& gb = grad_of(n.inputs[1]);
                for (std::size_t i = 0; i < g.numel(); ++i) {
                    ga.values[i] += g.values[i] * B.values[i];
                    gb.values[i] += g.values[i] * A.values[i];
                }
                break;
            }
            case OpKind::Div: {
                const Tensor& A = value(n.inputs[0]);
                const Tensor& B = value(n.inputs[1]);
                Tensor& ga = grad_of(n.inputs[0]);
                Tensor& gb = grad_of(n.inputs[1]);
                for (std::size_t i = 0; i < g.numel(); ++i) {
                    ga.values[i] += g.values[i] / B.values[i];
                    gb.values[i] -= g.values[i] * A.values[i] / (B.values[i] * B.values[i]);
                }
                break;
            }
            case OpKind::AddRow:
            case OpKind::SubRow: {
                double sgn = (n.kind == OpKind::AddRow) ? 1.0 : -1.0;
                Tensor& ga = grad_of(n.inputs[0]);
                Tensor& gb = grad_of(n.inputs[1]);
                int r = n.value.rows(), c = n.value.cols();
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j) {
                        ga.at(i, j) += g.at(i, j);
                        gb.values[static_cast<std::size_t>(j)] += sgn * g.at(i, j);
                    }
                break;
            }
            case OpKind::Scale:
                axpy(grad_of(n.inputs[0]), g, n.scalar);
                break;
            case OpKind::Exp: {
                Tensor& ga = grad_of(n.inputs[0]);
                for (std::size_t i = 0; i < g.numel(); ++i)
                    ga.values[i] += g.values[i] * n.value.values[i];
                break;
            }
            case OpKind::Log: {
                const Tensor& X = value(n.inputs[0]);
                Tensor& ga = grad_of(n.inputs[0]);
                for (std::size_t i = 0; i < g.numel(); ++i)
                    ga.values[i] += g.values[i] / X.values[i];
                break;
            }
            case OpKind::Sqrt: {
                Tensor& ga = grad_of(n.inputs[0]);
                for (std::size_t i = 0; i < g.numel(); ++i)
                    ga.values[i] += g.values[i] * 0.5 / std::max(n.value.values[i], kDenomGuard);
                break;
            }
            case OpKind::Gelu: {
                const Tensor& X = value(n.inputs[0]);
                Tensor& ga = grad_of(n.inputs[0]);
                for (std::size_t i = 0; i < g.numel(); ++i) {
                    double x = X.values[i];
                    double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
                    double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * 3.14159265358979323846);
                    ga.values[i] += g.values[i] * (cdf + x * pdf);
                }
                break;
            }
            case OpKind::ClampMin: {
                const Tensor& X = value(n.inputs[0]);
                Tensor& ga = grad_of(n.inputs[0]);
                for (std::size_t i = 0; i < g.numel(); ++i)
                    if (X.values[i] >= n.scalar) ga.values[i] += g.values[i];
                break;
            }
            case OpKind::MatMul: {
                const Tensor& A = value(n.inputs[0]);
                const Tensor& B = value(n.inputs[1]);
                Tensor at = transpose_raw(A);
                Tensor bt = transpose_raw(B);
                Tensor da = matmul_raw(g, bt);
                Tensor db = matmul_raw(at, g);
                axpy(grad_of(n.inputs[0]), da, 1.0);
                axpy(grad_of(n.inputs[1]), db, 1.0);
                break;
            }
            case OpKind::Transpose: {
                Tensor gt = transpose_raw(g);
                axpy(grad_of(n.inputs[0]), gt, 1.0);
                break;
            }
            case OpKind::Softmax: {
                Tensor& ga = grad_of(n.inputs[0]);
                auto [r, c] = rows_cols(n.value, "softmax");
                for (int i = 0; i < r; ++i) {
                    const double* y = n.value.values.data() + static_cast<std::size_t>(i) * c;
                    const double* gr = g.values.data() + static_cast<std::size_t>(i) * c;
                    double dot = 0.0;
                    for (int j = 0; j < c; ++j) dot += gr[j] * y[j];
                    double* dst = ga.values.data() + static_cast<std::size_t>(i) * c;
                    for (int j = 0; j < c; ++j) dst[j] += y[j] * (gr[j] - dot);
                }
                break;
            }
            case OpKind::LayerNorm: {
                const Tensor& G = value(n.inputs[1]);
                Tensor& gx = grad_of(n.inputs[0]);
                Tensor& gg = grad_of(n.inputs[1]);
                Tensor& gb = grad_of(n.inputs[2]);
                auto [r, c] = rows_cols(n.value, "layer_norm");
                for (int i = 0; i < r; ++i) {
                    const double* xh = n.aux_a.values.data() + static_cast<std::size_t>(i) * c;
                    const double* gr = g.values.data() + static_cast<std::size_t>(i) * c;
                    double inv = n.aux_b.values[static_cast<std::size_t>(i)];
                    double mean_gy = 0.0, mean_gyxh = 0.0;
                    for (int j = 0; j < c; ++j) {
                        double gy = gr[j] * G.values[static_cast<std::size_t>(j)];
                        mean_gy += gy;
                        mean_gyxh += gy * xh[j];
                    }
                    mean_gy /= c;
                    mean_gyxh /= c;
                    double* dst = gx.values.data() + static_cast<std::size_t>(i) * c;
                    for (int j = 0; j < c; ++j) {
                        double gy = gr[j] * G.values[static_cast<std::size_t>(j)];
                        dst[j] += inv * (gy - mean_gy - xh[j] * mean_gyxh);
                        gg.values[static_cast<std::size_t>(j)] += gr[j] * xh[j];
                        gb.values[static_cast<std::size_t>(j)] += gr[j];
                    }
                }
                break;
            }
            case OpKind::MeanRows: {
                const Tensor& X = value(n.inputs[0]);
                Tensor& ga = grad_of(n.inputs[0]);
                int r = X.rows(), c = X.cols();
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j)
                        ga.at(i, j) += g.values[static_cast<std::size_t>(j)] / r;
                break;
            }
            case OpKind::SumAll: {
                Tensor& ga = grad_of(n.inputs[0]);
                for (double& v : ga.values) v += g.values[0];
                break;
            }
            case OpKind::ConcatRows: {
                std::size_t off = 0;
                for (NodeId p : n.inputs) {
                    Tensor& gp = grad_of(p);
                    for (std::size_t i = 0; i < gp.numel(); ++i) gp.values[i] += g.values[off + i];
                    off += gp.numel();
                }
                break;
            }
            case OpKind::ConcatCols: {
                int off = 0;
                int r = n.value.rows();
                for (NodeId p : n.inputs) {
                    Tensor& gp = grad_of(p);
                    int pc = value(p).cols();
                    for (int i = 0; i < r; ++i)
                        for (int j = 0; j < pc; ++j) gp.at(i, j) += g.at(i, off + j);
                    off += pc;
                }
                break;
            }
            case OpKind::TakeRows: {
                Tensor& ga = grad_of(n.inputs[0]);
                int c = n.value.cols();
                for (std::size_t i = 0; i < n.indices.size(); ++i)
                    for (int j = 0; j < c; ++j)
                        ga.at(n.indices[i], j) += g.at(static_cast<int>(i), j);
                break;
            }
            case OpKind::SliceCols: {
                Tensor& ga = grad_of(n.inputs[0]);
                for (int i = 0; i < n.value.rows(); ++i)
                    for (int j = 0; j < n.col_extent; ++j)
                        ga.at(i, n.col_begin + j) += g.at(i, j);
                break;
            }
            case OpKind::Reshape: {
                Tensor& ga = grad_of(n.inputs[0]);
                for (std::size_t i = 0; i < g.numel(); ++i) ga.values[i] += g.values[i];
                break;
            }
            case OpKind::Norm: {
                const Tensor& X = value(n.inputs[0]);
                Tensor& ga = grad_of(n.inputs[0]);
                double y = std::max(n.value.values[0], kDenomGuard);
                for (std::size_t i = 0; i < X.numel(); ++i)
                    ga.values[i] += g.values[0] * X.values[i] / y;
                break;
            }
            case OpKind::CosSim: {
                const Tensor& A = value(n.inputs[0]);
                const Tensor& B = value(n.inputs[1]);
                Tensor& ga = grad_of(n.inputs[0]);
                Tensor& gb = grad_of(n.inputs[1]);
                double na = 0.0, nb = 0.0;
                for (std::size_t i = 0; i < A.numel(); ++i) {
                    na += A.values[i] * A.values[i];
                    nb += B.values[i] * B.values[i];
                }
                na = std::sqrt(na);
                nb = std::sqrt(nb);
                double nag = std::max(na, kCosineEps);
                double nbg = std::max(nb, kCosineEps);
                double y = n.value.values[0];
                double g0 = g.values[0];
                for (std::size_t i = 0; i < A.numel(); ++i) {
                    double da = B.values[i] / (nag * nbg);
                    if (na > kCosineEps) da -= y * A.values[i] / (nag * nag);
                    double db = A.values[i] / (nag * nbg);
                    if (nb > kCosineEps) db -= y * B.values[i] / (nbg * nbg);
                    ga.values[i] += g0 * da;
                    gb.values[i] += g0 * db;
                }
                break;
            }
        }
    }

    static void axpy(Tensor& dst, const Tensor& src, double a) {
        for (std::size_t i = 0; i < dst.numel(); ++i) dst.values[i] += a * src.values[i];
    }
};

}  // namespace brimpr
