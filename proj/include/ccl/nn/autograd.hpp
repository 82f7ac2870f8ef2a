#ifndef CCL_NN_AUTOGRAD_HPP
#define CCL_NN_AUTOGRAD_HPP

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <utility>
#include <vector>

namespace ccl::nn {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// One node of the reverse-mode tape. Activations are [batch, features]
/// matrices; spatial tensors are stored row-major as [batch, C*H*W] with
/// shape metadata carried by the ops that need it.
template <class T>
struct Node {
    Mat<T> value;
    Mat<T> grad;
    bool requires_grad = false;
    bool grad_ready = false;
    std::vector<std::shared_ptr<Node<T>>> parents;
    std::function<void(Node<T>&)> backward_op;

    void ensure_grad() {
        if (!grad_ready) {
            grad = Mat<T>::Zero(value.rows(), value.cols());
            grad_ready = true;
        }
    }
};

template <class T>
using Var = std::shared_ptr<Node<T>>;

template <class T>
Var<T> constant(Mat<T> v) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    n->requires_grad = false;
    return n;
}

template <class T>
Var<T> leaf(Mat<T> v, bool requires_grad = true) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    n->requires_grad = requires_grad;
    return n;
}

namespace detail {

template <class T>
Var<T> make_op(Mat<T> value, std::vector<Var<T>> parents, std::function<void(Node<T>&)> backward) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    bool any = false;
    for (const auto& p : parents) any = any || p->requires_grad;
    n->requires_grad = any;
    if (any) {
        n->parents = std::move(parents);
        n->backward_op = std::move(backward);
    }
    return n;
}

}  // namespace detail

/// Runs reverse accumulation from a scalar (1x1) root.
template <class T>
void backward(const Var<T>& root) {
    if (root->value.rows() != 1 || root->value.cols() != 1)
        throw std::invalid_argument("backward: root must be a 1x1 scalar");
    // Iterative topological order over the reachable grad-requiring subgraph.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node<T>* parent = node->parents[idx++].get();
            if (parent->requires_grad && !seen.count(parent)) {
                seen.insert(parent);
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root->ensure_grad();
    root->grad(0, 0) = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* node = *it;
        if (node->backward_op && node->grad_ready) node->backward_op(*node);
    }
}

// ---------------------------------------------------------------------------
// Elementwise and linear-algebra ops
// ---------------------------------------------------------------------------

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    if (a->value.cols() != b->value.rows()) throw std::invalid_argument("matmul: inner dims differ");
    Mat<T> out = a->value * b->value;
    return detail::make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            a->grad.noalias() += n.grad * b->value.transpose();
        }
        if (b->requires_grad) {
            b->ensure_grad();
            b->grad.noalias() += a->value.transpose() * n.grad;
        }
    });
}

/// a * b^T (used for cosine-similarity matrices).
template <class T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
    if (a->value.cols() != b->value.cols()) throw std::invalid_argument("matmul_nt: inner dims differ");
    Mat<T> out = a->value * b->value.transpose();
    return detail::make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            a->grad.noalias() += n.grad * b->value;
        }
        if (b->requires_grad) {
            b->ensure_grad();
            b->grad.noalias() += n.grad.transpose() * a->value;
        }
    });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    if (a->value.rows() != b->value.rows() || a->value.cols() != b->value.cols())
        throw std::invalid_argument("add: shape mismatch");
    return detail::make_op<T>(a->value + b->value, {a, b}, [a, b](Node<T>& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            a->grad += n.grad;
        }
        if (b->requires_grad) {
            b->ensure_grad();
            b->grad += n.grad;
        }
    });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    if (a->value.rows() != b->value.rows() || a->value.cols() != b->value.cols())
        throw std::invalid_argument("sub: shape mismatch");
    return detail::make_op<T>(a->value - b->value, {a, b}, [a, b](Node<T>& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            a->grad += n.grad;
        }
        if (b->requires_grad) {
            b->ensure_grad();
            b->grad -= n.grad;
        }
    });
}

template <class T>
Var<T> hadamard(const Var<T>& a, const Var<T>& b) {
    if (a->value.rows() != b->value.rows() || a->value.cols() != b->value.cols())
        throw std::invalid_argument("hadamard: shape mismatch");
    return detail::make_op<T>(a->value.cwiseProduct(b->value), {a, b}, [a, b](Node<T>& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            a->grad += n.grad.cwiseProduct(b->value);
        }
        if (b->requires_grad) {
            b->ensure_grad();
            b->grad += n.grad.cwiseProduct(a->value);
        }
    });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
    return detail::make_op<T>(a->value * s, {a}, [a, s](Node<T>& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            a->grad += n.grad * s;
        }
    });
}

template <class T>
Var<T> add_scalar(const Var<T>& a, T s) {
    return detail::make_op<T>(a->value.array() + s, {a}, [a](Node<T>& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            a->grad += n.grad;
        }
    });
}

/// Adds a [1, D] row vector to every row of a (bias broadcast).
template <class T>
Var<T> add_rowvec(const Var<T>& a, const Var<T>& b) {
    if (b->value.rows() != 1 || b->value.cols() != a->value.cols())
        throw std::invalid_argument("add_rowvec: b must be [1, cols(a)]");
    Mat<T> out = a->value.rowwise() + b->value.row(0);
    return detail::make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            a->grad += n.grad;
        }
        if (b->requires_grad) {
            b->ensure_grad();
            b->grad.row(0) += n.grad.colwise().sum();
        }
    });
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
    Mat<T> out = ((-a->value.array()).exp() + T(1)).inverse();
    return detail::make_op<T>(std::move(out), {a}, [a](Node<T>& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            a->grad.array() += n.grad.array() * n.value.array() * (T(1) - n.value.array());
        }
    });
}

template <class T>
Var<T> silu(const Var<T>& a) {
    Mat<T> sig = ((-a->value.array()).exp() + T(1)).inverse();
    Mat<T> out = a->value.cwiseProduct(sig);
    return detail::make_op<T>(std::move(out), {a, constant<T>(std::move(sig))}, [a](Node<T>& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            const auto& sig = n.parents[1]->value.array();
            a->grad.array() += n.grad.array() * (sig + a->value.array() * sig * (T(1) - sig));
        }
    });
}

template <class T>
Var<T> relu(const Var<T>& a) {
    Mat<T> out = a->value.cwiseMax(T(0));
    return detail::make_op<T>(std::move(out), {a}, [a](Node<T>& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            a->grad.array() += n.grad.array() * (a->value.array() > T(0)).template cast<T>();
        }
    });
}

template <class T>
Var<T> exp_(const Var<T>& a) {
    Mat<T> out = a->value.array().exp();
    return detail::make_op<T>(std::move(out), {a}, [a](Node<T>& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            a->grad.array() += n.grad.array() * n.value.array();
        }
    });
}

template <class T>
Var<T> log_(const Var<T>& a) {
    Mat<T> out = a->value.array().log();
    return detail::make_op<T>(std::move(out), {a}, [a](Node<T>& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            a->grad.array() += n.grad.array() / a->value.array();
        }
    });
}

template <class T>
Var<T> square(const Var<T>& a) {
    Mat<T> out = a->value.array().square();
    return detail::make_op<T>(std::move(out), {a}, [a](Node<T>& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            a->grad.array() += n.grad.array() * T(2) * a->value.array();
        }
    });
}

/// Clamp to [0,1]; gradient passes only strictly inside the interval.
template <class T>
Var<T> clamp01(const Var<T>& a) {
    Mat<T> out = a->value.cwiseMax(T(0)).cwiseMin(T(1));
    return detail::make_op<T>(std::move(out), {a}, [a](Node<T>& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            a->grad.array() += n.grad.array() * ((a->value.array() > T(0)) && (a->value.array() < T(1))).template cast<T>();
        }
    });
}

template <class T>
Var<T> sum_all(const Var<T>& a) {
    Mat<T> out(1, 1);
    out(0, 0) = a->value.sum();
    return detail::make_op<T>(std::move(out), {a}, [a](Node<T>& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            a->grad.array() += n.grad(0, 0);
        }
    });
}

template <class T>
Var<T> mean_all(const Var<T>& a) {
    const T inv = T(1) / static_cast<T>(a->value.size());
    Mat<T> out(1, 1);
    out(0, 0) = a->value.sum() * inv;
    return detail::make_op<T>(std::move(out), {a}, [a, inv](Node<T>& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            a->grad.array() += n.grad(0, 0) * inv;
        }
    });
}

template <class T>
Var<T> concat_cols(const Var<T>& a, const Var<T>& b) {
    if (a->value.rows() != b->value.rows()) throw std::invalid_argument("concat_cols: row mismatch");
    Mat<T> out(a->value.rows(), a->value.cols() + b->value.cols());
    out.leftCols(a->value.cols()) = a->value;
    out.rightCols(b->value.cols()) = b->value;
    return detail::make_op<T>(std::move(out), {a, b}, [a, b](Node<T>& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            a->grad += n.grad.leftCols(a->value.cols());
        }
        if (b->requires_grad) {
            b->ensure_grad();
            b->grad += n.grad.rightCols(b->value.cols());
        }
    });
}

template <class T>
Var<T> slice_cols(const Var<T>& a, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || start + count > a->value.cols()) throw std::invalid_argument("slice_cols: out of range");
    Mat<T> out = a->value.middleCols(start, count);
    return detail::make_op<T>(std::move(out), {a}, [a, start, count](Node<T>& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            a->grad.middleCols(start, count) += n.grad;
        }
    });
}

/// Selects a subset of rows (no gradient to the index list).
template <class T>
Var<T> gather_rows(const Var<T>& a, const std::vector<Eigen::Index>& rows) {
    Mat<T> out(static_cast<Eigen::Index>(rows.size()), a->value.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = a->value.row(rows[i]);
    return detail::make_op<T>(std::move(out), {a}, [a, rows](Node<T>& n) {
        if (a->requires_grad) {
            a->ensure_grad();
            for (std::size_t i = 0; i < rows.size(); ++i)
                a->grad.row(rows[i]) += n.grad.row(static_cast<Eigen::Index>(i));
        }
    });
}

template <class T>
Var<T> stopgrad(const Var<T>& a) {
    return constant<T>(a->value);
}

template <class T>
Var<T> l2_normalize_rows(const Var<T>& a, T eps = T(1e-12)) {
    Mat<T> out = a->value;
    Eigen::Matrix<T, Eigen::Dynamic, 1> norms(a->value.rows());
    for (Eigen::Index r = 0; r < a->value.rows(); ++r) {
        norms(r) = std::max(a->value.row(r).norm(), eps);
        out.row(r) /= norms(r);
    }
    auto norm_holder = constant<T>(Mat<T>(norms));
    return detail::make_op<T>(std::move(out), {a, norm_holder}, [a](Node<T>& n) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        const auto& norms = n.parents[1]->value;
        for (Eigen::Index r = 0; r < n.value.rows(); ++r) {
            const T dot = n.grad.row(r).dot(n.value.row(r));
            a->grad.row(r) += (n.grad.row(r) - n.value.row(r) * dot) / norms(r, 0);
        }
    });
}

template <class T>
Var<T> log_softmax_rows(const Var<T>& a) {
    Mat<T> out = a->value;
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
        const T mx = out.row(r).maxCoeff();
        out.row(r).array() -= mx;
        const T lse = std::log(out.row(r).array().exp().sum());
        out.row(r).array() -= lse;
    }
    return detail::make_op<T>(std::move(out), {a}, [a](Node<T>& n) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (Eigen::Index r = 0; r < n.value.rows(); ++r) {
            const T gsum = n.grad.row(r).sum();
            a->grad.row(r) += n.grad.row(r) - (n.value.row(r).array().exp() * gsum).matrix();
        }
    });
}

// ---------------------------------------------------------------------------
// Composite losses
// ---------------------------------------------------------------------------

/// Mean of -sum_k targets[r,k] * log_softmax(logits)[r,k], with optional
/// per-row weights folded into the (constant) target matrix by the caller.
/// Divisor is the weight mass, so uniform weights give a plain mean.
template <class T>
Var<T> cross_entropy_soft(const Var<T>& logits, const Mat<T>& targets, const std::vector<T>& row_weights = {}) {
    if (targets.rows() != logits->value.rows() || targets.cols() != logits->value.cols())
        throw std::invalid_argument("cross_entropy_soft: target shape mismatch");
    Mat<T> weighted = targets;
    T mass = static_cast<T>(targets.rows());
    if (!row_weights.empty()) {
        if (static_cast<Eigen::Index>(row_weights.size()) != targets.rows())
            throw std::invalid_argument("cross_entropy_soft: weight count mismatch");
        mass = T(0);
        for (Eigen::Index r = 0; r < targets.rows(); ++r) {
            weighted.row(r) *= row_weights[static_cast<std::size_t>(r)];
            mass += row_weights[static_cast<std::size_t>(r)];
        }
        if (mass <= T(0)) throw std::invalid_argument("cross_entropy_soft: nonpositive weight mass");
    }
    auto ls = log_softmax_rows(logits);
    auto picked = hadamard(ls, constant<T>(std::move(weighted)));
    return scale(sum_all(picked), T(-1) / mass);
}

template <class T>
Mat<T> one_hot(const std::vector<int>& labels, int num_classes) {
    Mat<T> out = Mat<T>::Zero(static_cast<Eigen::Index>(labels.size()), num_classes);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= num_classes) throw std::invalid_argument("one_hot: label out of range");
        out(static_cast<Eigen::Index>(i), labels[i]) = T(1);
    }
    return out;
}

template <class T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<int>& labels, const std::vector<T>& row_weights = {}) {
    return cross_entropy_soft(logits, one_hot<T>(labels, static_cast<int>(logits->value.cols())), row_weights);
}

/// KL(q || p) for diagonal Gaussians given means and log-variances,
/// summed over all entries (batch x dim).
template <class T>
Var<T> gaussian_kl(const Var<T>& mu_q, const Var<T>& logv_q, const Var<T>& mu_p, const Var<T>& logv_p) {
    auto dlog = sub(logv_q, logv_p);
    auto ratio = exp_(dlog);
    auto dmu2 = square(sub(mu_q, mu_p));
    auto inv_vp = exp_(scale(logv_p, T(-1)));
    auto mterm = hadamard(dmu2, inv_vp);
    auto body = add_scalar(sub(add(ratio, mterm), dlog), T(-1));
    return scale(sum_all(body), T(0.5));
}

/// z = mu + exp(0.5*logv) .* noise, with noise a fixed draw.
template <class T>
Var<T> gaussian_reparam(const Var<T>& mu, const Var<T>& logv, const Mat<T>& noise) {
    return add(mu, hadamard(exp_(scale(logv, T(0.5))), constant<T>(noise)));
}

}  // namespace ccl::nn

#endif  // CCL_NN_AUTOGRAD_HPP
