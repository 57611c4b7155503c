#ifndef DITSE_TENSOR_HPP
#define DITSE_TENSOR_HPP

#include <cmath>
#include <deque>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

// Minimal reverse-mode autodiff over Eigen matrices. Convention throughout:
// rows = time/frames, cols = channels/features. Scalar type is a template
// parameter so gradient checks can run in double while training runs in float.

namespace ditse::nn {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

struct TensorError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

template <typename T>
struct Parameter {
    std::string name;
    Mat<T> value;
    Mat<T> grad;
    Mat<T> adam_m, adam_v;

    void setup(std::string n, int rows, int cols) {
        name = std::move(n);
        value = Mat<T>::Zero(rows, cols);
        reset_state();
    }
    void reset_state() {
        grad = Mat<T>::Zero(value.rows(), value.cols());
        adam_m = Mat<T>::Zero(value.rows(), value.cols());
        adam_v = Mat<T>::Zero(value.rows(), value.cols());
    }
    void init_uniform(std::mt19937_64& rng, T scale) {
        std::uniform_real_distribution<double> d(-double(scale), double(scale));
        for (int i = 0; i < value.rows(); ++i)
            for (int j = 0; j < value.cols(); ++j) value(i, j) = T(d(rng));
    }
    // fan-in scaled init for linear/conv weights
    void init_kaiming(std::mt19937_64& rng, int fan_in) {
        init_uniform(rng, T(std::sqrt(1.0 / std::max(1, fan_in))));
    }
};

template <typename T>
class Graph;

template <typename T>
struct Var {
    Graph<T>* g = nullptr;
    int idx = -1;

    const Mat<T>& val() const;
    int rows() const { return int(val().rows()); }
    int cols() const { return int(val().cols()); }
};

template <typename T>
class Graph {
  public:
    struct Node {
        Mat<T> val;
        Mat<T> grad;
        std::function<void(Graph&, Node&)> back;  // may be empty for leaves
        Parameter<T>* param = nullptr;
    };

    Var<T> constant(Mat<T> v) { return push(std::move(v), nullptr); }

    Var<T> param(Parameter<T>& p) {
        Var<T> out = push(p.value, nullptr);
        node(out).param = &p;
        return out;
    }

    // extension point for fused ops defined outside this header
    Var<T> adopt(Mat<T> v, std::function<void(Graph&, Node&)> back) {
        return push(std::move(v), std::move(back));
    }

    Node& node(Var<T> v) { return nodes_[v.idx]; }
    const Node& node(Var<T> v) const { return nodes_[v.idx]; }
    Mat<T>& grad(Var<T> v) { return nodes_[v.idx].grad; }

    void backward(Var<T> root) {
        Node& r = node(root);
        if (r.val.size() != 1) throw TensorError("backward: root must be scalar");
        for (auto& n : nodes_) n.grad.setZero(n.val.rows(), n.val.cols());
        r.grad(0, 0) = T(1);
        for (int i = int(nodes_.size()) - 1; i >= 0; --i) {
            Node& n = nodes_[size_t(i)];
            if (n.back) n.back(*this, n);
            if (n.param) n.param->grad += n.grad;
        }
    }

    size_t size() const { return nodes_.size(); }

  private:
    friend struct Var<T>;
    std::deque<Node> nodes_;

    Var<T> push(Mat<T> v, std::function<void(Graph&, Node&)> back) {
        nodes_.push_back(Node{std::move(v), Mat<T>(), std::move(back), nullptr});
        return Var<T>{this, int(nodes_.size()) - 1};
    }
};

template <typename T>
const Mat<T>& Var<T>::val() const {
    return g->node(*this).val;
}

// ---------------------------------------------------------------- basic ops

namespace ops_detail {

template <typename T>
void check_same_shape(const Var<T>& a, const Var<T>& b, const char* what) {
    if (a.val().rows() != b.val().rows() || a.val().cols() != b.val().cols())
        throw TensorError(std::string(what) + ": shape mismatch");
}

}  // namespace ops_detail

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    ops_detail::check_same_shape(a, b, "add");
    Graph<T>& g = *a.g;
    return g.adopt(a.val() + b.val(), [a, b](Graph<T>& g, typename Graph<T>::Node& n) {
        g.grad(a) += n.grad;
        g.grad(b) += n.grad;
    });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    ops_detail::check_same_shape(a, b, "sub");
    Graph<T>& g = *a.g;
    return g.adopt(a.val() - b.val(), [a, b](Graph<T>& g, typename Graph<T>::Node& n) {
        g.grad(a) += n.grad;
        g.grad(b) -= n.grad;
    });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {  // hadamard
    ops_detail::check_same_shape(a, b, "mul");
    Graph<T>& g = *a.g;
    return g.adopt(a.val().cwiseProduct(b.val()), [a, b](Graph<T>& g, typename Graph<T>::Node& n) {
        g.grad(a) += n.grad.cwiseProduct(b.val());
        g.grad(b) += n.grad.cwiseProduct(a.val());
    });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
    Graph<T>& g = *a.g;
    return g.adopt(a.val() * s, [a, s](Graph<T>& g, typename Graph<T>::Node& n) {
        g.grad(a) += n.grad * s;
    });
}

template <typename T>
Var<T> add_scalar(Var<T> a, T s) {
    Graph<T>& g = *a.g;
    return g.adopt((a.val().array() + s).matrix(), [a](Graph<T>& g, typename Graph<T>::Node& n) {
        g.grad(a) += n.grad;
    });
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
    if (a.val().cols() != b.val().rows()) throw TensorError("matmul: inner dim mismatch");
    Graph<T>& g = *a.g;
    return g.adopt(a.val() * b.val(), [a, b](Graph<T>& g, typename Graph<T>::Node& n) {
        g.grad(a).noalias() += n.grad * b.val().transpose();
        g.grad(b).noalias() += a.val().transpose() * n.grad;
    });
}

template <typename T>
Var<T> transpose(Var<T> a) {
    Graph<T>& g = *a.g;
    return g.adopt(a.val().transpose(), [a](Graph<T>& g, typename Graph<T>::Node& n) {
        g.grad(a) += n.grad.transpose();
    });
}

// broadcast a 1 x C row vector over rows of a
template <typename T>
Var<T> add_rowvec(Var<T> a, Var<T> r) {
    if (r.val().rows() != 1 || r.val().cols() != a.val().cols())
        throw TensorError("add_rowvec: need 1 x cols(a)");
    Graph<T>& g = *a.g;
    return g.adopt(a.val().rowwise() + r.val().row(0), [a, r](Graph<T>& g, typename Graph<T>::Node& n) {
        g.grad(a) += n.grad;
        g.grad(r) += n.grad.colwise().sum();
    });
}

template <typename T>
Var<T> mul_rowvec(Var<T> a, Var<T> r) {
    if (r.val().rows() != 1 || r.val().cols() != a.val().cols())
        throw TensorError("mul_rowvec: need 1 x cols(a)");
    Graph<T>& g = *a.g;
    return g.adopt((a.val().array().rowwise() * r.val().row(0).array()).matrix(),
                   [a, r](Graph<T>& g, typename Graph<T>::Node& n) {
                       g.grad(a) += (n.grad.array().rowwise() * r.val().row(0).array()).matrix();
                       g.grad(r) += n.grad.cwiseProduct(a.val()).colwise().sum();
                   });
}

template <typename T>
Var<T> broadcast_rows(Var<T> r, int n_rows) {
    if (r.val().rows() != 1) throw TensorError("broadcast_rows: input must be 1 x C");
    Graph<T>& g = *r.g;
    Mat<T> v = r.val().replicate(n_rows, 1);
    return g.adopt(std::move(v), [r](Graph<T>& g, typename Graph<T>::Node& n) {
        g.grad(r) += n.grad.colwise().sum();
    });
}

template <typename T>
Var<T> slice_cols(Var<T> a, int start, int count) {
    if (start < 0 || start + count > a.val().cols()) throw TensorError("slice_cols: out of range");
    Graph<T>& g = *a.g;
    return g.adopt(a.val().middleCols(start, count), [a, start, count](Graph<T>& g, typename Graph<T>::Node& n) {
        g.grad(a).middleCols(start, count) += n.grad;
    });
}

template <typename T>
Var<T> slice_rows(Var<T> a, int start, int count) {
    if (start < 0 || start + count > a.val().rows()) throw TensorError("slice_rows: out of range");
    Graph<T>& g = *a.g;
    return g.adopt(a.val().middleRows(start, count), [a, start, count](Graph<T>& g, typename Graph<T>::Node& n) {
        g.grad(a).middleRows(start, count) += n.grad;
    });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw TensorError("concat_cols: empty");
    Graph<T>& g = *parts[0].g;
    int cols = 0;
    const int rows = parts[0].rows();
    for (const auto& p : parts) {
        if (p.rows() != rows) throw TensorError("concat_cols: row mismatch");
        cols += p.cols();
    }
    Mat<T> v(rows, cols);
    int at = 0;
    for (const auto& p : parts) {
        v.middleCols(at, p.cols()) = p.val();
        at += p.cols();
    }
    auto ps = parts;
    return g.adopt(std::move(v), [ps](Graph<T>& g, typename Graph<T>::Node& n) {
        int at = 0;
        for (const auto& p : ps) {
            g.grad(p) += n.grad.middleCols(at, p.cols());
            at += p.cols();
        }
    });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw TensorError("concat_rows: empty");
    Graph<T>& g = *parts[0].g;
    int rows = 0;
    const int cols = parts[0].cols();
    for (const auto& p : parts) {
        if (p.cols() != cols) throw TensorError("concat_rows: col mismatch");
        rows += p.rows();
    }
    Mat<T> v(rows, cols);
    int at = 0;
    for (const auto& p : parts) {
        v.middleRows(at, p.rows()) = p.val();
        at += p.rows();
    }
    auto ps = parts;
    return g.adopt(std::move(v), [ps](Graph<T>& g, typename Graph<T>::Node& n) {
        int at = 0;
        for (const auto& p : ps) {
            g.grad(p) += n.grad.middleRows(at, p.rows());
            at += p.rows();
        }
    });
}

// ---------------------------------------------------------------- activations

template <typename T>
Var<T> tanh_(Var<T> a) {
    Graph<T>& g = *a.g;
    Mat<T> y = a.val().array().tanh().matrix();
    return g.adopt(y, [a, y](Graph<T>& g, typename Graph<T>::Node& n) {
        g.grad(a) += (n.grad.array() * (T(1) - y.array().square())).matrix();
    });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
    Graph<T>& g = *a.g;
    Mat<T> y = (T(1) / (T(1) + (-a.val().array()).exp())).matrix();
    return g.adopt(y, [a, y](Graph<T>& g, typename Graph<T>::Node& n) {
        g.grad(a) += (n.grad.array() * y.array() * (T(1) - y.array())).matrix();
    });
}

template <typename T>
Var<T> silu(Var<T> a) {
    Graph<T>& g = *a.g;
    auto x = a.val().array();
    Mat<T> sig = (T(1) / (T(1) + (-x).exp())).matrix();
    Mat<T> y = (x * sig.array()).matrix();
    return g.adopt(y, [a, sig](Graph<T>& g, typename Graph<T>::Node& n) {
        auto s = sig.array();
        auto x = a.val().array();
        g.grad(a) += (n.grad.array() * (s + x * s * (T(1) - s))).matrix();
    });
}

template <typename T>
Var<T> softplus(Var<T> a) {
    Graph<T>& g = *a.g;
    // stable: log1p(exp(-|x|)) + max(x, 0)
    Mat<T> y = a.val();
    for (int i = 0; i < y.rows(); ++i)
        for (int j = 0; j < y.cols(); ++j) {
            const T x = a.val()(i, j);
            y(i, j) = std::log1p(std::exp(-std::abs(x))) + std::max(x, T(0));
        }
    return g.adopt(y, [a](Graph<T>& g, typename Graph<T>::Node& n) {
        g.grad(a) += (n.grad.array() / (T(1) + (-a.val().array()).exp())).matrix();
    });
}

// snake activation x + sin^2(x), smooth periodic bias for audio decoders
template <typename T>
Var<T> snake(Var<T> a) {
    Graph<T>& g = *a.g;
    auto x = a.val().array();
    Mat<T> y = (x + x.sin().square()).matrix();
    return g.adopt(y, [a](Graph<T>& g, typename Graph<T>::Node& n) {
        auto x = a.val().array();
        g.grad(a) += (n.grad.array() * (T(1) + T(2) * x.sin() * x.cos())).matrix();
    });
}

template <typename T>
Var<T> exp_(Var<T> a) {
    Graph<T>& g = *a.g;
    Mat<T> y = a.val().array().exp().matrix();
    return g.adopt(y, [a, y](Graph<T>& g, typename Graph<T>::Node& n) {
        g.grad(a) += n.grad.cwiseProduct(y);
    });
}

// row gather: out.row(i) = table.row(idx[i]); gradients accumulate per row
template <typename T>
Var<T> gather_rows(Var<T> table, std::vector<int> idx) {
    Graph<T>& g = *table.g;
    Mat<T> v(long(idx.size()), table.val().cols());
    for (size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= table.val().rows()) throw TensorError("gather_rows: index out of range");
        v.row(long(i)) = table.val().row(idx[i]);
    }
    return g.adopt(std::move(v), [table, idx](Graph<T>& g, typename Graph<T>::Node& n) {
        for (size_t i = 0; i < idx.size(); ++i) g.grad(table).row(idx[i]) += n.grad.row(long(i));
    });
}

// straight-through estimator: forward emits `replacement`, backward passes
// the incoming gradient to `x` unchanged
template <typename T>
Var<T> straight_through(Var<T> x, const Mat<T>& replacement) {
    if (x.val().rows() != replacement.rows() || x.val().cols() != replacement.cols())
        throw TensorError("straight_through: shape mismatch");
    Graph<T>& g = *x.g;
    return g.adopt(replacement, [x](Graph<T>& g, typename Graph<T>::Node& n) {
        g.grad(x) += n.grad;
    });
}

// multiply a matrix by a 1 x 1 graph scalar
template <typename T>
Var<T> mul_scalar_var(Var<T> a, Var<T> s) {
    if (s.val().size() != 1) throw TensorError("mul_scalar_var: scalar must be 1 x 1");
    Graph<T>& g = *a.g;
    return g.adopt(a.val() * s.val()(0, 0), [a, s](Graph<T>& g, typename Graph<T>::Node& n) {
        g.grad(a) += n.grad * s.val()(0, 0);
        g.grad(s)(0, 0) += n.grad.cwiseProduct(a.val()).sum();
    });
}

// ---------------------------------------------------------------- reductions

template <typename T>
Var<T> sum_all(Var<T> a) {
    Graph<T>& g = *a.g;
    Mat<T> v(1, 1);
    v(0, 0) = a.val().sum();
    return g.adopt(v, [a](Graph<T>& g, typename Graph<T>::Node& n) {
        g.grad(a).array() += n.grad(0, 0);
    });
}

template <typename T>
Var<T> mean_all(Var<T> a) {
    const T inv = T(1) / T(a.val().size());
    return scale(sum_all(a), inv);
}

// sum over rows -> 1 x C
template <typename T>
Var<T> sum_rows(Var<T> a) {
    Graph<T>& g = *a.g;
    return g.adopt(a.val().colwise().sum(), [a](Graph<T>& g, typename Graph<T>::Node& n) {
        g.grad(a) += n.grad.replicate(a.val().rows(), 1);
    });
}

// ---------------------------------------------------------------- softmax / norm

// softmax across each row
template <typename T>
Var<T> softmax_rows(Var<T> a) {
    Graph<T>& g = *a.g;
    Mat<T> y = a.val();
    for (int i = 0; i < y.rows(); ++i) {
        const T m = y.row(i).maxCoeff();
        y.row(i) = (y.row(i).array() - m).exp();
        y.row(i) /= y.row(i).sum();
    }
    return g.adopt(y, [a, y](Graph<T>& g, typename Graph<T>::Node& n) {
        Mat<T> d(y.rows(), y.cols());
        for (int i = 0; i < y.rows(); ++i) {
            const T dot = n.grad.row(i).cwiseProduct(y.row(i)).sum();
            d.row(i) = (y.row(i).array() * (n.grad.row(i).array() - dot)).matrix();
        }
        g.grad(a) += d;
    });
}

// per-row standardization across columns (no affine)
template <typename T>
Var<T> layer_norm(Var<T> a, T eps = T(1e-5)) {
    Graph<T>& g = *a.g;
    const int C = int(a.val().cols());
    Mat<T> y(a.val().rows(), C);
    Mat<T> inv_std(a.val().rows(), 1);
    for (int i = 0; i < y.rows(); ++i) {
        const T mean = a.val().row(i).mean();
        auto centered = (a.val().row(i).array() - mean);
        const T var = centered.square().sum() / T(C);
        const T is = T(1) / std::sqrt(var + eps);
        inv_std(i, 0) = is;
        y.row(i) = (centered * is).matrix();
    }
    return g.adopt(y, [a, y, inv_std, C](Graph<T>& g, typename Graph<T>::Node& n) {
        Mat<T> d(y.rows(), y.cols());
        for (int i = 0; i < y.rows(); ++i) {
            const T gm = n.grad.row(i).mean();
            const T gy = n.grad.row(i).cwiseProduct(y.row(i)).sum() / T(C);
            d.row(i) = ((n.grad.row(i).array() - gm - y.row(i).array() * gy) * inv_std(i, 0)).matrix();
        }
        g.grad(a) += d;
    });
}

// ---------------------------------------------------------------- convolutions

// x: T_in x C_in, weight: (k * C_in) x C_out, zero padding pad_l/pad_r,
// output: ((T_in + pad_l + pad_r - k)/stride + 1) x C_out
template <typename T>
Var<T> conv1d(Var<T> x, Var<T> w, int k, int stride, int pad_l, int pad_r) {
    const int t_in = x.rows(), c_in = x.cols();
    if (w.val().rows() != k * c_in) throw TensorError("conv1d: weight rows != k * c_in");
    const int span = t_in + pad_l + pad_r - k;
    if (span < 0) throw TensorError("conv1d: input shorter than kernel");
    const int t_out = span / stride + 1;

    Graph<T>& g = *x.g;
    Mat<T> cols(t_out, k * c_in);
    cols.setZero();
    for (int t = 0; t < t_out; ++t) {
        const int start = t * stride - pad_l;
        for (int j = 0; j < k; ++j) {
            const int src = start + j;
            if (src < 0 || src >= t_in) continue;
            cols.block(t, j * c_in, 1, c_in) = x.val().row(src);
        }
    }
    Mat<T> y = cols * w.val();
    return g.adopt(std::move(y), [x, w, cols, k, stride, pad_l](Graph<T>& g, typename Graph<T>::Node& n) {
        g.grad(w).noalias() += cols.transpose() * n.grad;
        Mat<T> gcols = n.grad * w.val().transpose();  // t_out x (k*c_in)
        const int c_in = int(x.val().cols());
        const int t_in = int(x.val().rows());
        Mat<T>& gx = g.grad(x);
        for (int t = 0; t < gcols.rows(); ++t) {
            const int start = t * stride - pad_l;
            for (int j = 0; j < k; ++j) {
                const int src = start + j;
                if (src < 0 || src >= t_in) continue;
                gx.row(src) += gcols.block(t, j * c_in, 1, c_in);
            }
        }
    });
}

// transposed convolution for upsampling: x T_in x C_in, weight C_in x (k * C_out),
// output T_in * stride x C_out (pad chosen internally as (k - stride)/2 split)
template <typename T>
Var<T> conv1d_transpose(Var<T> x, Var<T> w, int k, int stride, int c_out) {
    const int t_in = x.rows(), c_in = x.cols();
    if (w.val().rows() != c_in || w.val().cols() != k * c_out)
        throw TensorError("conv1d_transpose: weight must be c_in x (k * c_out)");
    if (k < stride) throw TensorError("conv1d_transpose: kernel must cover stride");
    const int pad = (k - stride) / 2;
    const int t_out = t_in * stride;

    Graph<T>& g = *x.g;
    Mat<T> spread = x.val() * w.val();  // t_in x (k * c_out)
    Mat<T> y = Mat<T>::Zero(t_out, c_out);
    for (int t = 0; t < t_in; ++t)
        for (int j = 0; j < k; ++j) {
            const int dst = t * stride - pad + j;
            if (dst < 0 || dst >= t_out) continue;
            y.row(dst) += spread.block(t, j * c_out, 1, c_out);
        }
    return g.adopt(std::move(y), [x, w, k, stride, c_out, pad, t_out](Graph<T>& g, typename Graph<T>::Node& n) {
        const int t_in = int(x.val().rows());
        Mat<T> gspread = Mat<T>::Zero(t_in, k * c_out);
        for (int t = 0; t < t_in; ++t)
            for (int j = 0; j < k; ++j) {
                const int dst = t * stride - pad + j;
                if (dst < 0 || dst >= t_out) continue;
                gspread.block(t, j * c_out, 1, c_out) = n.grad.row(dst);
            }
        g.grad(x).noalias() += gspread * w.val().transpose();
        g.grad(w).noalias() += x.val().transpose() * gspread;
    });
}

// depthwise conv along frames, odd kernel, same padding: x T x C, w k x C
template <typename T>
Var<T> depthwise_conv1d(Var<T> x, Var<T> w) {
    const int k = int(w.val().rows());
    if (k % 2 == 0) throw TensorError("depthwise_conv1d: kernel must be odd");
    if (w.val().cols() != x.val().cols()) throw TensorError("depthwise_conv1d: channel mismatch");
    const int half = k / 2;
    const int t_in = x.rows(), c = x.cols();

    Graph<T>& g = *x.g;
    Mat<T> y = Mat<T>::Zero(t_in, c);
    for (int t = 0; t < t_in; ++t)
        for (int j = 0; j < k; ++j) {
            const int src = t - half + j;
            if (src < 0 || src >= t_in) continue;
            y.row(t) += x.val().row(src).cwiseProduct(w.val().row(j));
        }
    return g.adopt(std::move(y), [x, w, k, half](Graph<T>& g, typename Graph<T>::Node& n) {
        const int t_in = int(x.val().rows());
        for (int t = 0; t < t_in; ++t)
            for (int j = 0; j < k; ++j) {
                const int src = t - half + j;
                if (src < 0 || src >= t_in) continue;
                g.grad(x).row(src) += n.grad.row(t).cwiseProduct(w.val().row(j));
                g.grad(w).row(j) += n.grad.row(t).cwiseProduct(x.val().row(src));
            }
    });
}

// ---------------------------------------------------------------- losses

// mean squared error with optional per-element weights (constant mask)
template <typename T>
Var<T> mse_loss(Var<T> pred, const Mat<T>& target, const Mat<T>* mask = nullptr) {
    if (pred.val().rows() != target.rows() || pred.val().cols() != target.cols())
        throw TensorError("mse_loss: shape mismatch");
    Graph<T>& g = *pred.g;
    Mat<T> diff = pred.val() - target;
    if (mask) diff = diff.cwiseProduct(*mask);
    const T denom = mask ? std::max(mask->sum(), T(1)) : T(target.size());
    Mat<T> v(1, 1);
    v(0, 0) = diff.array().square().sum() / denom;
    Mat<T> m = mask ? *mask : Mat<T>();
    return g.adopt(v, [pred, target, m, denom](Graph<T>& g, typename Graph<T>::Node& n) {
        Mat<T> d = pred.val() - target;
        if (m.size()) d = d.cwiseProduct(m).cwiseProduct(m);  // mask applies to diff and grad
        g.grad(pred) += (T(2) / denom) * n.grad(0, 0) * d;
    });
}

template <typename T>
Var<T> l1_loss(Var<T> pred, const Mat<T>& target) {
    if (pred.val().rows() != target.rows() || pred.val().cols() != target.cols())
        throw TensorError("l1_loss: shape mismatch");
    Graph<T>& g = *pred.g;
    const T denom = T(target.size());
    Mat<T> v(1, 1);
    v(0, 0) = (pred.val() - target).array().abs().sum() / denom;
    return g.adopt(v, [pred, target, denom](Graph<T>& g, typename Graph<T>::Node& n) {
        Mat<T> s = (pred.val() - target).array().sign().matrix();
        g.grad(pred) += (n.grad(0, 0) / denom) * s;
    });
}

// ---------------------------------------------------------------- optimizer

// AdamW: adaptive moments with decoupled weight decay
template <typename T>
struct AdamW {
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-8;
    double weight_decay = 0.0;
    long step_count = 0;

    void step(std::vector<Parameter<T>*>& params, double lr) {
        ++step_count;
        const double bc1 = 1.0 - std::pow(beta1, double(step_count));
        const double bc2 = 1.0 - std::pow(beta2, double(step_count));
        for (Parameter<T>* p : params) {
            p->adam_m = T(beta1) * p->adam_m + T(1.0 - beta1) * p->grad;
            p->adam_v = (T(beta2) * p->adam_v.array() + T(1.0 - beta2) * p->grad.array().square()).matrix();
            auto mhat = p->adam_m.array() / T(bc1);
            auto vhat = p->adam_v.array() / T(bc2);
            p->value.array() -= T(lr) * (mhat / (vhat.sqrt() + T(eps)) + T(weight_decay) * p->value.array());
            p->grad.setZero();
        }
    }

    void zero_grad(std::vector<Parameter<T>*>& params) {
        for (Parameter<T>* p : params) p->grad.setZero();
    }
};

}  // namespace ditse::nn

#endif  // DITSE_TENSOR_HPP
