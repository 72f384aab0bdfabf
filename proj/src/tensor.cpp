#include "smoa/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace smoa {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const EMat>;
using MMap = Eigen::Map<EMat>;

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

thread_local bool g_grad_enabled = true;

std::atomic<uint64_t> g_next_node_id{1};

using NodePtr = std::shared_ptr<detail::Node>;

NodePtr make_node(Shape shape, std::vector<double> values) {
    if (shape.empty() && values.size() != 1) {
        throw ShapeError("scalar tensor must hold exactly one value");
    }
    for (size_t e : shape) {
        if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
    }
    if (numel(shape) != values.size()) {
        throw ShapeError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
    }
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->values = std::move(values);
    return n;
}

// Attach graph linkage to an op result if recording is on and any input is
// differentiable.
void track(const NodePtr& out, std::vector<NodePtr> parents, std::function<void(detail::Node&)> fn) {
    if (!g_grad_enabled) return;
    bool any = false;
    for (const auto& p : parents) {
        if (p->requires_grad) {
            any = true;
            break;
        }
    }
    if (!any) return;
    out->requires_grad = true;
    out->id = g_next_node_id.fetch_add(1);
    out->parents = std::move(parents);
    out->backward_fn = std::move(fn);
}

std::vector<double>& grad_of(detail::Node& n) {
    if (n.grad.empty()) n.grad.assign(numel(n.shape), 0.0);
    return n.grad;
}

// Decompose a shape around one axis: (outer, n, inner).
void axis_strides(const Shape& shape, size_t axis, size_t& outer, size_t& n, size_t& inner) {
    outer = 1;
    for (size_t i = 0; i < axis; ++i) outer *= shape[i];
    n = shape[axis];
    inner = 1;
    for (size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
}

size_t normalize_axis(int axis, size_t ndim) {
    int a = axis < 0 ? axis + static_cast<int>(ndim) : axis;
    if (a < 0 || a >= static_cast<int>(ndim)) {
        throw ContractError("axis " + std::to_string(axis) + " out of range for rank " +
                            std::to_string(ndim));
    }
    return static_cast<size_t>(a);
}

// Indices of the k largest entries, ties resolved toward the lowest index.
void top_k_select(const double* v, size_t n, size_t k, std::vector<uint8_t>& keep) {
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [v](size_t a, size_t b) {
        if (v[a] != v[b]) return v[a] > v[b];
        return a < b;
    });
    keep.assign(n, 0);
    for (size_t i = 0; i < k; ++i) keep[idx[i]] = 1;
}

}  // namespace

size_t numel(const Shape& shape) {
    size_t n = 1;
    for (size_t e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

// ---- Tensor ---------------------------------------------------------------

Tensor Tensor::wrap(std::shared_ptr<detail::Node> n) {
    Tensor t;
    t.n_ = std::move(n);
    return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    size_t n = numel(shape);
    auto node = make_node(std::move(shape), std::vector<double>(n, 0.0));
    if (requires_grad) {
        node->requires_grad = true;
        node->id = g_next_node_id.fetch_add(1);
    }
    return wrap(std::move(node));
}

Tensor Tensor::full(Shape shape, double value) {
    size_t n = numel(shape);
    return wrap(make_node(std::move(shape), std::vector<double>(n, value)));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    auto node = make_node(std::move(shape), std::move(values));
    if (requires_grad) {
        node->requires_grad = true;
        node->id = g_next_node_id.fetch_add(1);
    }
    return wrap(std::move(node));
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
    std::vector<double> v(numel(shape));
    for (double& x : v) x = rng.normal(0.0, stddev);
    return from(std::move(shape), std::move(v), requires_grad);
}

const Shape& Tensor::shape() const { return n_->shape; }
size_t Tensor::size() const { return n_->values.size(); }
std::vector<double>& Tensor::values() { return n_->values; }
const std::vector<double>& Tensor::values() const { return n_->values; }

double Tensor::item() const {
    if (size() != 1) throw ContractError("item() requires a scalar, got " + shape_str(shape()));
    return n_->values[0];
}

bool Tensor::requires_grad() const { return n_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
    if (!n_->parents.empty()) {
        throw ContractError("requires_grad can only be toggled on leaf tensors");
    }
    n_->requires_grad = value;
    if (value && n_->id == 0) n_->id = g_next_node_id.fetch_add(1);
    if (!value) n_->grad.clear();
}

std::vector<double>& Tensor::grad() {
    if (!n_->requires_grad) {
        throw ContractError("grad() on a tensor with requires_grad=false");
    }
    return grad_of(*n_);
}

bool Tensor::has_grad() const { return !n_->grad.empty(); }

void Tensor::zero_grad() {
    if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), 0.0);
}

uint64_t Tensor::node_id() const { return n_->id; }
bool Tensor::is_leaf() const { return n_->parents.empty(); }

// ---- ops ------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0]) {
        throw ShapeError("matmul dimension mismatch: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    size_t m = a.shape()[0], k = a.shape()[1], p = b.shape()[1];
    std::vector<double> out(m * p);
    {
        CMap A(a.values().data(), m, k), B(b.values().data(), k, p);
        MMap C(out.data(), m, p);
        C.noalias() = A * B;
    }
    auto node = make_node({m, p}, std::move(out));
    auto an = a.node(), bn = b.node();
    track(node, {an, bn}, [an, bn, m, k, p](detail::Node& self) {
        CMap dC(self.grad.data(), m, p);
        if (an->requires_grad) {
            CMap B(bn->values.data(), k, p);
            MMap dA(grad_of(*an).data(), m, k);
            dA.noalias() += dC * B.transpose();
        }
        if (bn->requires_grad) {
            CMap A(an->values.data(), m, k);
            MMap dB(grad_of(*bn).data(), k, p);
            dB.noalias() += A.transpose() * dC;
        }
    });
    return Tensor::wrap(node);
}

Tensor bmm(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 3 || b.ndim() != 3 || a.shape()[0] != b.shape()[0] ||
        a.shape()[2] != b.shape()[1]) {
        throw ShapeError("bmm dimension mismatch: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    size_t N = a.shape()[0], m = a.shape()[1], k = a.shape()[2], p = b.shape()[2];
    std::vector<double> out(N * m * p);
    for (size_t i = 0; i < N; ++i) {
        CMap A(a.values().data() + i * m * k, m, k), B(b.values().data() + i * k * p, k, p);
        MMap C(out.data() + i * m * p, m, p);
        C.noalias() = A * B;
    }
    auto node = make_node({N, m, p}, std::move(out));
    auto an = a.node(), bn = b.node();
    track(node, {an, bn}, [an, bn, N, m, k, p](detail::Node& self) {
        for (size_t i = 0; i < N; ++i) {
            CMap dC(self.grad.data() + i * m * p, m, p);
            if (an->requires_grad) {
                CMap B(bn->values.data() + i * k * p, k, p);
                MMap dA(grad_of(*an).data() + i * m * k, m, k);
                dA.noalias() += dC * B.transpose();
            }
            if (bn->requires_grad) {
                CMap A(an->values.data() + i * m * k, m, k);
                MMap dB(grad_of(*bn).data() + i * k * p, k, p);
                dB.noalias() += A.transpose() * dC;
            }
        }
    });
    return Tensor::wrap(node);
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("add shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    std::vector<double> out(a.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
    auto node = make_node(a.shape(), std::move(out));
    auto an = a.node(), bn = b.node();
    track(node, {an, bn}, [an, bn](detail::Node& self) {
        if (an->requires_grad) {
            auto& g = grad_of(*an);
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            auto& g = grad_of(*bn);
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
    return Tensor::wrap(node);
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("mul shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    std::vector<double> out(a.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
    auto node = make_node(a.shape(), std::move(out));
    auto an = a.node(), bn = b.node();
    track(node, {an, bn}, [an, bn](detail::Node& self) {
        if (an->requires_grad) {
            auto& g = grad_of(*an);
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn->values[i];
        }
        if (bn->requires_grad) {
            auto& g = grad_of(*bn);
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an->values[i];
        }
    });
    return Tensor::wrap(node);
}

Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * c;
    auto node = make_node(a.shape(), std::move(out));
    auto an = a.node();
    track(node, {an}, [an, c](detail::Node& self) {
        auto& g = grad_of(*an);
        for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * c;
    });
    return Tensor::wrap(node);
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    if (bias.ndim() != 1 || x.ndim() < 1 || x.shape().back() != bias.shape()[0]) {
        throw ShapeError("add_bias shape mismatch: " + shape_str(x.shape()) + " + " +
                         shape_str(bias.shape()));
    }
    size_t d = bias.shape()[0], rows = x.size() / d;
    std::vector<double> out(x.size());
    for (size_t r = 0; r < rows; ++r) {
        for (size_t j = 0; j < d; ++j) out[r * d + j] = x.values()[r * d + j] + bias.values()[j];
    }
    auto node = make_node(x.shape(), std::move(out));
    auto xn = x.node(), bn = bias.node();
    track(node, {xn, bn}, [xn, bn, rows, d](detail::Node& self) {
        if (xn->requires_grad) {
            auto& g = grad_of(*xn);
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            auto& g = grad_of(*bn);
            for (size_t r = 0; r < rows; ++r) {
                for (size_t j = 0; j < d; ++j) g[j] += self.grad[r * d + j];
            }
        }
    });
    return Tensor::wrap(node);
}

namespace {
constexpr double kGeluC = 0.7978845608028653558799;  // sqrt(2/pi)
constexpr double kGeluA3 = 0.044715;
}  // namespace

Tensor gelu(const Tensor& x) {
    std::vector<double> out(x.size());
    for (size_t i = 0; i < out.size(); ++i) {
        double v = x.values()[i];
        out[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA3 * v * v * v)));
    }
    auto node = make_node(x.shape(), std::move(out));
    auto xn = x.node();
    track(node, {xn}, [xn](detail::Node& self) {
        auto& g = grad_of(*xn);
        for (size_t i = 0; i < g.size(); ++i) {
            double v = xn->values[i];
            double t = std::tanh(kGeluC * (v + kGeluA3 * v * v * v));
            double du = kGeluC * (1.0 + 3.0 * kGeluA3 * v * v);
            double dgelu = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
            g[i] += self.grad[i] * dgelu;
        }
    });
    return Tensor::wrap(node);
}

Tensor softmax(const Tensor& x, int axis) {
    if (x.ndim() == 0) throw ShapeError("softmax needs rank >= 1");
    size_t ax = normalize_axis(axis, x.ndim());
    size_t outer, n, inner;
    axis_strides(x.shape(), ax, outer, n, inner);
    if (n < 1) throw ContractError("softmax axis must have at least one entry");
    std::vector<double> out(x.size());
    const auto& v = x.values();
    for (size_t o = 0; o < outer; ++o) {
        for (size_t in = 0; in < inner; ++in) {
            size_t base = o * n * inner + in;
            double m = kNegInf;
            for (size_t j = 0; j < n; ++j) {
                double e = v[base + j * inner];
                if (std::isfinite(e) && e > m) m = e;
            }
            if (!std::isfinite(m)) {
                throw ContractError("softmax over a fully masked line: all entries are -inf");
            }
            double total = 0.0;
            for (size_t j = 0; j < n; ++j) {
                double e = std::exp(v[base + j * inner] - m);
                out[base + j * inner] = e;
                total += e;
            }
            for (size_t j = 0; j < n; ++j) out[base + j * inner] /= total;
        }
    }
    auto node = make_node(x.shape(), std::move(out));
    auto xn = x.node();
    track(node, {xn}, [xn, outer, n, inner](detail::Node& self) {
        auto& g = grad_of(*xn);
        for (size_t o = 0; o < outer; ++o) {
            for (size_t in = 0; in < inner; ++in) {
                size_t base = o * n * inner + in;
                double dot = 0.0;
                for (size_t j = 0; j < n; ++j) {
                    dot += self.values[base + j * inner] * self.grad[base + j * inner];
                }
                for (size_t j = 0; j < n; ++j) {
                    double w = self.values[base + j * inner];
                    g[base + j * inner] += w * (self.grad[base + j * inner] - dot);
                }
            }
        }
    });
    return Tensor::wrap(node);
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    if (x.ndim() < 1) throw ShapeError("layer_norm needs rank >= 1");
    size_t d = x.shape().back();
    if (d < 2) throw ContractError("layer_norm needs at least 2 features, got " + shape_str(x.shape()));
    if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
        throw ShapeError("layer_norm gain/bias must be [" + std::to_string(d) + "], got " +
                         shape_str(gain.shape()) + " and " + shape_str(bias.shape()));
    }
    size_t rows = x.size() / d;
    std::vector<double> out(x.size());
    std::vector<double> inv_sigma(rows), mu(rows);
    for (size_t r = 0; r < rows; ++r) {
        const double* row = x.values().data() + r * d;
        double m = 0.0;
        for (size_t j = 0; j < d; ++j) m += row[j];
        m /= static_cast<double>(d);
        double var = 0.0;
        for (size_t j = 0; j < d; ++j) var += (row[j] - m) * (row[j] - m);
        var /= static_cast<double>(d);
        double is = 1.0 / std::sqrt(var + eps);
        mu[r] = m;
        inv_sigma[r] = is;
        for (size_t j = 0; j < d; ++j) {
            out[r * d + j] = (row[j] - m) * is * gain.values()[j] + bias.values()[j];
        }
    }
    auto node = make_node(x.shape(), std::move(out));
    auto xn = x.node(), gn = gain.node(), bn = bias.node();
    track(node, {xn, gn, bn},
          [xn, gn, bn, rows, d, mu = std::move(mu), inv_sigma = std::move(inv_sigma)](detail::Node& self) {
              for (size_t r = 0; r < rows; ++r) {
                  const double* row = xn->values.data() + r * d;
                  const double* go = self.grad.data() + r * d;
                  double is = inv_sigma[r], m = mu[r];
                  if (gn->requires_grad || bn->requires_grad) {
                      auto& gg = grad_of(*gn);
                      auto& gb = grad_of(*bn);
                      for (size_t j = 0; j < d; ++j) {
                          gg[j] += go[j] * (row[j] - m) * is;
                          gb[j] += go[j];
                      }
                  }
                  if (xn->requires_grad) {
                      // dx = (1/sigma) * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
                      auto& gx = grad_of(*xn);
                      double s1 = 0.0, s2 = 0.0;
                      for (size_t j = 0; j < d; ++j) {
                          double xhat = (row[j] - m) * is;
                          double dxhat = go[j] * gn->values[j];
                          s1 += dxhat;
                          s2 += dxhat * xhat;
                      }
                      s1 /= static_cast<double>(d);
                      s2 /= static_cast<double>(d);
                      for (size_t j = 0; j < d; ++j) {
                          double xhat = (row[j] - m) * is;
                          double dxhat = go[j] * gn->values[j];
                          gx[r * d + j] += is * (dxhat - s1 - xhat * s2);
                      }
                  }
              }
          });
    return Tensor::wrap(node);
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (numel(shape) != x.size()) {
        throw ShapeError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                         " changes element count");
    }
    auto node = make_node(std::move(shape), x.values());
    auto xn = x.node();
    track(node, {xn}, [xn](detail::Node& self) {
        auto& g = grad_of(*xn);
        for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
    return Tensor::wrap(node);
}

namespace {

// out[multi-index permuted by axes] = in[multi-index]
void copy_permuted(const double* in, const Shape& in_shape, const std::vector<size_t>& axes,
                   double* out, bool accumulate) {
    size_t rank = in_shape.size();
    Shape out_shape(rank);
    for (size_t i = 0; i < rank; ++i) out_shape[i] = in_shape[axes[i]];
    std::vector<size_t> in_strides(rank, 1), out_strides(rank, 1);
    for (size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];
    for (size_t i = rank; i-- > 1;) out_strides[i - 1] = out_strides[i] * out_shape[i];
    // stride of out index j advances with in axis axes[j]
    std::vector<size_t> step(rank);
    for (size_t j = 0; j < rank; ++j) step[axes[j]] = out_strides[j];
    size_t total = numel(in_shape);
    std::vector<size_t> idx(rank, 0);
    size_t out_off = 0;
    for (size_t flat = 0; flat < total; ++flat) {
        if (accumulate) {
            out[out_off] += in[flat];
        } else {
            out[out_off] = in[flat];
        }
        for (size_t i = rank; i-- > 0;) {
            idx[i]++;
            out_off += step[i];
            if (idx[i] < in_shape[i]) break;
            out_off -= step[i] * in_shape[i];
            idx[i] = 0;
        }
    }
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<size_t>& axes) {
    size_t rank = x.ndim();
    if (axes.size() != rank) throw ContractError("permute axes rank mismatch");
    std::vector<bool> seen(rank, false);
    for (size_t a : axes) {
        if (a >= rank || seen[a]) throw ContractError("permute axes must be a permutation");
        seen[a] = true;
    }
    Shape out_shape(rank);
    for (size_t i = 0; i < rank; ++i) out_shape[i] = x.shape()[axes[i]];
    std::vector<double> out(x.size());
    copy_permuted(x.values().data(), x.shape(), axes, out.data(), false);
    auto node = make_node(std::move(out_shape), std::move(out));
    auto xn = x.node();
    track(node, {xn}, [xn, axes](detail::Node& self) {
        // grad wrt x = self.grad permuted back through the inverse axis map
        std::vector<size_t> inv(axes.size());
        for (size_t i = 0; i < axes.size(); ++i) inv[axes[i]] = i;
        copy_permuted(self.grad.data(), self.shape, inv, grad_of(*xn).data(), true);
    });
    return Tensor::wrap(node);
}

Tensor select(const Tensor& x, size_t axis, size_t index) {
    if (axis >= x.ndim()) throw ContractError("select axis out of range");
    if (index >= x.shape()[axis]) {
        throw IndexError("select index " + std::to_string(index) + " out of range for " +
                         shape_str(x.shape()));
    }
    size_t outer, n, inner;
    axis_strides(x.shape(), axis, outer, n, inner);
    Shape out_shape;
    for (size_t i = 0; i < x.ndim(); ++i) {
        if (i != axis) out_shape.push_back(x.shape()[i]);
    }
    std::vector<double> out(outer * inner);
    for (size_t o = 0; o < outer; ++o) {
        const double* src = x.values().data() + (o * n + index) * inner;
        std::copy(src, src + inner, out.data() + o * inner);
    }
    auto node = make_node(std::move(out_shape), std::move(out));
    auto xn = x.node();
    track(node, {xn}, [xn, outer, n, inner, index](detail::Node& self) {
        auto& g = grad_of(*xn);
        for (size_t o = 0; o < outer; ++o) {
            double* dst = g.data() + (o * n + index) * inner;
            const double* src = self.grad.data() + o * inner;
            for (size_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    });
    return Tensor::wrap(node);
}

Tensor concat(const std::vector<Tensor>& parts, size_t axis) {
    if (parts.empty()) throw ContractError("concat of zero tensors");
    size_t rank = parts[0].ndim();
    if (axis >= rank) throw ContractError("concat axis out of range");
    Shape out_shape = parts[0].shape();
    size_t axis_total = 0;
    for (const auto& p : parts) {
        if (p.ndim() != rank) throw ShapeError("concat rank mismatch");
        for (size_t i = 0; i < rank; ++i) {
            if (i != axis && p.shape()[i] != out_shape[i]) {
                throw ShapeError("concat shape mismatch: " + shape_str(out_shape) + " vs " +
                                 shape_str(p.shape()));
            }
        }
        axis_total += p.shape()[axis];
    }
    out_shape[axis] = axis_total;
    size_t outer, n, inner;
    axis_strides(out_shape, axis, outer, n, inner);
    std::vector<double> out(numel(out_shape));
    size_t offset = 0;
    for (const auto& p : parts) {
        size_t pn = p.shape()[axis];
        for (size_t o = 0; o < outer; ++o) {
            const double* src = p.values().data() + o * pn * inner;
            double* dst = out.data() + (o * n + offset) * inner;
            std::copy(src, src + pn * inner, dst);
        }
        offset += pn;
    }
    auto node = make_node(out_shape, std::move(out));
    std::vector<NodePtr> parents;
    std::vector<size_t> sizes;
    for (const auto& p : parts) {
        parents.push_back(p.node());
        sizes.push_back(p.shape()[axis]);
    }
    track(node, parents, [parents, sizes, outer, n, inner](detail::Node& self) {
        size_t offset = 0;
        for (size_t pi = 0; pi < parents.size(); ++pi) {
            size_t pn = sizes[pi];
            if (parents[pi]->requires_grad) {
                auto& g = grad_of(*parents[pi]);
                for (size_t o = 0; o < outer; ++o) {
                    const double* src = self.grad.data() + (o * n + offset) * inner;
                    double* dst = g.data() + o * pn * inner;
                    for (size_t i = 0; i < pn * inner; ++i) dst[i] += src[i];
                }
            }
            offset += pn;
        }
    });
    return Tensor::wrap(node);
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
    if (table.ndim() != 2) throw ShapeError("embedding table must be rank 2");
    size_t vocab = table.shape()[0], d = table.shape()[1];
    if (ids.empty()) throw ContractError("embedding_lookup with no ids");
    for (int id : ids) {
        if (id < 0 || static_cast<size_t>(id) >= vocab) {
            throw IndexError("token id " + std::to_string(id) + " out of range [0, " +
                             std::to_string(vocab) + ")");
        }
    }
    std::vector<double> out(ids.size() * d);
    for (size_t i = 0; i < ids.size(); ++i) {
        const double* src = table.values().data() + static_cast<size_t>(ids[i]) * d;
        std::copy(src, src + d, out.data() + i * d);
    }
    auto node = make_node({ids.size(), d}, std::move(out));
    auto tn = table.node();
    track(node, {tn}, [tn, ids, d](detail::Node& self) {
        auto& g = grad_of(*tn);
        for (size_t i = 0; i < ids.size(); ++i) {
            double* dst = g.data() + static_cast<size_t>(ids[i]) * d;
            const double* src = self.grad.data() + i * d;
            for (size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
    });
    return Tensor::wrap(node);
}

Tensor gather_rows(const Tensor& x, const std::vector<size_t>& rows) {
    if (x.ndim() != 2) throw ShapeError("gather_rows needs rank 2");
    if (rows.empty()) throw ContractError("gather_rows with no rows");
    size_t m = x.shape()[0], d = x.shape()[1];
    for (size_t r : rows) {
        if (r >= m) throw IndexError("row " + std::to_string(r) + " out of range");
    }
    std::vector<double> out(rows.size() * d);
    for (size_t i = 0; i < rows.size(); ++i) {
        const double* src = x.values().data() + rows[i] * d;
        std::copy(src, src + d, out.data() + i * d);
    }
    auto node = make_node({rows.size(), d}, std::move(out));
    auto xn = x.node();
    track(node, {xn}, [xn, rows, d](detail::Node& self) {
        auto& g = grad_of(*xn);
        for (size_t i = 0; i < rows.size(); ++i) {
            double* dst = g.data() + rows[i] * d;
            const double* src = self.grad.data() + i * d;
            for (size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
    });
    return Tensor::wrap(node);
}

Tensor scatter_rows(const Tensor& x, const std::vector<size_t>& rows, size_t total_rows) {
    if (x.ndim() != 2) throw ShapeError("scatter_rows needs rank 2");
    if (rows.size() != x.shape()[0]) throw ContractError("scatter_rows index count mismatch");
    size_t d = x.shape()[1];
    for (size_t r : rows) {
        if (r >= total_rows) throw IndexError("row " + std::to_string(r) + " out of range");
    }
    std::vector<double> out(total_rows * d, 0.0);
    for (size_t i = 0; i < rows.size(); ++i) {
        double* dst = out.data() + rows[i] * d;
        const double* src = x.values().data() + i * d;
        for (size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
    auto node = make_node({total_rows, d}, std::move(out));
    auto xn = x.node();
    track(node, {xn}, [xn, rows, d](detail::Node& self) {
        auto& g = grad_of(*xn);
        for (size_t i = 0; i < rows.size(); ++i) {
            const double* src = self.grad.data() + rows[i] * d;
            double* dst = g.data() + i * d;
            for (size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
    });
    return Tensor::wrap(node);
}

Tensor take_entries(const Tensor& x, const std::vector<size_t>& rows, size_t col) {
    if (x.ndim() != 2) throw ShapeError("take_entries needs rank 2");
    if (rows.empty()) throw ContractError("take_entries with no rows");
    size_t m = x.shape()[0], n = x.shape()[1];
    if (col >= n) throw IndexError("column out of range");
    for (size_t r : rows) {
        if (r >= m) throw IndexError("row " + std::to_string(r) + " out of range");
    }
    std::vector<double> out(rows.size());
    for (size_t i = 0; i < rows.size(); ++i) out[i] = x.values()[rows[i] * n + col];
    auto node = make_node({rows.size()}, std::move(out));
    auto xn = x.node();
    track(node, {xn}, [xn, rows, n, col](detail::Node& self) {
        auto& g = grad_of(*xn);
        for (size_t i = 0; i < rows.size(); ++i) g[rows[i] * n + col] += self.grad[i];
    });
    return Tensor::wrap(node);
}

Tensor mul_rows(const Tensor& x, const Tensor& c) {
    if (x.ndim() != 2 || c.ndim() != 1 || c.shape()[0] != x.shape()[0]) {
        throw ShapeError("mul_rows shape mismatch: " + shape_str(x.shape()) + " rows-scaled by " +
                         shape_str(c.shape()));
    }
    size_t m = x.shape()[0], d = x.shape()[1];
    std::vector<double> out(x.size());
    for (size_t i = 0; i < m; ++i) {
        for (size_t j = 0; j < d; ++j) out[i * d + j] = x.values()[i * d + j] * c.values()[i];
    }
    auto node = make_node(x.shape(), std::move(out));
    auto xn = x.node(), cn = c.node();
    track(node, {xn, cn}, [xn, cn, m, d](detail::Node& self) {
        if (xn->requires_grad) {
            auto& g = grad_of(*xn);
            for (size_t i = 0; i < m; ++i) {
                for (size_t j = 0; j < d; ++j) g[i * d + j] += self.grad[i * d + j] * cn->values[i];
            }
        }
        if (cn->requires_grad) {
            auto& g = grad_of(*cn);
            for (size_t i = 0; i < m; ++i) {
                double acc = 0.0;
                for (size_t j = 0; j < d; ++j) acc += self.grad[i * d + j] * xn->values[i * d + j];
                g[i] += acc;
            }
        }
    });
    return Tensor::wrap(node);
}

std::vector<double> top_k_mask(const std::vector<double>& v, size_t k) {
    if (k < 1 || k > v.size()) {
        throw ContractError("top_k_mask: k=" + std::to_string(k) + " out of range for n=" +
                            std::to_string(v.size()));
    }
    std::vector<uint8_t> keep;
    top_k_select(v.data(), v.size(), k, keep);
    std::vector<double> out(v.size());
    for (size_t i = 0; i < v.size(); ++i) out[i] = keep[i] ? v[i] : kNegInf;
    return out;
}

Tensor top_k_mask_rows(const Tensor& x, size_t k) {
    if (x.ndim() < 1) throw ShapeError("top_k_mask_rows needs rank >= 1");
    size_t n = x.shape().back();
    if (k < 1 || k > n) {
        throw ContractError("top_k_mask_rows: k=" + std::to_string(k) + " out of range for n=" +
                            std::to_string(n));
    }
    size_t rows = x.size() / n;
    std::vector<double> out(x.size());
    std::vector<uint8_t> keep_all(x.size());
    std::vector<uint8_t> keep;
    for (size_t r = 0; r < rows; ++r) {
        top_k_select(x.values().data() + r * n, n, k, keep);
        for (size_t j = 0; j < n; ++j) {
            keep_all[r * n + j] = keep[j];
            out[r * n + j] = keep[j] ? x.values()[r * n + j] : kNegInf;
        }
    }
    auto node = make_node(x.shape(), std::move(out));
    auto xn = x.node();
    track(node, {xn}, [xn, keep_all = std::move(keep_all)](detail::Node& self) {
        auto& g = grad_of(*xn);
        for (size_t i = 0; i < g.size(); ++i) {
            if (keep_all[i]) g[i] += self.grad[i];
        }
    });
    return Tensor::wrap(node);
}

Tensor attention_mask_fill(const Tensor& scores, const std::vector<uint8_t>& key_mask) {
    if (scores.ndim() != 4) throw ShapeError("attention_mask_fill expects [B,H,L,L] scores");
    size_t B = scores.shape()[0], H = scores.shape()[1], L = scores.shape()[2];
    if (scores.shape()[3] != L || key_mask.size() != B * L) {
        throw ShapeError("attention mask size mismatch for scores " + shape_str(scores.shape()));
    }
    std::vector<double> out(scores.size());
    for (size_t b = 0; b < B; ++b) {
        for (size_t h = 0; h < H; ++h) {
            for (size_t i = 0; i < L; ++i) {
                size_t base = ((b * H + h) * L + i) * L;
                for (size_t j = 0; j < L; ++j) {
                    out[base + j] = key_mask[b * L + j] ? scores.values()[base + j] : kNegInf;
                }
            }
        }
    }
    auto node = make_node(scores.shape(), std::move(out));
    auto sn = scores.node();
    track(node, {sn}, [sn, key_mask, B, H, L](detail::Node& self) {
        auto& g = grad_of(*sn);
        for (size_t b = 0; b < B; ++b) {
            for (size_t h = 0; h < H; ++h) {
                for (size_t i = 0; i < L; ++i) {
                    size_t base = ((b * H + h) * L + i) * L;
                    for (size_t j = 0; j < L; ++j) {
                        if (key_mask[b * L + j]) g[base + j] += self.grad[base + j];
                    }
                }
            }
        }
    });
    return Tensor::wrap(node);
}

Tensor sum(const Tensor& x) {
    double total = 0.0;
    for (double v : x.values()) total += v;
    auto node = make_node({}, {total});
    auto xn = x.node();
    track(node, {xn}, [xn](detail::Node& self) {
        auto& g = grad_of(*xn);
        for (double& v : g) v += self.grad[0];
    });
    return Tensor::wrap(node);
}

Tensor mean(const Tensor& x) {
    double total = 0.0;
    for (double v : x.values()) total += v;
    double inv = 1.0 / static_cast<double>(x.size());
    auto node = make_node({}, {total * inv});
    auto xn = x.node();
    track(node, {xn}, [xn, inv](detail::Node& self) {
        auto& g = grad_of(*xn);
        for (double& v : g) v += self.grad[0] * inv;
    });
    return Tensor::wrap(node);
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.ndim() != 2) throw ShapeError("cross_entropy expects [B,C] logits");
    size_t B = logits.shape()[0], C = logits.shape()[1];
    if (C < 2) throw ContractError("cross_entropy needs at least 2 classes");
    if (labels.size() != B) throw ContractError("cross_entropy label count mismatch");
    for (int y : labels) {
        if (y < 0 || static_cast<size_t>(y) >= C) {
            throw IndexError("label " + std::to_string(y) + " out of range [0, " +
                             std::to_string(C) + ")");
        }
    }
    std::vector<double> probs(B * C);
    double loss = 0.0;
    for (size_t b = 0; b < B; ++b) {
        const double* row = logits.values().data() + b * C;
        double m = row[0];
        for (size_t c = 1; c < C; ++c) m = std::max(m, row[c]);
        double total = 0.0;
        for (size_t c = 0; c < C; ++c) {
            probs[b * C + c] = std::exp(row[c] - m);
            total += probs[b * C + c];
        }
        for (size_t c = 0; c < C; ++c) probs[b * C + c] /= total;
        loss -= std::log(probs[b * C + static_cast<size_t>(labels[b])]);
    }
    loss /= static_cast<double>(B);
    auto node = make_node({}, {loss});
    auto ln = logits.node();
    track(node, {ln}, [ln, labels, B, C, probs = std::move(probs)](detail::Node& self) {
        auto& g = grad_of(*ln);
        double s = self.grad[0] / static_cast<double>(B);
        for (size_t b = 0; b < B; ++b) {
            for (size_t c = 0; c < C; ++c) {
                double onehot = (static_cast<size_t>(labels[b]) == c) ? 1.0 : 0.0;
                g[b * C + c] += s * (probs[b * C + c] - onehot);
            }
        }
    });
    return Tensor::wrap(node);
}

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) {
        throw ContractError("backward requires a scalar loss, got " +
                            (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
    }
    auto root = loss.node();
    if (!root->requires_grad) return;  // no differentiable inputs reachable

    // Collect reachable nodes.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    std::vector<detail::Node*> stack{root.get()};
    visited.insert(root.get());
    while (!stack.empty()) {
        detail::Node* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (const auto& p : n->parents) {
            if (p->requires_grad && visited.insert(p.get()).second) stack.push_back(p.get());
        }
    }
    // Interior gradients are scratch per sweep; leaf gradients accumulate.
    for (detail::Node* n : order) {
        if (!n->parents.empty()) {
            n->grad.assign(numel(n->shape), 0.0);
        } else if (n->grad.empty()) {
            n->grad.assign(numel(n->shape), 0.0);
        }
    }
    grad_of(*root)[0] += 1.0;
    std::sort(order.begin(), order.end(),
              [](const detail::Node* a, const detail::Node* b) { return a->id > b->id; });
    for (detail::Node* n : order) {
        if (n->backward_fn) n->backward_fn(*n);
    }
}

GradCheckReport grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                           double step, double tolerance, Rng& rng, size_t max_coords_per_param,
                           double denom_floor) {
    if (step <= 0.0) throw ContractError("grad_check step must be positive");
    GradCheckReport report;
    report.tolerance = tolerance;

    for (auto p : params) p.zero_grad();
    Tensor loss = f();
    backward(loss);

    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor p = params[pi];
        size_t n = p.size();
        std::vector<size_t> coords;
        if (n <= max_coords_per_param) {
            coords.resize(n);
            std::iota(coords.begin(), coords.end(), 0);
        } else {
            for (size_t i = 0; i < max_coords_per_param; ++i) coords.push_back(rng.below(n));
        }
        for (size_t c : coords) {
            double saved = p.values()[c];
            double analytic = p.requires_grad() && p.has_grad() ? p.grad()[c] : 0.0;
            double plus, minus;
            {
                NoGradGuard ng;
                p.values()[c] = saved + step;
                plus = f().item();
                p.values()[c] = saved - step;
                minus = f().item();
                p.values()[c] = saved;
            }
            double numeric = (plus - minus) / (2.0 * step);
            double denom = std::max({std::abs(analytic), std::abs(numeric), denom_floor});
            double rel = std::abs(analytic - numeric) / denom;
            report.coords_checked++;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_coord = "param" + std::to_string(pi) + "[" + std::to_string(c) + "]";
            }
            if (rel > tolerance || std::isnan(rel)) report.failures++;
        }
    }
    return report;
}

}  // namespace smoa
