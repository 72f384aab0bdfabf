#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "smoa/error.hpp"
#include "smoa/rng.hpp"

namespace smoa {

using Shape = std::vector<size_t>;

size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
    uint64_t id = 0;
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;
};

}  // namespace detail

// Graph recording toggle. Ops executed while recording is disabled produce
// plain values with no autodiff linkage.
bool grad_enabled();

class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

// Dense row-major 64-bit tensor. A Tensor is a cheap shared handle to one
// autodiff node; leaf tensors with requires_grad accumulate into .grad()
// when backward() runs.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value);
    static Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(n_); }
    const Shape& shape() const;
    size_t size() const;
    size_t ndim() const { return shape().size(); }

    std::vector<double>& values();
    const std::vector<double>& values() const;
    double item() const;

    bool requires_grad() const;
    void set_requires_grad(bool value);

    // Accumulated gradient; same shape as values. Allocated (zero) on first use.
    std::vector<double>& grad();
    bool has_grad() const;
    void zero_grad();

    // Creation-order handle in the autodiff graph; 0 for constants that never
    // joined a graph.
    uint64_t node_id() const;
    bool is_leaf() const;

    std::shared_ptr<detail::Node> node() const { return n_; }
    static Tensor wrap(std::shared_ptr<detail::Node> n);

  private:
    std::shared_ptr<detail::Node> n_;
};

// ---- operations ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
// Batched matmul: [N,m,k] x [N,k,p] -> [N,m,p].
Tensor bmm(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);           // same shape
Tensor mul(const Tensor& a, const Tensor& b);           // elementwise
Tensor scale(const Tensor& a, double c);
Tensor add_bias(const Tensor& x, const Tensor& bias);   // [..., d] + [d]
Tensor gelu(const Tensor& x);                           // tanh approximation

Tensor softmax(const Tensor& x, int axis);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<size_t>& axes);
Tensor select(const Tensor& x, size_t axis, size_t index);
Tensor concat(const std::vector<Tensor>& parts, size_t axis);

// Gather rows of a [V, d] table; gradient flows only to gathered rows.
Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids);

Tensor gather_rows(const Tensor& x, const std::vector<size_t>& rows);
Tensor scatter_rows(const Tensor& x, const std::vector<size_t>& rows, size_t total_rows);
// x[rows[i], col] for each i -> rank-1 tensor.
Tensor take_entries(const Tensor& x, const std::vector<size_t>& rows, size_t col);
// Scale row i of x by c[i].
Tensor mul_rows(const Tensor& x, const Tensor& c);

// Replace every entry outside the per-row top-k with -inf (rows = last axis).
// Ties keep the lowest index.
Tensor top_k_mask_rows(const Tensor& x, size_t k);
// Raw-vector form of the same kernel.
std::vector<double> top_k_mask(const std::vector<double>& v, size_t k);

// scores [B,H,L,L]; key_mask has B*L entries, 0 marking padding. Scores of
// masked keys become -inf.
Tensor attention_mask_fill(const Tensor& scores, const std::vector<uint8_t>& key_mask);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// Mean over the batch of -log softmax(logits)[label].
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// Reverse-mode sweep from a scalar loss. Repeated calls accumulate into leaf
// gradients additively.
void backward(const Tensor& loss);

// ---- finite-difference verification --------------------------------------

struct GradCheckReport {
    size_t coords_checked = 0;
    size_t failures = 0;
    double max_rel_err = 0.0;
    double tolerance = 0.0;
    std::string worst_coord;

    bool passed() const { return failures == 0; }
};

// Compares analytic gradients of f() against central finite differences on a
// random sample of coordinates of each parameter. Relative error uses
// max(|analytic|, |numeric|, denom_floor) as denominator.
GradCheckReport grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                           double step, double tolerance, Rng& rng,
                           size_t max_coords_per_param = 8, double denom_floor = 1e-4);

}  // namespace smoa
