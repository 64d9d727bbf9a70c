#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

#include "agentmixer/tensor.hpp"

namespace agentmixer {

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid until the tape is cleared.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  double item() const;
  bool needs_grad() const;
  bool valid() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Dynamic reverse-mode tape. Built fresh for every forward pass and cleared by
// backward(); one tape belongs to one thread at a time.
class Tape {
 public:
  // Propagates the output gradient into the inputs' gradient buffers.
  using BackwardFn = std::function<void(Tape&, std::span<const double> out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  // Records a parameter. Gradients reaching it are accumulated into `param.grad()`
  // when backward() runs. Binding the same tensor twice returns the same node.
  Var param(Tensor& param);

  // Seeds d(loss)/d(loss) = 1, sweeps the tape in reverse, then clears it.
  void backward(const Var& loss);
  void clear();

  std::size_t size() const { return nodes_.size(); }

  // Used by op implementations.
  Var record(Tensor value, bool needs_grad, BackwardFn backward);
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  std::span<double> grad_buffer(std::size_t id);

 private:
  struct Node {
    Tensor value;
    bool needs_grad = false;
    Tensor* param = nullptr;
    BackwardFn backward;
    std::vector<double> grad;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Tensor*, std::size_t> bound_params_;
};

enum class Activation { relu, gelu };

// --- linear algebra -------------------------------------------------------
Var matmul(const Var& a, const Var& b);
// input [B x in] . weight [in x out] + bias [1 x out]
Var linear(const Var& input, const Var& weight, const Var& bias);

// --- elementwise with broadcasting ----------------------------------------
// The second operand may be full-shape, a [1 x n] row, a [m x 1] column or a
// [1 x 1] scalar.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var minimum(const Var& a, const Var& b);

Var neg(const Var& a);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var exp(const Var& a);
Var log(const Var& a);
Var square(const Var& a);
Var relu(const Var& a);
Var gelu(const Var& a);
Var sigmoid(const Var& a);
// log(1 + e^x), evaluated without overflow or cancellation.
Var softplus(const Var& a);
Var activate(const Var& a, Activation act);
// Identity inside [lo, hi], constant (zero gradient) outside.
Var clamp(const Var& a, double lo, double hi);

// --- reductions -----------------------------------------------------------
Var sum(const Var& a);
Var mean(const Var& a);
Var row_sum(const Var& a);

// --- normalisation --------------------------------------------------------
Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);
Var layer_norm(const Var& input, const Var& gain, const Var& shift, double eps);

// --- layout ---------------------------------------------------------------
Var concat_cols(std::span<const Var> parts);
Var slice_cols(const Var& a, std::size_t start, std::size_t count);
// Picks a[r][index[r]] for every row -> [rows x 1].
Var gather_cols(const Var& a, std::span<const int> index);
// parts[r] is [G x C]; output row g*R + r holds parts[r] row g -> [G*R x C].
Var interleave_rows(std::span<const Var> parts);
// Inverse of interleave_rows for one slot: rows g*R + r for all g -> [G x C].
Var take_group_row(const Var& grid, std::size_t group_rows, std::size_t r);
// out row r = a row index[r] -> [index.size() x C]; gradients of repeated rows add up.
Var gather_rows(const Var& a, std::span<const std::size_t> index);
// Transposes each [R x C] block of a [G*R x C] stack -> [G*C x R].
Var group_transpose(const Var& stacked, std::size_t group_rows);
// Copies the value and cuts the gradient path.
Var detach(const Var& a);

// --- kernels exposed for tests --------------------------------------------
// c[m x n] (+)= a[m x k] . b[k x n]; every output accumulates over k in ascending
// order so a row's result does not depend on how many rows are in the batch.
void gemm(std::span<const double> a, std::span<const double> b, std::span<double> c,
          std::size_t m, std::size_t k, std::size_t n, bool accumulate);

}  // namespace agentmixer
