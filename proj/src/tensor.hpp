#pragma once

// Dense float64 tensors plus a define-by-run reverse-mode graph. The graph
// is rebuilt for every objective evaluation; nodes cache forward values and
// backward() fills one gradient tensor per node. Small enough to audit,
// fast enough for the fully-connected networks used here (matmul is backed
// by BLAS, everything else is plain loops).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace salient {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);

struct Tensor {
  Shape shape;
  std::vector<double> data;  // row-major

  Tensor() = default;
  Tensor(Shape s, double fill = 0.0);

  static Tensor scalar(double v);
  static Tensor row_major(Shape s, std::vector<double> values);

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }

  // rank-2 accessors; throw on rank mismatch
  std::size_t rows() const;
  std::size_t cols() const;
  double& at(std::size_t r, std::size_t c);
  double at(std::size_t r, std::size_t c) const;

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool all_finite() const;
};

/// Seedable 64-bit-state generator (splitmix64). One instance per stream;
/// identical seed gives an identical sample stream. The normal sampler uses
/// Box-Muller without a cached spare so the entire state is the single u64.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64();
  double uniform();                       // [0, 1)
  double uniform(double lo, double hi);   // [lo, hi)
  double uniform_open();                  // (0, 1), both ends excluded
  double normal();                        // N(0, 1)

  std::uint64_t state() const { return state_; }
  void set_state(std::uint64_t s) { state_ = s; }

 private:
  std::uint64_t state_;
};

enum class Op : std::uint8_t {
  input,
  matmul,
  add,
  sub,
  mul,            // elementwise (Hadamard)
  scale,          // multiply by a compile-time constant
  relu,
  tanh,
  square,
  abs,
  sum,            // full reduction to a scalar
  mean,           // full reduction to a scalar
  exp,
  broadcast_add,  // [m x n] + [n] row vector
  transpose,      // rank-2
  slice_rows,     // contiguous row range of a rank-2 tensor
};

const char* op_name(Op op);

using NodeId = std::size_t;

/// Per-op attributes that are not node inputs.
struct OpAttr {
  double scalar = 0.0;      // scale
  std::size_t row0 = 0;     // slice_rows
  std::size_t nrows = 0;    // slice_rows
};

/// Append-only computation record. Node inputs always reference earlier
/// nodes, so construction order is a topological order. Forward values are
/// validated to be finite as they are produced; a non-finite result throws
/// naming the op and node.
///
/// Not thread-safe per instance; independent graphs may live on separate
/// threads.
class Graph {
 public:
  /// Leaf holding a concrete value. requires_grad=false prunes backward
  /// work for pure data (inputs, noise draws); gradients are still exact
  /// for every node on a requires_grad path.
  NodeId input(Tensor value, bool requires_grad = true);

  /// Generic op application (shape checks + forward evaluation).
  NodeId apply(Op op, std::span<const NodeId> inputs, OpAttr attr = {});

  NodeId matmul(NodeId a, NodeId b);
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, double c);
  NodeId relu(NodeId a);
  NodeId tanh(NodeId a);
  NodeId square(NodeId a);
  NodeId abs(NodeId a);
  NodeId sum(NodeId a);
  NodeId mean(NodeId a);
  NodeId exp(NodeId a);
  NodeId broadcast_add(NodeId a, NodeId bias);
  NodeId transpose(NodeId a);
  NodeId slice_rows(NodeId a, std::size_t row0, std::size_t nrows);

  /// Reverse pass from a scalar root. Fan-out accumulates by summation.
  /// Gradients from a previous backward() call are discarded.
  void backward(NodeId root);

  const Tensor& value(NodeId id) const;
  const Tensor& grad(NodeId id) const;
  bool has_grad(NodeId id) const;
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Op op;
    OpAttr attr;
    std::vector<NodeId> inputs;
    Tensor value;
    bool needs_grad;
  };

  void check_id(NodeId id) const;
  Tensor& grad_buf(NodeId id);

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  std::vector<char> grad_set_;
};

/// Builds the function under test inside a fresh graph. Receives one leaf
/// node per parameter tensor and must return a scalar root. Must be
/// deterministic: it is re-invoked for every finite-difference probe.
using GraphBuilder =
    std::function<NodeId(Graph&, std::span<const NodeId>)>;

struct GradCheckResult {
  std::vector<double> per_param_max_dev;
  double max_dev = 0.0;
  bool pass = false;
};

/// Central finite differences against the analytic gradients. Deviation is
/// |analytic - numeric| / max(1, |analytic|, |numeric|), reported per
/// parameter tensor; pass iff the overall max is below tol.
GradCheckResult grad_check(const GraphBuilder& build,
                           std::span<const Tensor> params, double h,
                           double tol);

}  // namespace salient
