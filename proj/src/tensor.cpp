#include "tensor.hpp"

#include <cblas.h>

#include <cmath>
#include <mutex>
#include <numbers>
#include <sstream>
#include <stdexcept>

extern "C" void openblas_set_num_threads(int);

namespace salient {

namespace {

// One BLAS thread keeps step arithmetic reproducible run to run.
std::once_flag blas_once;

void pin_blas_threads() {
  std::call_once(blas_once, [] { openblas_set_num_threads(1); });
}

// C = alpha * op(A) * op(B) + beta * C, row-major.
void gemm(bool ta, bool tb, const Tensor& a, const Tensor& b, Tensor& c,
          double alpha, double beta) {
  pin_blas_threads();
  const std::size_t m = c.rows(), n = c.cols();
  const std::size_t k = ta ? a.rows() : a.cols();
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
              tb ? CblasTrans : CblasNoTrans, static_cast<int>(m),
              static_cast<int>(n), static_cast<int>(k), alpha, a.data.data(),
              static_cast<int>(a.cols()), b.data.data(),
              static_cast<int>(b.cols()), beta, c.data.data(),
              static_cast<int>(c.cols()));
}

[[noreturn]] void shape_error(Op op, const Tensor& a, const Tensor& b) {
  throw std::invalid_argument(std::string("shape mismatch in op '") +
                              op_name(op) + "': " + shape_str(a.shape) +
                              " vs " + shape_str(b.shape));
}

[[noreturn]] void rank_error(Op op, const Tensor& a) {
  throw std::invalid_argument(std::string("op '") + op_name(op) +
                              "' needs a rank-2 operand, got " +
                              shape_str(a.shape));
}

std::size_t checked_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) {
    if (d == 0) throw std::invalid_argument("zero tensor dimension");
    n *= d;
  }
  return n;
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape s, double fill)
    : shape(std::move(s)), data(checked_numel(shape), fill) {}

Tensor Tensor::scalar(double v) {
  Tensor t({1});
  t.data[0] = v;
  return t;
}

Tensor Tensor::row_major(Shape s, std::vector<double> values) {
  Tensor t;
  t.shape = std::move(s);
  if (checked_numel(t.shape) != values.size())
    throw std::invalid_argument("tensor data length " +
                                std::to_string(values.size()) +
                                " does not match shape " + shape_str(t.shape));
  t.data = std::move(values);
  return t;
}

std::size_t Tensor::rows() const {
  if (rank() != 2) throw std::invalid_argument("rows(): tensor is not rank-2");
  return shape[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw std::invalid_argument("cols(): tensor is not rank-2");
  return shape[1];
}

double& Tensor::at(std::size_t r, std::size_t c) {
  return data[r * cols() + c];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  return data[r * cols() + c];
}

bool Tensor::all_finite() const {
  for (double v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

// ----------------------------------------------------------------- Rng ----

std::uint64_t Rng::next_u64() {
  state_ += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = state_;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double Rng::uniform() { return (next_u64() >> 11) * 0x1.0p-53; }

double Rng::uniform(double lo, double hi) {
  return lo + (hi - lo) * uniform();
}

double Rng::uniform_open() {
  return ((next_u64() >> 12) + 0.5) * 0x1.0p-52;
}

double Rng::normal() {
  const double u1 = 1.0 - uniform();  // (0, 1], log stays finite
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) *
         std::cos(2.0 * std::numbers::pi * u2);
}

// --------------------------------------------------------------- Graph ----

const char* op_name(Op op) {
  switch (op) {
    case Op::input: return "input";
    case Op::matmul: return "matmul";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::scale: return "scale";
    case Op::relu: return "relu";
    case Op::tanh: return "tanh";
    case Op::square: return "square";
    case Op::abs: return "abs";
    case Op::sum: return "sum";
    case Op::mean: return "mean";
    case Op::exp: return "exp";
    case Op::broadcast_add: return "broadcast-add";
    case Op::transpose: return "transpose";
    case Op::slice_rows: return "slice-rows";
  }
  return "?";
}

void Graph::check_id(NodeId id) const {
  if (id >= nodes_.size())
    throw std::invalid_argument("node id " + std::to_string(id) +
                                " references a node that does not exist yet");
}

NodeId Graph::input(Tensor value, bool requires_grad) {
  if (!value.all_finite())
    throw std::runtime_error("non-finite values in input tensor");
  nodes_.push_back(
      Node{Op::input, {}, {}, std::move(value), requires_grad});
  return nodes_.size() - 1;
}

NodeId Graph::apply(Op op, std::span<const NodeId> inputs, OpAttr attr) {
  for (NodeId id : inputs) check_id(id);
  if (op == Op::input)
    throw std::invalid_argument("input nodes are created via Graph::input");

  auto arity = [&](std::size_t n) {
    if (inputs.size() != n)
      throw std::invalid_argument(std::string("op '") + op_name(op) +
                                  "' expects " + std::to_string(n) +
                                  " inputs, got " +
                                  std::to_string(inputs.size()));
  };

  Tensor out;
  switch (op) {
    case Op::matmul: {
      arity(2);
      const Tensor& a = nodes_[inputs[0]].value;
      const Tensor& b = nodes_[inputs[1]].value;
      if (a.rank() != 2) rank_error(op, a);
      if (b.rank() != 2) rank_error(op, b);
      if (a.cols() != b.rows()) shape_error(op, a, b);
      out = Tensor({a.rows(), b.cols()});
      gemm(false, false, a, b, out, 1.0, 0.0);
      break;
    }
    case Op::add:
    case Op::sub:
    case Op::mul: {
      arity(2);
      const Tensor& a = nodes_[inputs[0]].value;
      const Tensor& b = nodes_[inputs[1]].value;
      if (!a.same_shape(b)) shape_error(op, a, b);
      out = Tensor(a.shape);
      const std::size_t n = a.numel();
      for (std::size_t i = 0; i < n; ++i) {
        out.data[i] = op == Op::add   ? a.data[i] + b.data[i]
                      : op == Op::sub ? a.data[i] - b.data[i]
                                      : a.data[i] * b.data[i];
      }
      break;
    }
    case Op::scale: {
      arity(1);
      const Tensor& a = nodes_[inputs[0]].value;
      out = Tensor(a.shape);
      for (std::size_t i = 0; i < a.numel(); ++i)
        out.data[i] = attr.scalar * a.data[i];
      break;
    }
    case Op::relu: {
      arity(1);
      const Tensor& a = nodes_[inputs[0]].value;
      out = Tensor(a.shape);
      for (std::size_t i = 0; i < a.numel(); ++i)
        out.data[i] = a.data[i] > 0.0 ? a.data[i] : 0.0;
      break;
    }
    case Op::tanh: {
      arity(1);
      const Tensor& a = nodes_[inputs[0]].value;
      out = Tensor(a.shape);
      for (std::size_t i = 0; i < a.numel(); ++i)
        out.data[i] = std::tanh(a.data[i]);
      break;
    }
    case Op::square: {
      arity(1);
      const Tensor& a = nodes_[inputs[0]].value;
      out = Tensor(a.shape);
      for (std::size_t i = 0; i < a.numel(); ++i)
        out.data[i] = a.data[i] * a.data[i];
      break;
    }
    case Op::abs: {
      arity(1);
      const Tensor& a = nodes_[inputs[0]].value;
      out = Tensor(a.shape);
      for (std::size_t i = 0; i < a.numel(); ++i)
        out.data[i] = std::fabs(a.data[i]);
      break;
    }
    case Op::sum:
    case Op::mean: {
      arity(1);
      const Tensor& a = nodes_[inputs[0]].value;
      double s = 0.0;
      for (double v : a.data) s += v;
      out = Tensor::scalar(op == Op::sum
                               ? s
                               : s / static_cast<double>(a.numel()));
      break;
    }
    case Op::exp: {
      arity(1);
      const Tensor& a = nodes_[inputs[0]].value;
      out = Tensor(a.shape);
      for (std::size_t i = 0; i < a.numel(); ++i)
        out.data[i] = std::exp(a.data[i]);
      break;
    }
    case Op::broadcast_add: {
      arity(2);
      const Tensor& a = nodes_[inputs[0]].value;
      const Tensor& b = nodes_[inputs[1]].value;
      if (a.rank() != 2) rank_error(op, a);
      if (b.rank() != 1 || b.shape[0] != a.cols()) shape_error(op, a, b);
      out = Tensor(a.shape);
      for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < a.cols(); ++c)
          out.at(r, c) = a.at(r, c) + b.data[c];
      break;
    }
    case Op::transpose: {
      arity(1);
      const Tensor& a = nodes_[inputs[0]].value;
      if (a.rank() != 2) rank_error(op, a);
      out = Tensor({a.cols(), a.rows()});
      for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < a.cols(); ++c) out.at(c, r) = a.at(r, c);
      break;
    }
    case Op::slice_rows: {
      arity(1);
      const Tensor& a = nodes_[inputs[0]].value;
      if (a.rank() != 2) rank_error(op, a);
      if (attr.nrows == 0 || attr.row0 + attr.nrows > a.rows())
        throw std::invalid_argument(
            "slice-rows range [" + std::to_string(attr.row0) + ", " +
            std::to_string(attr.row0 + attr.nrows) + ") out of bounds for " +
            shape_str(a.shape));
      out = Tensor({attr.nrows, a.cols()});
      for (std::size_t r = 0; r < attr.nrows; ++r)
        for (std::size_t c = 0; c < a.cols(); ++c)
          out.at(r, c) = a.at(attr.row0 + r, c);
      break;
    }
    case Op::input:
      break;  // unreachable
  }

  if (!out.all_finite())
    throw std::runtime_error(std::string("non-finite values produced by op '") +
                             op_name(op) + "' (node " +
                             std::to_string(nodes_.size()) + ")");

  bool needs = false;
  for (NodeId id : inputs) needs = needs || nodes_[id].needs_grad;
  nodes_.push_back(Node{op, attr,
                        std::vector<NodeId>(inputs.begin(), inputs.end()),
                        std::move(out), needs});
  return nodes_.size() - 1;
}

NodeId Graph::matmul(NodeId a, NodeId b) {
  const NodeId in[] = {a, b};
  return apply(Op::matmul, in);
}
NodeId Graph::add(NodeId a, NodeId b) {
  const NodeId in[] = {a, b};
  return apply(Op::add, in);
}
NodeId Graph::sub(NodeId a, NodeId b) {
  const NodeId in[] = {a, b};
  return apply(Op::sub, in);
}
NodeId Graph::mul(NodeId a, NodeId b) {
  const NodeId in[] = {a, b};
  return apply(Op::mul, in);
}
NodeId Graph::scale(NodeId a, double c) {
  const NodeId in[] = {a};
  return apply(Op::scale, in, OpAttr{.scalar = c});
}
NodeId Graph::relu(NodeId a) {
  const NodeId in[] = {a};
  return apply(Op::relu, in);
}
NodeId Graph::tanh(NodeId a) {
  const NodeId in[] = {a};
  return apply(Op::tanh, in);
}
NodeId Graph::square(NodeId a) {
  const NodeId in[] = {a};
  return apply(Op::square, in);
}
NodeId Graph::abs(NodeId a) {
  const NodeId in[] = {a};
  return apply(Op::abs, in);
}
NodeId Graph::sum(NodeId a) {
  const NodeId in[] = {a};
  return apply(Op::sum, in);
}
NodeId Graph::mean(NodeId a) {
  const NodeId in[] = {a};
  return apply(Op::mean, in);
}
NodeId Graph::exp(NodeId a) {
  const NodeId in[] = {a};
  return apply(Op::exp, in);
}
NodeId Graph::broadcast_add(NodeId a, NodeId bias) {
  const NodeId in[] = {a, bias};
  return apply(Op::broadcast_add, in);
}
NodeId Graph::transpose(NodeId a) {
  const NodeId in[] = {a};
  return apply(Op::transpose, in);
}
NodeId Graph::slice_rows(NodeId a, std::size_t row0, std::size_t nrows) {
  const NodeId in[] = {a};
  return apply(Op::slice_rows, in, OpAttr{.row0 = row0, .nrows = nrows});
}

Tensor& Graph::grad_buf(NodeId id) {
  if (!grad_set_[id]) {
    grads_[id] = Tensor(nodes_[id].value.shape);
    grad_set_[id] = 1;
  }
  return grads_[id];
}

void Graph::backward(NodeId root) {
  check_id(root);
  if (nodes_[root].value.numel() != 1)
    throw std::invalid_argument("backward root must be scalar, got shape " +
                                shape_str(nodes_[root].value.shape));

  grads_.assign(nodes_.size(), Tensor{});
  grad_set_.assign(nodes_.size(), 0);
  grad_buf(root).data[0] = 1.0;

  for (NodeId id = root + 1; id-- > 0;) {
    const Node& node = nodes_[id];
    if (!grad_set_[id] || node.op == Op::input) continue;
    const Tensor& g = grads_[id];

    auto wants = [&](std::size_t slot) {
      return nodes_[node.inputs[slot]].needs_grad;
    };

    switch (node.op) {
      case Op::matmul: {
        const Tensor& a = nodes_[node.inputs[0]].value;
        const Tensor& b = nodes_[node.inputs[1]].value;
        if (wants(0)) gemm(false, true, g, b, grad_buf(node.inputs[0]), 1.0, 1.0);
        if (wants(1)) gemm(true, false, a, g, grad_buf(node.inputs[1]), 1.0, 1.0);
        break;
      }
      case Op::add:
      case Op::sub: {
        const double sgn = node.op == Op::add ? 1.0 : -1.0;
        if (wants(0)) {
          Tensor& da = grad_buf(node.inputs[0]);
          for (std::size_t i = 0; i < g.numel(); ++i) da.data[i] += g.data[i];
        }
        if (wants(1)) {
          Tensor& db = grad_buf(node.inputs[1]);
          for (std::size_t i = 0; i < g.numel(); ++i)
            db.data[i] += sgn * g.data[i];
        }
        break;
      }
      case Op::mul: {
        const Tensor& a = nodes_[node.inputs[0]].value;
        const Tensor& b = nodes_[node.inputs[1]].value;
        if (wants(0)) {
          Tensor& da = grad_buf(node.inputs[0]);
          for (std::size_t i = 0; i < g.numel(); ++i)
            da.data[i] += b.data[i] * g.data[i];
        }
        if (wants(1)) {
          Tensor& db = grad_buf(node.inputs[1]);
          for (std::size_t i = 0; i < g.numel(); ++i)
            db.data[i] += a.data[i] * g.data[i];
        }
        break;
      }
      case Op::scale: {
        if (!wants(0)) break;
        Tensor& da = grad_buf(node.inputs[0]);
        for (std::size_t i = 0; i < g.numel(); ++i)
          da.data[i] += node.attr.scalar * g.data[i];
        break;
      }
      case Op::relu: {
        if (!wants(0)) break;
        const Tensor& a = nodes_[node.inputs[0]].value;
        Tensor& da = grad_buf(node.inputs[0]);
        // gradient at exactly 0 is defined as 0
        for (std::size_t i = 0; i < g.numel(); ++i)
          if (a.data[i] > 0.0) da.data[i] += g.data[i];
        break;
      }
      case Op::tanh: {
        if (!wants(0)) break;
        Tensor& da = grad_buf(node.inputs[0]);
        const Tensor& y = node.value;
        for (std::size_t i = 0; i < g.numel(); ++i)
          da.data[i] += (1.0 - y.data[i] * y.data[i]) * g.data[i];
        break;
      }
      case Op::square: {
        if (!wants(0)) break;
        const Tensor& a = nodes_[node.inputs[0]].value;
        Tensor& da = grad_buf(node.inputs[0]);
        for (std::size_t i = 0; i < g.numel(); ++i)
          da.data[i] += 2.0 * a.data[i] * g.data[i];
        break;
      }
      case Op::abs: {
        if (!wants(0)) break;
        const Tensor& a = nodes_[node.inputs[0]].value;
        Tensor& da = grad_buf(node.inputs[0]);
        // subgradient at 0 pinned to 0
        for (std::size_t i = 0; i < g.numel(); ++i) {
          if (a.data[i] > 0.0)
            da.data[i] += g.data[i];
          else if (a.data[i] < 0.0)
            da.data[i] -= g.data[i];
        }
        break;
      }
      case Op::sum:
      case Op::mean: {
        if (!wants(0)) break;
        Tensor& da = grad_buf(node.inputs[0]);
        const double w =
            node.op == Op::sum
                ? g.data[0]
                : g.data[0] / static_cast<double>(da.numel());
        for (std::size_t i = 0; i < da.numel(); ++i) da.data[i] += w;
        break;
      }
      case Op::exp: {
        if (!wants(0)) break;
        Tensor& da = grad_buf(node.inputs[0]);
        const Tensor& y = node.value;
        for (std::size_t i = 0; i < g.numel(); ++i)
          da.data[i] += y.data[i] * g.data[i];
        break;
      }
      case Op::broadcast_add: {
        if (wants(0)) {
          Tensor& da = grad_buf(node.inputs[0]);
          for (std::size_t i = 0; i < g.numel(); ++i) da.data[i] += g.data[i];
        }
        if (wants(1)) {
          Tensor& db = grad_buf(node.inputs[1]);
          const std::size_t rows = g.rows(), cols = g.cols();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c)
              db.data[c] += g.at(r, c);
        }
        break;
      }
      case Op::transpose: {
        if (!wants(0)) break;
        Tensor& da = grad_buf(node.inputs[0]);
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < g.cols(); ++c)
            da.at(c, r) += g.at(r, c);
        break;
      }
      case Op::slice_rows: {
        if (!wants(0)) break;
        Tensor& da = grad_buf(node.inputs[0]);
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < g.cols(); ++c)
            da.at(node.attr.row0 + r, c) += g.at(r, c);
        break;
      }
      case Op::input:
        break;
    }
  }

  for (NodeId id = 0; id < grads_.size(); ++id)
    if (grad_set_[id] && !grads_[id].all_finite())
      throw std::runtime_error("non-finite gradient at node " +
                               std::to_string(id) + " (op '" +
                               op_name(nodes_[id].op) + "')");
}

const Tensor& Graph::value(NodeId id) const {
  check_id(id);
  return nodes_[id].value;
}

const Tensor& Graph::grad(NodeId id) const {
  check_id(id);
  if (grad_set_.size() != nodes_.size() || !grad_set_[id])
    throw std::logic_error("no gradient for node " + std::to_string(id) +
                           "; run backward() on a path through it first");
  return grads_[id];
}

bool Graph::has_grad(NodeId id) const {
  check_id(id);
  return grad_set_.size() == nodes_.size() && grad_set_[id];
}

// ---------------------------------------------------------- grad_check ----

GradCheckResult grad_check(const GraphBuilder& build,
                           std::span<const Tensor> params, double h,
                           double tol) {
  if (h <= 0.0) throw std::invalid_argument("grad_check: h must be positive");

  std::vector<Tensor> theta(params.begin(), params.end());

  auto eval = [&](const std::vector<Tensor>& p, bool with_grads,
                  std::vector<Tensor>* grads_out) {
    Graph g;
    std::vector<NodeId> ids;
    ids.reserve(p.size());
    for (const Tensor& t : p) ids.push_back(g.input(t, true));
    const NodeId root = build(g, ids);
    if (g.value(root).numel() != 1)
      throw std::invalid_argument("grad_check: builder root is not scalar");
    const double fx = g.value(root).data[0];
    if (with_grads) {
      g.backward(root);
      grads_out->clear();
      for (NodeId id : ids) {
        grads_out->push_back(g.has_grad(id) ? g.grad(id)
                                            : Tensor(g.value(id).shape));
      }
    }
    return fx;
  };

  std::vector<Tensor> analytic;
  eval(theta, true, &analytic);

  GradCheckResult result;
  result.per_param_max_dev.assign(theta.size(), 0.0);
  for (std::size_t p = 0; p < theta.size(); ++p) {
    for (std::size_t i = 0; i < theta[p].numel(); ++i) {
      const double keep = theta[p].data[i];
      theta[p].data[i] = keep + h;
      const double fp = eval(theta, false, nullptr);
      theta[p].data[i] = keep - h;
      const double fm = eval(theta, false, nullptr);
      theta[p].data[i] = keep;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[p].data[i];
      const double dev = std::fabs(a - numeric) /
                         std::max({1.0, std::fabs(a), std::fabs(numeric)});
      result.per_param_max_dev[p] =
          std::max(result.per_param_max_dev[p], dev);
    }
    result.max_dev = std::max(result.max_dev, result.per_param_max_dev[p]);
  }
  result.pass = result.max_dev < tol;
  return result;
}

}  // namespace salient
