#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "nodetab/tensor.hpp"

namespace nodetab {

// Learnable tensor with a persistent gradient buffer. Gradients accumulate
// across backward calls and are zeroed by the optimizer at step start.
struct Parameter {
  Tensor value;
  Tensor grad;
  std::string name;

  Parameter() = default;
  Parameter(Tensor v, std::string n)
      : value(std::move(v)), grad(value.shape()), name(std::move(n)) {}

  void zero_grad() { grad.fill(0.0); }
};

class Tape;

// One recorded value in the computation graph.
struct Node {
  Tensor value;
  Tensor grad;  // allocated on demand during backward
  bool requires_grad = false;
  bool grad_alloc = false;
  const char* op = "leaf";
  Parameter* param = nullptr;  // non-null for parameter leaves
  std::vector<std::shared_ptr<Node>> parents;
  // Propagates this node's grad into parents' grads; inputs are available
  // through the captured parent pointers.
  std::function<void(Node&)> vjp;

  Tensor& ensure_grad();
};

// Shared handle to a node; what all ops accept and return.
class Value {
 public:
  Value() = default;
  explicit Value(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  const Tensor& tensor() const { return node_->value; }
  const std::vector<std::size_t>& shape() const { return node_->value.shape(); }
  std::shared_ptr<Node> node() const { return node_; }
  bool defined() const { return node_ != nullptr; }

 private:
  std::shared_ptr<Node> node_;
};

// Reverse-mode tape. Records operations in execution order; backward visits
// them in exact reverse order and accumulates gradients into Parameters.
// A tape may run backward at most once; re-running without re-recording is an
// error.
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }

  // Constant leaf; never receives gradient.
  Value constant(Tensor t);

  // Parameter leaf; receives gradient into p.grad after backward.
  Value leaf(Parameter& p);

  // Records an op node. When gradients are off or no parent needs them, the
  // node is a plain value and the vjp is dropped.
  Value record(const char* op, Tensor value, std::vector<Value> parents,
               std::function<void(Node&)> vjp);

  // Reverse sweep from a scalar loss. Fills every reachable Parameter's grad
  // (accumulating); unreachable parameters are left untouched. Throws on a
  // non-scalar loss, on a second invocation, and on non-finite gradients
  // (reported with the offending op or parameter name).
  void backward(const Value& loss);

  std::size_t recorded_ops() const { return order_.size(); }

 private:
  bool grad_enabled_;
  bool spent_ = false;
  std::vector<std::shared_ptr<Node>> order_;
  std::vector<std::shared_ptr<Node>> param_leaves_;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  bool deterministic = true;
};

// Central-difference verification of the analytic gradients of build_loss
// with respect to params. build_loss must rebuild the loss from the current
// parameter values on the given tape; it is called repeatedly. Two baseline
// evaluations must agree bitwise, otherwise the report is flagged
// non-deterministic (stochastic functions need frozen noise).
GradCheckReport grad_check(const std::function<Value(Tape&)>& build_loss,
                           std::span<Parameter* const> params, double eps = 1e-5);

}  // namespace nodetab
