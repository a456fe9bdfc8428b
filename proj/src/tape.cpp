#include "nodetab/tape.hpp"

#include <cmath>
#include <stdexcept>
#include <utility>

namespace nodetab {

Tensor& Node::ensure_grad() {
  if (!grad_alloc) {
    grad = Tensor(value.shape());
    grad_alloc = true;
  }
  return grad;
}

Value Tape::constant(Tensor t) {
  auto node = std::make_shared<Node>();
  node->value = std::move(t);
  return Value(std::move(node));
}

Value Tape::leaf(Parameter& p) {
  auto node = std::make_shared<Node>();
  node->value = p.value;
  node->param = &p;
  node->requires_grad = grad_enabled_;
  if (grad_enabled_) param_leaves_.push_back(node);
  return Value(std::move(node));
}

Value Tape::record(const char* op, Tensor value, std::vector<Value> parents,
                   std::function<void(Node&)> vjp) {
  if (!value.all_finite()) {
    throw std::runtime_error(std::string("non-finite value produced by op '") + op + "'");
  }
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = op;
  bool needs = false;
  if (grad_enabled_) {
    for (const Value& p : parents) {
      if (p.defined() && p.node()->requires_grad) {
        needs = true;
        break;
      }
    }
  }
  if (needs) {
    node->requires_grad = true;
    for (Value& p : parents) node->parents.push_back(p.node());
    node->vjp = std::move(vjp);
    order_.push_back(node);
  }
  return Value(std::move(node));
}

void Tape::backward(const Value& loss) {
  if (!grad_enabled_) throw std::logic_error("backward on a gradient-disabled tape");
  if (spent_) throw std::logic_error("backward invoked twice on the same tape");
  spent_ = true;
  if (!loss.defined()) throw std::invalid_argument("backward: undefined loss");
  if (loss.tensor().size() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                shape_string(loss.shape()));
  }
  loss.node()->ensure_grad().fill(1.0);

  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    Node& node = **it;
    if (!node.grad_alloc) continue;  // not reachable from the loss
    if (!node.grad.all_finite()) {
      throw std::runtime_error(std::string("non-finite gradient flowing into op '") + node.op +
                               "'");
    }
    if (node.vjp) node.vjp(node);
  }

  for (const auto& leaf : param_leaves_) {
    if (!leaf->grad_alloc) continue;
    if (!leaf->grad.all_finite()) {
      throw std::runtime_error("non-finite gradient for parameter '" + leaf->param->name + "'");
    }
    Tensor& g = leaf->param->grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += leaf->grad[i];
  }
}

GradCheckReport grad_check(const std::function<Value(Tape&)>& build_loss,
                           std::span<Parameter* const> params, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("grad_check: eps must be > 0");

  auto eval = [&]() {
    Tape tape(false);
    Value loss = build_loss(tape);
    if (loss.tensor().size() != 1) throw std::invalid_argument("grad_check: loss must be scalar");
    return loss.tensor()[0];
  };

  GradCheckReport report;
  double base0 = eval();
  double base1 = eval();
  if (!(base0 == base1)) {
    report.deterministic = false;
    return report;
  }

  std::vector<Tensor> analytic;
  {
    for (Parameter* p : params) p->zero_grad();
    Tape tape(true);
    Value loss = build_loss(tape);
    tape.backward(loss);
    for (Parameter* p : params) analytic.push_back(p->grad);
  }

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter& p = *params[pi];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      double saved = p.value[i];
      p.value[i] = saved + eps;
      double hi = eval();
      p.value[i] = saved - eps;
      double lo = eval();
      p.value[i] = saved;
      double numeric = (hi - lo) / (2.0 * eps);
      double a = analytic[pi][i];
      double rel = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = p.name;
        report.worst_index = i;
        report.analytic = a;
        report.numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace nodetab
