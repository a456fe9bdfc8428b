#include "nodetab/optimizer.hpp"

#include <cmath>
#include <stdexcept>

namespace nodetab {

void QhAdamConfig::validate() const {
  if (!(lr > 0.0)) throw std::invalid_argument("qhadam: learning rate must be > 0");
  if (!(nu1 >= 0.0 && nu1 <= 1.0) || !(nu2 >= 0.0 && nu2 <= 1.0)) {
    throw std::invalid_argument("qhadam: nu coefficients must lie in [0, 1]");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw std::invalid_argument("qhadam: beta coefficients must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw std::invalid_argument("qhadam: eps must be > 0");
}

QhAdam::QhAdam(std::vector<Parameter*> params, QhAdamConfig config)
    : params_(std::move(params)), config_(config) {
  config_.validate();
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (Parameter* p : params_) {
    Tensor zero = p->value;
    zero.fill(0.0);
    m_.push_back(zero);
    v_.push_back(std::move(zero));
  }
}

void QhAdam::step() {
  for (Parameter* p : params_) {
    if (!p->grad.all_finite()) {
      throw std::runtime_error("qhadam: non-finite gradient for parameter '" + p->name + "'");
    }
  }

  t_ += 1;
  double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    std::span<double> theta = params_[k]->value.flat();
    std::span<const double> g = params_[k]->grad.flat();
    std::span<double> m = m_[k].flat();
    std::span<double> v = v_[k].flat();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
      double m_hat = m[i] / bc1;
      double v_hat = v[i] / bc2;
      double numer = (1.0 - config_.nu1) * g[i] + config_.nu1 * m_hat;
      double denom = std::sqrt((1.0 - config_.nu2) * g[i] * g[i] + config_.nu2 * v_hat);
      theta[i] -= config_.lr * numer / (denom + config_.eps);
    }
  }
}

void QhAdam::zero_grad() {
  for (Parameter* p : params_) p->zero_grad();
}

}  // namespace nodetab
