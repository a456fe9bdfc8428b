#pragma once

#include <cstddef>
#include <vector>

#include "nodetab/tape.hpp"
#include "nodetab/tensor.hpp"

namespace nodetab {

// Quasi-hyperbolic Adam hyperparameters. nu1 = nu2 = 1 reduces to Adam.
struct QhAdamConfig {
  double lr = 1e-3;
  double nu1 = 0.7;
  double nu2 = 1.0;
  double beta1 = 0.995;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const;
};

// QHAdam over a fixed parameter set. Moment buffers are bias-corrected; the
// update interpolates the raw gradient with the corrected moments:
//   theta -= lr * [(1-nu1) g + nu1 m_hat] / (sqrt((1-nu2) g^2 + nu2 v_hat) + eps)
class QhAdam {
 public:
  explicit QhAdam(std::vector<Parameter*> params, QhAdamConfig config = {});

  // Applies one update from the accumulated gradients. A non-finite gradient
  // aborts before any parameter changes, reporting the parameter name.
  void step();

  void zero_grad();
  std::size_t step_count() const { return t_; }
  const QhAdamConfig& config() const { return config_; }

 private:
  std::vector<Parameter*> params_;
  QhAdamConfig config_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::size_t t_ = 0;
};

}  // namespace nodetab
