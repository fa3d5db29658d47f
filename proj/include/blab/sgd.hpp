#pragma once

#include <vector>

#include "blab/tensor.hpp"

namespace blab {

// SGD with momentum; weight decay enters as an additive gradient term:
//   v <- momentum * v + g + decay * p
//   p <- p - lr * v
class Sgd {
 public:
  Sgd(const std::vector<Tensor*>& params, double momentum = 0.9,
      double weight_decay = 5e-4);

  // grads aligned with params; a null gradient for a registered parameter is
  // fatal.
  void step(const std::vector<Tensor*>& params,
            const std::vector<const Tensor*>& grads, double lr);

  double momentum() const { return momentum_; }
  double weight_decay() const { return weight_decay_; }
  const std::vector<Tensor>& velocity() const { return velocity_; }

 private:
  std::vector<Tensor> velocity_;
  double momentum_;
  double weight_decay_;
};

// Learning rate for a 1-based epoch under a step schedule: the initial rate
// multiplied by `factor` once for every drop epoch already passed.
double scheduled_lr(double initial, const std::vector<int>& drop_epochs, double factor,
                    int epoch);

}  // namespace blab
