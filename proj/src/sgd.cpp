#include "blab/sgd.hpp"

namespace blab {

Sgd::Sgd(const std::vector<Tensor*>& params, double momentum, double weight_decay)
    : momentum_(momentum), weight_decay_(weight_decay) {
  velocity_.reserve(params.size());
  for (const Tensor* p : params) velocity_.push_back(Tensor::zeros(p->shape()));
}

void Sgd::step(const std::vector<Tensor*>& params,
               const std::vector<const Tensor*>& grads, double lr) {
  if (params.size() != velocity_.size() || grads.size() != velocity_.size())
    fail("Sgd::step: parameter/gradient count mismatch");
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor* g = grads[i];
    if (g == nullptr) fail("Sgd::step: missing gradient for registered parameter");
    if (!g->same_shape(p)) fail("Sgd::step: gradient shape mismatch");
    Tensor& v = velocity_[i];
    for (int j = 0; j < p.numel(); ++j) {
      v[j] = momentum_ * v[j] + (*g)[j] + weight_decay_ * p[j];
      p[j] -= lr * v[j];
    }
  }
}

double scheduled_lr(double initial, const std::vector<int>& drop_epochs, double factor,
                    int epoch) {
  double lr = initial;
  for (int d : drop_epochs)
    if (epoch > d) lr *= factor;
  return lr;
}

}  // namespace blab
