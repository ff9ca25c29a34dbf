#ifndef JOINTAD_OPTIM_HPP
#define JOINTAD_OPTIM_HPP

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "jointad/tensor.hpp"

namespace jointad::optim {

// A named view over the tensors one optimizer updates, with matching
// gradient accumulators.
template <typename T>
struct ParamGroup {
  std::vector<std::string> names;
  std::vector<Tensor<T>*> params;
  std::vector<Tensor<T>> grads;

  void add(const std::string& name, Tensor<T>* p) {
    names.push_back(name);
    params.push_back(p);
    grads.emplace_back(p->shape);
  }

  void zero_grads() {
    for (auto& g : grads) g.fill(T(0));
  }

  std::size_t size() const { return params.size(); }
};

// Adaptive moment estimation with bias correction; weight decay 0.
template <typename T>
class Adam {
 public:
  Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParamGroup<T>& group, double lr) {
    if (m_.empty()) {
      for (auto* p : group.params) {
        m_.emplace_back(p->shape);
        v_.emplace_back(p->shape);
      }
    }
    if (m_.size() != group.size()) throw std::invalid_argument("adam: group size changed");
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, t_);
    double bc2 = 1.0 - std::pow(beta2_, t_);
    for (std::size_t i = 0; i < group.size(); ++i) {
      Tensor<T>& p = *group.params[i];
      const Tensor<T>& g = group.grads[i];
      Tensor<T>& m = m_[i];
      Tensor<T>& v = v_[i];
      for (std::size_t j = 0; j < p.size(); ++j) {
        double gj = g.v[j];
        double mj = beta1_ * m.v[j] + (1.0 - beta1_) * gj;
        double vj = beta2_ * v.v[j] + (1.0 - beta2_) * gj * gj;
        m.v[j] = static_cast<T>(mj);
        v.v[j] = static_cast<T>(vj);
        p.v[j] -= static_cast<T>(lr * (mj / bc1) / (std::sqrt(vj / bc2) + eps_));
      }
    }
  }

  int steps() const { return t_; }

 private:
  double beta1_, beta2_, eps_;
  int t_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

}  // namespace jointad::optim

#endif  // JOINTAD_OPTIM_HPP
