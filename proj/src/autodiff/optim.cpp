#include "nrp/optim.hpp"

#include <cmath>
#include <string>

namespace nrp {
namespace {

void check_pairs(std::span<Tensor> params, std::span<const Tensor> grads) {
  if (params.size() != grads.size())
    throw ShapeError("optimizer: " + std::to_string(params.size()) + " parameters but " +
                     std::to_string(grads.size()) + " gradients");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != grads[i].shape() || params[i].dtype() != grads[i].dtype())
      throw ShapeError("optimizer: gradient " + std::to_string(i) + " has shape " + shape_str(grads[i].shape()) +
                       ", parameter has " + shape_str(params[i].shape()));
  }
}

}  // namespace

void Adam::step(std::span<Tensor> params, std::span<const Tensor> grads) {
  check_pairs(params, grads);
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.push_back(Tensor::zeros(p.shape(), p.dtype()));
      v_.push_back(Tensor::zeros(p.shape(), p.dtype()));
    }
  }
  if (m_.size() != params.size()) throw ShapeError("optimizer: state was built for a different parameter list");
  ++t_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double corr1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double corr2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (m_[i].shape() != params[i].shape()) throw ShapeError("optimizer: state shape mismatch at parameter " + std::to_string(i));
    visit_dtype(params[i].dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto p = params[i].data<T>();
      auto g = grads[i].data<T>();
      auto m = m_[i].data<T>();
      auto v = v_[i].data<T>();
      std::vector<T> np(p.size()), nm(p.size()), nv(p.size());
      for (std::size_t k = 0; k < p.size(); ++k) {
        const double gk = g[k];
        const double mk = b1 * m[k] + (1.0 - b1) * gk;
        const double vk = b2 * v[k] + (1.0 - b2) * gk * gk;
        const double mhat = mk / corr1;
        const double vhat = vk / corr2;
        nm[k] = static_cast<T>(mk);
        nv[k] = static_cast<T>(vk);
        np[k] = static_cast<T>(p[k] - config_.lr * mhat / (std::sqrt(vhat) + config_.eps));
      }
      params[i] = Tensor(params[i].shape(), std::move(np));
      m_[i] = Tensor(m_[i].shape(), std::move(nm));
      v_[i] = Tensor(v_[i].shape(), std::move(nv));
      return 0;
    });
  }
}

void Sgd::step(std::span<Tensor> params, std::span<const Tensor> grads) const {
  check_pairs(params, grads);
  for (std::size_t i = 0; i < params.size(); ++i) {
    visit_dtype(params[i].dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto p = params[i].data<T>();
      auto g = grads[i].data<T>();
      std::vector<T> np(p.size());
      for (std::size_t k = 0; k < p.size(); ++k) np[k] = static_cast<T>(p[k] - lr_ * g[k]);
      params[i] = Tensor(params[i].shape(), std::move(np));
      return 0;
    });
  }
}

}  // namespace nrp
