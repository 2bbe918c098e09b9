#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "affground/autodiff.hpp"
#include "affground/rng.hpp"
#include "affground/tensor.hpp"

namespace affground {

// Named learnable parameters in registration order. Order is the contract for
// optimizer state and checkpoint layout.
class ParamStore {
  public:
    ag::NodePtr add(const std::string& name, Tensor init) {
        if (index_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
        auto node = ag::leaf(std::move(init), name);
        index_[name] = params_.size();
        params_.push_back(node);
        return node;
    }

    const ag::NodePtr& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
        return params_[it->second];
    }

    bool has(const std::string& name) const { return index_.count(name) > 0; }

    const std::vector<ag::NodePtr>& all() const { return params_; }
    std::size_t size() const { return params_.size(); }

    std::int64_t total_scalars() const {
        std::int64_t n = 0;
        for (const auto& p : params_) n += p->value.numel();
        return n;
    }

  private:
    std::vector<ag::NodePtr> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

// fan-in-scaled uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)]
inline Tensor uniform_init(Rng& rng, std::vector<int> shape, int fan_in) {
    Tensor t(std::move(shape));
    double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (double& v : t.data) v = rng.real(-bound, bound);
    return t;
}

}  // namespace affground
