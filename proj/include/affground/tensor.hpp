#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace affground {

// Dense row-major tensor of doubles. All model math runs in 64-bit.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(count(shape), 0.0) {}
    Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<std::int64_t>(data.size()) != count(shape))
            throw std::invalid_argument("tensor data/shape mismatch");
    }

    static std::int64_t count(const std::vector<int>& s) {
        std::int64_t n = 1;
        for (int d : s) {
            if (d < 0) throw std::invalid_argument("negative tensor dim");
            n *= d;
        }
        return n;
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<int> s, double v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }
    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    int ndim() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }

    double* ptr() { return data.data(); }
    const double* ptr() const { return data.data(); }

    double& at(std::initializer_list<int> idx) { return data[offset(idx)]; }
    double at(std::initializer_list<int> idx) const { return data[offset(idx)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    Tensor reshaped(std::vector<int> s) const {
        if (count(s) != numel()) throw std::invalid_argument("reshape numel mismatch");
        Tensor t;
        t.shape = std::move(s);
        t.data = data;
        return t;
    }

    std::string shape_str() const {
        std::string s = "(";
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape[i]);
        }
        return s + ")";
    }

  private:
    std::size_t offset(std::initializer_list<int> idx) const {
        if (idx.size() != shape.size()) throw std::invalid_argument("index rank mismatch");
        std::size_t off = 0;
        auto it = idx.begin();
        for (std::size_t i = 0; i < shape.size(); ++i, ++it) {
            off = off * static_cast<std::size_t>(shape[i]) + static_cast<std::size_t>(*it);
        }
        return off;
    }
};

}  // namespace affground
