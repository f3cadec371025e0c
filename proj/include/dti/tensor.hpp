#pragma once

#include <cassert>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace dti {

// Dense row-major float tensor. Small and dumb on purpose; all the math
// lives in the ops that consume it.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape, float fill = 0.f)
        : shape_(std::move(shape)), data_(numel_of(shape_), fill) {}
    Tensor(std::vector<int> shape, std::vector<float> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (static_cast<size_t>(numel_of(shape_)) != data_.size())
            throw std::invalid_argument("tensor: shape/data size mismatch");
    }

    static int64_t numel_of(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) n *= d;
        return n;
    }

    const std::vector<int>& shape() const { return shape_; }
    int dim(int i) const { return shape_[i < 0 ? shape_.size() + i : i]; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    float& operator[](int64_t i) { return data_[i]; }
    float operator[](int64_t i) const { return data_[i]; }

    void fill(float v) { std::fill(data_.begin(), data_.end(), v); }
    void reshape(std::vector<int> shape) {
        if (numel_of(shape) != numel()) throw std::invalid_argument("reshape: numel mismatch");
        shape_ = std::move(shape);
    }

    float sum() const { return std::accumulate(data_.begin(), data_.end(), 0.f); }
    float max_abs() const {
        float m = 0.f;
        for (float v : data_) m = std::max(m, std::abs(v));
        return m;
    }

    std::string shape_str() const {
        std::string s = "[";
        for (size_t i = 0; i < shape_.size(); ++i)
            s += (i ? "," : "") + std::to_string(shape_[i]);
        return s + "]";
    }

private:
    std::vector<int> shape_;
    std::vector<float> data_;
};

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

// Deterministic RNG helpers. All randomness in the project goes through
// mt19937_64 seeded explicitly by callers.
using Rng = std::mt19937_64;

inline Tensor randn(std::vector<int> shape, Rng& rng, float std_dev = 1.f) {
    Tensor t(std::move(shape));
    std::normal_distribution<float> d(0.f, std_dev);
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = d(rng);
    return t;
}

inline Tensor rand_uniform(std::vector<int> shape, Rng& rng, float lo = 0.f, float hi = 1.f) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<float> d(lo, hi);
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = d(rng);
    return t;
}

// Stable per-index substream: synthesis ops draw from hash(seed, index) so
// results are independent of evaluation order.
inline uint64_t mix_seed(uint64_t seed, uint64_t index) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace dti
