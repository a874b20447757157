#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace appau {

/// Shape of a rank-4 array laid out NCHW, row-major (w fastest).
/// Lower-rank data uses size-1 axes; a scalar is (1,1,1,1).
struct Shape {
    int n = 1;
    int c = 1;
    int h = 1;
    int w = 1;

    Shape() = default;
    Shape(int n_, int c_, int h_, int w_) : n(n_), c(c_), h(h_), w(w_) {}

    std::int64_t size() const {
        return static_cast<std::int64_t>(n) * c * h * w;
    }
    bool operator==(const Shape& o) const {
        return n == o.n && c == o.c && h == o.h && w == o.w;
    }
    bool operator!=(const Shape& o) const { return !(*this == o); }

    std::string str() const {
        std::ostringstream os;
        os << "(" << n << "," << c << "," << h << "," << w << ")";
        return os.str();
    }
};

/// Dense rank-4 tensor. Plain value type: copy copies the buffer.
template <typename S>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, S fill = S(0))
        : shape_(shape), v_(static_cast<std::size_t>(shape.size()), fill) {
        if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) {
            throw std::invalid_argument("Tensor: negative dimension " + shape.str());
        }
    }
    Tensor(Shape shape, std::vector<S> values) : shape_(shape), v_(std::move(values)) {
        if (static_cast<std::int64_t>(v_.size()) != shape.size()) {
            throw std::invalid_argument("Tensor: value count does not match shape " + shape.str());
        }
    }

    static Tensor zeros(Shape s) { return Tensor(s, S(0)); }
    static Tensor ones(Shape s) { return Tensor(s, S(1)); }
    static Tensor scalar(S value) { return Tensor(Shape(1, 1, 1, 1), std::vector<S>{value}); }

    const Shape& shape() const { return shape_; }
    std::size_t size() const { return v_.size(); }
    bool empty() const { return v_.empty(); }

    S* data() { return v_.data(); }
    const S* data() const { return v_.data(); }
    std::vector<S>& vec() { return v_; }
    const std::vector<S>& vec() const { return v_; }

    S& operator[](std::size_t i) { return v_[i]; }
    const S& operator[](std::size_t i) const { return v_[i]; }

    S& at(int n, int c, int h, int w) { return v_[index(n, c, h, w)]; }
    const S& at(int n, int c, int h, int w) const { return v_[index(n, c, h, w)]; }

    std::size_t index(int n, int c, int h, int w) const {
        return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) * shape_.w + w;
    }

    void fill(S value) { std::fill(v_.begin(), v_.end(), value); }

    bool all_finite() const {
        for (const S& x : v_) {
            if (!std::isfinite(static_cast<double>(x))) return false;
        }
        return true;
    }

    template <typename T>
    Tensor<T> cast() const {
        Tensor<T> out(shape_);
        for (std::size_t i = 0; i < v_.size(); ++i) out[i] = static_cast<T>(v_[i]);
        return out;
    }

private:
    Shape shape_;
    std::vector<S> v_;
};

/// FNV-1a over raw bytes; used for determinism checks on parameters and datasets.
inline std::uint64_t fnv1a(const void* bytes, std::size_t len, std::uint64_t seed = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

template <typename S>
std::uint64_t tensor_hash(const Tensor<S>& t, std::uint64_t seed = 0xcbf29ce484222325ull) {
    return fnv1a(t.data(), t.size() * sizeof(S), seed);
}

namespace detail {

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

template <typename S>
void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* who) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(who) + ": shape mismatch " + a.shape().str() +
                                    " vs " + b.shape().str());
    }
}

}  // namespace detail

}  // namespace appau
