#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace ifsr {

/// Row-major dense matrix of doubles. The only container the heads need;
/// parameter blocks, features and gradients all live in these.
struct Mat {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> v;

    Mat() = default;
    Mat(std::size_t r, std::size_t c) : rows(r), cols(c), v(r * c, 0.0) {}

    double* row(std::size_t r) { return v.data() + r * cols; }
    const double* row(std::size_t r) const { return v.data() + r * cols; }

    double& at(std::size_t r, std::size_t c) { return v[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return v[r * cols + c]; }

    std::size_t size() const { return v.size(); }
    void fill(double x) { std::fill(v.begin(), v.end(), x); }

    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
};

/// Feature vector of a proposal. Invariant: fixed length D per experiment,
/// finite entries, trailing entry is the constant 1 used as bias channel.
using Feature = std::vector<double>;

/// A referenced input file (checkpoint, dataset) is missing or unreadable.
struct MissingArtifact : std::runtime_error {
    explicit MissingArtifact(const std::string& what) : std::runtime_error(what) {}
};

/// Training produced a non-finite loss or gradient.
struct NumericalError : std::runtime_error {
    explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

[[noreturn]] inline void fail(const std::string& what) {
    throw std::runtime_error(what);
}

inline void require(bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument(what);
}

/// FNV-1a 64-bit. Used for content hashes in manifests/fingerprints and for
/// deriving per-(scene, box) noise streams.
inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t seed = 14695981039346656037ull) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

inline std::uint64_t hash_combine(std::uint64_t h, std::uint64_t x) {
    return fnv1a64(&x, sizeof(x), h);
}

inline std::uint64_t hash_double_bits(std::uint64_t h, double d) {
    std::uint64_t bits;
    static_assert(sizeof(bits) == sizeof(d));
    __builtin_memcpy(&bits, &d, sizeof(bits));
    return hash_combine(h, bits);
}

}  // namespace ifsr
