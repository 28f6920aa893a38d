// Copyright (c) 2026 tinymoe contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <vector>

#include "tinymoe/common.hpp"
#include "tinymoe/rng.hpp"

namespace tinymoe {

/// Dense n-dimensional value, row-major flat storage, explicit shape.
/// `grad`, when non-empty, has the same length as `data`.
template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), data(size_t(numel(shape)), T(0)) {}
    Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        check<ShapeError>(int64_t(data.size()) == numel(shape),
                          "tensor data length does not match shape " + shape_str(shape));
    }

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }

    static Tensor full(Shape s, T v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    static Tensor scalar(T v) { return Tensor({}, {v}); }

    int64_t size() const { return int64_t(data.size()); }
    int64_t rank() const { return int64_t(shape.size()); }

    bool finite() const {
        for (T v : data)
            if (!std::isfinite(double(v))) return false;
        return true;
    }

    void alloc_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
};

template <typename T>
Tensor<T> random_normal(Shape s, double std_dev, RngStream& rng) {
    Tensor<T> t(std::move(s));
    for (auto& v : t.data) v = T(rng.next_normal() * std_dev);
    return t;
}

template <typename T>
Tensor<T> random_trunc_normal(Shape s, double std_dev, double cutoff, RngStream& rng) {
    Tensor<T> t(std::move(s));
    for (auto& v : t.data) v = T(rng.next_trunc_normal(std_dev, cutoff));
    return t;
}

// ---------------------------------------------------------------------------
// Wire format: little-endian, u32 rank, u32 dims[rank], f32 data.
// Used by the checkpoint format; round-trips bit-exactly for 32-bit tensors.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw IoError("unexpected end of tensor stream");
    return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) | (uint32_t(b[3]) << 24);
}

inline void put_f32(std::ostream& os, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(os, bits);
}

inline float get_f32(std::istream& is) {
    uint32_t bits = get_u32(is);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

} // namespace detail

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
    detail::put_u32(os, uint32_t(t.shape.size()));
    for (int64_t d : t.shape) {
        check<IoError>(d >= 0 && d <= int64_t(UINT32_MAX), "tensor dim out of wire range");
        detail::put_u32(os, uint32_t(d));
    }
    for (T v : t.data) detail::put_f32(os, float(v));
    if (!os) throw IoError("failed writing tensor");
}

template <typename T>
Tensor<T> read_tensor(std::istream& is) {
    uint32_t rank = detail::get_u32(is);
    check<IoError>(rank <= 8, "tensor rank out of range in stream");
    Shape shape(rank);
    for (uint32_t i = 0; i < rank; ++i) shape[i] = int64_t(detail::get_u32(is));
    Tensor<T> t(std::move(shape));
    for (auto& v : t.data) v = T(detail::get_f32(is));
    return t;
}

/// Serialized byte count for a tensor of this shape.
inline int64_t tensor_wire_bytes(const Shape& shape) {
    return 4 + 4 * int64_t(shape.size()) + 4 * numel(shape);
}

} // namespace tinymoe
