#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "peftkit/tensor.hpp"

namespace peftkit {

/// Block-wise symmetric signed int4 weights. Blocks run over the flattened
/// row-major element order; each block carries one float scale with
/// scale = absmax / 7, so codes stay in [-7, +7] and code -8 is never used.
///
/// Packed layout (part of the checkpoint format, bit-exact): element 2i in
/// the low nibble, element 2i+1 in the high nibble, nibbles are
/// two's-complement; scales follow as little-endian 32-bit floats.
struct QuantizedMatrix {
    size_t rows = 0;
    size_t cols = 0;
    size_t block_size = 64;
    std::vector<uint8_t> codes;
    std::vector<float> scales;

    size_t num_elements() const { return rows * cols; }
    size_t num_blocks() const {
        return block_size == 0 ? 0 : (num_elements() + block_size - 1) / block_size;
    }

    int code_at(size_t flat) const {
        const uint8_t byte = codes[flat / 2];
        const uint8_t nib = (flat % 2 == 0) ? (byte & 0x0F) : (byte >> 4);
        return nib >= 8 ? static_cast<int>(nib) - 16 : static_cast<int>(nib);
    }

    float value_at(size_t flat) const {
        return static_cast<float>(code_at(flat)) * scales[flat / block_size];
    }

    // Bytes occupied by codes plus scales; the scale portion is the
    // overhead term of the size model.
    uint64_t packed_bytes() const {
        return static_cast<uint64_t>(codes.size()) + static_cast<uint64_t>(scales.size()) * 4;
    }
};

QuantizedMatrix quantize_4bit(const Tensor& w, size_t block_size = 64);
Tensor dequantize(const QuantizedMatrix& q);

/// q * x, equal to matmul(dequantize(q), x) without materializing the
/// dequantized matrix. Gradients flow to x only; the quantized weights are
/// frozen by construction.
Tensor qmatmul(const std::shared_ptr<const QuantizedMatrix>& q, const Tensor& x);
Tensor qmatmul(const QuantizedMatrix& q, const Tensor& x);

/// x * q, the row-activation orientation used inside the transformer.
Tensor qmatmul_rows(const Tensor& x, const std::shared_ptr<const QuantizedMatrix>& q);
Tensor qmatmul_rows(const Tensor& x, const QuantizedMatrix& q);

/// Byte accounting: size = datatype_bits * num_weights / 8 + overhead.
/// A bit total not divisible by 8 rounds up to the next whole byte.
struct SizeModel {
    uint64_t datatype_bits = 0;
    uint64_t num_weights = 0;
    uint64_t overhead_bytes = 0;

    uint64_t total_bytes() const;
};

uint64_t model_size_bytes(uint64_t datatype_bits, uint64_t num_weights,
                          uint64_t overhead_bytes);

}  // namespace peftkit
