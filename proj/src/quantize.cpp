#include "peftkit/quantize.hpp"

#include <cmath>

namespace peftkit {

QuantizedMatrix quantize_4bit(const Tensor& w, size_t block_size) {
    if (w.rank() != 2) {
        throw DimensionError("quantize_4bit requires a 2-D tensor, got " +
                             detail::shape_str(w.shape()));
    }
    if (block_size < 1) throw UsageError("quantize_4bit block_size must be >= 1");
    for (float v : w.data()) {
        if (!std::isfinite(v)) throw NumericError("quantize_4bit input is not finite");
    }

    QuantizedMatrix q;
    q.rows = w.rows();
    q.cols = w.cols();
    q.block_size = block_size;
    const size_t n = q.num_elements();
    q.codes.assign((n + 1) / 2, 0);
    q.scales.assign(q.num_blocks(), 0.0f);

    for (size_t b = 0; b < q.num_blocks(); ++b) {
        const size_t begin = b * block_size;
        const size_t end = std::min(begin + block_size, n);
        float absmax = 0.0f;
        for (size_t i = begin; i < end; ++i) absmax = std::max(absmax, std::fabs(w.data()[i]));
        if (absmax == 0.0f) continue;  // all-zero block: scale 0, codes 0
        const float scale = absmax / 7.0f;
        q.scales[b] = scale;
        for (size_t i = begin; i < end; ++i) {
            // round half away from zero, then clamp to the symmetric grid
            int code = static_cast<int>(std::round(w.data()[i] / scale));
            code = std::clamp(code, -7, 7);
            const uint8_t nib = static_cast<uint8_t>(code) & 0x0F;
            if (i % 2 == 0) {
                q.codes[i / 2] = static_cast<uint8_t>((q.codes[i / 2] & 0xF0) | nib);
            } else {
                q.codes[i / 2] = static_cast<uint8_t>((q.codes[i / 2] & 0x0F) | (nib << 4));
            }
        }
    }
    return q;
}

Tensor dequantize(const QuantizedMatrix& q) {
    Tensor out({q.rows, q.cols});
    const size_t n = q.num_elements();
    for (size_t i = 0; i < n; ++i) out.mutable_data()[i] = q.value_at(i);
    return out;
}

Tensor qmatmul(const std::shared_ptr<const QuantizedMatrix>& q, const Tensor& x) {
    if (x.rank() != 2 || q->cols != x.rows()) {
        throw DimensionError("qmatmul shape mismatch: [" + std::to_string(q->rows) + "x" +
                             std::to_string(q->cols) + "] x " + detail::shape_str(x.shape()));
    }
    const size_t m = q->rows, k = q->cols, n = x.cols();
    detail::g_mac_count += static_cast<uint64_t>(m) * k * n;

    Tensor out({m, n});
    std::vector<float> row(k);
    for (size_t i = 0; i < m; ++i) {
        for (size_t p = 0; p < k; ++p) row[p] = q->value_at(i * k + p);
        for (size_t p = 0; p < k; ++p) {
            const float w = row[p];
            if (w == 0.0f) continue;
            const float* xrow = x.data().data() + p * n;
            float* orow = out.mutable_data().data() + i * n;
            for (size_t j = 0; j < n; ++j) orow[j] += w * xrow[j];
        }
    }

    auto xn = x.node(), on = out.node();
    detail::maybe_record(out, {x}, [q, xn, on, m, k, n]() {
        // grad_x += deq(q)^T * g, one decoded row at a time
        detail::ensure_grad(xn);
        const auto& g = *on->grad;
        std::vector<float> row(k);
        for (size_t i = 0; i < m; ++i) {
            for (size_t p = 0; p < k; ++p) row[p] = q->value_at(i * k + p);
            const float* grow = g.data() + i * n;
            for (size_t p = 0; p < k; ++p) {
                const float w = row[p];
                if (w == 0.0f) continue;
                float* xg = xn->grad->data() + p * n;
                for (size_t j = 0; j < n; ++j) xg[j] += w * grow[j];
            }
        }
    });
    return out;
}

Tensor qmatmul(const QuantizedMatrix& q, const Tensor& x) {
    return qmatmul(std::make_shared<const QuantizedMatrix>(q), x);
}

Tensor qmatmul_rows(const Tensor& x, const std::shared_ptr<const QuantizedMatrix>& q) {
    if (x.rank() != 2 || x.cols() != q->rows) {
        throw DimensionError("qmatmul_rows shape mismatch: " + detail::shape_str(x.shape()) +
                             " x [" + std::to_string(q->rows) + "x" + std::to_string(q->cols) +
                             "]");
    }
    const size_t m = x.rows(), k = x.cols(), n = q->cols;
    detail::g_mac_count += static_cast<uint64_t>(m) * k * n;

    Tensor out({m, n});
    std::vector<float> wrow(n);
    for (size_t p = 0; p < k; ++p) {
        for (size_t j = 0; j < n; ++j) wrow[j] = q->value_at(p * n + j);
        for (size_t i = 0; i < m; ++i) {
            const float xv = x.data()[i * k + p];
            if (xv == 0.0f) continue;
            float* orow = out.mutable_data().data() + i * n;
            for (size_t j = 0; j < n; ++j) orow[j] += xv * wrow[j];
        }
    }

    auto xn = x.node(), on = out.node();
    detail::maybe_record(out, {x}, [q, xn, on, m, k, n]() {
        // grad_x[i,p] = dot(g[i,:], deq(q)[p,:])
        detail::ensure_grad(xn);
        const auto& g = *on->grad;
        std::vector<float> wrow(n);
        for (size_t p = 0; p < k; ++p) {
            for (size_t j = 0; j < n; ++j) wrow[j] = q->value_at(p * n + j);
            for (size_t i = 0; i < m; ++i) {
                const float* grow = g.data() + i * n;
                float acc = 0.0f;
                for (size_t j = 0; j < n; ++j) acc += grow[j] * wrow[j];
                (*xn->grad)[i * k + p] += acc;
            }
        }
    });
    return out;
}

Tensor qmatmul_rows(const Tensor& x, const QuantizedMatrix& q) {
    return qmatmul_rows(x, std::make_shared<const QuantizedMatrix>(q));
}

uint64_t SizeModel::total_bytes() const {
    return model_size_bytes(datatype_bits, num_weights, overhead_bytes);
}

uint64_t model_size_bytes(uint64_t datatype_bits, uint64_t num_weights,
                          uint64_t overhead_bytes) {
    const uint64_t bits = datatype_bits * num_weights;
    return (bits + 7) / 8 + overhead_bytes;
}

}  // namespace peftkit
