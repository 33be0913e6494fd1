/*
 * Binarized inference runtime: XNOR-popcount dot products, fused
 * threshold activations, and a two-buffer arena walked by predict.
 *
 * The only hard dependency is <stdint.h>.  When a model keeps raw batch-norm
 * parameters instead of folded thresholds (an audit configuration), <math.h>
 * is also required for sqrtf; define EBNN_RAW_BN to enable that path.
 *
 * Bit conventions match the Python engine exactly:
 *   - weights and activations are packed LSB-first, one byte-aligned row per
 *     (filter, channel) pair or image row, pad bits zero;
 *   - a set bit encodes +1, a clear bit encodes -1;
 *   - dot(a, b) over n bits is n - 2 * popcount(a XOR b);
 *   - a channel fires when acc >= tau, or acc <= tau when the fold flipped.
 *
 * Iteration order is fixed so outputs are reproducible bit for bit:
 * filter-major, then output rows top to bottom, then columns left to right,
 * with pooled windows scanned row-major and compared with strict >.
 */
#ifndef EBNN_RUNTIME_H
#define EBNN_RUNTIME_H

#include <stdint.h>

#ifdef EBNN_RAW_BN
#include <math.h>
#endif

#define EBNN_VARIANT_FC 1
#define EBNN_VARIANT_CONV 2
#define EBNN_VARIANT_CONV_POOL 3

/*
 * One fused block.  Plain convolutions use pool = pool_stride = 1 so a
 * single executor covers both convolution variants.  For fully connected
 * blocks the output shape is (1, 1, units) and kernel/stride/pool are 0.
 *
 * Exactly one of (tau, flip) or bn must be set.  bn holds five floats per
 * output channel -- gamma, beta, mean, variance, epsilon -- and the
 * threshold is recomputed from them on every call.
 */
typedef struct {
    uint8_t variant;
    uint8_t real_in; /* first block may consume float input */
    uint32_t in_c;
    uint32_t in_h;
    uint32_t in_w;
    uint32_t out_c;
    uint32_t out_h;
    uint32_t out_w;
    uint32_t kernel;
    uint32_t stride;
    uint32_t pool;
    uint32_t pool_stride;
    uint32_t in_length; /* in_c * in_h * in_w, used by fc blocks */
    const uint8_t *weights;
    const float *tau;
    const uint8_t *flip;
    const float *bn;
} ebnn_block;

#ifndef EBNN_USE_BUILTIN_POPCOUNT
static const uint8_t ebnn_popcount_table[256] = {
    0, 1, 1, 2, 1, 2, 2, 3, 1, 2, 2, 3, 2, 3, 3, 4,
    1, 2, 2, 3, 2, 3, 3, 4, 2, 3, 3, 4, 3, 4, 4, 5,
    1, 2, 2, 3, 2, 3, 3, 4, 2, 3, 3, 4, 3, 4, 4, 5,
    2, 3, 3, 4, 3, 4, 4, 5, 3, 4, 4, 5, 4, 5, 5, 6,
    1, 2, 2, 3, 2, 3, 3, 4, 2, 3, 3, 4, 3, 4, 4, 5,
    2, 3, 3, 4, 3, 4, 4, 5, 3, 4, 4, 5, 4, 5, 5, 6,
    2, 3, 3, 4, 3, 4, 4, 5, 3, 4, 4, 5, 4, 5, 5, 6,
    3, 4, 4, 5, 4, 5, 5, 6, 4, 5, 5, 6, 5, 6, 6, 7,
    1, 2, 2, 3, 2, 3, 3, 4, 2, 3, 3, 4, 3, 4, 4, 5,
    2, 3, 3, 4, 3, 4, 4, 5, 3, 4, 4, 5, 4, 5, 5, 6,
    2, 3, 3, 4, 3, 4, 4, 5, 3, 4, 4, 5, 4, 5, 5, 6,
    3, 4, 4, 5, 4, 5, 5, 6, 4, 5, 5, 6, 5, 6, 6, 7,
    2, 3, 3, 4, 3, 4, 4, 5, 3, 4, 4, 5, 4, 5, 5, 6,
    3, 4, 4, 5, 4, 5, 5, 6, 4, 5, 5, 6, 5, 6, 6, 7,
    3, 4, 4, 5, 4, 5, 5, 6, 4, 5, 5, 6, 5, 6, 6, 7,
    4, 5, 5, 6, 5, 6, 6, 7, 5, 6, 6, 7, 6, 7, 7, 8,
};
#endif

static inline int ebnn_popcount32(uint32_t x)
{
#ifdef EBNN_USE_BUILTIN_POPCOUNT
    return __builtin_popcount(x);
#else
    return ebnn_popcount_table[x & 0xFFu]
        + ebnn_popcount_table[(x >> 8) & 0xFFu]
        + ebnn_popcount_table[(x >> 16) & 0xFFu]
        + ebnn_popcount_table[(x >> 24) & 0xFFu];
#endif
}

static inline int ebnn_popcount16(uint32_t x)
{
    return ebnn_popcount32(x & 0xFFFFu);
}

/*
 * Gather n bits (1..16) starting at bit offset `bit` from an LSB-first byte
 * stream.  Reads exactly the bytes containing bits [bit, bit + n), never
 * past them, so callers need no guard bytes as long as the requested bits
 * exist.
 */
static inline uint32_t ebnn_load_bits(const uint8_t *bytes, uint32_t bit,
                                      uint32_t n)
{
    const uint8_t *p = bytes + (bit >> 3);
    uint32_t shift = bit & 7u;
    uint32_t acc = (uint32_t)(*p >> shift);
    uint32_t got = 8u - shift;
    while (got < n) {
        p++;
        acc |= (uint32_t)*p << got;
        got += 8u;
    }
    return acc & ((1u << n) - 1u);
}

static inline int ebnn_weight_bit(const uint8_t *row, uint32_t bit)
{
    return (row[bit >> 3] >> (bit & 7u)) & 1;
}

/* Number of bytes in one packed row of `width` bits. */
static inline uint32_t ebnn_row_bytes(uint32_t width)
{
    return (width + 7u) >> 3;
}

static inline uint32_t ebnn_output_bytes(const ebnn_block *b)
{
    return b->out_c * b->out_h * ebnn_row_bytes(b->out_w);
}

/*
 * Threshold fold: tau = mean - beta * sqrt(var + epsilon) / gamma, with the
 * comparison direction flipped when gamma is negative.  Each assignment
 * narrows to float, matching the reference fold step for step.
 */
static inline float ebnn_fold_tau(float gamma, float beta, float mean,
                                  float var, float epsilon, int *flip)
{
#ifdef EBNN_RAW_BN
    float t = var + epsilon;
    float dev = sqrtf(t);
    float num = beta * dev;
    float q = num / gamma;
    float tau = mean - q;
    *flip = gamma < 0.0f;
    return tau;
#else
    /* Folded models never call this; keep the symbol well defined. */
    (void)gamma;
    (void)beta;
    (void)mean;
    (void)var;
    (void)epsilon;
    *flip = 0;
    return 0.0f;
#endif
}

static inline void ebnn_channel_threshold(const ebnn_block *b,
                                          uint32_t channel, float *tau,
                                          int *flip)
{
    if (b->bn) {
        const float *p = b->bn + 5u * channel;
        *tau = ebnn_fold_tau(p[0], p[1], p[2], p[3], p[4], flip);
    } else {
        *tau = b->tau[channel];
        *flip = b->flip[channel];
    }
}

static inline int ebnn_fires(float acc, float tau, int flip)
{
    return flip ? (acc <= tau) : (acc >= tau);
}

/* XNOR-popcount dot of one fc unit against a packed activation tensor. */
static inline int32_t ebnn_fc_dot_bits(const ebnn_block *b,
                                       const uint8_t *src, uint32_t unit)
{
    uint32_t in_stride = ebnn_row_bytes(b->in_w);
    uint32_t w_stride = ebnn_row_bytes(b->in_length);
    const uint8_t *wrow = b->weights + unit * w_stride;
    uint32_t rows = b->in_c * b->in_h;
    uint32_t wbit = 0;
    int32_t pc = 0;
    uint32_t r;
    for (r = 0; r < rows; r++) {
        const uint8_t *irow = src + r * in_stride;
        uint32_t rem = b->in_w;
        uint32_t ib = 0;
        while (rem > 0) {
            uint32_t n = rem < 8u ? rem : 8u;
            uint32_t wbits = ebnn_load_bits(wrow, wbit, n);
            /* Row pad bits are zero, so the unmasked byte is safe. */
            pc += ebnn_popcount32((uint32_t)irow[ib] ^ wbits);
            wbit += n;
            ib++;
            rem -= n;
        }
    }
    return (int32_t)b->in_length - 2 * pc;
}

static inline float ebnn_fc_dot_real(const ebnn_block *b, const float *x,
                                     uint32_t unit)
{
    uint32_t w_stride = ebnn_row_bytes(b->in_length);
    const uint8_t *wrow = b->weights + unit * w_stride;
    double acc = 0.0;
    uint32_t i;
    for (i = 0; i < b->in_length; i++) {
        acc += ebnn_weight_bit(wrow, i) ? (double)x[i] : -(double)x[i];
    }
    return (float)acc;
}

/* One convolution placement: filter f over the window at (oy, ox). */
static inline int32_t ebnn_conv_dot_bits(const ebnn_block *b,
                                         const uint8_t *src, uint32_t f,
                                         uint32_t oy, uint32_t ox)
{
    uint32_t in_stride = ebnn_row_bytes(b->in_w);
    uint32_t w_stride = ebnn_row_bytes(b->kernel * b->kernel);
    uint32_t y0 = oy * b->stride;
    uint32_t x0 = ox * b->stride;
    int32_t pc = 0;
    uint32_t c;
    for (c = 0; c < b->in_c; c++) {
        const uint8_t *wrow = b->weights + (f * b->in_c + c) * w_stride;
        uint32_t ky;
        for (ky = 0; ky < b->kernel; ky++) {
            const uint8_t *irow = src + (c * b->in_h + y0 + ky) * in_stride;
            uint32_t ibits = ebnn_load_bits(irow, x0, b->kernel);
            uint32_t wbits = ebnn_load_bits(wrow, ky * b->kernel, b->kernel);
            pc += ebnn_popcount32(ibits ^ wbits);
        }
    }
    return (int32_t)(b->in_c * b->kernel * b->kernel) - 2 * pc;
}

static inline float ebnn_conv_dot_real(const ebnn_block *b, const float *x,
                                       uint32_t f, uint32_t oy, uint32_t ox)
{
    uint32_t w_stride = ebnn_row_bytes(b->kernel * b->kernel);
    uint32_t y0 = oy * b->stride;
    uint32_t x0 = ox * b->stride;
    double acc = 0.0;
    uint32_t c;
    for (c = 0; c < b->in_c; c++) {
        const uint8_t *wrow = b->weights + (f * b->in_c + c) * w_stride;
        uint32_t ky;
        for (ky = 0; ky < b->kernel; ky++) {
            const float *irow = x + (c * b->in_h + y0 + ky) * b->in_w + x0;
            uint32_t kx;
            for (kx = 0; kx < b->kernel; kx++) {
                /* float -> double is exact, so the sum order is the only
                 * rounding concern and it matches the Python engine. */
                acc += ebnn_weight_bit(wrow, ky * b->kernel + kx)
                           ? (double)irow[kx]
                           : -(double)irow[kx];
            }
        }
    }
    return (float)acc;
}

/*
 * Run one block from src (packed bits, or floats when b->real_in) into dst.
 * For the final block, scores receives every pre-threshold accumulator.
 * last_acc always tracks the most recent accumulator computed.
 */
static inline void ebnn_run_block(const ebnn_block *b, const void *src,
                                  uint8_t *dst, float *scores,
                                  float *last_acc)
{
    const uint8_t *sbits = (const uint8_t *)src;
    const float *sreal = (const float *)src;
    uint32_t out_stride = ebnn_row_bytes(b->out_w);
    uint32_t total = ebnn_output_bytes(b);
    uint32_t i;
    for (i = 0; i < total; i++) {
        dst[i] = 0;
    }
    if (b->variant == EBNN_VARIANT_FC) {
        uint32_t u;
        for (u = 0; u < b->out_w; u++) {
            float tau;
            int flip;
            float acc = b->real_in ? ebnn_fc_dot_real(b, sreal, u)
                                   : (float)ebnn_fc_dot_bits(b, sbits, u);
            ebnn_channel_threshold(b, u, &tau, &flip);
            if (scores) {
                scores[u] = acc;
            }
            *last_acc = acc;
            if (ebnn_fires(acc, tau, flip)) {
                dst[u >> 3] |= (uint8_t)(1u << (u & 7u));
            }
        }
        return;
    }
    {
        uint32_t f;
        for (f = 0; f < b->out_c; f++) {
            float tau;
            int flip;
            uint32_t py;
            ebnn_channel_threshold(b, f, &tau, &flip);
            for (py = 0; py < b->out_h; py++) {
                uint8_t *orow = dst + (f * b->out_h + py) * out_stride;
                uint32_t px;
                for (px = 0; px < b->out_w; px++) {
                    int fired;
                    if (b->real_in) {
                        float best = 0.0f;
                        int first = 1;
                        uint32_t wy;
                        for (wy = 0; wy < b->pool; wy++) {
                            uint32_t wx;
                            for (wx = 0; wx < b->pool; wx++) {
                                float z = ebnn_conv_dot_real(
                                    b, sreal, f, py * b->pool_stride + wy,
                                    px * b->pool_stride + wx);
                                if (first || z > best) {
                                    best = z;
                                    first = 0;
                                }
                            }
                        }
                        *last_acc = best;
                        fired = ebnn_fires(best, tau, flip);
                    } else {
                        int32_t best = 0;
                        int first = 1;
                        uint32_t wy;
                        for (wy = 0; wy < b->pool; wy++) {
                            uint32_t wx;
                            for (wx = 0; wx < b->pool; wx++) {
                                int32_t z = ebnn_conv_dot_bits(
                                    b, sbits, f, py * b->pool_stride + wy,
                                    px * b->pool_stride + wx);
                                if (first || z > best) {
                                    best = z;
                                    first = 0;
                                }
                            }
                        }
                        *last_acc = (float)best;
                        /* Integer accumulators convert exactly: the widest
                         * block dot is far below 2^24. */
                        fired = ebnn_fires((float)best, tau, flip);
                    }
                    if (fired) {
                        orow[px >> 3] |= (uint8_t)(1u << (px & 7u));
                    }
                }
            }
        }
    }
}

/*
 * Full forward pass.  arena must hold 2 * half + 4 bytes: two ping-pong
 * activation buffers plus the four-byte accumulator slot at arena + 2*half,
 * which holds the last accumulator value computed (the final class score).
 *
 * When expect_bits is non-NULL it points at the concatenated packed outputs
 * of every block; the first mismatching block index is stored in
 * *fail_block (otherwise -1) and the pass stops early with return value
 * 255.  Returns the argmax label over the final scores, first maximum
 * winning ties.
 */
static inline uint8_t ebnn_predict_impl(const ebnn_block *blocks,
                                        uint32_t nblocks, const void *input,
                                        uint8_t *arena, uint32_t half,
                                        float *scores, uint32_t classes,
                                        const uint8_t *expect_bits,
                                        int32_t *fail_block)
{
    const void *src = input;
    float last_acc = 0.0f;
    uint32_t expect_off = 0;
    uint8_t *tail = arena + 2u * half;
    uint32_t best;
    uint32_t i;
    uint32_t j;
    if (fail_block) {
        *fail_block = -1;
    }
    for (i = 0; i < nblocks; i++) {
        const ebnn_block *b = &blocks[i];
        uint8_t *dst = arena + (i & 1u) * half;
        ebnn_run_block(b, src, dst, i == nblocks - 1u ? scores : 0,
                       &last_acc);
        if (expect_bits) {
            uint32_t nbytes = ebnn_output_bytes(b);
            uint32_t k;
            for (k = 0; k < nbytes; k++) {
                if (dst[k] != expect_bits[expect_off + k]) {
                    if (fail_block) {
                        *fail_block = (int32_t)i;
                    }
                    return 255;
                }
            }
            expect_off += nbytes;
        }
        src = dst;
    }
    {
        /* Mirror the accumulator into its arena slot byte by byte; the
         * tail of a uint8_t array has no float alignment guarantee. */
        union {
            float f;
            uint8_t b[4];
        } u;
        u.f = last_acc;
        for (j = 0; j < 4; j++) {
            tail[j] = u.b[j];
        }
    }
    best = 0;
    for (j = 1; j < classes; j++) {
        if (scores[j] > scores[best]) {
            best = j;
        }
    }
    return (uint8_t)best;
}

/*
 * Check one embedded test vector.  Returns 0 when every per-block bit
 * pattern, every score (compared by value, which is exact here), and the
 * label all match; otherwise a diagnostic code: 1000 + block index for a
 * bit mismatch, 2000 + class index for a score mismatch, 3000 for a label
 * mismatch.
 */
static inline int ebnn_check_vector(const ebnn_block *blocks,
                                    uint32_t nblocks, const void *input,
                                    uint8_t *arena, uint32_t half,
                                    float *scores, uint32_t classes,
                                    const uint8_t *expect_bits,
                                    const float *expect_scores,
                                    uint8_t expect_label)
{
    int32_t fail_block = -1;
    uint8_t label = ebnn_predict_impl(blocks, nblocks, input, arena, half,
                                      scores, classes, expect_bits,
                                      &fail_block);
    uint32_t j;
    if (fail_block >= 0) {
        return 1000 + (int)fail_block;
    }
    for (j = 0; j < classes; j++) {
        if (scores[j] != expect_scores[j]) {
            return 2000 + (int)j;
        }
    }
    if (label != expect_label) {
        return 3000;
    }
    return 0;
}

#endif /* EBNN_RUNTIME_H */
