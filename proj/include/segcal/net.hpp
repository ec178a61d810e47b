#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "segcal/errors.hpp"
#include "segcal/grid.hpp"
#include "segcal/rng.hpp"

namespace segcal {

/// Zero-padded "same" convolution with an odd square kernel.
struct ConvLayer {
    std::size_t in_ch = 0;
    std::size_t out_ch = 0;
    std::size_t k = 1;
    std::vector<double> weights;  // [out][in][ky][kx]
    std::vector<double> biases;   // [out]
    bool frozen = false;

    ConvLayer() = default;
    ConvLayer(std::size_t in, std::size_t out, std::size_t kernel)
        : in_ch(in), out_ch(out), k(kernel), weights(out * in * kernel * kernel, 0.0),
          biases(out, 0.0) {}

    double& w(std::size_t o, std::size_t i, std::size_t ky, std::size_t kx) {
        return weights[((o * in_ch + i) * k + ky) * k + kx];
    }
    double w(std::size_t o, std::size_t i, std::size_t ky, std::size_t kx) const {
        return weights[((o * in_ch + i) * k + ky) * k + kx];
    }

    std::size_t parameter_count() const noexcept { return weights.size() + biases.size(); }

    friend bool operator==(const ConvLayer&, const ConvLayer&) = default;
};

inline constexpr std::size_t kNumLayers = 4;
inline constexpr std::size_t kHiddenChannels = 8;

/// L1..L3: 3x3 conv + ReLU with 8 channels; L4: 1x1 conv to a single logit.
struct NetParams {
    std::array<ConvLayer, kNumLayers> layers{
        ConvLayer(1, kHiddenChannels, 3), ConvLayer(kHiddenChannels, kHiddenChannels, 3),
        ConvLayer(kHiddenChannels, kHiddenChannels, 3), ConvLayer(kHiddenChannels, 1, 1)};

    void set_frozen(std::array<bool, kNumLayers> flags) {
        for (std::size_t l = 0; l < kNumLayers; ++l) {
            layers[l].frozen = flags[l];
        }
    }
    void unfreeze_all() { set_frozen({false, false, false, false}); }

    bool all_finite() const {
        for (const auto& l : layers) {
            for (double v : l.weights) {
                if (!std::isfinite(v)) return false;
            }
            for (double v : l.biases) {
                if (!std::isfinite(v)) return false;
            }
        }
        return true;
    }

    friend bool operator==(const NetParams&, const NetParams&) = default;
};

/// Textual description of the fixed architecture; hashed into checkpoints.
inline constexpr const char* kArchitectureSignature =
    "conv3x3:1>8,relu|conv3x3:8>8,relu|conv3x3:8>8,relu|conv1x1:8>1";

/// He-normal weights, zero biases.
inline NetParams init_params(std::uint64_t seed) {
    NetParams p;
    Rng rng(derive_seed(seed, 0xC0FFEEULL));
    for (auto& layer : p.layers) {
        const double fan_in = static_cast<double>(layer.in_ch * layer.k * layer.k);
        const double sd = std::sqrt(2.0 / fan_in);
        for (double& w : layer.weights) {
            w = rng.normal(0.0, sd);
        }
    }
    return p;
}

enum class DropoutSite : std::size_t { BeforeL2 = 0, BeforeL3 = 1, BeforeL4 = 2 };

struct DropoutConfig {
    std::array<bool, 3> sites{false, false, false};
    double rate = 0.0;

    static DropoutConfig none() { return {}; }
    /// Before the last two blocks and the logit head.
    static DropoutConfig decoder(double rate) { return {{false, true, true}, rate}; }
    /// Around the deepest part of the net.
    static DropoutConfig center(double rate) { return {{true, true, false}, rate}; }

    bool at(DropoutSite s) const noexcept { return sites[static_cast<std::size_t>(s)]; }
    bool any_site() const noexcept { return sites[0] || sites[1] || sites[2]; }
    /// True when some site actually drops activations.
    bool active() const noexcept { return any_site() && rate > 0.0; }

    /// Index of the first layer that follows a dropout site (1..3), or kNumLayers when none.
    std::size_t first_layer_after_site() const noexcept {
        for (std::size_t s = 0; s < 3; ++s) {
            if (sites[s]) return s + 1;
        }
        return kNumLayers;
    }

    void validate() const {
        if (!(rate >= 0.0 && rate < 1.0)) {
            throw ParameterError("dropout rate must lie in [0,1)");
        }
    }
};

/// Everything backward() needs from a forward pass.
struct ForwardCache {
    std::size_t height = 0;
    std::size_t width = 0;
    /// Input of each layer after dropout; inputs[0] is the image.
    std::array<std::vector<double>, kNumLayers> inputs;
    /// Post-ReLU outputs of L1..L3 (before dropout).
    std::array<std::vector<double>, kNumLayers - 1> activations;
    /// Per-site multiplicative masks (0 or 1/(1-rate)); empty when the site is inactive.
    std::array<std::vector<double>, 3> dropout_masks;
};

struct ForwardResult {
    Grid2D logits;
    ForwardCache cache;
};

struct LayerGrad {
    std::vector<double> weights;
    std::vector<double> biases;
};

using NetGradients = std::array<LayerGrad, kNumLayers>;

inline NetGradients zero_gradients(const NetParams& p) {
    NetGradients g;
    for (std::size_t l = 0; l < kNumLayers; ++l) {
        g[l].weights.assign(p.layers[l].weights.size(), 0.0);
        g[l].biases.assign(p.layers[l].biases.size(), 0.0);
    }
    return g;
}

namespace detail {

/// Row-wise im2col: patch[(i*k + ky)*k + kx][x] = in[i][y + ky - r][x + kx - r], zero outside.
inline void im2col_row(const double* in, std::size_t in_ch, std::size_t k, std::size_t h,
                       std::size_t w, std::size_t y, double* patch) {
    const auto r = static_cast<std::ptrdiff_t>(k / 2);
    const auto H = static_cast<std::ptrdiff_t>(h);
    const auto W = static_cast<std::ptrdiff_t>(w);
    std::size_t j = 0;
    for (std::size_t i = 0; i < in_ch; ++i) {
        for (std::size_t ky = 0; ky < k; ++ky) {
            const std::ptrdiff_t yy = static_cast<std::ptrdiff_t>(y) + static_cast<std::ptrdiff_t>(ky) - r;
            for (std::size_t kx = 0; kx < k; ++kx, ++j) {
                double* dst = patch + j * w;
                if (yy < 0 || yy >= H) {
                    std::fill(dst, dst + w, 0.0);
                    continue;
                }
                const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - r;
                const double* src = in + i * h * w + yy * W;
                for (std::ptrdiff_t x = 0; x < W; ++x) {
                    const std::ptrdiff_t xx = x + dx;
                    dst[x] = (xx >= 0 && xx < W) ? src[xx] : 0.0;
                }
            }
        }
    }
}

/// Inverse of im2col_row: din[i][y+ky-r][x+kx-r] += dpatch[j][x].
inline void col2im_row_add(const double* dpatch, std::size_t in_ch, std::size_t k, std::size_t h,
                           std::size_t w, std::size_t y, double* din) {
    const auto r = static_cast<std::ptrdiff_t>(k / 2);
    const auto H = static_cast<std::ptrdiff_t>(h);
    const auto W = static_cast<std::ptrdiff_t>(w);
    std::size_t j = 0;
    for (std::size_t i = 0; i < in_ch; ++i) {
        for (std::size_t ky = 0; ky < k; ++ky) {
            const std::ptrdiff_t yy = static_cast<std::ptrdiff_t>(y) + static_cast<std::ptrdiff_t>(ky) - r;
            for (std::size_t kx = 0; kx < k; ++kx, ++j) {
                if (yy < 0 || yy >= H) continue;
                const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - r;
                const double* src = dpatch + j * w;
                double* dst = din + i * h * w + yy * W;
                const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -dx);
                const std::ptrdiff_t x1 = std::min(W, W - dx);
                for (std::ptrdiff_t x = x0; x < x1; ++x) dst[x + dx] += src[x];
            }
        }
    }
}

inline constexpr std::size_t kLanes = 4;

/// out_row[o][x] = bias[o] + sum_j wt[j][o] * patch[j][x] with O output channels held in registers.
template <std::size_t O>
void gemm_row_forward(const double* wt, const double* bias, const double* patch, std::size_t taps,
                      std::size_t w, double* const* out_rows) {
    std::size_t x0 = 0;
    for (; x0 + kLanes <= w; x0 += kLanes) {
        double acc[O][kLanes];
        for (std::size_t o = 0; o < O; ++o)
            for (std::size_t l = 0; l < kLanes; ++l) acc[o][l] = bias[o];
        for (std::size_t j = 0; j < taps; ++j) {
            const double* p = patch + j * w + x0;
            const double* wj = wt + j * O;
            for (std::size_t o = 0; o < O; ++o)
                for (std::size_t l = 0; l < kLanes; ++l) acc[o][l] += wj[o] * p[l];
        }
        for (std::size_t o = 0; o < O; ++o)
            for (std::size_t l = 0; l < kLanes; ++l) out_rows[o][x0 + l] = acc[o][l];
    }
    for (; x0 < w; ++x0) {
        for (std::size_t o = 0; o < O; ++o) {
            double a = bias[o];
            for (std::size_t j = 0; j < taps; ++j) a += wt[j * O + o] * patch[j * w + x0];
            out_rows[o][x0] = a;
        }
    }
}

/// dw[o][j] += sum_x g[o][x] * patch[j][x];  dpatch[j][x] = sum_o wt[j][o] * g[o][x].
template <std::size_t O>
void gemm_row_backward(const double* wt, const double* patch, std::size_t taps, std::size_t w,
                       const double* const* g_rows, double* dw, double* dpatch) {
    for (std::size_t j = 0; j < taps; ++j) {
        const double* p = patch + j * w;
        if (dw != nullptr) {
            double acc[O][kLanes] = {};
            std::size_t x = 0;
            for (; x + kLanes <= w; x += kLanes)
                for (std::size_t o = 0; o < O; ++o)
                    for (std::size_t l = 0; l < kLanes; ++l) acc[o][l] += g_rows[o][x + l] * p[x + l];
            for (std::size_t o = 0; o < O; ++o) {
                double s = (acc[o][0] + acc[o][1]) + (acc[o][2] + acc[o][3]);
                for (std::size_t xt = x; xt < w; ++xt) s += g_rows[o][xt] * p[xt];
                dw[o * taps + j] += s;
            }
        }
        if (dpatch != nullptr) {
            const double* wj = wt + j * O;
            double* dp = dpatch + j * w;
            std::size_t x = 0;
            for (; x + kLanes <= w; x += kLanes) {
                double a[kLanes] = {};
                for (std::size_t o = 0; o < O; ++o)
                    for (std::size_t l = 0; l < kLanes; ++l) a[l] += wj[o] * g_rows[o][x + l];
                for (std::size_t l = 0; l < kLanes; ++l) dp[x + l] = a[l];
            }
            for (; x < w; ++x) {
                double a = 0.0;
                for (std::size_t o = 0; o < O; ++o) a += wj[o] * g_rows[o][x];
                dp[x] = a;
            }
        }
    }
}

/// Reference-layout loops for layers without a blocked kernel (any k, any channel count).
inline void conv_forward_generic(const ConvLayer& layer, const double* in, std::size_t h,
                                 std::size_t w, double* out) {
    const std::size_t hw = h * w;
    const auto r = static_cast<std::ptrdiff_t>(layer.k / 2);
    const auto H = static_cast<std::ptrdiff_t>(h);
    const auto W = static_cast<std::ptrdiff_t>(w);
    for (std::size_t o = 0; o < layer.out_ch; ++o) {
        double* dst = out + o * hw;
        std::fill(dst, dst + hw, layer.biases[o]);
        for (std::size_t i = 0; i < layer.in_ch; ++i) {
            const double* src = in + i * hw;
            for (std::size_t ky = 0; ky < layer.k; ++ky) {
                const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - r;
                const std::ptrdiff_t y0 = std::max<std::ptrdiff_t>(0, -dy);
                const std::ptrdiff_t y1 = std::min(H, H - dy);
                for (std::size_t kx = 0; kx < layer.k; ++kx) {
                    const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - r;
                    const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -dx);
                    const std::ptrdiff_t x1 = std::min(W, W - dx);
                    const double wt = layer.w(o, i, ky, kx);
                    for (std::ptrdiff_t y = y0; y < y1; ++y) {
                        double* d = dst + y * W;
                        const double* s = src + (y + dy) * W + dx;
                        for (std::ptrdiff_t x = x0; x < x1; ++x) d[x] += wt * s[x];
                    }
                }
            }
        }
    }
}

inline void conv_backward_generic(const ConvLayer& layer, const double* in, const double* dout,
                                  std::size_t h, std::size_t w, LayerGrad* grad, double* din) {
    const std::size_t hw = h * w;
    const auto r = static_cast<std::ptrdiff_t>(layer.k / 2);
    const auto H = static_cast<std::ptrdiff_t>(h);
    const auto W = static_cast<std::ptrdiff_t>(w);
    for (std::size_t o = 0; o < layer.out_ch; ++o) {
        const double* g = dout + o * hw;
        if (grad != nullptr) {
            double sb = 0.0;
            for (std::size_t j = 0; j < hw; ++j) sb += g[j];
            grad->biases[o] += sb;
        }
        for (std::size_t i = 0; i < layer.in_ch; ++i) {
            const double* src = in + i * hw;
            double* dsrc = din != nullptr ? din + i * hw : nullptr;
            for (std::size_t ky = 0; ky < layer.k; ++ky) {
                const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - r;
                const std::ptrdiff_t y0 = std::max<std::ptrdiff_t>(0, -dy);
                const std::ptrdiff_t y1 = std::min(H, H - dy);
                for (std::size_t kx = 0; kx < layer.k; ++kx) {
                    const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - r;
                    const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -dx);
                    const std::ptrdiff_t x1 = std::min(W, W - dx);
                    const double wt = layer.w(o, i, ky, kx);
                    double sw = 0.0;
                    for (std::ptrdiff_t y = y0; y < y1; ++y) {
                        const double* gy = g + y * W;
                        const double* s = src + (y + dy) * W + dx;
                        for (std::ptrdiff_t x = x0; x < x1; ++x) sw += gy[x] * s[x];
                        if (dsrc != nullptr) {
                            double* ds = dsrc + (y + dy) * W + dx;
                            for (std::ptrdiff_t x = x0; x < x1; ++x) ds[x] += wt * gy[x];
                        }
                    }
                    if (grad != nullptr) {
                        grad->weights[((o * layer.in_ch + i) * layer.k + ky) * layer.k + kx] += sw;
                    }
                }
            }
        }
    }
}

/// Weights transposed to [tap][out] for the blocked kernels.
inline std::vector<double> transpose_weights(const ConvLayer& layer) {
    const std::size_t taps = layer.in_ch * layer.k * layer.k;
    std::vector<double> wt(taps * layer.out_ch);
    for (std::size_t o = 0; o < layer.out_ch; ++o)
        for (std::size_t j = 0; j < taps; ++j) wt[j * layer.out_ch + o] = layer.weights[o * taps + j];
    return wt;
}

inline bool has_blocked_kernel(const ConvLayer& layer) noexcept {
    return layer.out_ch == kHiddenChannels && layer.k > 1;
}

/// out[o] = bias[o] + sum_i conv(in[i], w[o][i]); zero padding.
inline void conv_forward(const ConvLayer& layer, const double* in, std::size_t h, std::size_t w,
                         double* out) {
    if (!has_blocked_kernel(layer)) {
        conv_forward_generic(layer, in, h, w, out);
        return;
    }
    constexpr std::size_t O = kHiddenChannels;
    const std::size_t taps = layer.in_ch * layer.k * layer.k;
    const auto wt = transpose_weights(layer);
    std::vector<double> patch(taps * w);
    double* rows[O];
    for (std::size_t y = 0; y < h; ++y) {
        im2col_row(in, layer.in_ch, layer.k, h, w, y, patch.data());
        for (std::size_t o = 0; o < O; ++o) rows[o] = out + o * h * w + y * w;
        gemm_row_forward<O>(wt.data(), layer.biases.data(), patch.data(), taps, w, rows);
    }
}

/// Accumulates weight/bias gradients and, when din is non-null, the input gradient.
inline void conv_backward(const ConvLayer& layer, const double* in, const double* dout,
                          std::size_t h, std::size_t w, LayerGrad* grad, double* din) {
    if (!has_blocked_kernel(layer)) {
        conv_backward_generic(layer, in, dout, h, w, grad, din);
        return;
    }
    constexpr std::size_t O = kHiddenChannels;
    const std::size_t hw = h * w;
    const std::size_t taps = layer.in_ch * layer.k * layer.k;
    const auto wt = transpose_weights(layer);
    std::vector<double> patch(taps * w);
    std::vector<double> dpatch(din != nullptr ? taps * w : 0);
    const double* rows[O];
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t o = 0; o < O; ++o) rows[o] = dout + o * hw + y * w;
        if (grad != nullptr) {
            im2col_row(in, layer.in_ch, layer.k, h, w, y, patch.data());
        }
        gemm_row_backward<O>(wt.data(), patch.data(), taps, w, rows,
                             grad != nullptr ? grad->weights.data() : nullptr,
                             din != nullptr ? dpatch.data() : nullptr);
        if (din != nullptr) {
            col2im_row_add(dpatch.data(), layer.in_ch, layer.k, h, w, y, din);
        }
    }
    if (grad != nullptr) {
        for (std::size_t o = 0; o < O; ++o) {
            double sb = 0.0;
            for (std::size_t j = 0; j < hw; ++j) sb += dout[o * hw + j];
            grad->biases[o] += sb;
        }
    }
}

}  // namespace detail

/// Runs the network. With active dropout, `rng` must be non-null; kept activations are scaled
/// by 1/(1-rate).
inline ForwardResult forward(const NetParams& params, const Grid2D& image,
                             const DropoutConfig& dropout = {}, Rng* rng = nullptr) {
    if (image.height() < 3 || image.width() < 3) {
        throw DimensionError("forward: image must be at least 3x3");
    }
    dropout.validate();
    if (dropout.active() && rng == nullptr) {
        throw ParameterError("forward: dropout is active but no random state was supplied");
    }
    const std::size_t h = image.height();
    const std::size_t w = image.width();
    const std::size_t hw = h * w;

    ForwardResult res;
    auto& cache = res.cache;
    cache.height = h;
    cache.width = w;
    cache.inputs[0].assign(image.values().begin(), image.values().end());

    for (std::size_t l = 0; l < kNumLayers; ++l) {
        const auto& layer = params.layers[l];
        std::vector<double> out(layer.out_ch * hw);
        detail::conv_forward(layer, cache.inputs[l].data(), h, w, out.data());
        if (l + 1 == kNumLayers) {
            res.logits = Grid2D(h, w, std::move(out));
            break;
        }
        for (double& v : out) {
            v = v > 0.0 ? v : 0.0;
        }
        cache.activations[l] = out;
        if (dropout.sites[l] && dropout.rate > 0.0) {
            const double keep_scale = 1.0 / (1.0 - dropout.rate);
            auto& mask = cache.dropout_masks[l];
            mask.resize(out.size());
            for (std::size_t j = 0; j < out.size(); ++j) {
                mask[j] = rng->uniform() < dropout.rate ? 0.0 : keep_scale;
                out[j] *= mask[j];
            }
        }
        cache.inputs[l + 1] = std::move(out);
    }

    for (double v : res.logits.values()) {
        if (!std::isfinite(v)) {
            throw NumericError("forward: non-finite logit");
        }
    }
    return res;
}

inline Grid2D forward_logits(const NetParams& params, const Grid2D& image) {
    return forward(params, image).logits;
}

/// Exact gradients for every unfrozen layer; frozen layers get zeros. Dropout masks come from the
/// cache.
inline NetGradients backward(const NetParams& params, const ForwardCache& cache,
                             const Grid2D& dlogits) {
    if (dlogits.height() != cache.height || dlogits.width() != cache.width ||
        cache.inputs[0].size() != cache.height * cache.width) {
        throw InternalError("backward: cache and gradient shapes do not match");
    }
    const std::size_t h = cache.height;
    const std::size_t w = cache.width;
    const std::size_t hw = h * w;
    for (std::size_t l = 0; l < kNumLayers; ++l) {
        if (cache.inputs[l].size() != params.layers[l].in_ch * hw) {
            throw InternalError("backward: cache does not match the parameter shapes");
        }
    }

    NetGradients grads = zero_gradients(params);

    // Gradient only needs to flow below layer l if something below is trainable.
    std::array<bool, kNumLayers> needs_input_grad{};
    bool trainable_below = false;
    for (std::size_t l = 0; l < kNumLayers; ++l) {
        needs_input_grad[l] = trainable_below;
        trainable_below = trainable_below || !params.layers[l].frozen;
    }

    std::vector<double> dout(dlogits.values().begin(), dlogits.values().end());
    for (std::size_t li = kNumLayers; li-- > 0;) {
        const auto& layer = params.layers[li];
        LayerGrad* g = layer.frozen ? nullptr : &grads[li];
        if (g == nullptr && !needs_input_grad[li]) {
            break;
        }
        std::vector<double> din;
        if (needs_input_grad[li]) {
            din.assign(layer.in_ch * hw, 0.0);
        }
        detail::conv_backward(layer, cache.inputs[li].data(), dout.data(), h, w, g,
                              din.empty() ? nullptr : din.data());
        if (!needs_input_grad[li]) {
            break;
        }
        // din is w.r.t. the post-dropout input of layer li, i.e. site li-1.
        const std::size_t below = li - 1;
        const auto& mask = cache.dropout_masks[below];
        if (!mask.empty()) {
            for (std::size_t j = 0; j < din.size(); ++j) din[j] *= mask[j];
        }
        const auto& act = cache.activations[below];
        for (std::size_t j = 0; j < din.size(); ++j) {
            if (!(act[j] > 0.0)) din[j] = 0.0;
        }
        dout = std::move(din);
    }
    return grads;
}

struct LossResult {
    double loss = 0.0;
    Grid2D dlogits;
};

namespace detail {

inline std::size_t mask_count(const Grid2D& mask, const char* who) {
    const std::size_t n = count_nonzero(mask);
    if (n == 0) {
        throw MetricError(std::string(who) + ": empty mask");
    }
    return n;
}

/// log(1 + e^z) without overflow.
inline double softplus(double z) noexcept {
    return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
}

}  // namespace detail

/// Mask-averaged binary cross-entropy of sigmoid(logits) against labels.
inline LossResult ce_loss_and_grad(const Grid2D& logits, const Grid2D& labels, const Grid2D& mask) {
    require_same_shape(logits, labels, "ce_loss labels");
    require_same_shape(logits, mask, "ce_loss mask");
    const double n = static_cast<double>(detail::mask_count(mask, "ce_loss"));
    LossResult r{0.0, Grid2D(logits.height(), logits.width(), 0.0)};
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        if (mask[i] == 0.0) continue;
        const double z = logits[i];
        const double y = labels[i];
        total += detail::softplus(z) - y * z;
        r.dlogits[i] = (sigmoid(z) - y) / n;
    }
    r.loss = total / n;
    return r;
}

/// 1 - (2I + eps) / (S_p + S_y + eps) over the mask, with gradient through the sigmoid.
inline LossResult softdice_loss_and_grad(const Grid2D& logits, const Grid2D& labels,
                                         const Grid2D& mask, double epsilon = 1.0) {
    require_same_shape(logits, labels, "softdice_loss labels");
    require_same_shape(logits, mask, "softdice_loss mask");
    detail::mask_count(mask, "softdice_loss");
    double sp = 0.0;
    double sy = 0.0;
    double inter = 0.0;
    std::vector<double> p(logits.size(), 0.0);
    for (std::size_t i = 0; i < logits.size(); ++i) {
        if (mask[i] == 0.0) continue;
        p[i] = sigmoid(logits[i]);
        sp += p[i];
        sy += labels[i];
        inter += p[i] * labels[i];
    }
    const double num = 2.0 * inter + epsilon;
    const double den = sp + sy + epsilon;
    LossResult r{1.0 - num / den, Grid2D(logits.height(), logits.width(), 0.0)};
    const double inv_den2 = 1.0 / (den * den);
    for (std::size_t i = 0; i < logits.size(); ++i) {
        if (mask[i] == 0.0) continue;
        const double dp = (num - 2.0 * labels[i] * den) * inv_den2;
        r.dlogits[i] = dp * p[i] * (1.0 - p[i]);
    }
    return r;
}

enum class LossKind { CE, SoftDice };

inline LossResult loss_and_grad(LossKind kind, const Grid2D& logits, const Grid2D& labels,
                                const Grid2D& mask) {
    return kind == LossKind::CE ? ce_loss_and_grad(logits, labels, mask)
                                : softdice_loss_and_grad(logits, labels, mask);
}

struct AdamState {
    std::array<LayerGrad, kNumLayers> m;
    std::array<LayerGrad, kNumLayers> v;
    std::uint64_t step = 0;

    static AdamState for_params(const NetParams& p) {
        AdamState s;
        s.m = zero_gradients(p);
        s.v = zero_gradients(p);
        return s;
    }
};

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEpsilon = 1e-8;

/// One bias-corrected Adam update on a flat parameter vector.
inline void adam_update(std::vector<double>& param, const std::vector<double>& grad,
                        std::vector<double>& m, std::vector<double>& v, std::uint64_t step,
                        double lr) {
    const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(step));
    for (std::size_t j = 0; j < param.size(); ++j) {
        m[j] = kAdamBeta1 * m[j] + (1.0 - kAdamBeta1) * grad[j];
        v[j] = kAdamBeta2 * v[j] + (1.0 - kAdamBeta2) * grad[j] * grad[j];
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        param[j] -= lr * mhat / (std::sqrt(vhat) + kAdamEpsilon);
    }
}

/// Adam over all unfrozen layers. Frozen layers keep their weights and moments untouched.
inline void adam_step(NetParams& params, const NetGradients& grads, AdamState& state, double lr) {
    for (std::size_t l = 0; l < kNumLayers; ++l) {
        if (grads[l].weights.size() != params.layers[l].weights.size() ||
            state.m[l].weights.size() != params.layers[l].weights.size()) {
            throw InternalError("adam_step: state/gradient shapes do not match parameters");
        }
    }
    ++state.step;
    for (std::size_t l = 0; l < kNumLayers; ++l) {
        auto& layer = params.layers[l];
        if (layer.frozen) continue;
        adam_update(layer.weights, grads[l].weights, state.m[l].weights, state.v[l].weights,
                    state.step, lr);
        adam_update(layer.biases, grads[l].biases, state.m[l].biases, state.v[l].biases,
                    state.step, lr);
    }
}

}  // namespace segcal
