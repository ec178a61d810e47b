#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <string>
#include <vector>

#include "segcal/errors.hpp"
#include "segcal/grid.hpp"
#include "segcal/rng.hpp"

namespace segcal {

struct SynthConfig {
    std::size_t grid_size = 64;
    std::size_t min_shapes = 1;
    std::size_t max_shapes = 3;
    double min_axis = 7.0;
    double max_axis = 16.0;
    double intensity_fg = 1.0;
    double intensity_bg = 0.0;
    double noise_sigma = 0.3;
    double blur_sigma = 1.5;
    /// 0 keeps the full grid as eval mask; r > 0 uses the foreground dilated by r voxels.
    std::size_t mask_dilation = 0;
    std::uint64_t seed = 0;

    void validate() const {
        if (grid_size < 3) {
            throw ConfigError("synth: grid_size must be >= 3");
        }
        if (min_shapes < 1 || max_shapes < min_shapes) {
            throw ConfigError("synth: need 1 <= min_shapes <= max_shapes");
        }
        if (!(min_axis > 0.0) || max_axis < min_axis) {
            throw ConfigError("synth: need 0 < min_axis <= max_axis");
        }
        if (intensity_fg == intensity_bg) {
            throw ConfigError("synth: intensity_fg must differ from intensity_bg");
        }
        if (!(noise_sigma >= 0.0) || !(blur_sigma >= 0.0)) {
            throw ConfigError("synth: noise_sigma and blur_sigma must be >= 0");
        }
    }
};

struct LatentShape {
    std::array<double, 2> center{};  // (row, col)
    std::array<double, 2> axes{};    // semi-axes
    double rotation = 0.0;

    bool contains(double r, double c) const noexcept {
        const double dr = r - center[0];
        const double dc = c - center[1];
        const double cs = std::cos(rotation);
        const double sn = std::sin(rotation);
        const double u = (dc * cs + dr * sn) / axes[0];
        const double v = (-dc * sn + dr * cs) / axes[1];
        return u * u + v * v <= 1.0;
    }

    /// Half extents of the axis-aligned bounding box (row, col).
    std::array<double, 2> half_extent() const noexcept {
        const double cs = std::cos(rotation);
        const double sn = std::sin(rotation);
        const double ex = std::sqrt(axes[0] * axes[0] * cs * cs + axes[1] * axes[1] * sn * sn);
        const double ey = std::sqrt(axes[0] * axes[0] * sn * sn + axes[1] * axes[1] * cs * cs);
        return {ey, ex};
    }
};

namespace detail {

inline std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
    // Half-sample symmetric reflection: ... 1 0 | 0 1 2 ... n-1 | n-1 n-2 ...
    const auto len = static_cast<std::ptrdiff_t>(n);
    if (len == 1) {
        return 0;
    }
    const std::ptrdiff_t period = 2 * len;
    i %= period;
    if (i < 0) {
        i += period;
    }
    return static_cast<std::size_t>(i < len ? i : period - 1 - i);
}

}  // namespace detail

/// Normalized Gaussian taps for offsets -R..R with R = ceil(3 sigma).
inline std::vector<double> gaussian_kernel(double sigma) {
    if (!(sigma > 0.0)) {
        return {1.0};
    }
    const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double total = 0.0;
    for (std::ptrdiff_t d = -radius; d <= radius; ++d) {
        const double w = std::exp(-0.5 * static_cast<double>(d * d) / (sigma * sigma));
        k[static_cast<std::size_t>(d + radius)] = w;
        total += w;
    }
    for (double& w : k) {
        w /= total;
    }
    return k;
}

/// Separable truncated Gaussian blur with reflective boundaries; sigma = 0 is the identity.
inline Grid2D gaussian_blur(const Grid2D& grid, double sigma) {
    if (!(sigma >= 0.0)) {
        throw ParameterError("gaussian_blur: sigma must be >= 0");
    }
    if (sigma == 0.0) {
        return grid;
    }
    const auto kernel = gaussian_kernel(sigma);
    const auto radius = static_cast<std::ptrdiff_t>(kernel.size() / 2);
    const std::size_t h = grid.height();
    const std::size_t w = grid.width();

    Grid2D tmp(h, w);
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
            double acc = 0.0;
            for (std::ptrdiff_t d = -radius; d <= radius; ++d) {
                const auto cc = detail::reflect_index(static_cast<std::ptrdiff_t>(c) + d, w);
                acc += kernel[static_cast<std::size_t>(d + radius)] * grid(r, cc);
            }
            tmp(r, c) = acc;
        }
    }
    Grid2D out(h, w);
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
            double acc = 0.0;
            for (std::ptrdiff_t d = -radius; d <= radius; ++d) {
                const auto rr = detail::reflect_index(static_cast<std::ptrdiff_t>(r) + d, h);
                acc += kernel[static_cast<std::size_t>(d + radius)] * tmp(rr, c);
            }
            out(r, c) = acc;
        }
    }
    return out;
}

/// Binary dilation with a Euclidean disk of the given radius.
inline Grid2D dilate(const Grid2D& mask, std::size_t radius) {
    if (radius == 0) {
        return mask;
    }
    const auto h = static_cast<std::ptrdiff_t>(mask.height());
    const auto w = static_cast<std::ptrdiff_t>(mask.width());
    const auto rad = static_cast<std::ptrdiff_t>(radius);
    Grid2D out(mask.height(), mask.width(), 0.0);
    for (std::ptrdiff_t r = 0; r < h; ++r) {
        for (std::ptrdiff_t c = 0; c < w; ++c) {
            if (mask(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) == 0.0) {
                continue;
            }
            for (std::ptrdiff_t dr = -rad; dr <= rad; ++dr) {
                for (std::ptrdiff_t dc = -rad; dc <= rad; ++dc) {
                    const auto rr = r + dr;
                    const auto cc = c + dc;
                    if (rr < 0 || rr >= h || cc < 0 || cc >= w || dr * dr + dc * dc > rad * rad) {
                        continue;
                    }
                    out(static_cast<std::size_t>(rr), static_cast<std::size_t>(cc)) = 1.0;
                }
            }
        }
    }
    return out;
}

inline std::string synth_subject_id(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "subj_%04zu", index);
    return buf;
}

/// Draws the latent ellipses of one subject. Each shape is kept at least two voxels off the border.
inline std::vector<LatentShape> sample_shapes(const SynthConfig& config, Rng& rng) {
    constexpr int kMaxRetries = 200;
    constexpr double kMargin = 2.0;
    const auto span = config.max_shapes - config.min_shapes + 1;
    const auto n = config.min_shapes + static_cast<std::size_t>(rng.below(span));
    const double size = static_cast<double>(config.grid_size);

    std::vector<LatentShape> shapes;
    for (std::size_t s = 0; s < n; ++s) {
        bool placed = false;
        for (int attempt = 0; attempt < kMaxRetries && !placed; ++attempt) {
            LatentShape shape;
            shape.axes = {rng.uniform(config.min_axis, config.max_axis),
                          rng.uniform(config.min_axis, config.max_axis)};
            shape.rotation = rng.uniform(0.0, std::numbers::pi);
            const auto ext = shape.half_extent();
            const double lo_r = kMargin + ext[0];
            const double hi_r = size - 1.0 - kMargin - ext[0];
            const double lo_c = kMargin + ext[1];
            const double hi_c = size - 1.0 - kMargin - ext[1];
            if (hi_r < lo_r || hi_c < lo_c) {
                continue;
            }
            shape.center = {rng.uniform(lo_r, hi_r), rng.uniform(lo_c, hi_c)};
            shapes.push_back(shape);
            placed = true;
        }
        if (!placed) {
            throw GenerationError("render_subject: could not place shape " + std::to_string(s) +
                                  " inside a " + std::to_string(config.grid_size) + " grid after " +
                                  std::to_string(kMaxRetries) + " retries");
        }
    }
    return shapes;
}

inline Grid2D rasterize(const std::vector<LatentShape>& shapes, std::size_t size) {
    Grid2D m(size, size, 0.0);
    for (std::size_t r = 0; r < size; ++r) {
        for (std::size_t c = 0; c < size; ++c) {
            for (const auto& s : shapes) {
                if (s.contains(static_cast<double>(r), static_cast<double>(c))) {
                    m(r, c) = 1.0;
                    break;
                }
            }
        }
    }
    return m;
}

/// Deterministic in (config, subject_index). The image is drawn from the crisp shape indicator,
/// labels are Bernoulli draws from its blurred version, and that blurred map is kept as the
/// reference posterior.
inline Subject render_subject(const SynthConfig& config, std::size_t subject_index) {
    config.validate();
    Rng rng(derive_seed(config.seed, subject_index));

    const auto shapes = sample_shapes(config, rng);
    const Grid2D crisp = rasterize(shapes, config.grid_size);

    Grid2D posterior = gaussian_blur(crisp, config.blur_sigma);
    for (double& v : posterior.values()) {
        v = std::clamp(v, 0.0, 1.0);
    }

    Subject s;
    s.id = synth_subject_id(subject_index);
    s.labels = Grid2D(config.grid_size, config.grid_size);
    s.image = Grid2D(config.grid_size, config.grid_size);
    for (std::size_t i = 0; i < crisp.size(); ++i) {
        s.labels[i] = rng.bernoulli(posterior[i]) ? 1.0 : 0.0;
    }
    const double contrast = config.intensity_fg - config.intensity_bg;
    for (std::size_t i = 0; i < crisp.size(); ++i) {
        s.image[i] = config.intensity_bg + contrast * crisp[i] + config.noise_sigma * rng.normal();
    }
    s.eval_mask = config.mask_dilation == 0 ? Grid2D(config.grid_size, config.grid_size, 1.0)
                                            : dilate(crisp, config.mask_dilation);
    s.reference_posterior = std::move(posterior);
    return s;
}

inline std::vector<Subject> render_dataset(const SynthConfig& config, std::size_t n_subjects) {
    std::vector<Subject> out;
    out.reserve(n_subjects);
    for (std::size_t i = 0; i < n_subjects; ++i) {
        out.push_back(render_subject(config, i));
    }
    return out;
}

/// The reference posterior read as a class-1 confidence map.
inline Grid2D oracle_confidence(const Subject& subject) {
    if (!subject.reference_posterior) {
        throw DataError("oracle_confidence: subject " + subject.id + " has no reference posterior");
    }
    return *subject.reference_posterior;
}

}  // namespace segcal
