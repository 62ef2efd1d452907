#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "mvmatch/rng.hpp"

namespace mvmatch {

// H x W x 3 raster, row-major interleaved RGB, every value in [0, 1].
class Image {
public:
    Image() = default;
    Image(int height, int width, double fill = 0.0);

    int height() const { return height_; }
    int width() const { return width_; }
    static constexpr int channels() { return 3; }
    std::size_t size() const { return pixels_.size(); }
    bool empty() const { return pixels_.empty(); }

    double& at(int y, int x, int c) { return pixels_[index(y, x, c)]; }
    double at(int y, int x, int c) const { return pixels_[index(y, x, c)]; }

    // Edge-clamped read; coordinates outside the raster take the nearest border pixel.
    double clamped(int y, int x, int c) const;
    // Bilinear sample at continuous pixel-center coordinates with edge clamping.
    double bilinear(double y, double x, int c) const;

    const std::vector<double>& pixels() const { return pixels_; }
    std::vector<double>& pixels() { return pixels_; }

    bool operator==(const Image&) const = default;

private:
    std::size_t index(int y, int x, int c) const {
        return (static_cast<std::size_t>(y) * width_ + x) * 3 + c;
    }

    int height_ = 0;
    int width_ = 0;
    std::vector<double> pixels_;
};

// Per-channel standardized raster. Only produced by resize_normalize.
class NormalizedImage {
public:
    int height() const { return height_; }
    int width() const { return width_; }
    double at(int y, int x, int c) const {
        return values_[(static_cast<std::size_t>(y) * width_ + x) * 3 + c];
    }
    const std::vector<double>& values() const { return values_; }

private:
    friend NormalizedImage resize_normalize(const Image&, int, const std::array<double, 3>&,
                                            const std::array<double, 3>&);
    int height_ = 0;
    int width_ = 0;
    std::vector<double> values_;
};

struct Normalization {
    std::array<double, 3> mean{0.485, 0.456, 0.406};
    std::array<double, 3> std{0.229, 0.224, 0.225};

    static Normalization imagenet() { return {}; }
    static Normalization half() { return {{0.5, 0.5, 0.5}, {0.5, 0.5, 0.5}}; }
};

// Bilinear resize with half-pixel centers and edge clamping. Downscaling by an
// integer factor of 2 averages each 2x2 block exactly.
Image resize_bilinear(const Image& img, int out_height, int out_width);

NormalizedImage resize_normalize(const Image& img, int side, const std::array<double, 3>& mean,
                                 const std::array<double, 3>& std);
inline NormalizedImage resize_normalize(const Image& img, int side, const Normalization& norm) {
    return resize_normalize(img, side, norm.mean, norm.std);
}

Image hflip(const Image& img);

// With probability 0.5 mirrors the image horizontally. Consumes exactly one draw.
Image weak_augment(const Image& img, Rng& rng);

enum class AugOpKind {
    identity,
    hflip,
    rotate,
    translate_x,
    translate_y,
    shear_x,
    shear_y,
    brightness,
    contrast,
    posterize,
    solarize,
    cutout,
};

std::string_view to_string(AugOpKind kind);
AugOpKind aug_op_from_string(std::string_view name);

// An op and the value range it spans at magnitude 10. The neutral value of each
// op (rotate 0, contrast 1, posterize 8 bits, ...) is fixed by the op kind; at
// magnitude m the applied value moves m/10 of the way from neutral toward one
// end of the range, the end picked at random for two-sided ranges.
struct AugOp {
    AugOpKind kind = AugOpKind::identity;
    double lo = 0.0;
    double hi = 0.0;

    static AugOp with_default_range(AugOpKind kind);
};

double neutral_value(AugOpKind kind);

enum class AugKind { weak, strong };

struct AugPolicy {
    AugKind kind = AugKind::strong;
    std::vector<AugOp> strong_ops;
    int strong_n = 2;
    int strong_magnitude = 9;

    // identity, hflip, rotate, translate-x/y, shear-x/y, brightness, contrast,
    // posterize, solarize, cutout with their default ranges; n = 2, magnitude 9.
    static AugPolicy default_strong();
    void validate() const;
};

// Applies a single op with an explicit value (degrees for rotate, fraction of
// the side for translate and cutout, shear factor, additive brightness delta,
// contrast factor, posterize bit count, solarize threshold). Output clamped to
// [0, 1]. Cutout also draws its center from rng.
Image apply_op(const Image& img, AugOpKind kind, double value, Rng& rng);

// Value an op takes at the given magnitude; draws one sign for two-sided ranges.
double op_value_at_magnitude(const AugOp& op, int magnitude, Rng& rng);

// RandAugment-style composition: strong_n ops sampled uniformly with
// replacement, each applied at the policy magnitude.
Image strong_augment(const Image& img, const AugPolicy& policy, Rng& rng);

Image read_png(const std::filesystem::path& path);
// 8-bit RGB; values are rounded to the nearest of 256 levels.
void write_png(const std::filesystem::path& path, const Image& img);

}  // namespace mvmatch
