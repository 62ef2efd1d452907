#include "mvmatch/imaging.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>

#include "mvmatch/error.hpp"

namespace mvmatch {

namespace {

constexpr double kPi = 3.14159265358979323846;

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

Image map_values(const Image& img, auto&& fn) {
    Image out = img;
    for (double& v : out.pixels()) v = clamp01(fn(v));
    return out;
}

// Inverse-mapped geometric warp: out(y, x) = in(src(y, x)).
Image warp(const Image& img, auto&& src_coords) {
    Image out(img.height(), img.width());
    for (int y = 0; y < img.height(); ++y) {
        for (int x = 0; x < img.width(); ++x) {
            const auto [sy, sx] = src_coords(static_cast<double>(y), static_cast<double>(x));
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = clamp01(img.bilinear(sy, sx, c));
        }
    }
    return out;
}

double mean_luma(const Image& img) {
    double sum = 0.0;
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x)
            sum += 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
    return sum / (static_cast<double>(img.height()) * img.width());
}

}  // namespace

Image::Image(int height, int width, double fill) : height_(height), width_(width) {
    if (height <= 0 || width <= 0) throw ConfigError("image dimensions must be positive");
    pixels_.assign(static_cast<std::size_t>(height) * width * 3, fill);
}

double Image::clamped(int y, int x, int c) const {
    return at(std::clamp(y, 0, height_ - 1), std::clamp(x, 0, width_ - 1), c);
}

double Image::bilinear(double y, double x, int c) const {
    const double fy = std::floor(y);
    const double fx = std::floor(x);
    const double wy = y - fy;
    const double wx = x - fx;
    const int y0 = static_cast<int>(fy);
    const int x0 = static_cast<int>(fx);
    const double top = (1.0 - wx) * clamped(y0, x0, c) + wx * clamped(y0, x0 + 1, c);
    const double bottom = (1.0 - wx) * clamped(y0 + 1, x0, c) + wx * clamped(y0 + 1, x0 + 1, c);
    return (1.0 - wy) * top + wy * bottom;
}

Image resize_bilinear(const Image& img, int out_height, int out_width) {
    if (out_height == img.height() && out_width == img.width()) return img;
    Image out(out_height, out_width);
    const double sy = static_cast<double>(img.height()) / out_height;
    const double sx = static_cast<double>(img.width()) / out_width;
    for (int y = 0; y < out_height; ++y) {
        const double src_y = (y + 0.5) * sy - 0.5;
        for (int x = 0; x < out_width; ++x) {
            const double src_x = (x + 0.5) * sx - 0.5;
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.bilinear(src_y, src_x, c);
        }
    }
    return out;
}

NormalizedImage resize_normalize(const Image& img, int side, const std::array<double, 3>& mean,
                                 const std::array<double, 3>& std) {
    if (side < 8) throw ConfigError("resize side must be at least 8");
    for (double s : std)
        if (!(s > 0.0)) throw ConfigError("normalization std must be positive");
    const Image resized = resize_bilinear(img, side, side);
    NormalizedImage out;
    out.height_ = side;
    out.width_ = side;
    out.values_ = resized.pixels();
    for (std::size_t i = 0; i < out.values_.size(); ++i) {
        const std::size_t c = i % 3;
        out.values_[i] = (out.values_[i] - mean[c]) / std[c];
    }
    return out;
}

Image hflip(const Image& img) {
    Image out(img.height(), img.width());
    const int w = img.width();
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y, w - 1 - x, c);
    return out;
}

Image weak_augment(const Image& img, Rng& rng) {
    return rng.uniform01() < 0.5 ? hflip(img) : img;
}

std::string_view to_string(AugOpKind kind) {
    switch (kind) {
        case AugOpKind::identity: return "identity";
        case AugOpKind::hflip: return "hflip";
        case AugOpKind::rotate: return "rotate";
        case AugOpKind::translate_x: return "translate_x";
        case AugOpKind::translate_y: return "translate_y";
        case AugOpKind::shear_x: return "shear_x";
        case AugOpKind::shear_y: return "shear_y";
        case AugOpKind::brightness: return "brightness";
        case AugOpKind::contrast: return "contrast";
        case AugOpKind::posterize: return "posterize";
        case AugOpKind::solarize: return "solarize";
        case AugOpKind::cutout: return "cutout";
    }
    return "identity";
}

AugOpKind aug_op_from_string(std::string_view name) {
    static constexpr AugOpKind all[] = {
        AugOpKind::identity,   AugOpKind::hflip,    AugOpKind::rotate,    AugOpKind::translate_x,
        AugOpKind::translate_y, AugOpKind::shear_x, AugOpKind::shear_y,   AugOpKind::brightness,
        AugOpKind::contrast,   AugOpKind::posterize, AugOpKind::solarize, AugOpKind::cutout,
    };
    for (AugOpKind k : all)
        if (to_string(k) == name) return k;
    throw ConfigError("unknown augmentation op: " + std::string(name));
}

double neutral_value(AugOpKind kind) {
    switch (kind) {
        case AugOpKind::contrast: return 1.0;
        case AugOpKind::posterize: return 8.0;
        case AugOpKind::solarize: return 1.0;
        default: return 0.0;
    }
}

AugOp AugOp::with_default_range(AugOpKind kind) {
    switch (kind) {
        case AugOpKind::rotate: return {kind, -30.0, 30.0};
        case AugOpKind::translate_x:
        case AugOpKind::translate_y: return {kind, -0.3, 0.3};
        case AugOpKind::shear_x:
        case AugOpKind::shear_y: return {kind, -0.3, 0.3};
        case AugOpKind::brightness: return {kind, -0.5, 0.5};
        case AugOpKind::contrast: return {kind, 0.5, 1.5};
        case AugOpKind::posterize: return {kind, 4.0, 8.0};
        case AugOpKind::solarize: return {kind, 0.5, 1.0};
        case AugOpKind::cutout: return {kind, 0.0, 0.25};
        default: return {kind, 0.0, 0.0};
    }
}

AugPolicy AugPolicy::default_strong() {
    AugPolicy p;
    p.kind = AugKind::strong;
    for (AugOpKind k : {AugOpKind::identity, AugOpKind::hflip, AugOpKind::rotate,
                        AugOpKind::translate_x, AugOpKind::translate_y, AugOpKind::shear_x,
                        AugOpKind::shear_y, AugOpKind::brightness, AugOpKind::contrast,
                        AugOpKind::posterize, AugOpKind::solarize, AugOpKind::cutout})
        p.strong_ops.push_back(AugOp::with_default_range(k));
    p.strong_n = 2;
    p.strong_magnitude = 9;
    return p;
}

void AugPolicy::validate() const {
    if (strong_n < 1) throw ConfigError("strong_n must be >= 1");
    if (strong_magnitude < 0 || strong_magnitude > 10)
        throw ConfigError("strong_magnitude must be in 0..10");
    if (strong_ops.empty()) throw ConfigError("strong op list is empty");
    for (const AugOp& op : strong_ops)
        if (op.lo > op.hi) throw ConfigError("augmentation range lo > hi for " +
                                             std::string(to_string(op.kind)));
}

double op_value_at_magnitude(const AugOp& op, int magnitude, Rng& rng) {
    const double neutral = neutral_value(op.kind);
    double end;
    if (op.lo < neutral && neutral < op.hi) {
        end = rng.uniform01() < 0.5 ? op.lo : op.hi;
    } else {
        end = std::abs(op.lo - neutral) > std::abs(op.hi - neutral) ? op.lo : op.hi;
    }
    return neutral + (magnitude / 10.0) * (end - neutral);
}

Image apply_op(const Image& img, AugOpKind kind, double value, Rng& rng) {
    const double h = img.height();
    const double w = img.width();
    const double cy = (h - 1.0) / 2.0;
    const double cx = (w - 1.0) / 2.0;
    switch (kind) {
        case AugOpKind::identity: return img;
        case AugOpKind::hflip: return hflip(img);
        case AugOpKind::rotate: {
            const double a = value * kPi / 180.0;
            const double ca = std::cos(a);
            const double sa = std::sin(a);
            return warp(img, [&](double y, double x) {
                const double dy = y - cy;
                const double dx = x - cx;
                return std::pair{cy - sa * dx + ca * dy, cx + ca * dx + sa * dy};
            });
        }
        case AugOpKind::translate_x:
            return warp(img, [&](double y, double x) { return std::pair{y, x - value * w}; });
        case AugOpKind::translate_y:
            return warp(img, [&](double y, double x) { return std::pair{y - value * h, x}; });
        case AugOpKind::shear_x:
            return warp(img, [&](double y, double x) { return std::pair{y, x + value * (y - cy)}; });
        case AugOpKind::shear_y:
            return warp(img, [&](double y, double x) { return std::pair{y + value * (x - cx), x}; });
        case AugOpKind::brightness:
            return map_values(img, [&](double v) { return v + value; });
        case AugOpKind::contrast: {
            const double m = mean_luma(img);
            return map_values(img, [&](double v) { return m + value * (v - m); });
        }
        case AugOpKind::posterize: {
            const long bits = std::lround(value);
            if (bits >= 8) return img;
            const unsigned mask = (0xFFu << (8 - std::max(1L, bits))) & 0xFFu;
            return map_values(img, [&](double v) {
                const auto level = static_cast<unsigned>(std::lround(clamp01(v) * 255.0));
                return static_cast<double>(level & mask) / 255.0;
            });
        }
        case AugOpKind::solarize: {
            // Thresholds of 1 or above disable the op.
            if (value >= 1.0) return img;
            return map_values(img, [&](double v) { return v >= value ? 1.0 - v : v; });
        }
        case AugOpKind::cutout: {
            const double center_y = rng.uniform01() * h;
            const double center_x = rng.uniform01() * w;
            const int size = static_cast<int>(std::lround(value * std::min(h, w)));
            if (size <= 0) return img;
            Image out = img;
            const int y0 = static_cast<int>(center_y) - size / 2;
            const int x0 = static_cast<int>(center_x) - size / 2;
            for (int y = std::max(0, y0); y < std::min(img.height(), y0 + size); ++y)
                for (int x = std::max(0, x0); x < std::min(img.width(), x0 + size); ++x)
                    for (int c = 0; c < 3; ++c) out.at(y, x, c) = 0.5;
            return out;
        }
    }
    return img;
}

Image strong_augment(const Image& img, const AugPolicy& policy, Rng& rng) {
    if (policy.kind != AugKind::strong) throw ConfigError("strong_augment needs a strong policy");
    policy.validate();
    Image out = img;
    for (int i = 0; i < policy.strong_n; ++i) {
        const AugOp& op = policy.strong_ops[rng.below(policy.strong_ops.size())];
        const double value = op_value_at_magnitude(op, policy.strong_magnitude, rng);
        out = apply_op(out, op.kind, value, rng);
    }
    return out;
}

Image read_png(const std::filesystem::path& path) {
    png_image png;
    std::memset(&png, 0, sizeof(png));
    png.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&png, path.string().c_str()))
        throw DataError("cannot read PNG " + path.string() + ": " + png.message);
    png.format = PNG_FORMAT_RGB;
    std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(png));
    if (!png_image_finish_read(&png, nullptr, buffer.data(), 0, nullptr)) {
        png_image_free(&png);
        throw DataError("cannot decode PNG " + path.string() + ": " + png.message);
    }
    Image img(static_cast<int>(png.height), static_cast<int>(png.width));
    for (std::size_t i = 0; i < buffer.size(); ++i) img.pixels()[i] = buffer[i] / 255.0;
    return img;
}

void write_png(const std::filesystem::path& path, const Image& img) {
    std::vector<std::uint8_t> buffer(img.size());
    for (std::size_t i = 0; i < buffer.size(); ++i)
        buffer[i] = static_cast<std::uint8_t>(std::lround(clamp01(img.pixels()[i]) * 255.0));
    png_image png;
    std::memset(&png, 0, sizeof(png));
    png.version = PNG_IMAGE_VERSION;
    png.width = static_cast<png_uint_32>(img.width());
    png.height = static_cast<png_uint_32>(img.height());
    png.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&png, path.string().c_str(), 0, buffer.data(), 0, nullptr))
        throw DataError("cannot write PNG " + path.string() + ": " + png.message);
}

}  // namespace mvmatch
