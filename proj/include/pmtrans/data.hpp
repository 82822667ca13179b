#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pmtrans/binary_io.hpp"
#include "pmtrans/errors.hpp"
#include "pmtrans/numerics/tensor.hpp"
#include "pmtrans/random.hpp"

namespace pmtrans {

inline constexpr std::size_t kMaxGlyphClasses = 8;
inline constexpr std::uint32_t kDatasetVersion = 1;

/// Transforms applied to the target domain on top of the shared renderer.
struct ShiftSpec {
    bool intensity_invert = false;
    float background_gradient_amp = 0.0f;  // [0, 1]
    float noise_std = 0.0f;                // >= 0
    float rotation_degrees = 0.0f;         // max |rotation|, [0, 180]
    float gradient_angle_degrees = 0.0f;   // direction of the background ramp

    static ShiftSpec neutral() { return {}; }
    static ShiftSpec default_target() { return ShiftSpec{true, 0.5f, 0.1f, 0.0f, 0.0f}; }

    bool is_neutral() const {
        return !intensity_invert && background_gradient_amp == 0.0f && noise_std == 0.0f && rotation_degrees == 0.0f;
    }

    void validate() const {
        if (!(background_gradient_amp >= 0.0f && background_gradient_amp <= 1.0f))
            throw ConfigError("background_gradient_amp must lie in [0, 1]");
        if (!(noise_std >= 0.0f && noise_std <= 1.0f)) throw ConfigError("noise_std must lie in [0, 1]");
        if (!(rotation_degrees >= 0.0f && rotation_degrees <= 180.0f))
            throw ConfigError("rotation_degrees must lie in [0, 180]");
        if (!std::isfinite(gradient_angle_degrees)) throw ConfigError("gradient_angle_degrees must be finite");
    }

    bool operator==(const ShiftSpec&) const = default;
};

enum class DomainTag : std::uint8_t { source = 0, target = 1 };

struct Dataset {
    Tensor images;                     // [N, C, H, W], values in [0, 1]
    std::vector<std::uint16_t> labels;  // [N]
    std::size_t n_classes = 0;
    DomainTag domain = DomainTag::source;
    std::uint64_t seed = 0;
    ShiftSpec shift;

    std::size_t size() const { return labels.size(); }
    std::size_t channels() const { return images.dim(1); }
    std::size_t height() const { return images.dim(2); }
    std::size_t width() const { return images.dim(3); }
    std::size_t image_numel() const { return channels() * height() * width(); }

    /// Gather a batch as [B, C*H*W].
    Tensor batch(std::span<const std::size_t> idx) const {
        const std::size_t per = image_numel();
        Tensor out(Shape{idx.size(), per});
        for (std::size_t i = 0; i < idx.size(); ++i) {
            std::copy_n(images.data.begin() + static_cast<std::ptrdiff_t>(idx[i] * per), per,
                        out.data.begin() + static_cast<std::ptrdiff_t>(i * per));
        }
        return out;
    }

    std::vector<std::size_t> batch_labels(std::span<const std::size_t> idx) const {
        std::vector<std::size_t> out;
        out.reserve(idx.size());
        for (auto i : idx) out.push_back(labels[i]);
        return out;
    }
};

namespace detail {

inline double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
    const double vx = bx - ax, vy = by - ay;
    const double len2 = vx * vx + vy * vy;
    double t = len2 > 0.0 ? ((px - ax) * vx + (py - ay) * vy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double dx = px - (ax + t * vx), dy = py - (ay + t * vy);
    return std::sqrt(dx * dx + dy * dy);
}

struct GlyphJitter {
    double cx, cy, length, thickness, intensity, background, angle;
};

// Coverage in [0, 1] of the class glyph at a point in glyph-local
// coordinates (centered, already rotated).
inline double glyph_coverage(std::size_t cls, double x, double y, const GlyphJitter& j) {
    const double h = j.length / 2.0;
    const double r = j.thickness / 2.0;
    auto stroke = [r](double dist) { return std::clamp(r + 0.5 - dist, 0.0, 1.0); };
    const double dg = h / std::numbers::sqrt2;
    switch (cls) {
        case 0: return stroke(segment_distance(x, y, -h, 0, h, 0));
        case 1: return stroke(segment_distance(x, y, 0, -h, 0, h));
        case 2: return stroke(segment_distance(x, y, -dg, -dg, dg, dg));
        case 3: return stroke(segment_distance(x, y, -dg, dg, dg, -dg));
        case 4: return stroke(std::abs(std::hypot(x, y) - h * 0.8));
        case 5: return std::clamp(h * 0.6 + 0.5 - std::hypot(x, y), 0.0, 1.0);
        case 6:
            return std::max(stroke(segment_distance(x, y, -h, 0, h, 0)), stroke(segment_distance(x, y, 0, -h, 0, h)));
        default:
            return std::max(stroke(segment_distance(x, y, -dg, -dg, dg, dg)),
                            stroke(segment_distance(x, y, -dg, dg, dg, -dg)));
    }
}

inline void render(float* out, std::size_t size, std::size_t cls, const GlyphJitter& j, const ShiftSpec& shift,
                   Rng& rng) {
    const double c = std::cos(j.angle), s = std::sin(j.angle);
    const double ga = shift.gradient_angle_degrees * std::numbers::pi / 180.0;
    const double gx = std::cos(ga), gy = std::sin(ga);
    const double half = static_cast<double>(size - 1) / 2.0;
    const double ramp_span = half * (std::abs(gx) + std::abs(gy));
    for (std::size_t py = 0; py < size; ++py) {
        for (std::size_t px = 0; px < size; ++px) {
            const double dx = static_cast<double>(px) - j.cx, dy = static_cast<double>(py) - j.cy;
            const double lx = c * dx + s * dy, ly = -s * dx + c * dy;
            double v = j.background + (j.intensity - j.background) * glyph_coverage(cls, lx, ly, j);
            v += 0.02 * standard_normal(rng);
            if (shift.intensity_invert) v = 1.0 - v;
            if (shift.background_gradient_amp > 0.0f) {
                const double proj = (static_cast<double>(px) - half) * gx + (static_cast<double>(py) - half) * gy;
                const double ramp = ramp_span > 0.0 ? 0.5 * (proj / ramp_span + 1.0) : 0.5;
                v += shift.background_gradient_amp * (ramp - 0.5);
            }
            if (shift.noise_std > 0.0f) v += shift.noise_std * standard_normal(rng);
            out[py * size + px] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    }
}

inline Dataset generate_domain(std::size_t n_classes, std::size_t n, const ShiftSpec& shift, std::uint64_t seed,
                               DomainTag tag, std::size_t image_size) {
    Rng rng = make_rng(seed, tag == DomainTag::source ? 11 : 12);
    Dataset ds;
    ds.n_classes = n_classes;
    ds.domain = tag;
    ds.seed = seed;
    ds.shift = shift;
    ds.images = Tensor(Shape{n, 1, image_size, image_size});
    ds.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) ds.labels[i] = static_cast<std::uint16_t>(i % n_classes);
    shuffle(ds.labels, rng);
    const double scale = static_cast<double>(image_size) / 32.0;
    const double mid = static_cast<double>(image_size - 1) / 2.0;
    const double max_rot = shift.rotation_degrees * std::numbers::pi / 180.0;
    for (std::size_t i = 0; i < n; ++i) {
        GlyphJitter j{};
        j.cx = mid + scale * (uniform01(rng) * 10.0 - 5.0);
        j.cy = mid + scale * (uniform01(rng) * 10.0 - 5.0);
        j.length = scale * (10.0 + 6.0 * uniform01(rng));
        j.thickness = scale * (1.5 + 1.5 * uniform01(rng));
        j.intensity = 0.7 + 0.3 * uniform01(rng);
        j.background = 0.15 * uniform01(rng);
        j.angle = max_rot * (2.0 * uniform01(rng) - 1.0);
        render(ds.images.data.data() + i * image_size * image_size, image_size, ds.labels[i], j, shift, rng);
    }
    return ds;
}

}  // namespace detail

/// Seeded source/target pair. Both domains share the glyph renderer and
/// label space; the target additionally goes through `shift`.
inline std::pair<Dataset, Dataset> generate_pair(std::size_t n_classes, std::size_t n_per_domain,
                                                 const ShiftSpec& shift, std::uint64_t seed,
                                                 std::size_t image_size = 32) {
    shift.validate();
    if (n_classes < 2 || n_classes > kMaxGlyphClasses) {
        throw ConfigError("n_classes must lie in [2, " + std::to_string(kMaxGlyphClasses) + "]");
    }
    if (n_per_domain < n_classes) throw ConfigError("n_per_domain must be at least n_classes");
    if (image_size < 8) throw ConfigError("image_size must be at least 8");
    return {detail::generate_domain(n_classes, n_per_domain, ShiftSpec::neutral(), seed, DomainTag::source, image_size),
            detail::generate_domain(n_classes, n_per_domain, shift, seed, DomainTag::target, image_size)};
}

// ---------------------------------------------------------------------------
// File format: "PMDS", u32 version, u32 n, u32 n_classes, u32 height,
// u32 width, u32 channels, u64 seed, ShiftSpec as f32 gradient amp, f32 noise
// std, f32 rotation, f32 gradient angle and a u8 flag byte (bit 0 invert,
// bit 1 target domain), then n·C·H·W f32 pixels, then n u16 labels.

inline std::vector<unsigned char> encode_dataset(const Dataset& ds) {
    io::Writer w;
    w.magic("PMDS");
    w.u32(kDatasetVersion);
    w.u32(static_cast<std::uint32_t>(ds.size()));
    w.u32(static_cast<std::uint32_t>(ds.n_classes));
    w.u32(static_cast<std::uint32_t>(ds.height()));
    w.u32(static_cast<std::uint32_t>(ds.width()));
    w.u32(static_cast<std::uint32_t>(ds.channels()));
    w.u64(ds.seed);
    w.f32(ds.shift.background_gradient_amp);
    w.f32(ds.shift.noise_std);
    w.f32(ds.shift.rotation_degrees);
    w.f32(ds.shift.gradient_angle_degrees);
    w.u8(static_cast<std::uint8_t>((ds.shift.intensity_invert ? 1u : 0u) | (ds.domain == DomainTag::target ? 2u : 0u)));
    for (float v : ds.images.data) w.f32(v);
    for (auto l : ds.labels) w.u16(l);
    return w.buffer();
}

inline void save(const Dataset& ds, const std::string& path) {
    io::Writer w;
    auto bytes = encode_dataset(ds);
    w.bytes(bytes.data(), bytes.size());
    w.write_file(path);
}

inline Dataset decode_dataset(io::Reader& r) {
    r.expect_magic("PMDS");
    std::size_t at = r.offset();
    if (auto v = r.u32(); v != kDatasetVersion) throw FormatError("unsupported dataset version " + std::to_string(v), at);
    const std::size_t n = r.u32();
    at = r.offset();
    const std::size_t n_classes = r.u32();
    if (n_classes < 2) throw FormatError("n_classes must be at least 2", at);
    const std::size_t h = r.u32(), w = r.u32(), c = r.u32();
    Dataset ds;
    ds.n_classes = n_classes;
    ds.seed = r.u64();
    ds.shift.background_gradient_amp = r.f32();
    ds.shift.noise_std = r.f32();
    ds.shift.rotation_degrees = r.f32();
    ds.shift.gradient_angle_degrees = r.f32();
    const std::uint8_t flags = r.u8();
    ds.shift.intensity_invert = (flags & 1u) != 0;
    ds.domain = (flags & 2u) ? DomainTag::target : DomainTag::source;
    const std::size_t pixels = n * c * h * w;
    r.need(pixels * 4 + n * 2, "dataset payload");
    std::vector<float> data(pixels);
    for (auto& v : data) v = r.f32();
    ds.images = Tensor(Shape{n, c, h, w}, std::move(data));
    ds.labels.resize(n);
    for (auto& l : ds.labels) {
        at = r.offset();
        l = r.u16();
        if (l >= n_classes) throw FormatError("label out of range", at);
    }
    if (!r.at_end()) throw FormatError("trailing bytes after dataset payload", r.offset());
    return ds;
}

inline Dataset load(const std::string& path) {
    auto r = io::Reader::from_file(path);
    return decode_dataset(r);
}

}  // namespace pmtrans
