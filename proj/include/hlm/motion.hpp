// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "hlm/tensor.hpp"

namespace hlm::motion {

// Planar 9-joint skeleton. Joint 0 is the root's global ground position
// (x, z); joints 1..8 are body-local sagittal coordinates (forward, up).
// Two trailing channels hold the root ground velocity.
inline constexpr std::size_t num_joints = 9;
inline constexpr std::size_t num_features = 2 * num_joints + 2;

enum joint : std::size_t { root = 0, pelvis, head, hand_l, hand_r, knee_l, foot_l, knee_r, foot_r };

inline constexpr std::array<const char*, num_joints> joint_names{"root",   "pelvis", "head",   "hand_l", "hand_r",
                                                                 "knee_l", "foot_l", "knee_r", "foot_r"};
inline constexpr std::size_t root_vel = 2 * num_joints;

enum class split_kind : std::uint8_t { train = 0, test = 1 };

struct motion_sequence {
    tensor frames;  // (T, F)
    double fps = 20.0;
    std::uint32_t content_id = 0;
    std::uint32_t style_id = 0;
    split_kind split = split_kind::train;

    std::size_t length() const { return frames.empty() ? 0 : frames.dim(0); }
    double at(std::size_t t, std::size_t f) const { return frames[t * num_features + f]; }
    bool operator==(const motion_sequence&) const = default;
};

// stride (rad), lean (rad), arm swing (rad), step frequency (Hz), bounce (m), lateral asymmetry
inline constexpr std::size_t num_style_params = 6;
inline constexpr std::array<const char*, num_style_params> style_param_names{
    "stride_amplitude", "torso_lean_rad", "arm_swing_amplitude", "step_frequency_hz", "vertical_bounce",
    "lateral_asymmetry"};
inline constexpr std::array<double, num_style_params> style_param_lo{0.05, -0.35, 0.0, 0.6, 0.0, 0.0};
inline constexpr std::array<double, num_style_params> style_param_hi{0.7, 0.6, 1.2, 3.0, 0.15, 0.7};

struct style_spec {
    std::uint32_t style_id = 0;
    std::string name;
    std::array<double, num_style_params> params{};
    std::array<double, num_style_params> jitter_std{};
};

enum class trajectory { forward, circle, backward, stop_and_go, in_place_wave };

struct content_spec {
    std::uint32_t content_id = 0;
    std::string name;
    std::string prompt_text;
    trajectory kind = trajectory::forward;
};

struct dataset {
    std::vector<std::string> style_names;
    std::vector<std::string> content_names;
    std::vector<std::string> content_prompts;
    std::vector<motion_sequence> sequences;

    std::size_t num_styles() const { return style_names.size(); }
    std::size_t num_contents() const { return content_names.size(); }
    bool operator==(const dataset&) const = default;
};

struct generator_options {
    double fps = 20.0;
    std::size_t min_length = 48;
    std::size_t max_length = 96;
    double frame_noise = 0.004;
};

inline std::vector<style_spec> default_styles() {
    const std::array<double, num_style_params> jit{0.025, 0.025, 0.035, 0.06, 0.006, 0.03};
    auto mk = [&](std::uint32_t id, const char* name, std::array<double, num_style_params> p) {
        return style_spec{id, name, p, jit};
    };
    return {
        mk(0, "neutral", {0.35, 0.05, 0.35, 1.6, 0.02, 0.0}),
        mk(1, "lean", {0.30, 0.40, 0.25, 1.4, 0.02, 0.0}),
        mk(2, "proud", {0.40, -0.22, 0.55, 1.5, 0.03, 0.0}),
        mk(3, "bouncy", {0.35, 0.05, 0.35, 2.1, 0.11, 0.0}),
        mk(4, "heavy", {0.18, 0.18, 0.08, 1.0, 0.01, 0.0}),
        mk(5, "flail", {0.35, 0.0, 0.95, 1.6, 0.03, 0.0}),
        mk(6, "limp", {0.35, 0.05, 0.30, 1.25, 0.05, 0.5}),
        mk(7, "march", {0.58, 0.15, 0.65, 2.4, 0.04, 0.0}),
    };
}

inline std::vector<content_spec> default_contents() {
    return {
        {0, "forward", "a person walks forward.", trajectory::forward},
        {1, "circle", "a person walks in a circle.", trajectory::circle},
        {2, "backward", "a person walks backward.", trajectory::backward},
        {3, "stop-and-go", "a person walks, stops, and walks again.", trajectory::stop_and_go},
        {4, "in-place-wave", "a person steps in place and waves.", trajectory::in_place_wave},
    };
}

// Every pair of styles must differ in some parameter by at least 3x its jitter.
inline void validate_specs(const std::vector<style_spec>& styles, const std::vector<content_spec>& contents) {
    require(styles.size() >= 2, errc::invalid_argument, "need at least 2 styles");
    require(contents.size() >= 2, errc::invalid_argument, "need at least 2 contents");
    for (const auto& s : styles) {
        for (std::size_t p = 0; p < num_style_params; ++p) {
            require(s.params[p] >= style_param_lo[p] && s.params[p] <= style_param_hi[p], errc::invalid_argument,
                    "style '" + s.name + "' parameter " + style_param_names[p] + " outside its physical range");
            require(s.jitter_std[p] >= 0.0, errc::invalid_argument, "negative jitter");
        }
    }
    for (std::size_t a = 0; a < styles.size(); ++a) {
        for (std::size_t b = a + 1; b < styles.size(); ++b) {
            bool separable = false;
            for (std::size_t p = 0; p < num_style_params && !separable; ++p) {
                const double jit = std::max(styles[a].jitter_std[p], styles[b].jitter_std[p]);
                separable = std::abs(styles[a].params[p] - styles[b].params[p]) >= 3.0 * jit && jit > 0.0;
            }
            require(separable, errc::invalid_argument,
                    "styles '" + styles[a].name + "' and '" + styles[b].name + "' are not separable");
        }
    }
    for (std::size_t a = 0; a < contents.size(); ++a) {
        for (std::size_t b = a + 1; b < contents.size(); ++b) {
            require(contents[a].prompt_text != contents[b].prompt_text, errc::invalid_argument,
                    "duplicate prompt text '" + contents[a].prompt_text + "'");
        }
    }
}

inline std::uint32_t held_out_content(std::uint32_t style_id, std::size_t num_contents) {
    return static_cast<std::uint32_t>(style_id % num_contents);
}

namespace detail {

constexpr double thigh_len = 0.45, shin_len = 0.45, hip_height = 0.9, torso_len = 0.7, arm_len = 0.6;
constexpr double shoulder_frac = 0.78, circle_radius = 1.6;

// Root ground positions live on a 2^-16 m grid so velocities derived from
// them are exactly representable in both 32- and 64-bit floats.
inline double quantize_root(double x) { return std::round(x * 65536.0) / 65536.0; }

inline void put(tensor& f, std::size_t t, std::size_t j, double u, double y) {
    f[t * num_features + 2 * j] = u;
    f[t * num_features + 2 * j + 1] = y;
}

}  // namespace detail

inline motion_sequence synthesize(const style_spec& style, const content_spec& content, std::size_t length,
                                  const generator_options& opt, std::mt19937_64& gen) {
    using namespace detail;
    std::array<double, num_style_params> p{};
    std::normal_distribution<double> nd(0.0, 1.0);
    for (std::size_t i = 0; i < num_style_params; ++i) {
        p[i] = std::clamp(style.params[i] + style.jitter_std[i] * nd(gen), style_param_lo[i], style_param_hi[i]);
    }
    const double stride = p[0], lean = p[1], swing = p[2], freq = p[3], bounce = p[4], asym = p[5];
    std::uniform_real_distribution<double> ud(0.0, 2.0 * std::numbers::pi);
    const double phase0 = ud(gen);
    const double dt = 1.0 / opt.fps;
    const double full_speed = 2.0 * std::sin(stride) * (thigh_len + shin_len) * freq * 0.9;

    tensor f({length, num_features});
    double x = 0.0, z = 0.0, heading = 0.0;
    const double dir = content.kind == trajectory::backward ? -1.0 : 1.0;
    std::vector<double> rx(length), rz(length);
    for (std::size_t t = 0; t < length; ++t) {
        const double time = static_cast<double>(t) * dt;
        double gait = 1.0, arm_env = 1.0, speed_env = 1.0;
        switch (content.kind) {
            case trajectory::stop_and_go:
                gait = speed_env = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * time / 2.4);
                arm_env = gait;
                break;
            case trajectory::in_place_wave:
                gait = 0.5;
                speed_env = 0.0;
                arm_env = 0.6;
                break;
            default:
                break;
        }
        const double phi = dir * 2.0 * std::numbers::pi * freq * time + phase0;

        // root ground motion
        rx[t] = quantize_root(x);
        rz[t] = quantize_root(z);
        const double speed = dir * full_speed * speed_env;
        if (content.kind == trajectory::circle) heading += full_speed * dt / circle_radius;
        x += speed * std::cos(heading) * dt;
        z += speed * std::sin(heading) * dt;

        const double a_leg = stride * gait;
        const double pelvis_y = hip_height - 0.04 * a_leg + bounce * std::max(gait, 0.4) * (0.5 - 0.5 * std::cos(2.0 * phi));
        const double torso = lean + 0.02 * std::sin(2.0 * phi);
        put(f, t, pelvis, 0.0, pelvis_y);
        const double hu = torso_len * std::sin(torso), hy = pelvis_y + torso_len * std::cos(torso);
        put(f, t, head, hu, hy);
        const double su = shoulder_frac * torso_len * std::sin(torso);
        const double sy = pelvis_y + shoulder_frac * torso_len * std::cos(torso);

        const double left = 1.0 + asym, right = 1.0 - asym;
        const double arm_l = swing * arm_env * right * std::sin(phi + std::numbers::pi);
        double arm_r = swing * arm_env * left * std::sin(phi);
        if (content.kind == trajectory::in_place_wave) {
            arm_r = std::numbers::pi - 0.55 + 0.45 * std::sin(2.0 * std::numbers::pi * 1.5 * time);
        }
        put(f, t, hand_l, su + arm_len * std::sin(arm_l), sy - arm_len * std::cos(arm_l));
        put(f, t, hand_r, su + arm_len * std::sin(arm_r), sy - arm_len * std::cos(arm_r));

        auto leg = [&](std::size_t knee_j, std::size_t foot_j, double amp, double ph) {
            const double th = amp * std::sin(ph);
            const double bend = 1.2 * amp * std::max(0.0, std::cos(ph));
            const double ku = thigh_len * std::sin(th), ky = pelvis_y - thigh_len * std::cos(th);
            put(f, t, knee_j, ku, ky);
            put(f, t, foot_j, ku + shin_len * std::sin(th - bend), ky - shin_len * std::cos(th - bend));
        };
        leg(knee_l, foot_l, a_leg * left, phi);
        leg(knee_r, foot_r, a_leg * right, phi + std::numbers::pi + 0.8 * asym);
    }
    if (opt.frame_noise > 0.0) {
        std::normal_distribution<double> noise(0.0, opt.frame_noise);
        for (std::size_t t = 0; t < length; ++t) {
            for (std::size_t k = 2; k < root_vel; ++k) f[t * num_features + k] += noise(gen);
        }
    }
    for (std::size_t t = 0; t < length; ++t) {
        const std::size_t a = t + 1 < length ? t : t - 1;
        f[t * num_features + 0] = rx[t];
        f[t * num_features + 1] = rz[t];
        f[t * num_features + root_vel] = (rx[a + 1] - rx[a]) * opt.fps;
        f[t * num_features + root_vel + 1] = (rz[a + 1] - rz[a]) * opt.fps;
    }
    for (std::size_t i = 0; i < f.size(); ++i) {
        if (i % num_features < 2 || i % num_features >= root_vel) continue;
        f[i] = static_cast<double>(static_cast<float>(f[i]));  // storable losslessly as f32
    }
    motion_sequence m;
    m.frames = std::move(f);
    m.fps = opt.fps;
    m.content_id = content.content_id;
    m.style_id = style.style_id;
    return m;
}

inline dataset generate_dataset(const std::vector<style_spec>& styles, const std::vector<content_spec>& contents,
                                std::size_t reps_per_cell, std::uint64_t seed, const generator_options& opt = {}) {
    validate_specs(styles, contents);
    require(reps_per_cell >= 1, errc::invalid_argument, "reps_per_cell must be >= 1");
    require(opt.min_length >= 16 && opt.max_length >= opt.min_length, errc::invalid_argument, "invalid length range");
    dataset ds;
    for (const auto& s : styles) ds.style_names.push_back(s.name);
    for (const auto& c : contents) {
        ds.content_names.push_back(c.name);
        ds.content_prompts.push_back(c.prompt_text);
    }
    std::uint64_t index = 0;
    for (const auto& s : styles) {
        for (const auto& c : contents) {
            for (std::size_t r = 0; r < reps_per_cell; ++r, ++index) {
                auto gen = make_rng(seed, "motion-synth", index);
                std::uniform_int_distribution<std::size_t> len(opt.min_length, opt.max_length);
                auto m = synthesize(s, c, len(gen), opt, gen);
                m.split = c.content_id == held_out_content(s.style_id, contents.size()) ? split_kind::test : split_kind::train;
                ds.sequences.push_back(std::move(m));
            }
        }
    }
    return ds;
}

// Keeps only sequences whose style is in the first ceil(fraction * K) styles.
inline std::vector<std::uint32_t> style_subset(std::size_t num_styles, double fraction) {
    require(fraction > 0.0 && fraction <= 1.0, errc::invalid_argument, "style fraction must be in (0, 1]");
    const auto n = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(num_styles) - 1e-9));
    std::vector<std::uint32_t> ids;
    for (std::size_t i = 0; i < std::max<std::size_t>(n, 1); ++i) ids.push_back(static_cast<std::uint32_t>(i));
    return ids;
}

inline dataset filter_styles(const dataset& ds, const std::vector<std::uint32_t>& keep) {
    dataset out = ds;
    out.sequences.clear();
    for (const auto& m : ds.sequences) {
        if (std::find(keep.begin(), keep.end(), m.style_id) != keep.end()) out.sequences.push_back(m);
    }
    return out;
}

// A window of a sequence with the root translated to start at the origin.
inline motion_sequence crop(const motion_sequence& m, std::size_t start, std::size_t len) {
    require(start + len <= m.length(), errc::invalid_argument, "crop window exceeds sequence length");
    motion_sequence out = m;
    out.frames = tensor({len, num_features});
    const double x0 = m.at(start, 0), z0 = m.at(start, 1);
    for (std::size_t t = 0; t < len; ++t) {
        for (std::size_t k = 0; k < num_features; ++k) out.frames[t * num_features + k] = m.at(start + t, k);
        out.frames[t * num_features + 0] -= x0;
        out.frames[t * num_features + 1] -= z0;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Hand-computed statistics
// ---------------------------------------------------------------------------

namespace detail {
inline double series_std(const motion_sequence& m, std::size_t f) {
    const double n = static_cast<double>(m.length());
    double mu = 0.0, sq = 0.0;
    for (std::size_t t = 0; t < m.length(); ++t) mu += m.at(t, f);
    mu /= n;
    for (std::size_t t = 0; t < m.length(); ++t) sq += (m.at(t, f) - mu) * (m.at(t, f) - mu);
    return std::sqrt(sq / n);
}
}  // namespace detail

inline double mean_torso_angle(const motion_sequence& m) {
    double acc = 0.0;
    for (std::size_t t = 0; t < m.length(); ++t) {
        const double du = m.at(t, 2 * head) - m.at(t, 2 * pelvis);
        const double dy = m.at(t, 2 * head + 1) - m.at(t, 2 * pelvis + 1);
        acc += std::atan2(du, dy);
    }
    return acc / static_cast<double>(m.length());
}

// lean, left-arm swing, bounce, stride, asymmetry, step-rate proxy
inline std::array<double, 6> style_statistics(const motion_sequence& m) {
    using detail::series_std;
    const double sl = series_std(m, 2 * foot_l), sr = series_std(m, 2 * foot_r);
    double crossings = 0.0;
    double prev = 0.0;
    for (std::size_t t = 1; t < m.length(); ++t) {
        const double d = m.at(t, 2 * foot_l) - m.at(t - 1, 2 * foot_l);
        if (t > 1 && d * prev < 0.0) crossings += 1.0;
        prev = d;
    }
    const double duration = static_cast<double>(m.length()) / m.fps;
    return {mean_torso_angle(m), series_std(m, 2 * hand_l), series_std(m, 2 * pelvis + 1), sl + sr,
            (sl - sr) / (sl + sr + 1e-9), crossings / (2.0 * duration)};
}

// ---------------------------------------------------------------------------
// HLMD file format
// ---------------------------------------------------------------------------

inline constexpr char dataset_magic[4] = {'H', 'L', 'M', 'D'};
inline constexpr std::uint16_t dataset_version = 1;

namespace io {

inline std::uint32_t crc32_of(const std::string& bytes) {
    return static_cast<std::uint32_t>(
        ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

class writer {
public:
    template <class T>
    void pod(T v) {
        static_assert(std::is_trivially_copyable_v<T>);
        char buf[sizeof(T)];
        std::memcpy(buf, &v, sizeof(T));  // host is little-endian (checked below)
        out_.append(buf, sizeof(T));
    }
    void str16(const std::string& s) {
        require(s.size() <= 0xFFFF, errc::invalid_argument, "string too long for format");
        pod<std::uint16_t>(static_cast<std::uint16_t>(s.size()));
        out_.append(s);
    }
    void raw(const std::string& s) { out_.append(s); }
    std::string& bytes() { return out_; }

private:
    std::string out_;
};

class reader {
public:
    explicit reader(std::string_view bytes, std::string what) : in_(bytes), what_(std::move(what)) {}
    template <class T>
    T pod() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, in_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::string str16() {
        const auto n = pod<std::uint16_t>();
        need(n);
        std::string s(in_.substr(pos_, n));
        pos_ += n;
        return s;
    }
    std::string_view take(std::size_t n) {
        need(n);
        auto v = in_.substr(pos_, n);
        pos_ += n;
        return v;
    }
    std::size_t pos() const { return pos_; }
    std::size_t remaining() const { return in_.size() - pos_; }

private:
    void need(std::size_t n) const {
        require(pos_ + n <= in_.size(), errc::format, what_ + ": truncated file");
    }
    std::string_view in_;
    std::size_t pos_ = 0;
    std::string what_;
};

static_assert(std::endian::native == std::endian::little, "file formats assume a little-endian host");

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), errc::io, "cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Writes to a temporary sibling then renames into place.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        require(static_cast<bool>(out), errc::io, "cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        require(static_cast<bool>(out), errc::io, "write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace io

// Layout: magic, u16 version, u32 sequence count, u32 feature width,
// u32 style count, u32 content count, style names, content (name, prompt)
// pairs, u64 payload length, payload, u32 CRC32 of payload. Each payload
// record is u32 T, f32 fps, u32 content, u32 style, u8 split, T*F f32.
inline std::string encode_dataset(const dataset& ds) {
    io::writer payload;
    for (const auto& m : ds.sequences) {
        require(m.frames.rank() == 2 && m.frames.dim(1) == num_features, errc::shape_mismatch,
                "sequence frames must be (T, " + std::to_string(num_features) + ")");
        payload.pod<std::uint32_t>(static_cast<std::uint32_t>(m.length()));
        payload.pod<float>(static_cast<float>(m.fps));
        payload.pod<std::uint32_t>(m.content_id);
        payload.pod<std::uint32_t>(m.style_id);
        payload.pod<std::uint8_t>(static_cast<std::uint8_t>(m.split));
        for (double v : m.frames.data()) payload.pod<float>(static_cast<float>(v));
    }
    io::writer w;
    w.raw(std::string(dataset_magic, 4));
    w.pod<std::uint16_t>(dataset_version);
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(ds.sequences.size()));
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(num_features));
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(ds.style_names.size()));
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(ds.content_names.size()));
    for (const auto& s : ds.style_names) w.str16(s);
    require(ds.content_prompts.size() == ds.content_names.size(), errc::invalid_argument, "content table mismatch");
    for (std::size_t i = 0; i < ds.content_names.size(); ++i) {
        w.str16(ds.content_names[i]);
        w.str16(ds.content_prompts[i]);
    }
    w.pod<std::uint64_t>(payload.bytes().size());
    w.raw(payload.bytes());
    w.pod<std::uint32_t>(io::crc32_of(payload.bytes()));
    return std::move(w.bytes());
}

inline dataset decode_dataset(std::string_view bytes) {
    io::reader r(bytes, "dataset");
    require(r.take(4) == std::string_view(dataset_magic, 4), errc::format, "dataset: bad magic bytes");
    const auto version = r.pod<std::uint16_t>();
    require(version == dataset_version, errc::format, "dataset: unsupported version " + std::to_string(version));
    const auto count = r.pod<std::uint32_t>();
    const auto width = r.pod<std::uint32_t>();
    require(width == num_features, errc::format, "dataset: feature width " + std::to_string(width) + " unsupported");
    dataset ds;
    const auto ns = r.pod<std::uint32_t>(), nc = r.pod<std::uint32_t>();
    for (std::uint32_t i = 0; i < ns; ++i) ds.style_names.push_back(r.str16());
    for (std::uint32_t i = 0; i < nc; ++i) {
        ds.content_names.push_back(r.str16());
        ds.content_prompts.push_back(r.str16());
    }
    const auto payload_len = r.pod<std::uint64_t>();
    require(r.remaining() == payload_len + 4, errc::format,
            "dataset: payload length " + std::to_string(payload_len) + " does not match file size (truncated?)");
    auto payload = r.take(payload_len);
    const auto crc = r.pod<std::uint32_t>();
    require(crc == io::crc32_of(std::string(payload)), errc::format, "dataset: CRC32 mismatch");
    io::reader p(payload, "dataset payload");
    for (std::uint32_t i = 0; i < count; ++i) {
        motion_sequence m;
        const auto t = p.pod<std::uint32_t>();
        m.fps = static_cast<double>(p.pod<float>());
        m.content_id = p.pod<std::uint32_t>();
        m.style_id = p.pod<std::uint32_t>();
        const auto split = p.pod<std::uint8_t>();
        require(split <= 1, errc::format, "dataset: invalid split tag");
        m.split = static_cast<split_kind>(split);
        require(m.style_id < ns && m.content_id < nc, errc::format, "dataset: label out of range");
        m.frames = tensor({t, num_features});
        for (auto& v : m.frames.data()) v = static_cast<double>(p.pod<float>());
        ds.sequences.push_back(std::move(m));
    }
    require(p.remaining() == 0, errc::format, "dataset: trailing bytes in payload");
    return ds;
}

inline void save_dataset(const dataset& ds, const std::filesystem::path& path) {
    io::write_file_atomic(path, encode_dataset(ds));
}

inline dataset load_dataset(const std::filesystem::path& path) { return decode_dataset(io::read_file(path)); }

// ---------------------------------------------------------------------------
// SVG stick-figure rendering
// ---------------------------------------------------------------------------

struct point2 {
    double x, y;
};

// Side-view joint positions: horizontal = root forward progress + local
// forward offset, vertical = height.
inline std::array<point2, num_joints> side_view(const motion_sequence& m, std::size_t t) {
    std::array<point2, num_joints> p{};
    const double base = m.at(t, 0);
    p[root] = {base, 0.0};
    for (std::size_t j = 1; j < num_joints; ++j) p[j] = {base + m.at(t, 2 * j), m.at(t, 2 * j + 1)};
    return p;
}

struct svg_render {
    std::string document;
    std::size_t skeletons = 0;
    double min_x = 0, min_y = 0, max_x = 0, max_y = 0;  // world-space bounds covered by the view box
};

inline svg_render render_svg(const motion_sequence& m, std::size_t stride = 4, double scale_px = 100.0) {
    require(m.length() > 0, errc::invalid_argument, "render_svg: empty motion");
    require(stride >= 1, errc::invalid_argument, "render_svg: stride must be >= 1");
    svg_render out;
    out.min_x = out.min_y = INFINITY;
    out.max_x = out.max_y = -INFINITY;
    std::vector<std::size_t> frames;
    for (std::size_t t = 0; t < m.length(); t += stride) frames.push_back(t);
    for (auto t : frames) {
        for (const auto& q : side_view(m, t)) {
            out.min_x = std::min(out.min_x, q.x);
            out.max_x = std::max(out.max_x, q.x);
            out.min_y = std::min(out.min_y, q.y);
            out.max_y = std::max(out.max_y, q.y);
        }
    }
    const double pad = 0.1;
    out.min_x -= pad;
    out.min_y -= pad;
    out.max_x += pad;
    out.max_y += pad;
    const double w = (out.max_x - out.min_x) * scale_px, h = (out.max_y - out.min_y) * scale_px;
    auto px = [&](point2 q) { return point2{(q.x - out.min_x) * scale_px, (out.max_y - q.y) * scale_px}; };
    constexpr std::array<std::pair<joint, joint>, 6> bones{{{pelvis, head}, {pelvis, knee_l}, {knee_l, foot_l},
                                                            {pelvis, knee_r}, {knee_r, foot_r}, {root, pelvis}}};
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(2);
    os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" viewBox=\"0 0 " << w
       << ' ' << h << "\">\n";
    for (std::size_t i = 0; i < frames.size(); ++i) {
        // earlier frames lighter
        const double frac = frames.size() > 1 ? static_cast<double>(i) / static_cast<double>(frames.size() - 1) : 1.0;
        const int shade = static_cast<int>(std::lround(210.0 - 190.0 * frac));
        auto p = side_view(m, frames[i]);
        os << "  <g class=\"skeleton\" data-frame=\"" << frames[i] << "\" stroke=\"rgb(" << shade << ',' << shade << ','
           << std::min(255, shade + 40) << ")\" stroke-width=\"2\" fill=\"none\">\n";
        auto line = [&](point2 a, point2 b) {
            auto pa = px(a), pb = px(b);
            os << "    <line x1=\"" << pa.x << "\" y1=\"" << pa.y << "\" x2=\"" << pb.x << "\" y2=\"" << pb.y << "\"/>\n";
        };
        for (auto [a, b] : bones) {
            if (a == root) continue;
            line(p[a], p[b]);
        }
        const double frac_sh = detail::shoulder_frac;
        point2 shoulder{p[pelvis].x + frac_sh * (p[head].x - p[pelvis].x), p[pelvis].y + frac_sh * (p[head].y - p[pelvis].y)};
        line(shoulder, p[hand_l]);
        line(shoulder, p[hand_r]);
        auto hc = px(p[head]);
        os << "    <circle cx=\"" << hc.x << "\" cy=\"" << hc.y << "\" r=\"6\"/>\n";
        os << "  </g>\n";
    }
    os << "</svg>\n";
    out.document = os.str();
    out.skeletons = frames.size();
    return out;
}

}  // namespace hlm::motion
