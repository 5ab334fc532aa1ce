#include "hmdr/dataio.hpp"

#include "hmdr/error.hpp"
#include "png_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

namespace hmdr {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void check_dims(const VideoClip& clip, const OcclusionMask& mask, const char* op)
{
    if (clip.height() != mask.height() || clip.width() != mask.width()) {
        throw InvalidInput(std::string(op) + ": mask " + std::to_string(mask.height()) + "x" +
                           std::to_string(mask.width()) + " does not match clip " + std::to_string(clip.height()) +
                           "x" + std::to_string(clip.width()));
    }
}

} // namespace

VideoClip apply_mask(const VideoClip& clip, const OcclusionMask& mask, double fill)
{
    check_dims(clip, mask, "apply_mask");
    VideoClip out = clip;
    const std::size_t plane = static_cast<std::size_t>(clip.height()) * clip.width();
    for (int t = 0; t < clip.frames(); ++t) {
        double* f = out.frame_data(t);
        for (std::size_t p = 0; p < plane; ++p) {
            if (mask.data()[p] != 0) {
                f[p * 3] = f[p * 3 + 1] = f[p * 3 + 2] = fill;
            }
        }
    }
    return out;
}

ReferenceFrame prepare_reference(const VideoClip& clip, const OcclusionMask& mask, int index)
{
    check_dims(clip, mask, "prepare_reference");
    if (index < 0 || index >= clip.frames()) {
        throw InvalidInput("prepare_reference: index " + std::to_string(index) + " outside [0, " +
                           std::to_string(clip.frames()) + ")");
    }
    ReferenceFrame ref{clip.height(), clip.width(), std::vector<double>(clip.frame_size(), 0.0), index};
    const double* src = clip.frame_data(index);
    for (std::size_t p = 0; p < mask.data().size(); ++p) {
        if (mask.data()[p] != 0) {
            for (int c = 0; c < 3; ++c) {
                ref.pixels[p * 3 + c] = src[p * 3 + c];
            }
        }
    }
    return ref;
}

int random_reference_index(int frames, nn::Rng& rng)
{
    if (frames < 1) {
        throw InvalidInput("random_reference_index: no frames");
    }
    return static_cast<int>(rng.bits() % static_cast<std::uint64_t>(frames));
}

OcclusionMask canonical_hmd_mask(int height, int width)
{
    OcclusionMask m(height, width);
    for (int i = 0; i < height; ++i) {
        for (int j = 0; j < width; ++j) {
            m.at(i, j) = face::canonical_hmd_contains((j + 0.5) / width, (i + 0.5) / height) ? 1 : 0;
        }
    }
    return m;
}

OcclusionMask rect_mask(int height, int width, int i0, int j0, int i1, int j1)
{
    OcclusionMask m(height, width);
    for (int i = std::max(0, i0); i < std::min(height, i1); ++i) {
        for (int j = std::max(0, j0); j < std::min(width, j1); ++j) {
            m.at(i, j) = 1;
        }
    }
    return m;
}

SyntheticFaceSpec SyntheticFaceSpec::static_copy() const
{
    SyntheticFaceSpec s = *this;
    s.blink_amplitude = s.brow_amplitude = s.mouth_amplitude = s.smile_amplitude = 0.0;
    s.gaze_amplitude = s.sway_amplitude = s.roll_amplitude = 0.0;
    return s;
}

LandmarkSet posed_landmarks(const face::FaceShape& shape, const face::Pose2& pose)
{
    const auto v = face::vertices(shape);
    LandmarkSet out;
    out.points.reserve(face::kLandmarkCount);
    for (int i = 0; i < face::kLandmarkCount; ++i) {
        const auto p = face::apply(pose, v[i]);
        out.points.push_back({p.x + 0.5, p.y + 0.5, p.z});
    }
    return out;
}

void render_face(const face::FaceShape& shape, const face::Pose2& pose, const FaceAppearance& look, int height,
                 int width, double* rgb, std::vector<face::Region>* regions)
{
    using face::Region;
    const face::Outline outline(shape);
    nn::Rng noise(look.noise_seed);
    if (regions) {
        regions->assign(static_cast<std::size_t>(height) * width, Region::Background);
    }
    for (int i = 0; i < height; ++i) {
        for (int j = 0; j < width; ++j) {
            double lx, ly;
            face::unapply(pose, (j + 0.5) / width - 0.5, (i + 0.5) / height - 0.5, lx, ly);
            const Region r = outline.classify(lx, ly);
            const double shade = outline.shading(lx, ly);
            std::array<double, 3> c{};
            double k = 1.0;
            switch (r) {
            case Region::Background: c = look.background; break;
            case Region::Skin: c = look.skin; k = shade; break;
            case Region::Nose: c = look.skin; k = 0.88 * shade; break;
            case Region::Brow: c = look.brow; break;
            case Region::Sclera: c = look.sclera; break;
            case Region::Iris: c = look.iris; break;
            case Region::Pupil: c = look.pupil; break;
            case Region::Lips: c = look.lips; k = shade; break;
            case Region::MouthInterior: c = look.mouth; break;
            }
            const std::size_t p = static_cast<std::size_t>(i) * width + j;
            for (int ch = 0; ch < 3; ++ch) {
                const double n = look.noise_amplitude * (2.0 * noise.uniform() - 1.0);
                rgb[p * 3 + ch] = std::clamp(k * c[ch] + n, 0.0, 1.0);
            }
            if (regions) {
                (*regions)[p] = r;
            }
        }
    }
}

SyntheticClip generate_synthetic_clip(const SyntheticFaceSpec& spec, int frames, std::uint64_t seed)
{
    if (frames < 1) {
        throw InvalidInput("generate_synthetic_clip: frame count must be >= 1");
    }
    if (spec.height < 8 || spec.width < 8 || spec.blink_period <= 0 || spec.motion_period <= 0) {
        throw InvalidInput("generate_synthetic_clip: invalid spec");
    }
    constexpr double kTau = 2.0 * std::numbers::pi;
    nn::Rng rng(seed);

    face::FaceShape identity = face::FaceShape::base();
    const auto& spread = face::FaceShape::identity_spread();
    for (int k = 0; k < face::kIdentityCount; ++k) {
        identity.identity[k] += spec.identity_jitter * spread[k] * std::clamp(rng.normal(), -2.0, 2.0);
    }

    auto color = [&](double r, double g, double b, double jitter) {
        return std::array<double, 3>{std::clamp(r + rng.uniform(-jitter, jitter), 0.0, 1.0),
                                     std::clamp(g + rng.uniform(-jitter, jitter), 0.0, 1.0),
                                     std::clamp(b + rng.uniform(-jitter, jitter), 0.0, 1.0)};
    };
    FaceAppearance look;
    look.background = color(0.35, 0.4, 0.5, 0.15);
    look.skin = color(0.8, 0.62, 0.52, 0.12);
    look.brow = color(0.25, 0.18, 0.12, 0.08);
    look.sclera = color(0.95, 0.95, 0.93, 0.03);
    look.iris = color(0.35, 0.45, 0.4, 0.2);
    look.pupil = color(0.05, 0.05, 0.05, 0.03);
    look.lips = color(0.72, 0.36, 0.38, 0.08);
    look.mouth = color(0.25, 0.08, 0.08, 0.05);
    look.noise_amplitude = spec.noise_amplitude;
    look.noise_seed = rng.bits();

    std::array<double, 8> phase{};
    for (double& p : phase) {
        p = rng.uniform(0.0, kTau);
    }

    SyntheticClip out;
    out.clip = VideoClip(frames, spec.height, spec.width);
    const double mp = spec.motion_period;
    for (int t = 0; t < frames; ++t) {
        face::FaceShape s = identity;
        auto& e = s.expression;
        const double blink = std::pow(std::max(0.0, std::cos(kTau * t / spec.blink_period + phase[0])), 8);
        e[face::CloseRightEye] = e[face::CloseLeftEye] = spec.blink_amplitude * blink;
        e[face::RaiseRightBrow] = e[face::RaiseLeftBrow] =
            spec.brow_amplitude * 0.5 * (1.0 + std::sin(kTau * t / mp + phase[1]));
        e[face::MouthOpen] = spec.mouth_amplitude * 0.5 * (1.0 - std::cos(kTau * t / mp + phase[2]));
        e[face::Smile] = spec.smile_amplitude * std::sin(kTau * t / (1.5 * mp) + phase[3]);
        e[face::Gaze] = spec.gaze_amplitude * std::sin(kTau * t / mp + phase[4]);
        face::Pose2 pose{spec.roll_amplitude * std::sin(kTau * t / (2.0 * mp) + phase[5]),
                         spec.sway_amplitude * std::sin(kTau * t / (2.0 * mp) + phase[6]),
                         0.5 * spec.sway_amplitude * std::cos(kTau * t / (2.0 * mp) + phase[7])};
        render_face(s, pose, look, spec.height, spec.width, out.clip.frame_data(t));
        out.landmarks.push_back(posed_landmarks(s, pose));
        out.shapes.push_back(s);
        out.poses.push_back(pose);
    }
    return out;
}

std::string frame_filename(int index)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%05d.png", index);
    return buf;
}

void save_clip(const VideoClip& clip, const fs::path& dir)
{
    if (clip.empty()) {
        throw InvalidInput("save_clip: empty clip");
    }
    fs::create_directories(dir);
    for (const auto& entry : fs::directory_iterator(dir)) {
        const auto name = entry.path().filename().string();
        if (entry.path().extension() == ".png" && name.size() == 9 &&
            std::all_of(name.begin(), name.begin() + 5, [](char c) { return c >= '0' && c <= '9'; })) {
            fs::remove(entry.path());
        }
    }
    png::Image img{clip.height(), clip.width(), 3, std::vector<std::uint8_t>(clip.frame_size())};
    for (int t = 0; t < clip.frames(); ++t) {
        const double* f = clip.frame_data(t);
        for (std::size_t i = 0; i < clip.frame_size(); ++i) {
            img.bytes[i] = to_byte(f[i]);
        }
        png::write(dir / frame_filename(t), img);
    }
}

VideoClip load_clip(const fs::path& dir)
{
    if (!fs::is_directory(dir)) {
        throw FormatError(dir.string(), "not a directory");
    }
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".png") {
            files.push_back(entry.path());
        }
    }
    if (files.empty()) {
        throw FormatError(dir.string(), "no frame images");
    }
    std::sort(files.begin(), files.end());
    for (std::size_t t = 0; t < files.size(); ++t) {
        if (files[t].filename() != frame_filename(static_cast<int>(t))) {
            throw FormatError(dir.string(), "expected frame " + frame_filename(static_cast<int>(t)) + ", found " +
                                                files[t].filename().string());
        }
    }
    VideoClip clip;
    for (std::size_t t = 0; t < files.size(); ++t) {
        const png::Image img = png::read(files[t], 3);
        if (t == 0) {
            clip = VideoClip(static_cast<int>(files.size()), img.height, img.width);
        } else if (img.height != clip.height() || img.width != clip.width()) {
            throw FormatError(files[t].string(), "frame dimensions differ from frame 0");
        }
        double* f = clip.frame_data(static_cast<int>(t));
        for (std::size_t i = 0; i < img.bytes.size(); ++i) {
            f[i] = from_byte(img.bytes[i]);
        }
    }
    return clip;
}

void save_mask(const OcclusionMask& mask, const fs::path& path)
{
    png::Image img{mask.height(), mask.width(), 1, {}};
    img.bytes.reserve(mask.data().size());
    for (auto v : mask.data()) {
        img.bytes.push_back(v ? 255 : 0);
    }
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    png::write(path, img);
}

OcclusionMask load_mask(const fs::path& path)
{
    const png::Image img = png::read(path, 1);
    OcclusionMask m(img.height, img.width);
    for (int i = 0; i < img.height; ++i) {
        for (int j = 0; j < img.width; ++j) {
            m.at(i, j) = img.bytes[static_cast<std::size_t>(i) * img.width + j] >= 128 ? 1 : 0;
        }
    }
    return m;
}

void save_manifest(const ClipManifest& m, const fs::path& path)
{
    json j{{"name", m.name},
           {"frames_dir", m.frames_dir},
           {"mask", m.mask},
           {"reference_index", m.reference_index},
           {"frame_count", m.frame_count},
           {"height", m.height},
           {"width", m.width},
           {"landmarks", m.landmarks},
           {"shapes", m.shapes}};
    std::ofstream out(path);
    if (!out) {
        throw FormatError(path.string(), "cannot open for writing");
    }
    out << j.dump(2) << '\n';
}

ClipManifest load_manifest(const fs::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw FormatError(path.string(), "cannot open manifest");
    }
    try {
        const json j = json::parse(in);
        ClipManifest m;
        m.name = j.value("name", path.parent_path().filename().string());
        m.frames_dir = j.value("frames_dir", m.frames_dir);
        m.mask = j.value("mask", m.mask);
        m.reference_index = j.value("reference_index", 0);
        m.frame_count = j.value("frame_count", 0);
        m.height = j.value("height", 0);
        m.width = j.value("width", 0);
        m.landmarks = j.value("landmarks", std::string());
        m.shapes = j.value("shapes", std::string());
        return m;
    } catch (const json::exception& e) {
        throw FormatError(path.string(), e.what());
    }
}

void save_shapes(const std::vector<face::FaceShape>& shapes, const std::vector<face::Pose2>& poses,
                 const fs::path& path)
{
    if (shapes.size() != poses.size()) {
        throw InvalidInput("save_shapes: shape and pose counts differ");
    }
    json frames = json::array();
    for (std::size_t t = 0; t < shapes.size(); ++t) {
        frames.push_back({{"identity", shapes[t].identity},
                          {"expression", shapes[t].expression},
                          {"pose", {poses[t].roll, poses[t].tx, poses[t].ty}}});
    }
    std::ofstream out(path);
    if (!out) {
        throw FormatError(path.string(), "cannot open for writing");
    }
    out << json{{"frames", std::move(frames)}}.dump() << '\n';
}

void load_shapes(const fs::path& path, std::vector<face::FaceShape>& shapes, std::vector<face::Pose2>& poses)
{
    std::ifstream in(path);
    if (!in) {
        throw FormatError(path.string(), "cannot open shape file");
    }
    shapes.clear();
    poses.clear();
    try {
        const json j = json::parse(in);
        for (const auto& f : j.at("frames")) {
            face::FaceShape s;
            s.identity = f.at("identity").get<std::array<double, face::kIdentityCount>>();
            s.expression = f.at("expression").get<std::array<double, face::kExpressionCount>>();
            const auto p = f.at("pose").get<std::array<double, 3>>();
            shapes.push_back(s);
            poses.push_back({p[0], p[1], p[2]});
        }
    } catch (const json::exception& e) {
        throw FormatError(path.string(), e.what());
    }
}

ClipManifest write_synthetic_clip(const SyntheticClip& clip, const OcclusionMask& mask, const std::string& name,
                                  const fs::path& dir, int reference_index)
{
    ClipManifest m;
    m.name = name;
    m.reference_index = reference_index;
    m.frame_count = clip.clip.frames();
    m.height = clip.clip.height();
    m.width = clip.clip.width();
    m.landmarks = "landmarks.json";
    m.shapes = "shapes.json";
    fs::create_directories(dir);
    save_clip(clip.clip, dir / m.frames_dir);
    save_mask(mask, dir / m.mask);
    save_landmarks(clip.landmarks, dir / m.landmarks);
    save_shapes(clip.shapes, clip.poses, dir / m.shapes);
    save_manifest(m, dir / "clip.json");
    return m;
}

} // namespace hmdr
