#include "hmdr/landmarks.hpp"

#include "hmdr/error.hpp"
#include "hmdr_assets.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

namespace hmdr {

using nlohmann::json;

Tensor LandmarkSet::to_tensor() const
{
    Tensor t({size(), 3});
    for (int i = 0; i < size(); ++i) {
        t[i * 3] = points[i].x;
        t[i * 3 + 1] = points[i].y;
        t[i * 3 + 2] = points[i].z;
    }
    return t;
}

LandmarkSet LandmarkSet::from_tensor(const Tensor& t)
{
    if (t.rank() != 2 || t.dim(1) != 3) {
        throw InvalidInput("LandmarkSet::from_tensor: expected [N, 3], got " + shape_str(t.shape()));
    }
    LandmarkSet s;
    for (int i = 0; i < t.dim(0); ++i) {
        s.points.push_back({t[i * 3], t[i * 3 + 1], t[i * 3 + 2]});
    }
    return s;
}

namespace {

std::vector<int> standard68()
{
    const auto& L = face::layout();
    std::vector<int> idx;
    for (int i = 1; i <= 17; ++i) {
        idx.push_back(L.face_oval.at(i));
    }
    for (const auto* brow : {&L.right_brow, &L.left_brow}) {
        for (int k = 0; k < 5; ++k) {
            idx.push_back(brow->at(k));
        }
    }
    for (const auto* eye : {&L.right_eye, &L.left_eye}) {
        for (int k : {0, 3, 5, 8, 11, 13}) {
            idx.push_back(eye->at(k));
        }
    }
    for (int k = 0; k < 4; ++k) {
        idx.push_back(L.nose.at(k));
    }
    for (int k : {6, 7, 5, 10, 11}) {
        idx.push_back(L.nose.at(k));
    }
    for (int k : {0, 2, 3, 5, 7, 8, 10, 12, 13, 15, 17, 18}) {
        idx.push_back(L.outer_lips.at(k));
    }
    for (int k = 0; k < 16; k += 2) {
        idx.push_back(L.inner_lips.at(k));
    }
    return idx;
}

std::vector<int> eyelids()
{
    const auto& L = face::layout();
    std::vector<int> idx;
    for (const auto* eye : {&L.right_eye, &L.left_eye}) {
        for (int k : {0, 10, 14, 8, 4}) {
            idx.push_back(eye->at(k));
        }
    }
    return idx;
}

std::vector<int> focus20()
{
    const auto& L = face::layout();
    std::vector<int> idx = eyelids();
    for (const auto* brow : {&L.right_brow, &L.left_brow}) {
        for (int k = 0; k < 5; ++k) {
            idx.push_back(brow->at(k));
        }
    }
    return idx;
}

} // namespace

std::string LandmarkConfig::label() const { return std::to_string(size()) + " LM"; }

LandmarkConfig LandmarkConfig::full()
{
    LandmarkConfig c{"full478", {}};
    for (int i = 0; i < face::kLandmarkCount; ++i) {
        c.indices.push_back(i);
    }
    return c;
}

LandmarkConfig LandmarkConfig::named(std::string_view name)
{
    if (name == "dense216") {
        return {"dense216", std::vector<int>(std::begin(assets::kDense216), std::end(assets::kDense216))};
    }
    if (name == "standard68") {
        return {"standard68", standard68()};
    }
    if (name == "focus20") {
        return {"focus20", focus20()};
    }
    if (name == "minimal10") {
        return {"minimal10", eyelids()};
    }
    if (name == "full478") {
        return full();
    }
    throw InvalidInput("unknown landmark configuration '" + std::string(name) + "'");
}

const std::vector<std::string>& LandmarkConfig::ablation_names()
{
    static const std::vector<std::string> names = {"dense216", "standard68", "focus20", "minimal10"};
    return names;
}

LandmarkConfig LandmarkConfig::parse(const std::string& text)
{
    const auto first = text.find_first_not_of(" \t\r\n");
    if (first == std::string::npos || text[first] != '{') {
        auto last = text.find_last_not_of(" \t\r\n");
        return named(text.substr(first == std::string::npos ? 0 : first,
                                 last == std::string::npos ? 0 : last - first + 1));
    }
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw InvalidInput(std::string("landmark configuration: ") + e.what());
    }
    if (!j.contains("indices")) {
        return named(j.at("name").get<std::string>());
    }
    LandmarkConfig c{j.value("name", std::string("custom")), j.at("indices").get<std::vector<int>>()};
    for (int i : c.indices) {
        if (i < 0 || i >= face::kLandmarkCount) {
            throw InvalidInput("landmark configuration: index " + std::to_string(i) + " out of range");
        }
    }
    return c;
}

std::vector<int> compute_dense216()
{
    const auto v = face::vertices(face::FaceShape::base());
    std::vector<int> idx;
    for (int i = 0; i < face::kLandmarkCount; ++i) {
        if (face::canonical_hmd_contains(v[i].x + 0.5, v[i].y + 0.5)) {
            idx.push_back(i);
        }
    }
    return idx;
}

LandmarkSet subset(const LandmarkSet& landmarks, const LandmarkConfig& config)
{
    if (landmarks.size() != face::kLandmarkCount) {
        throw InvalidInput("subset: expected 478 landmarks, got " + std::to_string(landmarks.size()));
    }
    LandmarkSet out;
    out.points.reserve(config.indices.size());
    for (int i : config.indices) {
        if (i < 0 || i >= landmarks.size()) {
            throw InvalidInput("subset: index out of range");
        }
        out.points.push_back(landmarks.points[i]);
    }
    return out;
}

int pixel_index(double coord, int extent)
{
    const double p = std::floor(coord * extent);
    return static_cast<int>(std::clamp(p, 0.0, static_cast<double>(extent - 1)));
}

LandmarkSet select_masked_region(const LandmarkSet& landmarks, const OcclusionMask& mask)
{
    LandmarkSet out;
    for (const auto& p : landmarks.points) {
        if (mask.at(pixel_index(p.y, mask.height()), pixel_index(p.x, mask.width())) != 0) {
            out.points.push_back(p);
        }
    }
    return out;
}

Tensor rasterize(const LandmarkSet& landmarks, int height, int width, double radius)
{
    if (height < 1 || width < 1 || radius < 0) {
        throw InvalidInput("rasterize: need H, W >= 1 and radius >= 0");
    }
    Tensor map({height, width});
    const int reach = static_cast<int>(std::floor(radius));
    for (const auto& p : landmarks.points) {
        const int ci = pixel_index(p.y, height), cj = pixel_index(p.x, width);
        for (int di = -reach; di <= reach; ++di) {
            for (int dj = -reach; dj <= reach; ++dj) {
                const int i = ci + di, j = cj + dj;
                if (i < 0 || j < 0 || i >= height || j >= width || di * di + dj * dj > radius * radius) {
                    continue;
                }
                map[static_cast<std::size_t>(i) * width + j] = 1.0;
            }
        }
    }
    return map;
}

double huber(double a, double b, HuberParams params)
{
    if (!(params.delta > 0)) {
        throw InvalidInput("huber: delta must be positive");
    }
    const double r = std::abs(a - b);
    return r <= params.delta ? 0.5 * r * r : params.delta * r - 0.5 * params.delta * params.delta;
}

double dense_lm_loss(const LandmarkSet& predicted, const LandmarkSet& ground_truth, HuberParams params, bool use_z)
{
    if (predicted.size() != ground_truth.size() || predicted.size() == 0) {
        throw InvalidInput("dense_lm_loss: landmark counts differ or are zero");
    }
    double total = 0.0;
    for (int i = 0; i < predicted.size(); ++i) {
        const auto& p = predicted.points[i];
        const auto& g = ground_truth.points[i];
        total += huber(p.x, g.x, params) + huber(p.y, g.y, params);
        if (use_z) {
            total += huber(p.z, g.z, params);
        }
    }
    return total / predicted.size();
}

ag::Var dense_lm_loss(const ag::Var& predicted, const Tensor& ground_truth, HuberParams params, bool use_z)
{
    if (predicted.shape() != ground_truth.shape() || predicted.value().rank() < 2 ||
        predicted.shape().back() != 3 || predicted.size() == 0) {
        throw InvalidInput("dense_lm_loss: expected matching [..., N, 3] shapes, got " +
                           shape_str(predicted.shape()) + " and " + shape_str(ground_truth.shape()));
    }
    if (!(params.delta > 0)) {
        throw InvalidInput("huber: delta must be positive");
    }
    ag::Var residual = ag::sub(predicted, ag::Var::constant(ground_truth));
    if (!use_z) {
        Tensor keep(predicted.shape(), 1.0);
        for (std::size_t i = 2; i < keep.size(); i += 3) {
            keep[i] = 0.0;
        }
        residual = ag::mul(residual, ag::Var::constant(keep));
    }
    const double points = static_cast<double>(predicted.size() / 3);
    return ag::mul_scalar(ag::sum(ag::huber(residual, params.delta)), 1.0 / points);
}

std::uint64_t frame_hash(const FrameView& frame)
{
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&](const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h = (h ^ b[i]) * 1099511628211ULL;
        }
    };
    mix(&frame.height, sizeof(int));
    mix(&frame.width, sizeof(int));
    mix(frame.data, frame.size() * sizeof(double));
    return h;
}

void SyntheticDetector::add(const FrameView& frame, const LandmarkSet& landmarks)
{
    table_[frame_hash(frame)] = landmarks;
    std::vector<double> quantized(frame.data, frame.data + frame.size());
    for (double& v : quantized) {
        v = from_byte(to_byte(v));
    }
    table_[frame_hash({frame.height, frame.width, quantized.data()})] = landmarks;
}

std::optional<LandmarkSet> SyntheticDetector::detect(const FrameView& frame)
{
    auto it = table_.find(frame_hash(frame));
    if (it == table_.end()) {
        return std::nullopt;
    }
    return it->second;
}

void save_landmarks(const std::vector<LandmarkSet>& per_frame, const std::filesystem::path& path)
{
    json frames = json::array();
    for (std::size_t t = 0; t < per_frame.size(); ++t) {
        json pts = json::array();
        for (const auto& p : per_frame[t].points) {
            pts.push_back({p.x, p.y, p.z});
        }
        frames.push_back({{"frame_index", t}, {"N", per_frame[t].size()}, {"points", std::move(pts)}});
    }
    std::ofstream out(path);
    if (!out) {
        throw FormatError(path.string(), "cannot open for writing");
    }
    out << json{{"frames", std::move(frames)}}.dump() << '\n';
}

std::vector<LandmarkSet> load_landmarks(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw FormatError(path.string(), "cannot open landmark file");
    }
    std::vector<LandmarkSet> out;
    try {
        const json j = json::parse(in);
        for (const auto& rec : j.at("frames")) {
            const auto index = rec.at("frame_index").get<std::size_t>();
            if (index != out.size()) {
                throw FormatError(path.string(), "frame_index " + std::to_string(index) + " out of sequence");
            }
            LandmarkSet s;
            for (const auto& p : rec.at("points")) {
                if (p.size() != 3) {
                    throw FormatError(path.string(), "landmark point must have 3 coordinates");
                }
                s.points.push_back({p[0].get<double>(), p[1].get<double>(), p[2].get<double>()});
            }
            if (s.size() != rec.at("N").get<int>()) {
                throw FormatError(path.string(), "point count does not match N");
            }
            out.push_back(std::move(s));
        }
    } catch (const json::exception& e) {
        throw FormatError(path.string(), e.what());
    }
    return out;
}

} // namespace hmdr
