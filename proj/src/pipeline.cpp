#include "hmdr/pipeline.hpp"

#include "hmdr/checkpoint.hpp"
#include "hmdr/error.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

namespace hmdr {

namespace fs = std::filesystem;
using ag::Var;
using nlohmann::json;

// ---- data -----------------------------------------------------------------------------

void Dataset::validate() const
{
    if (clips.empty()) {
        throw InvalidInput("dataset: no clips");
    }
    const auto& first = clips.front();
    std::set<std::string> names;
    for (const auto& c : clips) {
        if (!names.insert(c.name).second) {
            throw InvalidInput("dataset: duplicate clip name '" + c.name + "'");
        }
        if (c.clip.frames() != first.clip.frames() || c.clip.height() != first.clip.height() ||
            c.clip.width() != first.clip.width()) {
            throw InvalidInput("dataset: clip '" + c.name + "' differs in shape from '" + first.name + "'");
        }
        if (c.mask.height() != c.clip.height() || c.mask.width() != c.clip.width()) {
            throw InvalidInput("dataset: mask of '" + c.name + "' does not match its frames");
        }
        if (static_cast<int>(c.landmarks.size()) != c.clip.frames()) {
            throw InvalidInput("dataset: clip '" + c.name + "' needs landmarks for every frame");
        }
        for (const auto& l : c.landmarks) {
            if (l.size() != face::kLandmarkCount) {
                throw InvalidInput("dataset: clip '" + c.name + "' landmarks must have 478 points");
            }
        }
        if (!c.params.empty() && static_cast<int>(c.params.size()) != c.clip.frames()) {
            throw InvalidInput("dataset: clip '" + c.name + "' geometry does not cover every frame");
        }
        if (c.reference_index < 0 || c.reference_index >= c.clip.frames()) {
            throw InvalidInput("dataset: clip '" + c.name + "' reference index out of range");
        }
    }
}

namespace {

std::string clip_name(int index)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "clip%03d", index);
    return buf;
}

} // namespace

Dataset make_synthetic_dataset(const SyntheticDatasetOptions& o)
{
    if (o.clips < 1 || o.frames < 1 || o.size < 16) {
        throw InvalidInput("synthetic dataset: clips >= 1, frames >= 1 and size >= 16 required");
    }
    const auto& model = MorphableModel::toy();
    Dataset d;
    SyntheticFaceSpec spec;
    spec.height = o.size;
    spec.width = o.size;
    const OcclusionMask mask = canonical_hmd_mask(o.size, o.size);
    for (int c = 0; c < o.clips; ++c) {
        const auto s = generate_synthetic_clip(spec, o.frames, nn::derive_seed(o.seed, clip_name(c)));
        TrainingClip t;
        t.name = clip_name(c);
        t.clip = s.clip;
        t.mask = mask;
        t.landmarks = s.landmarks;
        for (int f = 0; f < o.frames; ++f) {
            t.params.push_back(params_from_shape(model, s.shapes[static_cast<std::size_t>(f)],
                                                 s.poses[static_cast<std::size_t>(f)]));
        }
        d.clips.push_back(std::move(t));
    }
    return d;
}

void save_dataset(const Dataset& dataset, const fs::path& dir)
{
    dataset.validate();
    fs::create_directories(dir);
    const auto& model = MorphableModel::toy();
    json index = json::array();
    for (const auto& c : dataset.clips) {
        const fs::path cdir = dir / c.name;
        fs::create_directories(cdir);
        ClipManifest m;
        m.name = c.name;
        m.reference_index = c.reference_index;
        m.frame_count = c.clip.frames();
        m.height = c.clip.height();
        m.width = c.clip.width();
        m.landmarks = "landmarks.json";
        save_clip(c.clip, cdir / m.frames_dir);
        save_mask(c.mask, cdir / m.mask);
        save_landmarks(c.landmarks, cdir / m.landmarks);
        if (!c.params.empty()) {
            m.shapes = "params.json";
            json p = json::array();
            for (const auto& fp : c.params) {
                p.push_back(fp.flatten());
            }
            std::ofstream(cdir / m.shapes) << json{{"id_rank", model.id_rank()}, {"exp_rank", model.exp_rank()}, {"params", p}}.dump();
        }
        save_manifest(m, cdir / "clip.json");
        index.push_back(c.name);
    }
    std::ofstream(dir / "dataset.json") << json{{"clips", index}}.dump(2) << '\n';
}

namespace {

json read_json(const fs::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw FormatError(path.string(), "cannot open");
    }
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw FormatError(path.string(), std::string("invalid JSON: ") + e.what());
    }
}

void write_text(const fs::path& path, const std::string& text)
{
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    std::ofstream out(path);
    if (!out) {
        throw FormatError(path.string(), "cannot write");
    }
    out << text;
}

bool is_clip_dir(const fs::path& dir) { return fs::is_regular_file(dir / "clip.json") || fs::is_directory(dir / "frames"); }

// Clip directories below `dir`, sorted by name.
std::vector<std::string> clip_inventory(const fs::path& dir)
{
    if (!fs::is_directory(dir)) {
        throw FormatError(dir.string(), "not a directory");
    }
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_directory() && is_clip_dir(e.path())) {
            names.push_back(e.path().filename().string());
        }
    }
    std::sort(names.begin(), names.end());
    return names;
}

VideoClip load_clip_dir(const fs::path& dir)
{
    if (fs::is_regular_file(dir / "clip.json")) {
        const ClipManifest m = load_manifest(dir / "clip.json");
        return load_clip(dir / m.frames_dir);
    }
    return load_clip(dir / "frames");
}

TrainingClip load_training_clip(const fs::path& dir)
{
    const ClipManifest m = load_manifest(dir / "clip.json");
    TrainingClip c;
    c.name = m.name.empty() ? dir.filename().string() : m.name;
    c.clip = load_clip(dir / m.frames_dir);
    c.mask = load_mask(dir / m.mask);
    c.reference_index = m.reference_index;
    if (m.landmarks.empty()) {
        throw FormatError((dir / "clip.json").string(), "clip has no landmark file");
    }
    c.landmarks = load_landmarks(dir / m.landmarks);
    if (!m.shapes.empty()) {
        const fs::path p = dir / m.shapes;
        const auto& model = MorphableModel::toy();
        if (m.shapes == "shapes.json") {
            std::vector<face::FaceShape> shapes;
            std::vector<face::Pose2> poses;
            load_shapes(p, shapes, poses);
            for (std::size_t f = 0; f < shapes.size(); ++f) {
                c.params.push_back(params_from_shape(model, shapes[f], poses[f]));
            }
        } else {
            const json j = read_json(p);
            try {
                const int id = j.at("id_rank").get<int>(), ex = j.at("exp_rank").get<int>();
                for (const auto& row : j.at("params")) {
                    c.params.push_back(FaceParams::unflatten(row.get<std::vector<double>>(), id, ex));
                }
            } catch (const json::exception& e) {
                throw FormatError(p.string(), std::string("bad parameter file: ") + e.what());
            }
        }
    }
    return c;
}

} // namespace

Dataset load_dataset(const fs::path& dir)
{
    Dataset d;
    std::vector<std::string> names;
    if (fs::is_regular_file(dir / "dataset.json")) {
        const json j = read_json(dir / "dataset.json");
        try {
            names = j.at("clips").get<std::vector<std::string>>();
        } catch (const json::exception& e) {
            throw FormatError((dir / "dataset.json").string(), e.what());
        }
    } else {
        names = clip_inventory(dir);
    }
    for (const auto& n : names) {
        d.clips.push_back(load_training_clip(dir / n));
    }
    d.validate();
    return d;
}

// ---- configuration -----------------------------------------------------------------------

ScorerPaths ScorerPaths::with_env() const
{
    ScorerPaths p = *this;
    const auto pick = [](std::string& slot, const char* var) {
        if (const char* v = std::getenv(var); v && *v) {
            slot = v;
        }
    };
    pick(p.vgg, "HMDR_VGG_WEIGHTS");
    pick(p.fer, "HMDR_FER_WEIGHTS");
    pick(p.embedder, "HMDR_EMBEDDER_WEIGHTS");
    pick(p.lpips, "HMDR_LPIPS_WEIGHTS");
    return p;
}

void TrainConfig::validate() const
{
    if (frames < 1 || size < 16 || size % 16 != 0) {
        throw InvalidInput("config: frames >= 1 and size a positive multiple of 16 required");
    }
    if (stage1_weights.adv != 0.0) {
        throw InvalidInput("config: stage 1 trains without the adversarial term (stage1_weights.adv must be 0)");
    }
    stage1_weights.validate();
    stage2_weights.validate();
    if (stage1_epochs < 0 || stage2_epochs < -1 || critic_steps < 1) {
        throw InvalidInput("config: negative epoch count or critic_steps < 1");
    }
    if (!(lr > 0.0) || !(geomreg_lr > 0.0) || !(gp_coefficient >= 0.0) || !(clip_value > 0.0) ||
        !(synergy_weight >= 0.0) || !(landmark_radius >= 0.0) || feature_width < 1) {
        throw InvalidInput("config: learning rates, penalty, clip value and widths must be positive");
    }
    LandmarkConfig::named(landmark_config);
}

namespace {

template <typename T>
void take(const json& j, const char* key, T& slot)
{
    if (j.contains(key)) {
        slot = j.at(key).get<T>();
    }
}

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where)
{
    if (!j.is_object()) {
        throw InvalidInput("config: '" + where + "' must be an object");
    }
    for (const auto& [k, v] : j.items()) {
        if (!known.count(k)) {
            throw InvalidInput("config: unknown key '" + k + "' in " + where);
        }
    }
}

json weights_json(const LossWeights& w)
{
    json j;
    for (LossTerm t : loss_terms()) {
        j[to_string(t)] = w[t];
    }
    return j;
}

LossWeights weights_from(const json& j, LossWeights w)
{
    std::set<std::string> known;
    for (LossTerm t : loss_terms()) {
        known.insert(to_string(t));
    }
    reject_unknown(j, known, "weights");
    for (LossTerm t : loss_terms()) {
        take(j, to_string(t).c_str(), w[t]);
    }
    return w;
}

std::string critic_mode_name(CriticMode m) { return m == CriticMode::GradientPenalty ? "gradient_penalty" : "clip"; }

CriticMode critic_mode_from(const std::string& s)
{
    if (s == "gradient_penalty") {
        return CriticMode::GradientPenalty;
    }
    if (s == "clip") {
        return CriticMode::WeightClipping;
    }
    throw InvalidInput("config: critic_mode must be 'gradient_penalty' or 'clip', got '" + s + "'");
}

} // namespace

json TrainConfig::to_json() const
{
    return json{
        {"frames", frames},
        {"size", size},
        {"landmark_config", landmark_config},
        {"landmark_radius", landmark_radius},
        {"random_reference", random_reference},
        {"generator",
         {{"base_channels", generator.base_channels},
          {"shift_fraction", generator.shift_fraction},
          {"identity_shift_init", generator.identity_shift_init},
          {"slope", generator.slope},
          {"attention", to_string(generator.attention)}}},
        {"discriminator",
         {{"base_channels", discriminator.base_channels},
          {"shift_fraction", discriminator.shift_fraction},
          {"identity_shift_init", discriminator.identity_shift_init},
          {"slope", discriminator.slope}}},
        {"geomreg",
         {{"base_channels", geomreg.base_channels},
          {"refine_hidden", geomreg.refine_hidden},
          {"feedback_hidden", geomreg.feedback_hidden},
          {"slope", geomreg.slope}}},
        {"lr", lr},
        {"geomreg_lr", geomreg_lr},
        {"stage1_epochs", stage1_epochs},
        {"stage2_epochs", stage2_epochs},
        {"stage1_weights", weights_json(stage1_weights)},
        {"stage2_weights", weights_json(stage2_weights)},
        {"critic_mode", critic_mode_name(critic_mode)},
        {"gp_coefficient", gp_coefficient},
        {"clip_value", clip_value},
        {"critic_steps", critic_steps},
        {"pretrain_geomreg", pretrain_geomreg},
        {"geomreg_pretrain",
         {{"iterations", geomreg_pretrain.iterations},
          {"batch", geomreg_pretrain.batch},
          {"lr", geomreg_pretrain.lr}}},
        {"synergy_weight", synergy_weight},
        {"scorers", {{"vgg", scorers.vgg}, {"fer", scorers.fer}, {"embedder", scorers.embedder}, {"lpips", scorers.lpips}}},
        {"feature_width", feature_width},
        {"seed", seed},
    };
}

TrainConfig TrainConfig::from_json(const json& j)
{
    TrainConfig c;
    try {
        reject_unknown(j,
                       {"frames", "size", "landmark_config", "landmark_radius", "random_reference", "generator",
                        "discriminator", "geomreg", "lr", "geomreg_lr", "stage1_epochs", "stage2_epochs",
                        "stage1_weights", "stage2_weights", "critic_mode", "gp_coefficient", "clip_value",
                        "critic_steps", "pretrain_geomreg", "geomreg_pretrain", "synergy_weight", "scorers",
                        "feature_width", "seed"},
                       "config");
        take(j, "frames", c.frames);
        take(j, "size", c.size);
        take(j, "landmark_config", c.landmark_config);
        take(j, "landmark_radius", c.landmark_radius);
        take(j, "random_reference", c.random_reference);
        if (j.contains("generator")) {
            const json& g = j.at("generator");
            reject_unknown(g, {"base_channels", "shift_fraction", "identity_shift_init", "slope", "attention"},
                           "generator");
            take(g, "base_channels", c.generator.base_channels);
            take(g, "shift_fraction", c.generator.shift_fraction);
            take(g, "identity_shift_init", c.generator.identity_shift_init);
            take(g, "slope", c.generator.slope);
            if (g.contains("attention")) {
                c.generator.attention = attention_placement_from_string(g.at("attention").get<std::string>());
            }
        }
        if (j.contains("discriminator")) {
            const json& d = j.at("discriminator");
            reject_unknown(d, {"base_channels", "shift_fraction", "identity_shift_init", "slope"}, "discriminator");
            take(d, "base_channels", c.discriminator.base_channels);
            take(d, "shift_fraction", c.discriminator.shift_fraction);
            take(d, "identity_shift_init", c.discriminator.identity_shift_init);
            take(d, "slope", c.discriminator.slope);
        }
        if (j.contains("geomreg")) {
            const json& g = j.at("geomreg");
            reject_unknown(g, {"base_channels", "refine_hidden", "feedback_hidden", "slope"}, "geomreg");
            take(g, "base_channels", c.geomreg.base_channels);
            take(g, "refine_hidden", c.geomreg.refine_hidden);
            take(g, "feedback_hidden", c.geomreg.feedback_hidden);
            take(g, "slope", c.geomreg.slope);
        }
        take(j, "lr", c.lr);
        take(j, "geomreg_lr", c.geomreg_lr);
        take(j, "stage1_epochs", c.stage1_epochs);
        take(j, "stage2_epochs", c.stage2_epochs);
        if (j.contains("stage1_weights")) {
            c.stage1_weights = weights_from(j.at("stage1_weights"), c.stage1_weights);
        }
        if (j.contains("stage2_weights")) {
            c.stage2_weights = weights_from(j.at("stage2_weights"), c.stage2_weights);
        }
        if (j.contains("critic_mode")) {
            c.critic_mode = critic_mode_from(j.at("critic_mode").get<std::string>());
        }
        take(j, "gp_coefficient", c.gp_coefficient);
        take(j, "clip_value", c.clip_value);
        take(j, "critic_steps", c.critic_steps);
        take(j, "pretrain_geomreg", c.pretrain_geomreg);
        if (j.contains("geomreg_pretrain")) {
            const json& p = j.at("geomreg_pretrain");
            reject_unknown(p, {"iterations", "batch", "lr"}, "geomreg_pretrain");
            take(p, "iterations", c.geomreg_pretrain.iterations);
            take(p, "batch", c.geomreg_pretrain.batch);
            take(p, "lr", c.geomreg_pretrain.lr);
        }
        take(j, "synergy_weight", c.synergy_weight);
        if (j.contains("scorers")) {
            const json& s = j.at("scorers");
            reject_unknown(s, {"vgg", "fer", "embedder", "lpips"}, "scorers");
            take(s, "vgg", c.scorers.vgg);
            take(s, "fer", c.scorers.fer);
            take(s, "embedder", c.scorers.embedder);
            take(s, "lpips", c.scorers.lpips);
        }
        take(j, "feature_width", c.feature_width);
        take(j, "seed", c.seed);
    } catch (const json::exception& e) {
        throw InvalidInput(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
}

TrainConfig TrainConfig::load(const fs::path& path)
{
    try {
        return from_json(read_json(path));
    } catch (const InvalidInput& e) {
        throw FormatError(path.string(), e.what());
    }
}

void TrainConfig::save(const fs::path& path) const { write_text(path, to_json().dump(2) + "\n"); }

TrainConfig TrainConfig::desk()
{
    TrainConfig c;
    c.generator.base_channels = 8;
    c.discriminator.base_channels = 8;
    c.geomreg.base_channels = 8;
    c.lr = 2e-3;
    c.stage1_epochs = 100;
    c.stage2_epochs = 25;
    c.geomreg_pretrain.iterations = 600;
    return c;
}

// ---- models ---------------------------------------------------------------------------------

namespace {

GeomRegConfig geom_config(const TrainConfig& c)
{
    GeomRegConfig g = c.geomreg;
    g.input_size = c.size;
    return g;
}

} // namespace

ModelBundle::ModelBundle(const TrainConfig& c)
    : config(c), landmarks(LandmarkConfig::named(c.landmark_config))
{
    config.validate();
    generator = std::make_unique<Generator>(config.generator, config.seed);
    discriminator = std::make_unique<Discriminator>(config.discriminator, config.seed);
    geomreg = std::make_unique<GeomRegressor>(MorphableModel::toy(), landmarks, geom_config(config), config.seed);
}

ModelBundle ModelBundle::from_checkpoint(const fs::path& path)
{
    const Checkpoint ckpt = load_checkpoint(path);
    TrainConfig cfg;
    try {
        cfg = TrainConfig::from_json(json::parse(ckpt.config));
    } catch (const std::exception& e) {
        throw IncompatibleCheckpoint(path.string() + ": stored configuration is unusable: " + e.what());
    }
    ModelBundle b(cfg);
    try {
        ckpt.load_params(b.generator->params());
        ckpt.load_params(b.geomreg->params());
        if (ckpt.has(b.discriminator->params().front().first)) {
            ckpt.load_params(b.discriminator->params());
        }
    } catch (const IncompatibleCheckpoint& e) {
        throw IncompatibleCheckpoint(path.string() + ": " + e.what());
    }
    return b;
}

// ---- loss log ---------------------------------------------------------------------------------

const std::vector<std::string>& LossLog::columns()
{
    static const std::vector<std::string> c = [] {
        std::vector<std::string> v{"stage", "epoch", "iteration", "clip"};
        for (LossTerm t : loss_terms()) {
            v.push_back("lambda_" + to_string(t));
        }
        for (LossTerm t : loss_terms()) {
            v.push_back(to_string(t));
        }
        v.insert(v.end(), {"total", "critic", "gradient_penalty", "synergy"});
        return v;
    }();
    return c;
}

namespace {

std::string num(double v)
{
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

std::string opt_num(const std::optional<double>& v) { return v ? num(*v) : std::string(); }

double parse_num(const std::string& s, const std::string& where)
{
    double v = 0.0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
        throw FormatError(where, "bad number '" + s + "'");
    }
    return v;
}

std::optional<double> parse_opt(const std::string& s, const std::string& where)
{
    if (s.empty()) {
        return std::nullopt;
    }
    return parse_num(s, where);
}

std::vector<std::string> split(const std::string& line, char sep)
{
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(line);
    while (std::getline(in, cur, sep)) {
        out.push_back(cur);
    }
    if (!line.empty() && line.back() == sep) {
        out.emplace_back();
    }
    return out;
}

} // namespace

std::string LossLog::to_csv() const
{
    std::ostringstream out;
    const auto& cols = columns();
    for (std::size_t k = 0; k < cols.size(); ++k) {
        out << (k ? "," : "") << cols[k];
    }
    out << '\n';
    for (const auto& r : rows) {
        out << r.stage << ',' << r.epoch << ',' << r.iteration << ',' << r.clip;
        for (LossTerm t : loss_terms()) {
            out << ',' << num(r.weights[t]);
        }
        for (const auto& v : r.terms) {
            out << ',' << opt_num(v);
        }
        out << ',' << num(r.total) << ',' << opt_num(r.critic) << ',' << opt_num(r.gradient_penalty) << ','
            << opt_num(r.synergy) << '\n';
    }
    return out.str();
}

void LossLog::save(const fs::path& path) const { write_text(path, to_csv()); }

LossLog LossLog::load(const fs::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw FormatError(path.string(), "cannot open loss log");
    }
    std::string line;
    std::getline(in, line);
    if (split(line, ',') != columns()) {
        throw FormatError(path.string(), "unexpected loss log header");
    }
    LossLog log;
    const std::string where = path.string();
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        const auto f = split(line, ',');
        if (f.size() != columns().size()) {
            throw FormatError(where, "loss log row has " + std::to_string(f.size()) + " fields");
        }
        LossLogRow r;
        r.stage = f[0];
        r.epoch = static_cast<int>(parse_num(f[1], where));
        r.iteration = static_cast<long long>(parse_num(f[2], where));
        r.clip = f[3];
        std::size_t k = 4;
        for (LossTerm t : loss_terms()) {
            r.weights[t] = parse_num(f[k++], where);
        }
        for (auto& v : r.terms) {
            v = parse_opt(f[k++], where);
        }
        r.total = parse_num(f[k++], where);
        r.critic = parse_opt(f[k++], where);
        r.gradient_penalty = parse_opt(f[k++], where);
        r.synergy = parse_opt(f[k++], where);
        log.rows.push_back(std::move(r));
    }
    return log;
}

std::vector<LossLogRow> LossLog::stage(const std::string& name) const
{
    std::vector<LossLogRow> out;
    std::copy_if(rows.begin(), rows.end(), std::back_inserter(out), [&](const LossLogRow& r) { return r.stage == name; });
    return out;
}

// ---- manifest ---------------------------------------------------------------------------------

json RunManifest::to_json() const
{
    return json{{"config", config},
                {"seed", seed},
                {"checkpoints", checkpoints},
                {"loss_log", loss_log},
                {"metrics", metrics},
                {"geomreg_checksum_init", geomreg_checksum_init},
                {"geomreg_checksum_stage1", geomreg_checksum_stage1},
                {"stage1_iterations", stage1_iterations},
                {"stage2_iterations", stage2_iterations},
                {"resumed", resumed}};
}

RunManifest RunManifest::from_json(const json& j)
{
    RunManifest m;
    try {
        m.config = j.at("config");
        m.seed = j.at("seed").get<std::uint64_t>();
        m.checkpoints = j.at("checkpoints").get<std::map<std::string, std::string>>();
        m.loss_log = j.at("loss_log").get<std::string>();
        m.metrics = j.value("metrics", std::string());
        m.geomreg_checksum_init = j.at("geomreg_checksum_init").get<std::uint64_t>();
        m.geomreg_checksum_stage1 = j.at("geomreg_checksum_stage1").get<std::uint64_t>();
        m.stage1_iterations = j.at("stage1_iterations").get<long long>();
        m.stage2_iterations = j.at("stage2_iterations").get<long long>();
        m.resumed = j.value("resumed", false);
    } catch (const json::exception& e) {
        throw InvalidInput(std::string("manifest: ") + e.what());
    }
    return m;
}

void RunManifest::save(const fs::path& path) const { write_text(path, to_json().dump(2) + "\n"); }

RunManifest RunManifest::load(const fs::path& path)
{
    try {
        return from_json(read_json(path));
    } catch (const InvalidInput& e) {
        throw FormatError(path.string(), e.what());
    }
}

// ---- training ---------------------------------------------------------------------------------

namespace {

std::unique_ptr<FeatureExtractor> make_extractor(const TrainConfig& c, const ScorerPaths& paths)
{
    if (!paths.vgg.empty()) {
        return std::make_unique<ConvFeatureExtractor>(ConvFeatureExtractor::load(paths.vgg));
    }
    return std::make_unique<ConvFeatureExtractor>(
        ConvFeatureExtractor::random(nn::derive_seed(c.seed, "vgg"), c.feature_width));
}

std::unique_ptr<ExpressionScorer> make_scorer(const TrainConfig& c, const ScorerPaths& paths)
{
    if (!paths.fer.empty()) {
        return std::make_unique<LinearExpressionScorer>(LinearExpressionScorer::load(paths.fer));
    }
    return std::make_unique<LinearExpressionScorer>(LinearExpressionScorer::random(nn::derive_seed(c.seed, "fer")));
}

std::vector<LandmarkSet> active_landmarks(const std::vector<LandmarkSet>& all, const LandmarkConfig& cfg)
{
    std::vector<LandmarkSet> out;
    out.reserve(all.size());
    for (const auto& l : all) {
        if (l.size() == cfg.size() && l.size() != face::kLandmarkCount) {
            out.push_back(l);
        } else {
            out.push_back(subset(l, cfg));
        }
    }
    return out;
}

Tensor stack_landmarks(const std::vector<LandmarkSet>& sets)
{
    const int t = static_cast<int>(sets.size()), n = sets.front().size();
    Tensor out({t, n, 3});
    for (int f = 0; f < t; ++f) {
        const Tensor s = sets[static_cast<std::size_t>(f)].to_tensor();
        std::copy(s.vec().begin(), s.vec().end(), out.vec().begin() + static_cast<std::ptrdiff_t>(f) * n * 3);
    }
    return out;
}

struct PreparedClip {
    const TrainingClip* source = nullptr;
    std::vector<LandmarkSet> landmarks; // active subset
    Tensor gt;                          // [T, 3, H, W]
    Tensor gt_landmarks;                // [T, N, 3]
};

std::vector<int> shuffled(int n, nn::Rng& rng)
{
    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        order[static_cast<std::size_t>(i)] = i;
    }
    for (int i = n - 1; i > 0; --i) {
        const int j = static_cast<int>(rng.bits() % static_cast<std::uint64_t>(i + 1));
        std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }
    return order;
}

// Restores requires_grad flags on scope exit.
class GradScope {
public:
    GradScope(const nn::NamedParams& params, bool flag) : params_(params)
    {
        for (const auto& [n, p] : params_) {
            saved_.push_back(p.requires_grad());
        }
        nn::set_requires_grad(params_, flag);
    }
    ~GradScope()
    {
        for (std::size_t i = 0; i < saved_.size(); ++i) {
            Var p = params_[i].second;
            p.set_requires_grad(saved_[i]);
        }
    }
    GradScope(const GradScope&) = delete;
    GradScope& operator=(const GradScope&) = delete;

private:
    const nn::NamedParams& params_;
    std::vector<bool> saved_;
};

void check_finite(double v, const std::string& what, const LossLogRow& row)
{
    if (!std::isfinite(v)) {
        throw NumericError(what + " is not finite at " + row.stage + " iteration " + std::to_string(row.iteration) +
                           " (epoch " + std::to_string(row.epoch) + ", clip " + row.clip + ")");
    }
}

class Trainer {
public:
    Trainer(const TrainConfig& config, const Dataset& dataset, const fs::path& out, const TrainOptions& options)
        : config_(config), dataset_(dataset), out_(out), options_(options), models_(config),
          paths_(config.scorers.with_env()), extractor_(make_extractor(config, paths_)),
          scorer_(make_scorer(config, paths_)),
          g_adam_(models_.generator->params(), {config.lr}),
          d_adam_(models_.discriminator->params(), {config.lr}),
          geo_adam_(models_.geomreg->params(), {config.geomreg_lr})
    {
        dataset.validate();
        const auto& first = dataset.clips.front().clip;
        if (first.frames() != config.frames || first.height() != config.size || first.width() != config.size) {
            throw InvalidInput("train: dataset clips are " + std::to_string(first.frames()) + "x" +
                               std::to_string(first.height()) + "x" + std::to_string(first.width()) +
                               " but the config expects " + std::to_string(config.frames) + "x" +
                               std::to_string(config.size) + "x" + std::to_string(config.size));
        }
        for (const auto& c : dataset.clips) {
            PreparedClip p;
            p.source = &c;
            p.landmarks = active_landmarks(c.landmarks, models_.landmarks);
            p.gt = c.clip.to_tensor();
            p.gt_landmarks = stack_landmarks(p.landmarks);
            clips_.push_back(std::move(p));
        }
    }

    TrainResult run()
    {
        fs::create_directories(out_ / "checkpoints");
        RunManifest& m = result_.manifest;
        m.config = config_.to_json();
        m.seed = config_.seed;
        m.loss_log = (out_ / "loss_log.csv").string();
        config_.save(out_ / "config.json");

        const fs::path ck1 = out_ / "checkpoints" / "stage1.ckpt";
        const fs::path ck2 = out_ / "checkpoints" / "stage2.ckpt";
        const bool have1 = options_.resume && fs::exists(ck1);
        const bool have2 = options_.resume && fs::exists(ck2);
        if (have1 || have2) {
            m.resumed = true;
            if (fs::exists(out_ / "loss_log.csv")) {
                result_.log = LossLog::load(out_ / "loss_log.csv");
            }
        }

        try {
            if (have2) {
                restore(ck2);
                m.checkpoints["stage1"] = ck1.string();
                m.checkpoints["stage2"] = ck2.string();
            } else {
                if (have1) {
                    restore(ck1);
                    m.checkpoints["stage1"] = ck1.string();
                    // Keep only the rows that the checkpoint covers.
                    result_.log.rows = result_.log.stage("stage1");
                } else {
                    result_.log.rows.clear();
                    if (config_.pretrain_geomreg) {
                        pretrain();
                    }
                    m.geomreg_checksum_init = nn::checksum(models_.geomreg->params());
                    stage1();
                    m.geomreg_checksum_stage1 = nn::checksum(models_.geomreg->params());
                    if (m.geomreg_checksum_stage1 != m.geomreg_checksum_init) {
                        throw NumericError("train: geometry parameters changed during stage 1");
                    }
                    save(ck1, "stage1");
                    m.checkpoints["stage1"] = ck1.string();
                }
                if (config_.stage2_epoch_count() > 0) {
                    stage2();
                    save(ck2, "stage2");
                    m.checkpoints["stage2"] = ck2.string();
                }
            }
        } catch (...) {
            result_.log.save(out_ / "loss_log.csv");
            throw;
        }
        m.stage1_iterations = static_cast<long long>(result_.log.stage("stage1").size());
        m.stage2_iterations = static_cast<long long>(result_.log.stage("stage2").size());
        result_.log.save(out_ / "loss_log.csv");
        m.save(out_ / "manifest.json");
        return result_;
    }

private:
    void pretrain()
    {
        const int t = config_.frames, s = config_.size, n = models_.landmarks.size();
        const int p = MorphableModel::toy().param_count();
        std::vector<Var> frames;
        std::vector<double> params, lms;
        for (const auto& c : clips_) {
            if (c.source->params.empty()) {
                throw InvalidInput("train: geometry pretraining needs ground-truth parameters for clip '" +
                                   c.source->name + "'");
            }
            frames.push_back(Var::constant(c.gt));
            for (const auto& fp : c.source->params) {
                const auto flat = fp.flatten();
                params.insert(params.end(), flat.begin(), flat.end());
            }
            lms.insert(lms.end(), c.gt_landmarks.vec().begin(), c.gt_landmarks.vec().end());
        }
        const int m = static_cast<int>(clips_.size()) * t;
        (void)s;
        GeomPretrainOptions o = config_.geomreg_pretrain;
        o.seed = nn::derive_seed(config_.seed, "geomreg-pretrain");
        pretrain_geomreg(*models_.geomreg, ag::concat(frames, 0).value(), Tensor({m, p}, params),
                         Tensor({m, n, 3}, lms), o);
    }

    GeneratorInput input_for(const PreparedClip& c, nn::Rng& rng) const
    {
        const int ref = config_.random_reference ? random_reference_index(config_.frames, rng) : c.source->reference_index;
        return GeneratorInput::build(c.source->clip, c.source->mask, c.landmarks, ref, 0.0, config_.landmark_radius);
    }

    // Non-adversarial terms on the raw generator output.
    void content_terms(LossVars& v, const LossWeights& w, const Var& out, const PreparedClip& c, GeomOutput* geo)
    {
        if (w.recon != 0.0) {
            v[LossTerm::Recon] = recon_loss(out, c.gt);
        }
        if (w.vgg != 0.0) {
            v[LossTerm::Vgg] = vgg_loss(out, c.gt, *extractor_);
        }
        if (w.style != 0.0) {
            v[LossTerm::Style] = style_loss(out, c.gt, *extractor_);
        }
        if (w.fer != 0.0) {
            v[LossTerm::Fer] = fer_loss(out, c.gt, *scorer_);
        }
        if (w.denselm != 0.0 || geo) {
            GeomOutput g = models_.geomreg->run(out);
            v[LossTerm::DenseLm] = dense_lm_loss(g.refined, c.gt_landmarks);
            if (geo) {
                *geo = std::move(g);
            }
        }
    }

    LossLogRow row_for(const std::string& stage, int epoch, const PreparedClip& c, const LossVars& v,
                       const LossReport& report)
    {
        LossLogRow row;
        row.stage = stage;
        row.epoch = epoch;
        row.iteration = static_cast<long long>(result_.log.rows.size());
        row.clip = c.source->name;
        row.weights = report.weights;
        for (LossTerm t : loss_terms()) {
            if (v[t].defined()) {
                row.terms[static_cast<std::size_t>(t)] = report[t];
            }
        }
        row.total = report.total;
        return row;
    }

    Var objective(const LossVars& v, const LossWeights& w, LossReport& report, const std::string& stage, int epoch,
                  const PreparedClip& c)
    {
        try {
            return total_loss(v, w, &report);
        } catch (const NumericError& e) {
            throw NumericError(std::string(e.what()) + " at " + stage + " iteration " +
                               std::to_string(result_.log.rows.size()) + " (epoch " + std::to_string(epoch) +
                               ", clip " + c.source->name + ")");
        }
    }

    void log(LossLogRow row)
    {
        if (options_.on_iteration) {
            options_.on_iteration(row);
        }
        result_.log.rows.push_back(std::move(row));
    }

    void stage1()
    {
        nn::Rng rng(nn::derive_seed(config_.seed, "stage1"));
        const LossWeights& w = config_.stage1_weights;
        const GradScope frozen(models_.geomreg->params(), false);
        for (int epoch = 0; epoch < config_.stage1_epochs; ++epoch) {
            for (int k : shuffled(static_cast<int>(clips_.size()), rng)) {
                const PreparedClip& c = clips_[static_cast<std::size_t>(k)];
                const GeneratorInput in = input_for(c, rng);
                const Var out = models_.generator->forward(Var::constant(in.assemble()));
                LossVars v;
                content_terms(v, w, out, c, nullptr);
                LossReport report;
                const Var total = objective(v, w, report, "stage1", epoch, c);
                LossLogRow row = row_for("stage1", epoch, c, v, report);
                check_finite(report.total, "total loss", row);
                g_adam_.zero_grad();
                ag::backward(total);
                g_adam_.step();
                log(std::move(row));
            }
        }
    }

    void stage2()
    {
        nn::Rng rng(nn::derive_seed(config_.seed, "stage2"));
        const LossWeights& w = config_.stage2_weights;
        Generator& g = *models_.generator;
        Discriminator& d = *models_.discriminator;
        for (int epoch = 0; epoch < config_.stage2_epoch_count(); ++epoch) {
            for (int k : shuffled(static_cast<int>(clips_.size()), rng)) {
                const PreparedClip& c = clips_[static_cast<std::size_t>(k)];
                const GeneratorInput in = input_for(c, rng);
                const Tensor x = in.assemble();

                // Critic update on the composited clip.
                double critic_value = 0.0, penalty_value = 0.0;
                for (int s = 0; s < config_.critic_steps; ++s) {
                    Tensor fake;
                    {
                        ag::NoGradGuard guard;
                        fake = composite(g.forward(Var::constant(x)), in).value();
                    }
                    const Var real_s = d.score(Var::constant(c.gt), in.mask);
                    const Var fake_s = d.score(Var::constant(fake), in.mask);
                    Var loss = critic_adv_loss(real_s, fake_s);
                    critic_value = loss.item();
                    penalty_value = 0.0;
                    if (config_.critic_mode == CriticMode::GradientPenalty && config_.gp_coefficient > 0.0) {
                        const MaskedCritic critic(d, in.mask);
                        const GradientPenalty gp =
                            gradient_penalty(critic, c.gt, fake, rng.uniform(), config_.gp_coefficient);
                        penalty_value = gp.penalty.item();
                        loss = ag::add(loss, gp.penalty);
                    }
                    if (!std::isfinite(loss.item())) {
                        LossLogRow probe;
                        probe.stage = "stage2";
                        probe.epoch = epoch;
                        probe.iteration = static_cast<long long>(result_.log.rows.size());
                        probe.clip = c.source->name;
                        check_finite(loss.item(), "critic loss", probe);
                    }
                    d_adam_.zero_grad();
                    ag::backward(loss);
                    d_adam_.step();
                    if (config_.critic_mode == CriticMode::WeightClipping) {
                        clip_weights(d.params(), config_.clip_value);
                    }
                }

                // Generator and geometry update.
                const GradScope frozen_critic(d.params(), false);
                const Var out = g.forward(Var::constant(x));
                LossVars v;
                if (w.adv != 0.0) {
                    v[LossTerm::Adv] = generator_adv_loss(d.score(composite(out, in), in.mask));
                }
                GeomOutput geo;
                content_terms(v, w, out, c, &geo);
                LossReport report;
                const Var total = objective(v, w, report, "stage2", epoch, c);
                const Var synergy = synergy_loss(*models_.geomreg, geo, c.gt_landmarks);
                LossLogRow row = row_for("stage2", epoch, c, v, report);
                row.critic = critic_value;
                row.gradient_penalty = penalty_value;
                row.synergy = synergy.item();
                check_finite(report.total, "total loss", row);
                check_finite(*row.synergy, "synergy loss", row);
                g_adam_.zero_grad();
                geo_adam_.zero_grad();
                ag::backward(ag::add(total, ag::mul_scalar(synergy, config_.synergy_weight)));
                g_adam_.step();
                geo_adam_.step();
                log(std::move(row));
            }
        }
    }

    void save(const fs::path& path, const std::string& stage)
    {
        Checkpoint ck;
        ck.stage = stage;
        ck.config = config_.to_json().dump();
        ck.meta["seed"] = std::to_string(config_.seed);
        ck.meta["iterations"] = std::to_string(result_.log.rows.size());
        ck.meta["geomreg_checksum_init"] = std::to_string(result_.manifest.geomreg_checksum_init);
        ck.meta["geomreg_checksum_stage1"] = std::to_string(result_.manifest.geomreg_checksum_stage1);
        ck.put_params(models_.generator->params());
        ck.put_params(models_.discriminator->params());
        ck.put_params(models_.geomreg->params());
        ck.put_optimizer("opt.gen", g_adam_);
        ck.put_optimizer("opt.disc", d_adam_);
        ck.put_optimizer("opt.geom", geo_adam_);
        save_checkpoint(ck, path);
    }

    void restore(const fs::path& path)
    {
        const Checkpoint ck = load_checkpoint(path);
        if (json::parse(ck.config) != config_.to_json()) {
            throw IncompatibleCheckpoint(path.string() + ": written by a different configuration");
        }
        ck.load_params(models_.generator->params());
        ck.load_params(models_.discriminator->params());
        ck.load_params(models_.geomreg->params());
        ck.load_optimizer("opt.gen", g_adam_);
        ck.load_optimizer("opt.disc", d_adam_);
        ck.load_optimizer("opt.geom", geo_adam_);
        const auto meta = [&](const char* key) -> std::uint64_t {
            const auto it = ck.meta.find(key);
            return it == ck.meta.end() ? 0 : std::stoull(it->second);
        };
        result_.manifest.geomreg_checksum_init = meta("geomreg_checksum_init");
        result_.manifest.geomreg_checksum_stage1 = meta("geomreg_checksum_stage1");
    }

    TrainConfig config_;
    const Dataset& dataset_;
    fs::path out_;
    TrainOptions options_;
    ModelBundle models_;
    ScorerPaths paths_;
    std::unique_ptr<FeatureExtractor> extractor_;
    std::unique_ptr<ExpressionScorer> scorer_;
    nn::Adam g_adam_;
    nn::Adam d_adam_;
    nn::Adam geo_adam_;
    std::vector<PreparedClip> clips_;
    TrainResult result_;
};

} // namespace

TrainResult train(const TrainConfig& config, const Dataset& dataset, const fs::path& out, const TrainOptions& options)
{
    config.validate();
    Trainer trainer(config, dataset, out, options);
    return trainer.run();
}

// ---- inference ---------------------------------------------------------------------------------

InferenceResult infer(const ModelBundle& models, const VideoClip& clip, const OcclusionMask& mask,
                      const std::vector<LandmarkSet>& landmarks, int reference_index)
{
    const int size = models.config.size;
    if (clip.height() != size || clip.width() != size) {
        throw InvalidInput("infer: the model was trained on " + std::to_string(size) + "x" + std::to_string(size) +
                           " frames, got " + std::to_string(clip.height()) + "x" + std::to_string(clip.width()));
    }
    if (static_cast<int>(landmarks.size()) != clip.frames()) {
        throw InvalidInput("infer: need one landmark set per frame");
    }
    const GeneratorInput in = GeneratorInput::build(clip, mask, active_landmarks(landmarks, models.landmarks),
                                                    reference_index, 0.0, models.config.landmark_radius);
    InferenceResult r;
    r.inpainted = inpaint(*models.generator, in);
    r.meshes = reconstruct_clip(*models.geomreg, r.inpainted.to_tensor());
    return r;
}

void infer_dataset(const ModelBundle& models, const Dataset& dataset, const fs::path& out)
{
    for (const auto& c : dataset.clips) {
        const InferenceResult r = infer(models, c.clip, c.mask, c.landmarks, c.reference_index);
        const fs::path dir = out / c.name;
        fs::create_directories(dir / "meshes");
        ClipManifest m;
        m.name = c.name;
        m.reference_index = c.reference_index;
        m.frame_count = r.inpainted.frames();
        m.height = r.inpainted.height();
        m.width = r.inpainted.width();
        save_clip(r.inpainted, dir / m.frames_dir);
        save_mask(c.mask, dir / m.mask);
        save_manifest(m, dir / "clip.json");
        for (std::size_t t = 0; t < r.meshes.size(); ++t) {
            char name[32];
            std::snprintf(name, sizeof name, "%05zu.obj", t);
            save_mesh(r.meshes[t], dir / "meshes" / name);
        }
    }
}

// ---- evaluation ---------------------------------------------------------------------------------

MetricsReport evaluate_clips(const std::vector<NamedClip>& pred, const std::vector<NamedClip>& gt,
                             const EvaluateOptions& options)
{
    std::map<std::string, const VideoClip*> truth;
    for (const auto& g : gt) {
        truth[g.name] = &g.clip;
    }
    std::vector<std::string> missing, extra;
    for (const auto& p : pred) {
        if (!truth.count(p.name)) {
            extra.push_back(p.name);
        }
    }
    std::set<std::string> pred_names;
    for (const auto& p : pred) {
        pred_names.insert(p.name);
    }
    for (const auto& g : gt) {
        if (!pred_names.count(g.name)) {
            missing.push_back(g.name);
        }
    }
    if (!missing.empty() || !extra.empty()) {
        std::string msg = "evaluate: clip inventories differ;";
        for (const auto& n : missing) {
            msg += " missing prediction '" + n + "'";
        }
        for (const auto& n : extra) {
            msg += " no ground truth for '" + n + "'";
        }
        throw InvalidInput(msg);
    }
    if (pred.empty()) {
        throw InvalidInput("evaluate: no clips");
    }

    const ScorerPaths paths = options.scorers.with_env();
    std::unique_ptr<Embedder> embedder;
    if (!paths.embedder.empty()) {
        embedder = std::make_unique<ProjectionEmbedder>(ProjectionEmbedder::load(paths.embedder));
    } else {
        embedder = std::make_unique<ProjectionEmbedder>(ProjectionEmbedder::random(options.seed));
    }
    std::unique_ptr<PerceptualScorer> perceptual;
    if (!paths.lpips.empty()) {
        perceptual = std::make_unique<FeaturePerceptualScorer>(
            std::make_shared<ConvFeatureExtractor>(ConvFeatureExtractor::load(paths.lpips)));
    } else {
        perceptual = default_perceptual_scorer(options.seed);
    }

    MetricsReport report;
    report.landmark_config = options.landmark_label;
    for (const auto& p : pred) {
        const VideoClip& g = *truth.at(p.name);
        MetricsRow row{p.name, {}};
        row.values["MSE"] = mse(p.clip, g);
        row.values["PSNR"] = psnr(p.clip, g);
        row.values["SSIM"] = ssim(p.clip, g);
        row.values["LPIPS"] = lpips(p.clip, g, *perceptual);
        if (p.clip.frames() >= 2) {
            row.values["FID"] = fid(p.clip, g, *embedder);
        }
        if (options.geometry) {
            const auto pm = reconstruct_clip(*options.geometry, p.clip.to_tensor());
            const auto gm = reconstruct_clip(*options.geometry, g.to_tensor());
            double ch = 0.0, rms = 0.0, hd = 0.0;
            for (std::size_t t = 0; t < pm.size(); ++t) {
                ch += chamfer(pm[t], gm[t]);
                rms += rms_error(pm[t], gm[t]);
                hd += mean_hausdorff(pm[t], gm[t]);
            }
            const double n = static_cast<double>(pm.size());
            row.values["Average Chamfer Distance"] = ch / n;
            row.values["Average RMS Error"] = rms / n;
            row.values["Average Hausdorff Distance"] = hd / n;
        }
        report.add(std::move(row));
    }
    return report;
}

MetricsReport evaluate(const fs::path& pred_dir, const fs::path& gt_dir, const EvaluateOptions& options)
{
    const auto pn = clip_inventory(pred_dir);
    const auto gn = clip_inventory(gt_dir);
    std::vector<NamedClip> pred, gt;
    const std::set<std::string> gset(gn.begin(), gn.end()), pset(pn.begin(), pn.end());
    for (const auto& n : pn) {
        pred.push_back({n, gset.count(n) ? load_clip_dir(pred_dir / n) : VideoClip()});
    }
    for (const auto& n : gn) {
        gt.push_back({n, pset.count(n) ? load_clip_dir(gt_dir / n) : VideoClip()});
    }
    return evaluate_clips(pred, gt, options);
}

// ---- ablation ---------------------------------------------------------------------------------

bool AblationResult::ok() const
{
    return std::all_of(runs.begin(), runs.end(), [](const AblationRun& r) { return r.error.empty() && r.report; });
}

std::vector<MetricsReport> AblationResult::reports() const
{
    std::vector<MetricsReport> out;
    for (const auto& r : runs) {
        if (r.report) {
            out.push_back(*r.report);
        }
    }
    return out;
}

AblationResult ablate(const TrainConfig& base, const Dataset& train_set, const Dataset& eval_set, const fs::path& out,
                      const std::vector<std::string>& configs, const std::function<void(const std::string&)>& progress)
{
    base.validate();
    eval_set.validate();
    AblationResult result;
    for (const auto& name : configs) {
        AblationRun run;
        run.landmark_config = name;
        TrainConfig cfg = base;
        cfg.landmark_config = name;
        run.config = cfg.to_json();
        const fs::path dir = out / name;
        if (progress) {
            progress(name);
        }
        try {
            const TrainResult tr = train(cfg, train_set, dir);
            const auto& ck = tr.manifest.checkpoints;
            const std::string last = ck.count("stage2") ? ck.at("stage2") : ck.at("stage1");
            const ModelBundle models = ModelBundle::from_checkpoint(last);
            std::vector<NamedClip> pred, gt;
            for (const auto& c : eval_set.clips) {
                const InferenceResult r = infer(models, c.clip, c.mask, c.landmarks, c.reference_index);
                pred.push_back({c.name, r.inpainted});
                gt.push_back({c.name, c.clip});
            }
            EvaluateOptions eo;
            eo.geometry = models.geomreg.get();
            eo.landmark_label = models.landmarks.label();
            eo.seed = cfg.seed;
            eo.scorers = cfg.scorers;
            MetricsReport report = evaluate_clips(pred, gt, eo);
            report.save_csv(dir / "metrics.csv");
            RunManifest m = tr.manifest;
            m.metrics = (dir / "metrics.csv").string();
            m.save(dir / "manifest.json");
            run.report = std::move(report);
        } catch (const std::exception& e) {
            run.error = e.what();
            write_text(dir / "error.txt", run.error + "\n");
        }
        result.runs.push_back(std::move(run));
        // Partial results are written after every run.
        write_text(out / "comparison.csv", comparison_csv(result.reports()));
        write_text(out / "comparison.txt", comparison_table(result.reports()));
    }
    json summary = json::array();
    for (const auto& r : result.runs) {
        summary.push_back({{"landmark_config", r.landmark_config}, {"ok", r.error.empty()}, {"error", r.error}});
    }
    write_text(out / "ablation.json", summary.dump(2) + "\n");
    return result;
}

} // namespace hmdr
