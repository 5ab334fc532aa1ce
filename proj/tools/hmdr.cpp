// hmdr: prepare data, train, infer, evaluate, ablate and report.
//
// Exit status: 0 on full success, 1 on any failure (including a partially
// failed ablation), 2 on usage errors.

#include "hmdr/error.hpp"
#include "hmdr/pipeline.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>

namespace fs = std::filesystem;
using namespace hmdr;

namespace {

struct Globals {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
};

TrainConfig resolve_config(const Globals& g)
{
    TrainConfig c = g.config.empty() ? TrainConfig::desk() : TrainConfig::load(g.config);
    if (g.seed) {
        c.seed = *g.seed;
    }
    c.scorers = c.scorers.with_env();
    c.validate();
    return c;
}

fs::path require_out(const Globals& g)
{
    if (g.out.empty()) {
        throw InvalidInput("--out is required");
    }
    fs::create_directories(g.out);
    return g.out;
}

void write_text(const fs::path& p, const std::string& s)
{
    std::ofstream f(p, std::ios::binary);
    f << s;
    if (!f) {
        throw FormatError(p.string(), "cannot write");
    }
}

fs::path last_checkpoint(const fs::path& run_or_ckpt)
{
    if (fs::is_regular_file(run_or_ckpt)) {
        return run_or_ckpt;
    }
    for (const char* stage : {"stage2.ckpt", "stage1.ckpt"}) {
        const fs::path p = run_or_ckpt / "checkpoints" / stage;
        if (fs::exists(p)) {
            return p;
        }
    }
    throw InvalidInput("no checkpoint under " + run_or_ckpt.string());
}

// ---- subcommands ------------------------------------------------------------------------------

struct PrepareArgs {
    int clips = 4;
    int eval_clips = 2;
    int frames = 8;
    int size = 64;
};

int run_prepare(const Globals& g, const PrepareArgs& a)
{
    const fs::path out = require_out(g);
    const std::uint64_t seed = g.seed.value_or(0);
    const Dataset train_set = make_synthetic_dataset({a.clips, a.frames, a.size, nn::derive_seed(seed, "train")});
    save_dataset(train_set, out / "train");
    if (a.eval_clips > 0) {
        const Dataset eval_set = make_synthetic_dataset({a.eval_clips, a.frames, a.size, nn::derive_seed(seed, "eval")});
        save_dataset(eval_set, out / "eval");
    }
    std::printf("wrote %d training and %d evaluation clips to %s\n", a.clips, a.eval_clips, out.string().c_str());
    return 0;
}

struct TrainArgs {
    std::string data;
    bool resume = false;
    int stage1_epochs = -1;
    int stage2_epochs = -2;
    std::string landmarks;
};

int run_train(const Globals& g, const TrainArgs& a)
{
    TrainConfig c = resolve_config(g);
    if (a.stage1_epochs >= 0) {
        c.stage1_epochs = a.stage1_epochs;
    }
    if (a.stage2_epochs >= -1) {
        c.stage2_epochs = a.stage2_epochs;
    }
    if (!a.landmarks.empty()) {
        c.landmark_config = a.landmarks;
    }
    c.validate();
    const fs::path out = require_out(g);
    const Dataset data = load_dataset(a.data);
    TrainOptions opts;
    opts.resume = a.resume;
    opts.on_iteration = [](const LossLogRow& row) {
        if ((row.iteration + 1) % 10 == 0) {
            std::fprintf(stderr, "%s epoch %d iteration %lld total %.6g\n", row.stage.c_str(), row.epoch,
                         row.iteration + 1, row.total);
        }
    };
    const TrainResult r = train(c, data, out, opts);
    std::printf("stage 1: %lld iterations, stage 2: %lld iterations\n", r.manifest.stage1_iterations,
                r.manifest.stage2_iterations);
    for (const auto& [stage, path] : r.manifest.checkpoints) {
        std::printf("%s checkpoint: %s\n", stage.c_str(), path.c_str());
    }
    return 0;
}

struct InferArgs {
    std::string checkpoint;
    std::string data;
};

int run_infer(const Globals& g, const InferArgs& a)
{
    const fs::path out = require_out(g);
    const ModelBundle models = ModelBundle::from_checkpoint(last_checkpoint(a.checkpoint));
    const Dataset data = load_dataset(a.data);
    infer_dataset(models, data, out);
    std::printf("inpainted %d clips into %s\n", data.size(), out.string().c_str());
    return 0;
}

struct EvaluateArgs {
    std::string pred;
    std::string gt;
    std::string checkpoint;
    std::string label;
};

int run_evaluate(const Globals& g, const EvaluateArgs& a)
{
    EvaluateOptions eo;
    std::optional<ModelBundle> models;
    if (!a.checkpoint.empty()) {
        models.emplace(ModelBundle::from_checkpoint(last_checkpoint(a.checkpoint)));
        eo.geometry = models->geomreg.get();
        eo.landmark_label = models->landmarks.label();
        eo.seed = models->config.seed;
        eo.scorers = models->config.scorers;
    }
    if (g.seed) {
        eo.seed = *g.seed;
    }
    if (!a.label.empty()) {
        eo.landmark_label = a.label;
    }
    eo.scorers = eo.scorers.with_env();
    const MetricsReport report = evaluate(a.pred, a.gt, eo);
    if (!g.out.empty()) {
        const fs::path out = require_out(g);
        report.save_csv(out / "metrics.csv");
        write_text(out / "comparison.csv", comparison_csv({report}));
    }
    std::printf("%s", comparison_table({report}).c_str());
    return 0;
}

struct AblateArgs {
    std::string train;
    std::string eval;
    std::vector<std::string> configs = LandmarkConfig::ablation_names();
};

int run_ablate(const Globals& g, const AblateArgs& a)
{
    const TrainConfig base = resolve_config(g);
    const fs::path out = require_out(g);
    const Dataset train_set = load_dataset(a.train);
    const Dataset eval_set = load_dataset(a.eval.empty() ? a.train : a.eval);
    const AblationResult r = ablate(base, train_set, eval_set, out, a.configs,
                                    [](const std::string& n) { std::fprintf(stderr, "training %s\n", n.c_str()); });
    std::printf("%s", comparison_table(r.reports()).c_str());
    for (const auto& run : r.runs) {
        if (!run.error.empty()) {
            std::fprintf(stderr, "%s failed: %s\n", run.landmark_config.c_str(), run.error.c_str());
        }
    }
    return r.ok() ? 0 : 1;
}

struct ReportArgs {
    std::vector<std::string> inputs;
};

int run_report(const Globals& g, const ReportArgs& a)
{
    // Inputs are metrics.csv files or directories holding one (directly or
    // one level down, as an ablation output does).
    std::vector<MetricsReport> reports;
    for (const auto& in : a.inputs) {
        const fs::path p(in);
        if (fs::is_regular_file(p)) {
            reports.push_back(MetricsReport::load_csv(p));
            continue;
        }
        if (fs::exists(p / "metrics.csv")) {
            reports.push_back(MetricsReport::load_csv(p / "metrics.csv"));
            continue;
        }
        std::vector<fs::path> found;
        for (const auto& e : fs::directory_iterator(p)) {
            if (e.is_directory() && fs::exists(e.path() / "metrics.csv")) {
                found.push_back(e.path() / "metrics.csv");
            }
        }
        if (found.empty()) {
            throw InvalidInput("no metrics.csv under " + p.string());
        }
        // Ablation order when the names match, otherwise lexical.
        const auto& order = LandmarkConfig::ablation_names();
        const auto rank = [&](const fs::path& f) {
            const auto it = std::find(order.begin(), order.end(), f.parent_path().filename().string());
            return std::pair(it - order.begin(), f.string());
        };
        std::sort(found.begin(), found.end(), [&](const auto& x, const auto& y) { return rank(x) < rank(y); });
        for (const auto& f : found) {
            reports.push_back(MetricsReport::load_csv(f));
        }
    }
    const std::string table = comparison_table(reports);
    std::printf("%s", table.c_str());
    if (!g.out.empty()) {
        const fs::path out = require_out(g);
        write_text(out / "comparison.csv", comparison_csv(reports));
        write_text(out / "comparison.txt", table);
    }
    return 0;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Inpainting and face reconstruction for HMD-occluded video"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--config", g.config, "Training configuration (JSON); defaults to the desk preset");
    app.add_option("--seed", g.seed, "Root seed (overrides the configuration)");
    app.add_option("--out", g.out, "Output directory");

    PrepareArgs pa;
    auto* prepare = app.add_subcommand("prepare", "Write a synthetic dataset (train/ and eval/)");
    prepare->add_option("--clips", pa.clips, "Training clips")->check(CLI::PositiveNumber);
    prepare->add_option("--eval-clips", pa.eval_clips, "Evaluation clips")->check(CLI::NonNegativeNumber);
    prepare->add_option("--frames", pa.frames, "Frames per clip")->check(CLI::PositiveNumber);
    prepare->add_option("--size", pa.size, "Frame height and width")->check(CLI::PositiveNumber);

    TrainArgs ta;
    auto* trn = app.add_subcommand("train", "Run the two-stage training protocol");
    trn->add_option("--data", ta.data, "Dataset directory")->required();
    trn->add_flag("--resume", ta.resume, "Skip stages whose checkpoint exists");
    trn->add_option("--stage1-epochs", ta.stage1_epochs, "Override stage-1 epochs");
    trn->add_option("--stage2-epochs", ta.stage2_epochs, "Override stage-2 epochs (-1 = same as stage 1)");
    trn->add_option("--landmarks", ta.landmarks, "Landmark configuration")
        ->check(CLI::IsMember(LandmarkConfig::ablation_names()));

    InferArgs ia;
    auto* inf = app.add_subcommand("infer", "Inpaint clips and reconstruct per-frame meshes");
    inf->add_option("--checkpoint", ia.checkpoint, "Checkpoint file or training output directory")->required();
    inf->add_option("--data", ia.data, "Dataset directory")->required();

    EvaluateArgs ea;
    auto* evl = app.add_subcommand("evaluate", "Score predicted clips against ground truth");
    evl->add_option("--pred", ea.pred, "Predicted clip directory")->required();
    evl->add_option("--gt", ea.gt, "Ground-truth clip directory")->required();
    evl->add_option("--checkpoint", ea.checkpoint, "Checkpoint whose geometry regressor builds meshes");
    evl->add_option("--label", ea.label, "Method label, e.g. \"216 LM\"");

    AblateArgs aa;
    auto* abl = app.add_subcommand("ablate", "Train and evaluate one run per landmark configuration");
    abl->add_option("--train", aa.train, "Training dataset directory")->required();
    abl->add_option("--eval", aa.eval, "Evaluation dataset directory (defaults to --train)");
    abl->add_option("--configs", aa.configs, "Landmark configurations")
        ->check(CLI::IsMember(LandmarkConfig::ablation_names()));

    ReportArgs ra;
    auto* rep = app.add_subcommand("report", "Merge metrics.csv files into one comparison table");
    rep->add_option("inputs", ra.inputs, "metrics.csv files or run directories")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }

    try {
        if (*prepare) {
            return run_prepare(g, pa);
        }
        if (*trn) {
            return run_train(g, ta);
        }
        if (*inf) {
            return run_infer(g, ia);
        }
        if (*evl) {
            return run_evaluate(g, ea);
        }
        if (*abl) {
            return run_ablate(g, aa);
        }
        if (*rep) {
            return run_report(g, ra);
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "hmdr: %s\n", e.what());
        return 1;
    }
    return 1;
}
