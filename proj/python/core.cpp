// Python bindings: loss and metric primitives plus the dataset/train/infer/
// evaluate pipeline. Configurations cross the boundary as JSON text.

#include "hmdr/error.hpp"
#include "hmdr/pipeline.hpp"

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

namespace py = pybind11;
using namespace hmdr;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

std::vector<Point3> points(const Array& a)
{
    if (a.ndim() != 2 || a.shape(1) != 3) {
        throw InvalidInput("expected an (N, 3) array");
    }
    std::vector<Point3> out(static_cast<std::size_t>(a.shape(0)));
    const auto r = a.unchecked<2>();
    for (py::ssize_t i = 0; i < a.shape(0); ++i) {
        out[static_cast<std::size_t>(i)] = {r(i, 0), r(i, 1), r(i, 2)};
    }
    return out;
}

VideoClip clip(const Array& a)
{
    if (a.ndim() != 4 || a.shape(3) != 3) {
        throw InvalidInput("expected a (T, H, W, 3) array");
    }
    VideoClip c(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), static_cast<int>(a.shape(2)));
    std::copy(a.data(), a.data() + a.size(), c.data().begin());
    return c;
}

Array to_array(const VideoClip& c)
{
    Array a({c.frames(), c.height(), c.width(), 3});
    std::copy(c.data().begin(), c.data().end(), a.mutable_data());
    return a;
}

Array to_array(const std::vector<Point3>& p)
{
    Array a({static_cast<py::ssize_t>(p.size()), py::ssize_t{3}});
    auto w = a.mutable_unchecked<2>();
    for (std::size_t i = 0; i < p.size(); ++i) {
        w(static_cast<py::ssize_t>(i), 0) = p[i].x;
        w(static_cast<py::ssize_t>(i), 1) = p[i].y;
        w(static_cast<py::ssize_t>(i), 2) = p[i].z;
    }
    return a;
}

py::dict averages(const MetricsReport& r)
{
    py::dict d;
    for (const auto& [k, v] : r.averages().values) {
        d[py::str(k)] = v;
    }
    return d;
}

} // namespace

PYBIND11_MODULE(_core, m)
{
    m.doc() = "Video inpainting and face reconstruction for HMD-occluded clips";

    py::register_exception<InvalidInput>(m, "InvalidInput", PyExc_ValueError);
    py::register_exception<FormatError>(m, "FormatError", PyExc_IOError);
    py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
    py::register_exception<IncompatibleCheckpoint>(m, "IncompatibleCheckpoint", PyExc_RuntimeError);

    m.def("huber", [](double a, double b, double delta) { return huber(a, b, {delta}); }, py::arg("a"), py::arg("b"),
          py::arg("delta") = 1.0);
    m.def(
        "dense_lm_loss",
        [](const Array& pred, const Array& gt, double delta) {
            return dense_lm_loss(LandmarkSet{points(pred)}, LandmarkSet{points(gt)}, {delta});
        },
        py::arg("pred"), py::arg("gt"), py::arg("delta") = 1.0);
    m.def(
        "total_loss",
        [](const std::array<double, kLossTermCount>& terms, const std::array<double, kLossTermCount>& weights) {
            LossTerms t;
            LossWeights w;
            for (std::size_t i = 0; i < kLossTermCount; ++i) {
                t[loss_terms()[i]] = terms[i];
                w[loss_terms()[i]] = weights[i];
            }
            return total_loss(t, w).total;
        },
        py::arg("terms"), py::arg("weights"), "Terms and weights in the order adv, fer, style, vgg, recon, dense_lm.");

    m.def("chamfer", [](const Array& a, const Array& b) { return chamfer(points(a), points(b)); });
    m.def("rms_error", [](const Array& a, const Array& b) { return rms_error(points(a), points(b)); });
    m.def("mean_hausdorff", [](const Array& a, const Array& b) { return mean_hausdorff(points(a), points(b)); });
    m.def("mse", [](const Array& p, const Array& g) { return mse(clip(p), clip(g)); });
    m.def("psnr", [](const Array& p, const Array& g) { return psnr(clip(p), clip(g)); });
    m.def("ssim", [](const Array& p, const Array& g) { return ssim(clip(p), clip(g)); });
    m.def("metric_columns", &metric_columns);
    m.def("landmark_configs", &LandmarkConfig::ablation_names);

    m.def("desk_config", [] { return TrainConfig::desk().to_json().dump(); });
    m.def("validate_config", [](const std::string& j) {
        TrainConfig::from_json(nlohmann::json::parse(j)).validate();
    });

    m.def(
        "prepare",
        [](const std::filesystem::path& out, int clips, int frames, int size, std::uint64_t seed) {
            save_dataset(make_synthetic_dataset({clips, frames, size, seed}), out);
        },
        py::arg("out"), py::arg("clips") = 4, py::arg("frames") = 8, py::arg("size") = 64, py::arg("seed") = 0);
    m.def("load_clip", [](const std::filesystem::path& dir, int index) {
        const Dataset d = load_dataset(dir);
        if (index < 0 || index >= d.size()) {
            throw InvalidInput("clip index out of range");
        }
        return to_array(d.clips[static_cast<std::size_t>(index)].clip);
    });

    m.def(
        "train",
        [](const std::string& config, const std::filesystem::path& data, const std::filesystem::path& out, bool resume) {
            const TrainConfig c = TrainConfig::from_json(nlohmann::json::parse(config));
            const Dataset d = load_dataset(data);
            TrainOptions o;
            o.resume = resume;
            TrainResult r;
            {
                py::gil_scoped_release release;
                r = train(c, d, out, o);
            }
            return r.manifest.to_json().dump();
        },
        py::arg("config"), py::arg("data"), py::arg("out"), py::arg("resume") = false);

    m.def(
        "infer",
        [](const std::filesystem::path& checkpoint, const std::filesystem::path& data, const std::filesystem::path& out) {
            const ModelBundle models = ModelBundle::from_checkpoint(checkpoint);
            py::gil_scoped_release release;
            infer_dataset(models, load_dataset(data), out);
        },
        py::arg("checkpoint"), py::arg("data"), py::arg("out"));

    m.def(
        "infer_clip",
        [](const std::filesystem::path& checkpoint, const std::filesystem::path& data, int index) {
            const ModelBundle models = ModelBundle::from_checkpoint(checkpoint);
            const Dataset d = load_dataset(data);
            if (index < 0 || index >= d.size()) {
                throw InvalidInput("clip index out of range");
            }
            const auto& c = d.clips[static_cast<std::size_t>(index)];
            const InferenceResult r = infer(models, c.clip, c.mask, c.landmarks, c.reference_index);
            py::list meshes;
            for (const auto& mesh : r.meshes) {
                meshes.append(to_array(mesh.vertices));
            }
            return py::make_tuple(to_array(r.inpainted), meshes);
        },
        py::arg("checkpoint"), py::arg("data"), py::arg("index") = 0);

    m.def(
        "evaluate",
        [](const std::filesystem::path& pred, const std::filesystem::path& gt, const std::string& checkpoint) {
            EvaluateOptions eo;
            std::optional<ModelBundle> models;
            if (!checkpoint.empty()) {
                models.emplace(ModelBundle::from_checkpoint(checkpoint));
                eo.geometry = models->geomreg.get();
                eo.landmark_label = models->landmarks.label();
                eo.seed = models->config.seed;
            }
            eo.scorers = eo.scorers.with_env();
            return averages(evaluate(pred, gt, eo));
        },
        py::arg("pred"), py::arg("gt"), py::arg("checkpoint") = "");
}
