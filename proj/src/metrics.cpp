#include "hmdr/metrics.hpp"

#include "hmdr/checkpoint.hpp"
#include "hmdr/error.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

namespace hmdr {

// ---- pixel metrics ----------------------------------------------------------------

namespace {

void check_same(const VideoClip& a, const VideoClip& b, const char* what)
{
    if (a.frames() != b.frames() || a.height() != b.height() || a.width() != b.width()) {
        throw InvalidInput(std::string(what) + ": clip shapes differ");
    }
    if (a.empty()) {
        throw InvalidInput(std::string(what) + ": empty clip");
    }
}

void check_same(const FrameView& a, const FrameView& b, const char* what)
{
    if (a.height != b.height || a.width != b.width) {
        throw InvalidInput(std::string(what) + ": frame shapes differ");
    }
    if (a.size() == 0) {
        throw InvalidInput(std::string(what) + ": empty frame");
    }
}

double squared_error_sum(const double* a, const double* b, std::size_t n)
{
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

} // namespace

double mse(const VideoClip& pred, const VideoClip& gt)
{
    check_same(pred, gt, "mse");
    return squared_error_sum(pred.data().data(), gt.data().data(), pred.data().size()) /
           static_cast<double>(pred.data().size());
}

double mse(const FrameView& pred, const FrameView& gt)
{
    check_same(pred, gt, "mse");
    return squared_error_sum(pred.data, gt.data, pred.size()) / static_cast<double>(pred.size());
}

double psnr_from_mse(double mse)
{
    if (!(mse >= 0.0)) {
        throw InvalidInput("psnr: mse must be non-negative");
    }
    if (mse == 0.0) {
        return kPsnrCap;
    }
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double psnr(const VideoClip& pred, const VideoClip& gt) { return psnr_from_mse(mse(pred, gt)); }

std::vector<double> to_gray(const FrameView& frame)
{
    std::vector<double> g(static_cast<std::size_t>(frame.height) * frame.width);
    for (int i = 0; i < frame.height; ++i) {
        for (int j = 0; j < frame.width; ++j) {
            g[static_cast<std::size_t>(i) * frame.width + j] =
                0.299 * frame.at(i, j, 0) + 0.587 * frame.at(i, j, 1) + 0.114 * frame.at(i, j, 2);
        }
    }
    return g;
}

namespace {

std::vector<double> gaussian_window(int size, double sigma)
{
    std::vector<double> w(static_cast<std::size_t>(size));
    const double c = (size - 1) / 2.0;
    double total = 0.0;
    for (int k = 0; k < size; ++k) {
        w[static_cast<std::size_t>(k)] = std::exp(-(k - c) * (k - c) / (2.0 * sigma * sigma));
        total += w[static_cast<std::size_t>(k)];
    }
    for (double& v : w) {
        v /= total;
    }
    return w;
}

// Separable "valid" filtering: out is (h - k + 1) x (w - k + 1).
std::vector<double> filter_valid(const std::vector<double>& img, int h, int w, const std::vector<double>& k)
{
    const int n = static_cast<int>(k.size());
    const int oh = h - n + 1, ow = w - n + 1;
    std::vector<double> rows(static_cast<std::size_t>(h) * ow);
    for (int i = 0; i < h; ++i) {
        for (int j = 0; j < ow; ++j) {
            double s = 0.0;
            for (int t = 0; t < n; ++t) {
                s += k[static_cast<std::size_t>(t)] * img[static_cast<std::size_t>(i) * w + j + t];
            }
            rows[static_cast<std::size_t>(i) * ow + j] = s;
        }
    }
    std::vector<double> out(static_cast<std::size_t>(oh) * ow);
    for (int i = 0; i < oh; ++i) {
        for (int j = 0; j < ow; ++j) {
            double s = 0.0;
            for (int t = 0; t < n; ++t) {
                s += k[static_cast<std::size_t>(t)] * rows[static_cast<std::size_t>(i + t) * ow + j];
            }
            out[static_cast<std::size_t>(i) * ow + j] = s;
        }
    }
    return out;
}

} // namespace

double ssim_gray(const std::vector<double>& a, const std::vector<double>& b, int height, int width,
                 const SsimOptions& o)
{
    if (a.size() != static_cast<std::size_t>(height) * width || b.size() != a.size()) {
        throw InvalidInput("ssim: image sizes do not match the stated shape");
    }
    if (o.window < 1 || o.sigma <= 0.0) {
        throw InvalidInput("ssim: bad window options");
    }
    if (height < o.window || width < o.window) {
        throw InvalidInput("ssim: frames of " + std::to_string(height) + "x" + std::to_string(width) +
                           " are smaller than the " + std::to_string(o.window) + "-pixel window");
    }
    const std::size_t n = a.size();
    std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
    for (std::size_t i = 0; i < n; ++i) {
        x[i] = a[i] * o.dynamic_range;
        y[i] = b[i] * o.dynamic_range;
        xx[i] = x[i] * x[i];
        yy[i] = y[i] * y[i];
        xy[i] = x[i] * y[i];
    }
    const auto k = gaussian_window(o.window, o.sigma);
    const auto mx = filter_valid(x, height, width, k);
    const auto my = filter_valid(y, height, width, k);
    const auto exx = filter_valid(xx, height, width, k);
    const auto eyy = filter_valid(yy, height, width, k);
    const auto exy = filter_valid(xy, height, width, k);
    const double c1 = (o.k1 * o.dynamic_range) * (o.k1 * o.dynamic_range);
    const double c2 = (o.k2 * o.dynamic_range) * (o.k2 * o.dynamic_range);
    double total = 0.0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
        const double sxx = exx[i] - mx[i] * mx[i];
        const double syy = eyy[i] - my[i] * my[i];
        const double sxy = exy[i] - mx[i] * my[i];
        const double num = (2.0 * mx[i] * my[i] + c1) * (2.0 * sxy + c2);
        const double den = (mx[i] * mx[i] + my[i] * my[i] + c1) * (sxx + syy + c2);
        total += num / den;
    }
    return total / static_cast<double>(mx.size());
}

double ssim(const FrameView& pred, const FrameView& gt, const SsimOptions& options)
{
    check_same(pred, gt, "ssim");
    return ssim_gray(to_gray(pred), to_gray(gt), pred.height, pred.width, options);
}

double ssim(const VideoClip& pred, const VideoClip& gt, const SsimOptions& options)
{
    check_same(pred, gt, "ssim");
    double s = 0.0;
    for (int t = 0; t < pred.frames(); ++t) {
        s += ssim(pred.frame(t), gt.frame(t), options);
    }
    return s / pred.frames();
}

// ---- k-d tree ------------------------------------------------------------------------

namespace {

double coord(const Point3& p, int axis) { return axis == 0 ? p.x : (axis == 1 ? p.y : p.z); }

double dist2(const Point3& a, const Point3& b)
{
    const double dx = a.x - b.x, dy = a.y - b.y, dz = a.z - b.z;
    return dx * dx + dy * dy + dz * dz;
}

} // namespace

KdTree::KdTree(std::vector<Point3> points) : points_(std::move(points))
{
    if (points_.empty()) {
        throw InvalidInput("KdTree: empty point set");
    }
    for (const auto& p : points_) {
        if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z)) {
            throw InvalidInput("KdTree: non-finite point");
        }
    }
    std::vector<int> order(points_.size());
    std::iota(order.begin(), order.end(), 0);
    nodes_.reserve(points_.size());
    root_ = build(order, 0, static_cast<int>(order.size()), 0);
}

int KdTree::build(std::vector<int>& order, int lo, int hi, int depth)
{
    if (lo >= hi) {
        return -1;
    }
    // Split on the axis of largest extent.
    double lo_c[3] = {1e300, 1e300, 1e300}, hi_c[3] = {-1e300, -1e300, -1e300};
    for (int i = lo; i < hi; ++i) {
        for (int a = 0; a < 3; ++a) {
            const double c = coord(points_[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])], a);
            lo_c[a] = std::min(lo_c[a], c);
            hi_c[a] = std::max(hi_c[a], c);
        }
    }
    int axis = 0;
    for (int a = 1; a < 3; ++a) {
        if (hi_c[a] - lo_c[a] > hi_c[axis] - lo_c[axis]) {
            axis = a;
        }
    }
    const int mid = lo + (hi - lo) / 2;
    std::nth_element(order.begin() + lo, order.begin() + mid, order.begin() + hi, [&](int i, int j) {
        return coord(points_[static_cast<std::size_t>(i)], axis) < coord(points_[static_cast<std::size_t>(j)], axis);
    });
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back({order[static_cast<std::size_t>(mid)], axis, -1, -1});
    const int left = build(order, lo, mid, depth + 1);
    const int right = build(order, mid + 1, hi, depth + 1);
    nodes_[static_cast<std::size_t>(id)].left = left;
    nodes_[static_cast<std::size_t>(id)].right = right;
    return id;
}

void KdTree::search(int node, const Point3& q, Hit& best, double& best2) const
{
    if (node < 0) {
        return;
    }
    const Node& n = nodes_[static_cast<std::size_t>(node)];
    const Point3& p = points_[static_cast<std::size_t>(n.point)];
    const double d2 = dist2(p, q);
    if (d2 < best2 || (d2 == best2 && n.point < best.index)) {
        best2 = d2;
        best.index = n.point;
    }
    const double delta = coord(q, n.axis) - coord(p, n.axis);
    const int near = delta < 0 ? n.left : n.right;
    const int far = delta < 0 ? n.right : n.left;
    search(near, q, best, best2);
    if (delta * delta <= best2) {
        search(far, q, best, best2);
    }
}

KdTree::Hit KdTree::nearest(const Point3& query) const
{
    Hit best;
    double best2 = std::numeric_limits<double>::infinity();
    search(root_, query, best, best2);
    best.distance = std::sqrt(best2);
    return best;
}

std::vector<double> nearest_distances(const std::vector<Point3>& from, const KdTree& to)
{
    std::vector<double> d;
    d.reserve(from.size());
    for (const auto& p : from) {
        d.push_back(to.nearest(p).distance);
    }
    return d;
}

namespace {

double mean_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }

void check_nonempty(const std::vector<Point3>& a, const std::vector<Point3>& b, const char* what)
{
    if (a.empty() || b.empty()) {
        throw InvalidInput(std::string(what) + ": empty vertex set");
    }
}

} // namespace

double chamfer(const std::vector<Point3>& a, const std::vector<Point3>& b)
{
    check_nonempty(a, b, "chamfer");
    const KdTree ta(a), tb(b);
    return 0.5 * (mean_of(nearest_distances(a, tb)) + mean_of(nearest_distances(b, ta)));
}

double rms_error(const std::vector<Point3>& a, const std::vector<Point3>& b)
{
    check_nonempty(a, b, "rms_error");
    if (a.size() != b.size()) {
        throw InvalidInput("rms_error: vertex counts differ (" + std::to_string(a.size()) + " vs " +
                           std::to_string(b.size()) + ")");
    }
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += dist2(a[i], b[i]);
    }
    return std::sqrt(s / static_cast<double>(a.size()));
}

double mean_hausdorff(const std::vector<Point3>& a, const std::vector<Point3>& b, HausdorffMode mode)
{
    check_nonempty(a, b, "mean_hausdorff");
    const KdTree ta(a), tb(b);
    const auto ab = nearest_distances(a, tb);
    const auto ba = nearest_distances(b, ta);
    if (mode == HausdorffMode::Max) {
        return std::max(*std::max_element(ab.begin(), ab.end()), *std::max_element(ba.begin(), ba.end()));
    }
    return std::max(mean_of(ab), mean_of(ba));
}

double chamfer(const FaceMesh& a, const FaceMesh& b) { return chamfer(a.vertices, b.vertices); }
double rms_error(const FaceMesh& a, const FaceMesh& b) { return rms_error(a.vertices, b.vertices); }
double mean_hausdorff(const FaceMesh& a, const FaceMesh& b, HausdorffMode mode)
{
    return mean_hausdorff(a.vertices, b.vertices, mode);
}

// ---- embedders and FID ------------------------------------------------------------

ProjectionEmbedder ProjectionEmbedder::random(std::uint64_t seed, int dim)
{
    if (dim < 1) {
        throw InvalidInput("ProjectionEmbedder: dim must be positive");
    }
    nn::Rng rng(nn::derive_seed(seed, "fid-embedder"));
    ProjectionEmbedder e;
    e.weight_ = Tensor({dim, kInputs});
    const double scale = 1.0 / std::sqrt(static_cast<double>(kInputs));
    for (double& w : e.weight_.vec()) {
        w = scale * rng.normal();
    }
    e.bias_ = Tensor({dim});
    e.name_ = "projection-random";
    return e;
}

ProjectionEmbedder ProjectionEmbedder::load(const std::filesystem::path& path)
{
    const Checkpoint ckpt = load_checkpoint(path);
    ProjectionEmbedder e;
    e.weight_ = ckpt.get("embedder.weight");
    if (e.weight_.rank() != 2 || e.weight_.dim(1) != kInputs || e.weight_.dim(0) < 1) {
        throw FormatError(path.string(), "embedder.weight must be [D, 192]");
    }
    e.bias_ = ckpt.has("embedder.bias") ? ckpt.get("embedder.bias") : Tensor({e.weight_.dim(0)});
    if (e.bias_.shape() != Shape{e.weight_.dim(0)}) {
        throw FormatError(path.string(), "embedder.bias must be [D]");
    }
    e.name_ = "projection:" + path.filename().string();
    return e;
}

std::vector<double> ProjectionEmbedder::embed(const FrameView& frame) const
{
    if (frame.height < kGrid || frame.width < kGrid) {
        throw InvalidInput("embedder: frame smaller than the 8x8 pooling grid");
    }
    // Average over a kGrid x kGrid partition; cell boundaries by integer division.
    std::vector<double> pooled(kInputs, 0.0);
    for (int gi = 0; gi < kGrid; ++gi) {
        const int i0 = gi * frame.height / kGrid, i1 = (gi + 1) * frame.height / kGrid;
        for (int gj = 0; gj < kGrid; ++gj) {
            const int j0 = gj * frame.width / kGrid, j1 = (gj + 1) * frame.width / kGrid;
            const double inv = 1.0 / ((i1 - i0) * (j1 - j0));
            for (int c = 0; c < 3; ++c) {
                double s = 0.0;
                for (int i = i0; i < i1; ++i) {
                    for (int j = j0; j < j1; ++j) {
                        s += frame.at(i, j, c);
                    }
                }
                pooled[static_cast<std::size_t>((gi * kGrid + gj) * 3 + c)] = s * inv;
            }
        }
    }
    const int d = dim();
    std::vector<double> out(static_cast<std::size_t>(d));
    for (int r = 0; r < d; ++r) {
        double s = bias_[r];
        for (int k = 0; k < kInputs; ++k) {
            s += weight_[static_cast<std::size_t>(r) * kInputs + k] * pooled[static_cast<std::size_t>(k)];
        }
        out[static_cast<std::size_t>(r)] = s;
    }
    return out;
}

double frechet_distance(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b)
{
    if (a.size() < 2 || b.size() < 2) {
        throw InvalidInput("fid: each set needs at least 2 samples (got " + std::to_string(a.size()) + " and " +
                           std::to_string(b.size()) + ")");
    }
    const std::size_t d = a.front().size();
    if (d == 0) {
        throw InvalidInput("fid: empty embeddings");
    }
    const auto fit = [d](const std::vector<std::vector<double>>& s, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
        Eigen::MatrixXd x(static_cast<Eigen::Index>(s.size()), static_cast<Eigen::Index>(d));
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (s[i].size() != d) {
                throw InvalidInput("fid: embedding dimensions differ");
            }
            for (std::size_t k = 0; k < d; ++k) {
                x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = s[i][k];
            }
        }
        mu = x.colwise().mean().transpose();
        const Eigen::MatrixXd centered = x.rowwise() - mu.transpose();
        cov = (centered.transpose() * centered) / static_cast<double>(s.size() - 1);
    };
    Eigen::VectorXd mu_a, mu_b;
    Eigen::MatrixXd cov_a, cov_b;
    fit(a, mu_a, cov_a);
    fit(b, mu_b, cov_b);

    // tr sqrt(A B) = tr sqrt(A^1/2 B A^1/2), a symmetric PSD matrix.
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(cov_a);
    const Eigen::VectorXd la = ea.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    const Eigen::MatrixXd root_a = ea.eigenvectors() * la.asDiagonal() * ea.eigenvectors().transpose();
    Eigen::MatrixXd inner = root_a * cov_b * root_a;
    inner = 0.5 * (inner + inner.transpose());
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ei(inner, Eigen::EigenvaluesOnly);
    const double tr_root = ei.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    const double value = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * tr_root;
    return std::max(0.0, value);
}

double fid(const std::vector<FrameView>& pred, const std::vector<FrameView>& gt, const Embedder& embedder)
{
    std::vector<std::vector<double>> a, b;
    for (const auto& f : pred) {
        a.push_back(embedder.embed(f));
    }
    for (const auto& f : gt) {
        b.push_back(embedder.embed(f));
    }
    return frechet_distance(a, b);
}

double fid(const VideoClip& pred, const VideoClip& gt, const Embedder& embedder)
{
    std::vector<FrameView> a, b;
    for (int t = 0; t < pred.frames(); ++t) {
        a.push_back(pred.frame(t));
    }
    for (int t = 0; t < gt.frames(); ++t) {
        b.push_back(gt.frame(t));
    }
    return fid(a, b, embedder);
}

// ---- perceptual distance ---------------------------------------------------------------

FeaturePerceptualScorer::FeaturePerceptualScorer(std::shared_ptr<const FeatureExtractor> extractor)
    : extractor_(std::move(extractor))
{
    if (!extractor_) {
        throw InvalidInput("FeaturePerceptualScorer: null extractor");
    }
}

namespace {

Tensor frame_tensor(const FrameView& f)
{
    Tensor t({1, 3, f.height, f.width});
    for (int c = 0; c < 3; ++c) {
        for (int i = 0; i < f.height; ++i) {
            for (int j = 0; j < f.width; ++j) {
                t[(static_cast<std::size_t>(c) * f.height + i) * f.width + j] = f.at(i, j, c);
            }
        }
    }
    return t;
}

} // namespace

double FeaturePerceptualScorer::distance(const FrameView& a, const FrameView& b) const
{
    check_same(a, b, "lpips");
    ag::NoGradGuard guard;
    const auto fa = extractor_->extract(ag::Var::constant(frame_tensor(a)));
    const auto fb = extractor_->extract(ag::Var::constant(frame_tensor(b)));
    constexpr double kEps = 1e-10;
    double total = 0.0;
    for (std::size_t l = 0; l < fa.size(); ++l) {
        const Tensor& x = fa[l].value.value();
        const Tensor& y = fb[l].value.value();
        const int c = x.dim(1), hw = x.dim(2) * x.dim(3);
        double layer = 0.0;
        for (int p = 0; p < hw; ++p) {
            double nx = 0.0, ny = 0.0;
            for (int k = 0; k < c; ++k) {
                nx += x[static_cast<std::size_t>(k) * hw + p] * x[static_cast<std::size_t>(k) * hw + p];
                ny += y[static_cast<std::size_t>(k) * hw + p] * y[static_cast<std::size_t>(k) * hw + p];
            }
            nx = std::sqrt(nx) + kEps;
            ny = std::sqrt(ny) + kEps;
            for (int k = 0; k < c; ++k) {
                const double d = x[static_cast<std::size_t>(k) * hw + p] / nx - y[static_cast<std::size_t>(k) * hw + p] / ny;
                layer += d * d;
            }
        }
        total += layer / hw;
    }
    return total;
}

double lpips(const FrameView& pred, const FrameView& gt, const PerceptualScorer& scorer)
{
    return scorer.distance(pred, gt);
}

double lpips(const VideoClip& pred, const VideoClip& gt, const PerceptualScorer& scorer)
{
    check_same(pred, gt, "lpips");
    double s = 0.0;
    for (int t = 0; t < pred.frames(); ++t) {
        s += scorer.distance(pred.frame(t), gt.frame(t));
    }
    return s / pred.frames();
}

namespace {

const char* env_path(const char* name)
{
    const char* v = std::getenv(name);
    return (v && *v) ? v : nullptr;
}

} // namespace

std::unique_ptr<Embedder> default_embedder(std::uint64_t seed)
{
    if (const char* path = env_path("HMDR_EMBEDDER_WEIGHTS")) {
        return std::make_unique<ProjectionEmbedder>(ProjectionEmbedder::load(path));
    }
    return std::make_unique<ProjectionEmbedder>(ProjectionEmbedder::random(seed));
}

std::unique_ptr<PerceptualScorer> default_perceptual_scorer(std::uint64_t seed)
{
    if (const char* path = env_path("HMDR_LPIPS_WEIGHTS")) {
        return std::make_unique<FeaturePerceptualScorer>(
            std::make_shared<ConvFeatureExtractor>(ConvFeatureExtractor::load(path)));
    }
    return std::make_unique<FeaturePerceptualScorer>(
        std::make_shared<ConvFeatureExtractor>(ConvFeatureExtractor::random(nn::derive_seed(seed, "lpips"))));
}

// ---- report ------------------------------------------------------------------------------

const std::vector<std::string>& rgb_metric_columns()
{
    static const std::vector<std::string> c{"FID", "MSE", "LPIPS", "SSIM", "PSNR"};
    return c;
}

const std::vector<std::string>& mesh_metric_columns()
{
    static const std::vector<std::string> c{"Average Chamfer Distance", "Average RMS Error",
                                            "Average Hausdorff Distance"};
    return c;
}

std::vector<std::string> metric_columns()
{
    std::vector<std::string> c = rgb_metric_columns();
    c.insert(c.end(), mesh_metric_columns().begin(), mesh_metric_columns().end());
    return c;
}

void MetricsReport::add(MetricsRow row)
{
    const auto cols = metric_columns();
    for (const auto& [k, v] : row.values) {
        if (std::find(cols.begin(), cols.end(), k) == cols.end()) {
            throw InvalidInput("MetricsReport: unknown column '" + k + "'");
        }
    }
    rows.push_back(std::move(row));
}

std::optional<double> MetricsReport::average(const std::string& column) const
{
    double s = 0.0;
    int n = 0;
    for (const auto& r : rows) {
        if (const auto it = r.values.find(column); it != r.values.end()) {
            s += it->second;
            ++n;
        }
    }
    if (n == 0) {
        return std::nullopt;
    }
    return s / n;
}

MetricsRow MetricsReport::averages() const
{
    MetricsRow r{"average", {}};
    for (const auto& c : metric_columns()) {
        if (const auto v = average(c)) {
            r.values[c] = *v;
        }
    }
    return r;
}

std::string MetricsReport::label() const
{
    return landmark_config.empty() ? model : model + " (" + landmark_config + ")";
}

namespace {

std::string format_number(double v)
{
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

std::string csv_field(const std::string& s)
{
    if (s.find_first_of(",\"\n") == std::string::npos) {
        return s;
    }
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') {
            out += '"';
        }
        out += c;
    }
    return out + "\"";
}

std::vector<std::string> split_csv_line(const std::string& line)
{
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

void append_values(std::ostringstream& out, const MetricsRow& row)
{
    for (const auto& c : metric_columns()) {
        out << ',';
        if (const auto it = row.values.find(c); it != row.values.end()) {
            out << format_number(it->second);
        }
    }
}

} // namespace

std::string MetricsReport::to_csv() const
{
    std::ostringstream out;
    out << "clip,Model,Method,landmark_config";
    for (const auto& c : metric_columns()) {
        out << ',' << csv_field(c);
    }
    out << '\n';
    const auto emit = [&](const MetricsRow& r) {
        out << csv_field(r.clip) << ',' << csv_field(label()) << ',' << csv_field(landmark_config) << ','
            << csv_field(landmark_config);
        append_values(out, r);
        out << '\n';
    };
    for (const auto& r : rows) {
        emit(r);
    }
    emit(averages());
    return out.str();
}

void MetricsReport::save_csv(const std::filesystem::path& path) const
{
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path);
    if (!out) {
        throw FormatError(path.string(), "cannot write");
    }
    out << to_csv();
}

MetricsReport MetricsReport::load_csv(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw FormatError(path.string(), "cannot open metrics report");
    }
    std::string line;
    if (!std::getline(in, line)) {
        throw FormatError(path.string(), "empty metrics report");
    }
    const auto header = split_csv_line(line);
    if (header.size() < 4 || header[0] != "clip" || header[1] != "Model" || header[3] != "landmark_config") {
        throw FormatError(path.string(), "unexpected metrics header");
    }
    MetricsReport report;
    bool first = true;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        const auto f = split_csv_line(line);
        if (f.size() != header.size()) {
            throw FormatError(path.string(), "row has " + std::to_string(f.size()) + " fields, header has " +
                                                 std::to_string(header.size()));
        }
        if (first) {
            report.landmark_config = f[3];
            const std::string suffix = " (" + f[3] + ")";
            report.model = (!f[3].empty() && f[1].size() > suffix.size() &&
                            f[1].compare(f[1].size() - suffix.size(), suffix.size(), suffix) == 0)
                               ? f[1].substr(0, f[1].size() - suffix.size())
                               : f[1];
            first = false;
        }
        if (f[0] == "average") {
            continue;
        }
        MetricsRow row{f[0], {}};
        for (std::size_t k = 4; k < f.size(); ++k) {
            if (f[k].empty()) {
                continue;
            }
            double v = 0.0;
            const auto res = std::from_chars(f[k].data(), f[k].data() + f[k].size(), v);
            if (res.ec != std::errc() || res.ptr != f[k].data() + f[k].size()) {
                throw FormatError(path.string(), "bad number '" + f[k] + "'");
            }
            row.values[header[k]] = v;
        }
        report.add(std::move(row));
    }
    return report;
}

std::string comparison_csv(const std::vector<MetricsReport>& reports)
{
    std::ostringstream out;
    out << "Model,Method";
    for (const auto& c : metric_columns()) {
        out << ',' << csv_field(c);
    }
    out << '\n';
    for (const auto& r : reports) {
        out << csv_field(r.label()) << ',' << csv_field(r.landmark_config);
        append_values(out, r.averages());
        out << '\n';
    }
    return out.str();
}

std::string comparison_table(const std::vector<MetricsReport>& reports)
{
    std::vector<std::string> header{"Model"};
    const auto cols = metric_columns();
    header.insert(header.end(), cols.begin(), cols.end());
    std::vector<std::vector<std::string>> cells{header};
    for (const auto& r : reports) {
        std::vector<std::string> line{r.label()};
        const MetricsRow avg = r.averages();
        for (const auto& c : cols) {
            char buf[32] = "-";
            if (const auto it = avg.values.find(c); it != avg.values.end()) {
                std::snprintf(buf, sizeof buf, "%.4f", it->second);
            }
            line.emplace_back(buf);
        }
        cells.push_back(std::move(line));
    }
    std::vector<std::size_t> width(header.size(), 0);
    for (const auto& line : cells) {
        for (std::size_t k = 0; k < line.size(); ++k) {
            width[k] = std::max(width[k], line[k].size());
        }
    }
    std::ostringstream out;
    for (std::size_t r = 0; r < cells.size(); ++r) {
        for (std::size_t k = 0; k < cells[r].size(); ++k) {
            out << (k ? " | " : "") << cells[r][k] << std::string(width[k] - cells[r][k].size(), ' ');
        }
        out << '\n';
        if (r == 0) {
            for (std::size_t k = 0; k < width.size(); ++k) {
                out << (k ? "-+-" : "") << std::string(width[k], '-');
            }
            out << '\n';
        }
    }
    return out.str();
}

} // namespace hmdr
