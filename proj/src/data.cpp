#include "dti/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <numeric>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "dti/transforms.hpp"

namespace dti::data {

namespace {

uint32_t read_be32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw std::runtime_error("idx: truncated file");
    return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) | (uint32_t(b[2]) << 8) | b[3];
}

void write_be32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    os.write(reinterpret_cast<char*>(b), 4);
}

}  // namespace

const std::vector<DatasetSpec>& dataset_table() {
    static const std::vector<DatasetSpec> table = {
        {"mnist", 70000, 10, 1, 28, 28, "aff-morpho-tps"},
        {"mnist-test", 10000, 10, 1, 28, 28, "aff-morpho-tps"},
        {"usps", 9298, 10, 1, 16, 16, "col-aff-tps"},
        {"fashion-mnist", 70000, 10, 1, 28, 28, "col-aff-tps"},
        {"frgc", 2462, 20, 3, 32, 32, "col-aff-tps"},
        {"svhn", 99289, 10, 3, 28, 28, "col-proj"},
        {"mnist-1k", 1000, 10, 1, 28, 28, "aff-morpho-tps"},
        {"mnist-color", 70000, 10, 3, 28, 28, "col-aff-tps"},
        {"affnist-test", 320000, 10, 1, 40, 40, "aff-morpho-tps"},
        {"photos", -1, 0, 3, 128, 128, "col-proj"},
    };
    return table;
}

const DatasetSpec* find_spec(const std::string& name) {
    for (const auto& s : dataset_table())
        if (s.name == name) return &s;
    return nullptr;
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    std::ifstream is(images_path, std::ios::binary);
    if (!is) throw std::runtime_error("idx: cannot open " + images_path);
    if (read_be32(is) != 0x803u) throw std::runtime_error("idx: bad image magic in " + images_path);
    int n = static_cast<int>(read_be32(is));
    int h = static_cast<int>(read_be32(is));
    int w = static_cast<int>(read_be32(is));
    std::vector<unsigned char> raw(static_cast<size_t>(n) * h * w);
    is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!is) throw std::runtime_error("idx: truncated image data in " + images_path);

    Dataset ds;
    ds.images = Tensor({n, 1, h, w});
    for (size_t i = 0; i < raw.size(); ++i) ds.images[i] = raw[i] / 255.f;

    if (!labels_path.empty()) {
        std::ifstream ls(labels_path, std::ios::binary);
        if (!ls) throw std::runtime_error("idx: cannot open " + labels_path);
        if (read_be32(ls) != 0x801u)
            throw std::runtime_error("idx: bad label magic in " + labels_path);
        int ln = static_cast<int>(read_be32(ls));
        if (ln != n) throw std::runtime_error("idx: image/label count mismatch");
        std::vector<unsigned char> lraw(n);
        ls.read(reinterpret_cast<char*>(lraw.data()), n);
        if (!ls) throw std::runtime_error("idx: truncated label data in " + labels_path);
        ds.labels.assign(lraw.begin(), lraw.end());
        ds.n_classes = ds.labels.empty() ? 0 : *std::max_element(ds.labels.begin(),
                                                                 ds.labels.end()) + 1;
    }
    return ds;
}

void save_idx(const Dataset& ds, const std::string& images_path,
              const std::string& labels_path) {
    if (ds.channels() != 1) throw std::invalid_argument("idx: only single-channel images");
    std::ofstream os(images_path, std::ios::binary);
    if (!os) throw std::runtime_error("idx: cannot write " + images_path);
    write_be32(os, 0x803u);
    write_be32(os, static_cast<uint32_t>(ds.n()));
    write_be32(os, static_cast<uint32_t>(ds.height()));
    write_be32(os, static_cast<uint32_t>(ds.width()));
    for (int64_t i = 0; i < ds.images.numel(); ++i) {
        float v = std::clamp(ds.images[i], 0.f, 1.f);
        unsigned char b = static_cast<unsigned char>(std::lround(v * 255.f));
        os.write(reinterpret_cast<char*>(&b), 1);
    }
    if (!labels_path.empty()) {
        std::ofstream ls(labels_path, std::ios::binary);
        write_be32(ls, 0x801u);
        write_be32(ls, static_cast<uint32_t>(ds.labels.size()));
        for (int l : ds.labels) {
            unsigned char b = static_cast<unsigned char>(l);
            ls.write(reinterpret_cast<char*>(&b), 1);
        }
    }
}

Dataset make_mnist_color(const Dataset& ds, uint64_t seed) {
    if (ds.channels() != 1) throw std::invalid_argument("mnist-color: expects grayscale input");
    int n = ds.n(), h = ds.height(), w = ds.width(), hw = h * w;
    Dataset out;
    out.name = "mnist-color";
    out.labels = ds.labels;
    out.n_classes = ds.n_classes;
    out.default_steps = "col-aff-tps";
    out.images = Tensor({n, 3, h, w});
    for (int i = 0; i < n; ++i) {
        Rng rng(mix_seed(seed, static_cast<uint64_t>(i)));
        std::uniform_real_distribution<float> u(0.f, 1.f);
        float fg[3], bg[3];
        for (float& v : fg) v = u(rng);
        for (float& v : bg) v = u(rng);
        const float* x = ds.images.data() + static_cast<int64_t>(i) * hw;
        for (int c = 0; c < 3; ++c) {
            float* o = out.images.data() + (static_cast<int64_t>(i) * 3 + c) * hw;
            for (int j = 0; j < hw; ++j) o[j] = fg[c] * x[j] + bg[c] * (1.f - x[j]);
        }
    }
    return out;
}

Dataset subset(const Dataset& ds, const std::vector<int>& indices) {
    int h = ds.height(), w = ds.width(), c = ds.channels();
    int64_t sz = static_cast<int64_t>(c) * h * w;
    Dataset out;
    out.name = ds.name;
    out.n_classes = ds.n_classes;
    out.default_steps = ds.default_steps;
    out.images = Tensor({static_cast<int>(indices.size()), c, h, w});
    for (size_t i = 0; i < indices.size(); ++i) {
        std::copy_n(ds.images.data() + indices[i] * sz, sz, out.images.data() + i * sz);
        if (ds.labeled()) out.labels.push_back(ds.labels[indices[i]]);
    }
    return out;
}

Dataset make_mnist_1k(const Dataset& ds, uint64_t seed) {
    if (ds.n() < 1000) throw std::invalid_argument("mnist-1k: needs at least 1000 samples");
    std::vector<int> idx(ds.n());
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(1000);
    Dataset out = subset(ds, idx);
    out.name = "mnist-1k";
    return out;
}

Dataset make_affine_augmented(const Dataset& ds, uint64_t seed, int pad_to) {
    int n = ds.n(), c = ds.channels(), h = ds.height(), w = ds.width();
    if (pad_to < h || pad_to < w) throw std::invalid_argument("pad_to smaller than image");
    auto step = transforms::make_step(transforms::Kind::affine, c);
    Dataset out;
    out.name = ds.name + "-affine";
    out.labels = ds.labels;
    out.n_classes = ds.n_classes;
    out.default_steps = "aff-morpho-tps";
    out.images = Tensor({n, c, pad_to, pad_to});
    int off_h = (pad_to - h) / 2, off_w = (pad_to - w) / 2;
    for (int i = 0; i < n; ++i) {
        Tensor padded({c, pad_to, pad_to});
        for (int ch = 0; ch < c; ++ch)
            for (int u = 0; u < h; ++u)
                std::copy_n(ds.images.data() + ((static_cast<int64_t>(i) * c + ch) * h + u) * w,
                            w,
                            padded.data() + (static_cast<int64_t>(ch) * pad_to + u + off_h) *
                                                pad_to +
                                off_w);
        Rng rng(mix_seed(seed, static_cast<uint64_t>(i)));
        std::uniform_real_distribution<float> u(-1.f, 1.f);
        float th = u(rng) * 20.f * static_cast<float>(M_PI) / 180.f;
        float sx = 1.f + 0.2f * u(rng), sy = 1.f + 0.2f * u(rng);
        float sh = 0.2f * u(rng);
        float tx = 0.12f * u(rng), ty = 0.12f * u(rng);
        // output -> source matrix: rotation * shear * scale
        float m00 = std::cos(th) * sx + (-std::sin(th)) * sh * sx;
        float m01 = -std::sin(th) * sy;
        float m10 = std::sin(th) * sx + std::cos(th) * sh * sx;
        float m11 = std::cos(th) * sy;
        Tensor p({6}, {m00 - 1.f, m01, tx, m10, m11 - 1.f, ty});
        Tensor warped =
            transforms::compose_apply(padded, {step}, {p}, transforms::Pad::zeros);
        std::copy_n(warped.data(), warped.numel(),
                    out.images.data() + static_cast<int64_t>(i) * c * pad_to * pad_to);
    }
    return out;
}

Dataset load_image_folder(const std::string& path, int size) {
    std::vector<cv::String> files;
    cv::glob(path + "/**", files, /*recursive=*/true);
    std::sort(files.begin(), files.end());
    std::vector<cv::Mat> mats;
    for (const auto& f : files) {
        cv::Mat img = cv::imread(f, cv::IMREAD_COLOR);
        if (img.empty()) {
            std::cerr << "warning: skipping unreadable file " << f << "\n";
            continue;
        }
        double scale = static_cast<double>(size) / std::min(img.rows, img.cols);
        cv::Mat resized;
        cv::resize(img, resized, cv::Size(), scale, scale,
                   scale < 1.0 ? cv::INTER_AREA : cv::INTER_LINEAR);
        if (resized.rows < size || resized.cols < size)
            cv::resize(img, resized, cv::Size(std::max(size, resized.cols),
                                              std::max(size, resized.rows)));
        int y0 = (resized.rows - size) / 2, x0 = (resized.cols - size) / 2;
        mats.push_back(resized(cv::Rect(x0, y0, size, size)).clone());
    }
    if (mats.empty()) throw std::runtime_error("image folder: no readable images in " + path);

    Dataset ds;
    ds.name = "photos";
    ds.default_steps = "col-proj";
    ds.images = Tensor({static_cast<int>(mats.size()), 3, size, size});
    for (size_t i = 0; i < mats.size(); ++i)
        for (int u = 0; u < size; ++u)
            for (int v = 0; v < size; ++v) {
                cv::Vec3b px = mats[i].at<cv::Vec3b>(u, v);  // BGR
                for (int c = 0; c < 3; ++c)
                    ds.images[((i * 3 + c) * size + u) * size + v] = px[2 - c] / 255.f;
            }
    return ds;
}

namespace {

using Stroke = std::vector<std::array<float, 2>>;

std::vector<Stroke> ellipse(float cx, float cy, float rx, float ry, int segs = 20) {
    Stroke s;
    for (int i = 0; i <= segs; ++i) {
        float t = 2.f * static_cast<float>(M_PI) * i / segs;
        s.push_back({cx + rx * std::sin(t), cy - ry * std::cos(t)});
    }
    return {s};
}

// skeletons in unit coordinates, x right / y down
const std::vector<std::vector<Stroke>>& digit_strokes() {
    static const std::vector<std::vector<Stroke>> d = [] {
        std::vector<std::vector<Stroke>> out(10);
        out[0] = ellipse(0.5f, 0.5f, 0.21f, 0.32f);
        out[1] = {{{0.38f, 0.28f}, {0.52f, 0.14f}, {0.52f, 0.86f}}};
        out[2] = {{{0.31f, 0.3f},
                   {0.36f, 0.17f},
                   {0.5f, 0.12f},
                   {0.64f, 0.18f},
                   {0.68f, 0.32f},
                   {0.6f, 0.47f},
                   {0.31f, 0.84f},
                   {0.69f, 0.84f}}};
        out[3] = {{{0.33f, 0.2f}, {0.5f, 0.12f}, {0.65f, 0.23f}, {0.6f, 0.4f}, {0.47f, 0.48f}},
                  {{0.47f, 0.48f},
                   {0.64f, 0.56f},
                   {0.66f, 0.74f},
                   {0.5f, 0.87f},
                   {0.33f, 0.79f}}};
        out[4] = {{{0.63f, 0.14f}, {0.3f, 0.6f}, {0.74f, 0.6f}},
                  {{0.63f, 0.14f}, {0.63f, 0.86f}}};
        out[5] = {{{0.67f, 0.14f},
                   {0.36f, 0.14f},
                   {0.33f, 0.45f},
                   {0.54f, 0.41f},
                   {0.67f, 0.53f},
                   {0.66f, 0.72f},
                   {0.5f, 0.86f},
                   {0.33f, 0.78f}}};
        out[6] = {{{0.62f, 0.14f},
                   {0.45f, 0.2f},
                   {0.35f, 0.4f},
                   {0.34f, 0.62f},
                   {0.43f, 0.83f},
                   {0.59f, 0.84f},
                   {0.67f, 0.69f},
                   {0.6f, 0.54f},
                   {0.44f, 0.51f},
                   {0.35f, 0.62f}}};
        out[7] = {{{0.3f, 0.14f}, {0.7f, 0.14f}, {0.44f, 0.86f}}};
        out[8] = ellipse(0.5f, 0.31f, 0.16f, 0.18f);
        for (auto& s : ellipse(0.5f, 0.68f, 0.19f, 0.2f)) out[8].push_back(s);
        out[9] = ellipse(0.52f, 0.33f, 0.17f, 0.19f);
        out[9].push_back({{0.69f, 0.33f}, {0.66f, 0.6f}, {0.55f, 0.86f}});
        return out;
    }();
    return d;
}

float point_segment_dist(float px, float py, float ax, float ay, float bx, float by) {
    float dx = bx - ax, dy = by - ay;
    float len2 = dx * dx + dy * dy;
    float t = len2 > 0.f ? std::clamp(((px - ax) * dx + (py - ay) * dy) / len2, 0.f, 1.f) : 0.f;
    float qx = ax + t * dx - px, qy = ay + t * dy - py;
    return std::sqrt(qx * qx + qy * qy);
}

// per-sample variability; tuned so plain K-means lands near its MNIST level
struct JitterConfig {
    float rot = 0.17f;        // radians
    float scale = 0.15f;      // +/- fraction, per axis
    float shear = 0.15f;
    float translate = 2.0f;   // pixels
    float point_noise = 0.020f;  // unit coords
    float thick_lo = 0.9f, thick_hi = 2.1f;  // pixels
};

}  // namespace

Dataset make_synthetic_digits(int n, uint64_t seed) {
    const int W = 28;
    JitterConfig jc;
    Dataset ds;
    ds.name = "synthetic-digits";
    ds.n_classes = 10;
    ds.default_steps = "aff-morpho-tps";
    ds.images = Tensor({n, 1, W, W});
    ds.labels.resize(n);
    for (int i = 0; i < n; ++i) {
        Rng rng(mix_seed(seed, static_cast<uint64_t>(i)));
        std::uniform_real_distribution<float> u(-1.f, 1.f);
        std::uniform_real_distribution<float> u01(0.f, 1.f);
        int digit = static_cast<int>(u01(rng) * 10.f) % 10;
        ds.labels[i] = digit;

        float th = jc.rot * u(rng);
        float sx = 1.f + jc.scale * u(rng), sy = 1.f + jc.scale * u(rng);
        float sh = jc.shear * u(rng);
        float tx = jc.translate * u(rng), ty = jc.translate * u(rng);
        float thick = jc.thick_lo + (jc.thick_hi - jc.thick_lo) * u01(rng);
        std::normal_distribution<float> pn(0.f, jc.point_noise);

        // jittered strokes in pixel coordinates
        std::vector<Stroke> strokes;
        for (const auto& s : digit_strokes()[digit]) {
            Stroke js;
            for (auto [x, y] : s) {
                float cx = x - 0.5f + pn(rng), cy = y - 0.5f + pn(rng);
                float rx = std::cos(th) * cx - std::sin(th) * cy;
                float ry = std::sin(th) * cx + std::cos(th) * cy;
                rx += sh * ry;
                js.push_back({(rx * sx + 0.5f) * W + tx - 0.5f,
                              (ry * sy + 0.5f) * W + ty - 0.5f});
            }
            strokes.push_back(std::move(js));
        }

        float* img = ds.images.data() + static_cast<int64_t>(i) * W * W;
        for (int v = 0; v < W; ++v)
            for (int x = 0; x < W; ++x) {
                float best = 1e9f;
                for (const auto& s : strokes)
                    for (size_t j = 0; j + 1 < s.size(); ++j)
                        best = std::min(best,
                                        point_segment_dist(static_cast<float>(x),
                                                           static_cast<float>(v), s[j][0],
                                                           s[j][1], s[j + 1][0], s[j + 1][1]));
                img[v * W + x] = std::clamp(thick + 0.5f - best, 0.f, 1.f);
            }
    }
    return ds;
}

namespace {

std::string data_dir() {
    const char* env = std::getenv("DTI_DATA_DIR");
    return env ? std::string(env) : std::string();
}

bool file_exists(const std::string& p) { return std::ifstream(p).good(); }

Dataset load_mnist_like(const std::string& dir, const std::string& sub, bool train_and_test) {
    std::string base = dir + "/" + sub + "/";
    Dataset test = load_idx(base + "t10k-images-idx3-ubyte", base + "t10k-labels-idx1-ubyte");
    if (!train_and_test) return test;
    Dataset train =
        load_idx(base + "train-images-idx3-ubyte", base + "train-labels-idx1-ubyte");
    // concatenate train + test
    int64_t sz = static_cast<int64_t>(train.channels()) * train.height() * train.width();
    Dataset out;
    out.images = Tensor({train.n() + test.n(), train.channels(), train.height(), train.width()});
    std::copy_n(train.images.data(), train.images.numel(), out.images.data());
    std::copy_n(test.images.data(), test.images.numel(),
                out.images.data() + train.n() * sz);
    out.labels = train.labels;
    out.labels.insert(out.labels.end(), test.labels.begin(), test.labels.end());
    out.n_classes = std::max(train.n_classes, test.n_classes);
    return out;
}

bool mnist_like_present(const std::string& dir, const std::string& sub, bool train_and_test) {
    std::string base = dir + "/" + sub + "/";
    bool t = file_exists(base + "t10k-images-idx3-ubyte");
    return train_and_test ? t && file_exists(base + "train-images-idx3-ubyte") : t;
}

}  // namespace

Dataset load_named(const std::string& name, uint64_t seed) {
    const std::string dir = data_dir();
    auto mnist_or_synth = [&](bool full, const std::string& outname) {
        Dataset ds;
        if (!dir.empty() && mnist_like_present(dir, "mnist", full))
            ds = load_mnist_like(dir, "mnist", full);
        else
            ds = make_synthetic_digits(full ? 70000 : 10000, /*corpus seed*/ 424242);
        ds.name = outname;
        ds.default_steps = "aff-morpho-tps";
        return ds;
    };

    if (name == "mnist") return mnist_or_synth(true, "mnist");
    if (name == "mnist-test") return mnist_or_synth(false, "mnist-test");
    if (name == "mnist-1k") return make_mnist_1k(mnist_or_synth(false, "mnist-test"), seed);
    if (name == "mnist-color") return make_mnist_color(mnist_or_synth(true, "mnist"), seed);
    if (name == "affnist-test")
        return make_affine_augmented(mnist_or_synth(false, "mnist-test"), seed);
    if (name == "fashion-mnist") {
        if (dir.empty() || !mnist_like_present(dir, "fashion-mnist", true))
            throw std::runtime_error(
                "fashion-mnist: IDX files not found under DTI_DATA_DIR/fashion-mnist");
        Dataset ds = load_mnist_like(dir, "fashion-mnist", true);
        ds.name = "fashion-mnist";
        ds.default_steps = "col-aff-tps";
        return ds;
    }
    if (name.rfind("synthetic", 0) == 0) {
        int n = 10000;
        if (auto pos = name.find(':'); pos != std::string::npos)
            n = std::stoi(name.substr(pos + 1));
        return make_synthetic_digits(n, seed);
    }
    // anything else is treated as an image-folder path
    return load_image_folder(name);
}

}  // namespace dti::data
