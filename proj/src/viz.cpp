#include "dti/viz.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace dti::viz {

namespace {

float clamp01(float v) { return std::min(1.f, std::max(0.f, v)); }

// channel c of a [C,H,W] image, replicating a single gray channel
float pixel(const Tensor& img, int c, int y, int x) {
    int C = img.dim(0), H = img.dim(1), W = img.dim(2);
    int cc = C == 1 ? 0 : c;
    return clamp01(img[(static_cast<int64_t>(cc) * H + y) * W + x]);
}

}  // namespace

Tensor tile_grid(const std::vector<Tensor>& images, int cols, int pad,
                 const std::vector<int>& highlight) {
    if (images.empty()) throw std::invalid_argument("tile_grid: no images");
    int H = images[0].dim(1), W = images[0].dim(2);
    int n = static_cast<int>(images.size());
    cols = std::min(cols, n);
    int rows = (n + cols - 1) / cols;
    int GH = rows * (H + pad) + pad, GW = cols * (W + pad) + pad;
    Tensor out({3, GH, GW});
    out.fill(1.f);
    auto at = [&](int c, int y, int x) -> float& {
        return out[(static_cast<int64_t>(c) * GH + y) * GW + x];
    };
    for (int i = 0; i < n; ++i) {
        if (images[i].dim(1) != H || images[i].dim(2) != W)
            throw std::invalid_argument("tile_grid: mixed image sizes");
        int y0 = pad + (i / cols) * (H + pad), x0 = pad + (i % cols) * (W + pad);
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) at(c, y0 + y, x0 + x) = pixel(images[i], c, y, x);
        if (std::find(highlight.begin(), highlight.end(), i) != highlight.end() && pad > 0) {
            for (int y = y0 - 1; y <= y0 + H; ++y)
                for (int x = x0 - 1; x <= x0 + W; ++x) {
                    if (y > y0 - 1 && y < y0 + H && x > x0 - 1 && x < x0 + W) continue;
                    at(0, y, x) = 1.f;
                    at(1, y, x) = 0.f;
                    at(2, y, x) = 0.f;
                }
        }
    }
    return out;
}

void save_png(const Tensor& chw, const std::string& path) {
    int C = chw.dim(0), H = chw.dim(1), W = chw.dim(2);
    cv::Mat m(H, W, CV_8UC3);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            auto& px = m.at<cv::Vec3b>(y, x);
            for (int c = 0; c < 3; ++c) {
                float v = clamp01(chw[(static_cast<int64_t>(C == 1 ? 0 : c) * H + y) * W + x]);
                px[2 - c] = static_cast<uchar>(std::lround(v * 255.f));  // RGB -> BGR
            }
        }
    if (!cv::imwrite(path, m)) throw std::runtime_error("viz: cannot write " + path);
}

Tensor load_png(const std::string& path) {
    cv::Mat m = cv::imread(path, cv::IMREAD_COLOR);
    if (m.empty()) throw std::runtime_error("viz: cannot read " + path);
    Tensor t({3, m.rows, m.cols});
    for (int y = 0; y < m.rows; ++y)
        for (int x = 0; x < m.cols; ++x) {
            const auto& px = m.at<cv::Vec3b>(y, x);
            for (int c = 0; c < 3; ++c)
                t[(static_cast<int64_t>(c) * m.rows + y) * m.cols + x] = px[2 - c] / 255.f;
        }
    return t;
}

void prototype_grid(const std::vector<Tensor>& prototypes, const std::string& path) {
    int cols = static_cast<int>(std::ceil(std::sqrt(double(prototypes.size()))));
    save_png(tile_grid(prototypes, cols), path);
}

void alignment_strip(const Tensor& sample, const std::vector<Tensor>& aligned, int argmin,
                     const std::string& path) {
    std::vector<Tensor> tiles;
    tiles.push_back(sample);
    for (const auto& t : aligned) tiles.push_back(t);
    save_png(tile_grid(tiles, static_cast<int>(tiles.size()), 2, {argmin + 1}), path);
}

void cluster_montage(const Tensor& prototype, const std::vector<Tensor>& members,
                     const std::string& path, int max_n) {
    std::vector<Tensor> tiles;
    tiles.push_back(prototype);
    for (const auto& m : members) {
        if (static_cast<int>(tiles.size()) > max_n) break;
        tiles.push_back(m);
    }
    int cols = static_cast<int>(std::ceil(std::sqrt(double(tiles.size()))));
    save_png(tile_grid(tiles, cols, 2, {0}), path);
}

void loss_curve(const std::vector<std::pair<int, double>>& table, const std::string& path) {
    if (table.empty()) throw std::invalid_argument("loss_curve: empty table");
    const int W = 480, H = 360, margin = 48;
    cv::Mat m(H, W, CV_8UC3, cv::Scalar(255, 255, 255));
    double lo = table[0].second, hi = table[0].second;
    int klo = table[0].first, khi = table[0].first;
    for (auto [k, l] : table) {
        lo = std::min(lo, l);
        hi = std::max(hi, l);
        klo = std::min(klo, k);
        khi = std::max(khi, k);
    }
    if (hi == lo) hi = lo + 1.0;
    auto px = [&](int k, double l) {
        int x = khi == klo ? W / 2
                           : margin + int((W - 2 * margin) * double(k - klo) / (khi - klo));
        int y = H - margin - int((H - 2 * margin) * (l - lo) / (hi - lo));
        return cv::Point(x, y);
    };
    cv::line(m, {margin, H - margin}, {W - margin, H - margin}, {0, 0, 0});
    cv::line(m, {margin, margin}, {margin, H - margin}, {0, 0, 0});
    for (size_t i = 0; i + 1 < table.size(); ++i)
        cv::line(m, px(table[i].first, table[i].second),
                 px(table[i + 1].first, table[i + 1].second), {180, 60, 20}, 2);
    for (auto [k, l] : table) {
        cv::circle(m, px(k, l), 3, cv::Scalar(20, 20, 200), cv::FILLED);
        cv::putText(m, std::to_string(k), px(k, l) + cv::Point(-5, 18),
                    cv::FONT_HERSHEY_SIMPLEX, 0.4, {0, 0, 0});
    }
    cv::putText(m, "K", {W - margin + 8, H - margin + 4}, cv::FONT_HERSHEY_SIMPLEX, 0.5,
                {0, 0, 0});
    cv::putText(m, "loss", {8, margin - 8}, cv::FONT_HERSHEY_SIMPLEX, 0.5, {0, 0, 0});
    if (!cv::imwrite(path, m)) throw std::runtime_error("viz: cannot write " + path);
}

}  // namespace dti::viz
