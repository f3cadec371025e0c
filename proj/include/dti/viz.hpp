#pragma once

#include <string>
#include <vector>

#include "dti/tensor.hpp"

namespace dti::viz {

// Tiles same-shaped [C,H,W] images (C = 1 or 3) into a [3,H',W'] grid,
// row-major and `cols` wide, with `pad` pixels of white between tiles.
// Values are clamped to [0,1] here and nowhere else in the pipeline.
// Tiles listed in `highlight` get a red ring drawn in their padding.
Tensor tile_grid(const std::vector<Tensor>& images, int cols, int pad = 2,
                 const std::vector<int>& highlight = {});

// [C,H,W] floats in [0,1] (clamped) to an 8-bit PNG and back.
void save_png(const Tensor& chw, const std::string& path);
Tensor load_png(const std::string& path);

// One tile per cluster prototype (or mean), near-square layout.
void prototype_grid(const std::vector<Tensor>& prototypes, const std::string& path);

// Input sample followed by every cluster's aligned prototype; the winning
// cluster's tile is ringed.
void alignment_strip(const Tensor& sample, const std::vector<Tensor>& aligned, int argmin,
                     const std::string& path);

// Up to `max_n` member images of one cluster, prototype first (ringed).
void cluster_montage(const Tensor& prototype, const std::vector<Tensor>& members,
                     const std::string& path, int max_n = 63);

// Loss-versus-K line plot for elbow scans.
void loss_curve(const std::vector<std::pair<int, double>>& table, const std::string& path);

}  // namespace dti::viz
