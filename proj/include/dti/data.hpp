#pragma once

#include <string>
#include <vector>

#include "dti/tensor.hpp"

namespace dti::data {

struct Dataset {
    std::string name;
    Tensor images;            // [N,C,H,W], values in [0,1]
    std::vector<int> labels;  // empty when unlabeled
    int n_classes = 0;
    std::string default_steps;  // transformation recipe for this dataset

    int n() const { return images.numel() ? images.dim(0) : 0; }
    int channels() const { return images.dim(1); }
    int height() const { return images.dim(2); }
    int width() const { return images.dim(3); }
    bool labeled() const { return !labels.empty(); }
};

struct DatasetSpec {
    std::string name;
    int n_samples;  // -1 when variable (photo collections)
    int n_classes;  // 0 when unlabeled
    int c, h, w;
    std::string recipe;
};

// Named dataset characteristics (sample counts, shapes, default recipes).
const std::vector<DatasetSpec>& dataset_table();
const DatasetSpec* find_spec(const std::string& name);

// Big-endian IDX ingestion (magic 0x803 images / 0x801 labels), pixels
// scaled to [0,1]. labels_path may be empty.
Dataset load_idx(const std::string& images_path, const std::string& labels_path = "");
void save_idx(const Dataset& ds, const std::string& images_path,
              const std::string& labels_path = "");

// fg,bg ~ U[0,1]^3 per image (seeded per index); out = fg*x + bg*(1-x).
Dataset make_mnist_color(const Dataset& ds, uint64_t seed);

// 1,000 indices without replacement.
Dataset make_mnist_1k(const Dataset& ds, uint64_t seed);
Dataset subset(const Dataset& ds, const std::vector<int>& indices);

// Zero-pad to pad_to, then a random affine per image: rotation +/-20 deg,
// scale 0.8-1.2, shear +/-0.2, translation +/-0.12 normalized.
Dataset make_affine_augmented(const Dataset& ds, uint64_t seed, int pad_to = 40);

// Recursive image-folder load: shorter side resized to `size`, center crop.
Dataset load_image_folder(const std::string& path, int size = 128);

// Procedural handwritten-digit stand-in: stroke skeletons per class with
// per-sample affine jitter, point noise and stroke thickness variation.
// Serves as an offline substitute when the real IDX files are absent.
Dataset make_synthetic_digits(int n, uint64_t seed);

// Resolves a dataset name: real files under DTI_DATA_DIR when present,
// otherwise the synthetic substitute with matching shape/recipe.
Dataset load_named(const std::string& name, uint64_t seed);

}  // namespace dti::data
