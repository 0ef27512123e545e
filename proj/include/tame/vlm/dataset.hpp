#pragma once

#include "tame/vlm/image.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace tame::vlm {

// Procedural shape classes. Every shape is left-right symmetric so a
// horizontal flip never changes the label.
inline constexpr int kShapeClassCount = 16;
const std::vector<std::string>& shape_class_names();

// Disjoint class sets: the "public" set stands in for the large public corpus
// used by warm-start and reference statistics, the downstream set is the
// zero-shot evaluation task.
const std::vector<int>& public_classes();
const std::vector<int>& downstream_classes();

struct ShapeStyle {
    double center_jitter = 1.5;
    double size_lo = 4.5;
    double size_hi = 6.5;
    double background_lo = 0.05;
    double background_hi = 0.35;
    double contrast_lo = 0.12;
    double contrast_hi = 0.25;
    double noise_sigma = 0.04;
};

struct Dataset {
    std::vector<Image> images;
    std::vector<int> labels;  // global shape class ids
    std::vector<int> classes;
    std::uint64_t seed = 0;

    std::size_t size() const { return images.size(); }
    // Label remapped to its position in `classes` (the K-way task label).
    int task_label(std::size_t i) const;
};

Image render_shape(int shape_class, std::mt19937_64& rng, const ShapeStyle& style = {}, int side = 16);

// Balanced, deterministic dataset: per_class images of each class, interleaved.
Dataset generate_dataset(const std::vector<int>& classes, int per_class, std::uint64_t seed,
                         const ShapeStyle& style = {});

void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

}  // namespace tame::vlm
