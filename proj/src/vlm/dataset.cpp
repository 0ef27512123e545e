#include "tame/vlm/dataset.hpp"

#include "tame/io/checkpoint.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>

namespace tame::vlm {

namespace {

using Mask = std::function<bool(double, double)>;

bool within(double v, double lo, double hi) { return v >= lo && v <= hi; }

// Implicit shapes on normalized coordinates (u right, v down), extent ~[-1, 1].
const std::vector<Mask>& shape_masks() {
    static const std::vector<Mask> masks = {
        [](double u, double v) { return u * u + v * v <= 1.0; },
        [](double u, double v) {
            double r = u * u + v * v;
            return r <= 1.0 && r >= 0.55 * 0.55;
        },
        [](double u, double v) { return std::abs(u) <= 0.85 && std::abs(v) <= 0.85; },
        [](double u, double v) {
            return std::abs(u) <= 0.9 && std::abs(v) <= 0.9 && !(std::abs(u) <= 0.5 && std::abs(v) <= 0.5);
        },
        [](double u, double v) { return within(v, -0.9, 0.9) && std::abs(u) <= (v + 0.9) / 1.8 * 0.95; },
        [](double u, double v) {
            return (std::abs(u) <= 0.28 && std::abs(v) <= 0.95) || (std::abs(v) <= 0.28 && std::abs(u) <= 0.95);
        },
        [](double u, double v) {
            return (std::abs(u - v) <= 0.35 || std::abs(u + v) <= 0.35) && std::abs(u) <= 0.9 && std::abs(v) <= 0.9;
        },
        [](double u, double v) { return std::abs(v) <= 0.3 && std::abs(u) <= 0.95; },
        [](double u, double v) { return std::abs(u) <= 0.3 && std::abs(v) <= 0.95; },
        [](double u, double v) { return std::abs(u) + std::abs(v) <= 1.0; },
        [](double u, double v) {
            return (u - 0.55) * (u - 0.55) + v * v <= 0.38 * 0.38 || (u + 0.55) * (u + 0.55) + v * v <= 0.38 * 0.38;
        },
        [](double u, double v) {
            return (within(v, -0.95, -0.5) && std::abs(u) <= 0.95) || (std::abs(u) <= 0.25 && within(v, -0.95, 0.95));
        },
        [](double u, double v) { return within(v, -0.9, 0.9) && std::abs(u) <= (0.9 - v) / 1.8 * 0.95; },
        [](double u, double v) {
            double r = std::abs(u) + std::abs(v);
            return r <= 1.0 && r >= 0.55;
        },
        [](double u, double v) {
            return (within(std::abs(u), 0.6, 0.95) && std::abs(v) <= 0.95) || (std::abs(v) <= 0.22 && std::abs(u) <= 0.95);
        },
        [](double u, double v) {
            double du = std::abs(u) - 0.5;
            double dv = std::abs(v) - 0.5;
            return du * du + dv * dv <= 0.33 * 0.33;
        },
    };
    return masks;
}

}  // namespace

const std::vector<std::string>& shape_class_names() {
    static const std::vector<std::string> names = {
        "disk",     "ring",    "square",         "hollow square", "triangle", "plus",           "x cross",  "horizontal bar",
        "vertical bar", "diamond", "two dots", "t shape",      "inverted triangle", "hollow diamond", "h shape", "four dots",
    };
    return names;
}

const std::vector<int>& public_classes() {
    static const std::vector<int> c = {1, 3, 5, 7, 9, 11, 13, 15};
    return c;
}

const std::vector<int>& downstream_classes() {
    static const std::vector<int> c = {0, 2, 4, 6, 8, 10, 12, 14};
    return c;
}

int Dataset::task_label(std::size_t i) const {
    auto it = std::find(classes.begin(), classes.end(), labels.at(i));
    if (it == classes.end()) throw std::logic_error("label outside dataset class set");
    return static_cast<int>(it - classes.begin());
}

Image render_shape(int shape_class, std::mt19937_64& rng, const ShapeStyle& style, int side) {
    if (shape_class < 0 || shape_class >= kShapeClassCount) throw std::out_of_range("render_shape: unknown class");
    const Mask& mask = shape_masks()[static_cast<std::size_t>(shape_class)];
    std::uniform_real_distribution<double> jitter(-style.center_jitter, style.center_jitter);
    std::uniform_real_distribution<double> size(style.size_lo, style.size_hi);
    std::uniform_real_distribution<double> bg(style.background_lo, style.background_hi);
    std::uniform_real_distribution<double> contrast(style.contrast_lo, style.contrast_hi);
    std::normal_distribution<double> noise(0.0, style.noise_sigma);

    const double cx = side / 2.0 + jitter(rng);
    const double cy = side / 2.0 + jitter(rng);
    const double s = size(rng);
    const double b = bg(rng);
    const double f = b + contrast(rng);

    Image img(side, side);
    for (int y = 0; y < side; ++y) {
        for (int x = 0; x < side; ++x) {
            // 3x3 supersampled coverage for soft edges.
            int hits = 0;
            for (int sy = 0; sy < 3; ++sy)
                for (int sx = 0; sx < 3; ++sx) {
                    const double px = x + (sx + 0.5) / 3.0;
                    const double py = y + (sy + 0.5) / 3.0;
                    hits += mask((px - cx) / s, (py - cy) / s) ? 1 : 0;
                }
            const double cover = hits / 9.0;
            img(y, x) = std::clamp(b + (f - b) * cover + noise(rng), 0.0, 1.0);
        }
    }
    return img;
}

Dataset generate_dataset(const std::vector<int>& classes, int per_class, std::uint64_t seed, const ShapeStyle& style) {
    if (classes.empty() || per_class <= 0) throw std::invalid_argument("generate_dataset: empty class set or count");
    Dataset ds;
    ds.classes = classes;
    ds.seed = seed;
    std::mt19937_64 rng(seed);
    for (int i = 0; i < per_class; ++i) {
        for (int c : classes) {
            ds.images.push_back(render_shape(c, rng, style));
            ds.labels.push_back(c);
        }
    }
    return ds;
}

void save_dataset(const Dataset& ds, const std::string& path) {
    io::Checkpoint ck;
    ck.kind = "dataset";
    ck.seed = ds.seed;
    ck.meta["classes"] = ds.classes;
    ck.meta["side"] = ds.images.empty() ? 0 : ds.images.front().rows();
    ck.add("images", stack_images(ds.images));
    ad::Matrix labels(static_cast<ad::Index>(ds.labels.size()), 1);
    for (std::size_t i = 0; i < ds.labels.size(); ++i) labels(static_cast<ad::Index>(i), 0) = ds.labels[i];
    ck.add("labels", labels);
    io::save_checkpoint(ck, path);
}

Dataset load_dataset(const std::string& path) {
    const io::Checkpoint ck = io::load_checkpoint(path);
    if (ck.kind != "dataset") throw std::runtime_error(path + " is not a dataset file");
    Dataset ds;
    ds.seed = ck.seed;
    ds.classes = ck.meta.at("classes").get<std::vector<int>>();
    const auto side = ck.meta.at("side").get<ad::Index>();
    const ad::Matrix& images = ck.get("images");
    const ad::Matrix& labels = ck.get("labels");
    for (ad::Index r = 0; r < images.rows(); ++r) {
        ds.images.push_back(unstack_image(images, r, side));
        ds.labels.push_back(static_cast<int>(labels(r, 0)));
    }
    return ds;
}

}  // namespace tame::vlm
