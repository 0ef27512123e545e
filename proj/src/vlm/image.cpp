#include "tame/vlm/image.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace tame::vlm {

ad::Matrix stack_images(const std::vector<Image>& images) {
    if (images.empty()) return ad::Matrix(0, 0);
    const ad::Index n = images.front().size();
    ad::Matrix out(static_cast<ad::Index>(images.size()), n);
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (images[i].size() != n) throw std::invalid_argument("stack_images: images differ in size");
        out.row(static_cast<ad::Index>(i)) = images[i].reshaped<Eigen::RowMajor>().transpose();
    }
    return out;
}

Image unstack_image(const ad::Matrix& rows, ad::Index row, ad::Index side) {
    return rows.row(row).reshaped<Eigen::RowMajor>(side, side);
}

Image resized_crop(const Image& img, const CropBox& box) {
    const ad::Index h = img.rows();
    const ad::Index w = img.cols();
    Image out(h, w);
    for (ad::Index y = 0; y < h; ++y) {
        // Pixel-center sampling inside the box.
        const double sy = std::clamp(box.top + (static_cast<double>(y) + 0.5) * box.height / static_cast<double>(h) - 0.5,
                                     0.0, static_cast<double>(h - 1));
        const auto y0 = static_cast<ad::Index>(std::floor(sy));
        const ad::Index y1 = std::min(y0 + 1, h - 1);
        const double fy = sy - static_cast<double>(y0);
        for (ad::Index x = 0; x < w; ++x) {
            const double sx = std::clamp(
                box.left + (static_cast<double>(x) + 0.5) * box.width / static_cast<double>(w) - 0.5, 0.0,
                static_cast<double>(w - 1));
            const auto x0 = static_cast<ad::Index>(std::floor(sx));
            const ad::Index x1 = std::min(x0 + 1, w - 1);
            const double fx = sx - static_cast<double>(x0);
            out(y, x) = (1 - fy) * ((1 - fx) * img(y0, x0) + fx * img(y0, x1)) +
                        fy * ((1 - fx) * img(y1, x0) + fx * img(y1, x1));
        }
    }
    return out;
}

Image hflip(const Image& img) { return img.rowwise().reverse(); }

CropBox sample_crop(std::mt19937_64& rng, ad::Index side, double scale_lo, double scale_hi) {
    const double area = static_cast<double>(side * side);
    std::uniform_real_distribution<double> scale(scale_lo, scale_hi);
    std::uniform_real_distribution<double> log_ratio(std::log(3.0 / 4.0), std::log(4.0 / 3.0));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double s = static_cast<double>(side);
    for (int attempt = 0; attempt < 10; ++attempt) {
        const double target = area * scale(rng);
        const double ratio = std::exp(log_ratio(rng));
        const double w = std::sqrt(target * ratio);
        const double h = std::sqrt(target / ratio);
        if (w <= s && h <= s) {
            return CropBox{unit(rng) * (s - h), unit(rng) * (s - w), h, w};
        }
    }
    return CropBox{0.0, 0.0, s, s};
}

}  // namespace tame::vlm
