#include "dedit/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "dedit/io_util.hpp"

namespace dedit {

std::vector<std::uint8_t> encode_ppm(const TensorF& image) {
    if (image.rank() != 3 || image.shape()[0] != 3)
        throw std::invalid_argument("ppm: expected [3,h,w] image, got " + shape_str(image.shape()));
    const int h = image.shape()[1], w = image.shape()[2];
    const std::string header =
        "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.reserve(out.size() + std::size_t(3) * h * w);
    const auto v = image.values();
    const std::size_t plane = std::size_t(h) * w;
    for (std::size_t p = 0; p < plane; ++p)
        for (int c = 0; c < 3; ++c) {
            const double x = (double(v[c * plane + p]) + 1.0) / 2.0 * 255.0;
            out.push_back(static_cast<std::uint8_t>(std::clamp(std::lround(x), 0l, 255l)));
        }
    return out;
}

void write_ppm(const std::string& path, const TensorF& image) {
    write_file(path, encode_ppm(image));
}

}  // namespace dedit
