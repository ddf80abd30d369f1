#include "histodiff/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

namespace histodiff {

Tensor load_png(const std::string& path) {
    cv::Mat img = cv::imread(path, cv::IMREAD_COLOR);
    if (img.empty()) throw std::runtime_error("load_png: cannot read image: " + path);
    Tensor out({3, img.rows, img.cols});
    for (int y = 0; y < img.rows; ++y) {
        for (int x = 0; x < img.cols; ++x) {
            const cv::Vec3b px = img.at<cv::Vec3b>(y, x);  // BGR
            out.at(0, y, x) = px[2] / 255.0;
            out.at(1, y, x) = px[1] / 255.0;
            out.at(2, y, x) = px[0] / 255.0;
        }
    }
    return out;
}

void save_png(const Tensor& image, const std::string& path) {
    if (image.ndim() != 3 || image.dim(0) != 3)
        throw std::invalid_argument("save_png: expected [3,H,W], got " + image.shape_str());
    const int h = image.dim(1), w = image.dim(2);
    cv::Mat img(h, w, CV_8UC3);
    auto to_byte = [](double v) {
        return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    };
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            img.at<cv::Vec3b>(y, x) =
                cv::Vec3b(to_byte(image.at(2, y, x)), to_byte(image.at(1, y, x)),
                          to_byte(image.at(0, y, x)));
    if (!cv::imwrite(path, img))
        throw std::runtime_error("save_png: cannot write image: " + path);
}

}  // namespace histodiff
