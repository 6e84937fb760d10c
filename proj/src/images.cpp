#include "mapagent/images.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iterator>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <openssl/evp.h>

namespace mapagent {

namespace {

cv::Mat decode(const EncodedImage& image) {
    cv::Mat buf(1, static_cast<int>(image.bytes.size()), CV_8UC1,
                const_cast<std::uint8_t*>(image.bytes.data()));
    cv::Mat mat = cv::imdecode(buf, cv::IMREAD_COLOR);
    if (mat.empty()) {
        throw ImageError("image bytes are not decodable");
    }
    return mat;
}

std::string sniff_mime(const std::vector<std::uint8_t>& bytes) {
    static constexpr std::array<std::uint8_t, 4> kPng{0x89, 'P', 'N', 'G'};
    if (bytes.size() >= 4 && std::equal(kPng.begin(), kPng.end(), bytes.begin())) {
        return "image/png";
    }
    if (bytes.size() >= 2 && bytes[0] == 0xFF && bytes[1] == 0xD8) {
        return "image/jpeg";
    }
    return "application/octet-stream";
}

}  // namespace

EncodedImage make_encoded_image(std::vector<std::uint8_t> bytes) {
    if (bytes.empty()) {
        throw ImageError("image is empty");
    }
    EncodedImage out;
    out.mime = sniff_mime(bytes);
    out.bytes = std::move(bytes);
    const cv::Mat mat = decode(out);
    out.width = mat.cols;
    out.height = mat.rows;
    return out;
}

EncodedImage load_image_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ImageError("cannot open image " + path.string());
    }
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.empty()) {
        throw ImageError("image file is empty: " + path.string());
    }
    try {
        return make_encoded_image(std::move(bytes));
    } catch (const ImageError& e) {
        throw ImageError(path.string() + ": " + e.what());
    }
}

EncodedImage crop_normalized(const EncodedImage& image, const NormalizedBox& box) {
    const cv::Mat mat = decode(image);
    const int x0 = std::clamp(static_cast<int>(std::floor(box.x_min * mat.cols)), 0, mat.cols - 1);
    const int y0 = std::clamp(static_cast<int>(std::floor(box.y_min * mat.rows)), 0, mat.rows - 1);
    const int x1 = std::clamp(static_cast<int>(std::ceil(box.x_max * mat.cols)), x0 + 1, mat.cols);
    const int y1 = std::clamp(static_cast<int>(std::ceil(box.y_max * mat.rows)), y0 + 1, mat.rows);
    const cv::Mat region = mat(cv::Rect(x0, y0, x1 - x0, y1 - y0));
    std::vector<std::uint8_t> png;
    cv::imencode(".png", region, png);
    return EncodedImage{"image/png", std::move(png), region.cols, region.rows};
}

bool same_pixels(const EncodedImage& a, const EncodedImage& b) {
    const cv::Mat ma = decode(a);
    const cv::Mat mb = decode(b);
    if (ma.size() != mb.size() || ma.type() != mb.type()) {
        return false;
    }
    return cv::norm(ma, mb, cv::NORM_INF) == 0.0;
}

std::array<std::uint8_t, 3> pixel_rgb(const EncodedImage& image, int x, int y) {
    const cv::Mat mat = decode(image);
    const auto& bgr = mat.at<cv::Vec3b>(y, x);
    return {bgr[2], bgr[1], bgr[0]};
}

std::string base64_encode(std::span<const std::uint8_t> bytes) {
    std::string out(4 * ((bytes.size() + 2) / 3), '\0');
    const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                  static_cast<int>(bytes.size()));
    out.resize(static_cast<std::size_t>(n));
    return out;
}

std::string data_url(const EncodedImage& image) {
    return "data:" + image.mime + ";base64," + base64_encode(image.bytes);
}

const StoredImage& ImageStore::add_query(EncodedImage image) {
    auto [it, _] = images_.insert_or_assign("query", StoredImage{"query", "query image", std::move(image)});
    return it->second;
}

const StoredImage& ImageStore::add(EncodedImage image, std::string label) {
    std::string handle = "img-" + std::to_string(next_id_++);
    auto [it, _] = images_.emplace(handle, StoredImage{handle, std::move(label), std::move(image)});
    return it->second;
}

const StoredImage* ImageStore::find(std::string_view handle) const {
    auto it = images_.find(handle);
    return it == images_.end() ? nullptr : &it->second;
}

}  // namespace mapagent
