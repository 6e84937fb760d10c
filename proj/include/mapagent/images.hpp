#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mapagent {

/// An encoded image (PNG or JPEG bytes) plus its decoded dimensions.
struct EncodedImage {
    std::string mime;
    std::vector<std::uint8_t> bytes;
    int width = 0;
    int height = 0;
};

/// Fractions of the image extent; x grows right, y grows down.
struct NormalizedBox {
    double x_min = 0.0;
    double y_min = 0.0;
    double x_max = 1.0;
    double y_max = 1.0;
};

class ImageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Decodes the header of `bytes` to fill in dimensions. Throws ImageError if undecodable.
EncodedImage make_encoded_image(std::vector<std::uint8_t> bytes);

/// Throws ImageError when the file is missing, empty, or not a decodable image.
EncodedImage load_image_file(const std::filesystem::path& path);

/// Crops the box out of `image` and re-encodes it as PNG.
EncodedImage crop_normalized(const EncodedImage& image, const NormalizedBox& box);

/// True when both images decode to the same dimensions and pixel values.
bool same_pixels(const EncodedImage& a, const EncodedImage& b);

/// RGB triple at pixel (x, y).
std::array<std::uint8_t, 3> pixel_rgb(const EncodedImage& image, int x, int y);

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::string data_url(const EncodedImage& image);

struct StoredImage {
    std::string handle;
    std::string label;
    EncodedImage image;
};

/// Per-episode image registry. The query image is always stored under "query";
/// tool outputs get sequential handles img-1, img-2, ...
class ImageStore {
public:
    const StoredImage& add_query(EncodedImage image);
    const StoredImage& add(EncodedImage image, std::string label);

    [[nodiscard]] const StoredImage* find(std::string_view handle) const;
    [[nodiscard]] bool contains(std::string_view handle) const { return find(handle) != nullptr; }
    [[nodiscard]] std::size_t size() const noexcept { return images_.size(); }

private:
    std::map<std::string, StoredImage, std::less<>> images_;
    int next_id_ = 1;
};

}  // namespace mapagent
