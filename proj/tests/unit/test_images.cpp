#include <gtest/gtest.h>

#include "mapagent/images.hpp"

using namespace mapagent;

TEST(Images, LoadsFixturePng) {
    const auto img = load_image_file("images/bund.png");
    EXPECT_EQ(img.mime, "image/png");
    EXPECT_EQ(img.width, 96);
    EXPECT_EQ(img.height, 64);
}

TEST(Images, MissingFileThrows) { EXPECT_THROW(load_image_file("images/nope.png"), ImageError); }

TEST(Images, CorruptFileThrows) { EXPECT_THROW(load_image_file("images/corrupt.png"), ImageError); }

TEST(Images, EmptyBytesThrow) { EXPECT_THROW(make_encoded_image({}), ImageError); }

TEST(Images, CropKeepsPixels) {
    const auto img = load_image_file("images/bund.png");
    // Light rectangle spans x 10..50, y 10..40 in the fixture.
    const auto crop = crop_normalized(img, {10.0 / 96.0, 10.0 / 64.0, 50.0 / 96.0, 40.0 / 64.0});
    EXPECT_EQ(crop.width, 40);
    EXPECT_EQ(crop.height, 30);
    EXPECT_EQ(pixel_rgb(crop, 5, 5), pixel_rgb(img, 15, 15));
}

TEST(Images, FullCropIsIdentity) {
    const auto img = load_image_file("images/flore.png");
    EXPECT_TRUE(same_pixels(crop_normalized(img, {0, 0, 1, 1}), img));
    EXPECT_FALSE(same_pixels(img, load_image_file("images/bund.png")));
}

TEST(Images, Base64KnownVectors) {
    auto enc = [](std::string_view s) {
        std::vector<std::uint8_t> b(s.begin(), s.end());
        return base64_encode(b);
    };
    EXPECT_EQ(enc(""), "");
    EXPECT_EQ(enc("M"), "TQ==");
    EXPECT_EQ(enc("Ma"), "TWE=");
    EXPECT_EQ(enc("Man"), "TWFu");
    EXPECT_EQ(enc("foobar"), "Zm9vYmFy");
}

TEST(Images, DataUrlPrefix) {
    const auto img = load_image_file("images/bund.png");
    EXPECT_EQ(data_url(img).rfind("data:image/png;base64,iVBOR", 0), 0u);
}

TEST(ImageStore, HandlesAreSequential) {
    ImageStore store;
    const auto img = load_image_file("images/bund.png");
    EXPECT_EQ(store.add_query(img).handle, "query");
    EXPECT_EQ(store.add(img, "map").handle, "img-1");
    EXPECT_EQ(store.add(img, "zoom").handle, "img-2");
    EXPECT_TRUE(store.contains("img-2"));
    EXPECT_FALSE(store.contains("img-3"));
    EXPECT_EQ(store.find("img-1")->label, "map");
    EXPECT_EQ(store.size(), 3u);
}
