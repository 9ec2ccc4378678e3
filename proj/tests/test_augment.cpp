#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "gcrl/augment.hpp"
#include "gcrl/errors.hpp"

using namespace gcrl;

namespace {

Image ramp_image(int side) {
  Image img(side, side);
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(y, x, c) = static_cast<float>(y * side + x) / static_cast<float>(side * side) +
                          0.01f * static_cast<float>(c);
  return img;
}

Image textured_image(int side, std::uint64_t seed) {
  RngStream rng(seed, StreamPurpose::misc, 0, 0);
  Image img(side, side);
  for (auto& v : img.data) v = static_cast<float>(rng.next_double());
  return img;
}

} // namespace

TEST_CASE("weak augment with centered offset and no flip is the identity") {
  auto img = ramp_image(8);
  auto out = weak_augment_at(img, 4, 4, 4, false);
  CHECK(out.data == img.data);
}

TEST_CASE("horizontal flip is an involution") {
  auto img = textured_image(6, 3);
  auto twice = hflip(hflip(img));
  CHECK(twice.data == img.data);
}

TEST_CASE("reflect padding mirrors interior rows into the border") {
  auto img = ramp_image(4);
  // offset (0,0) with pad 1 shows the reflected row/column at the border:
  // output row 0 must equal input row 1, output column 0 input column 1.
  auto out = weak_augment_at(img, 1, 0, 0, false);
  for (int x = 0; x < 4; ++x)
    for (int c = 0; c < 3; ++c) CHECK(out.at(0, x, c) == img.at(1, x == 0 ? 1 : x - 1, c));
  for (int y = 1; y < 4; ++y)
    for (int c = 0; c < 3; ++c) CHECK(out.at(y, 0, c) == img.at(y - 1, 1, c));
  // hand oracle for the corner: padded(-1,-1) reflects to (1,1)
  CHECK(out.at(0, 0, 0) == img.at(1, 1, 0));
}

TEST_CASE("weak augment rejects pad >= side and non-square images") {
  auto img = ramp_image(4);
  AugPolicy p = weak_policy_default();
  p.pad = 4;
  RngStream rng(0, StreamPurpose::aug_weak, 0, 0);
  CHECK_THROWS_AS(weak_augment(img, p, rng), ValueError);
  Image rect(4, 5);
  CHECK_THROWS_AS(weak_augment_at(rect, 1, 0, 0, false), ValueError);
}

TEST_CASE("grayscale branch leaves all three channels equal") {
  auto img = textured_image(8, 11);
  AugPolicy p = strong_policy_default();
  p.jitter_prob = 0.0f;
  p.gray_prob = 1.0f;
  p.flip_prob = 0.0f;
  RngStream rng(1, StreamPurpose::aug_strong, 0, 0);
  auto out = strong_augment(img, p, rng);
  for (std::size_t i = 0; i < out.pixels(); ++i) {
    CHECK(out.data[i * 3] == out.data[i * 3 + 1]);
    CHECK(out.data[i * 3 + 1] == out.data[i * 3 + 2]);
  }
}

TEST_CASE("identity jitter factors leave the image unchanged up to clamp") {
  auto img = textured_image(8, 12);
  auto out = adjust_hue(adjust_saturation(adjust_contrast(adjust_brightness(img, 1.0f), 1.0f), 1.0f), 0.0f);
  for (std::size_t i = 0; i < img.data.size(); ++i)
    CHECK(out.data[i] == doctest::Approx(img.data[i]).epsilon(1e-5));
}

TEST_CASE("full-frame crop resized to the same size is the identity") {
  auto img = textured_image(9, 13);
  auto out = bilinear_resize_crop(img, 0.0, 0.0, 9.0, 9.0, 9, 9);
  for (std::size_t i = 0; i < img.data.size(); ++i) CHECK(std::abs(out.data[i] - img.data[i]) < 1e-6);
}

TEST_CASE("strong augment preserves shape and value range") {
  auto img = textured_image(10, 14);
  AugPolicy p = strong_policy_default();
  for (int s = 0; s < 20; ++s) {
    RngStream rng(100 + s, StreamPurpose::aug_strong, 0, 0);
    auto out = strong_augment(img, p, rng);
    CHECK(out.height == 10);
    CHECK(out.width == 10);
    for (float v : out.data) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
  }
}

TEST_CASE("strong augment applies sub-transforms in the documented order") {
  auto img = textured_image(8, 15);
  AugPolicy p = strong_policy_default();
  p.jitter_prob = 1.0f;
  p.gray_prob = 1.0f;
  p.flip_prob = 1.0f;
  RngStream rng(7, StreamPurpose::aug_strong, 0, 0);
  std::vector<std::string> trace;
  strong_augment(img, p, rng, &trace);
  REQUIRE(trace.size() == 4);
  CHECK(trace[0] == "resized_crop");
  CHECK(trace[1] == "color_jitter");
  CHECK(trace[2] == "grayscale");
  CHECK(trace[3] == "hflip");
}

TEST_CASE("pipelines replay exactly for a fixed stream key") {
  auto img = textured_image(8, 16);
  AugPolicy strong = strong_policy_default();
  AugPolicy weak = weak_policy_default();
  for (int rep = 0; rep < 2; ++rep) {
    RngStream s1(21, StreamPurpose::aug_strong, 3, 17);
    RngStream s2(21, StreamPurpose::aug_strong, 3, 17);
    CHECK(strong_augment(img, strong, s1).data == strong_augment(img, strong, s2).data);
    RngStream w1(21, StreamPurpose::aug_weak, 3, 17);
    RngStream w2(21, StreamPurpose::aug_weak, 3, 17);
    CHECK(weak_augment(img, weak, w1).data == weak_augment(img, weak, w2).data);
  }
}

TEST_CASE("hue shift of a third of a turn cycles pure channels") {
  Image img(1, 1);
  img.data = {1.0f, 0.0f, 0.0f}; // pure red
  auto shifted = adjust_hue(img, 1.0f / 3.0f);
  CHECK(shifted.data[0] == doctest::Approx(0.0f).epsilon(1e-5));
  CHECK(shifted.data[1] == doctest::Approx(1.0f).epsilon(1e-5));
  CHECK(shifted.data[2] == doctest::Approx(0.0f).epsilon(1e-5));
}

TEST_CASE("policy validation catches bad probabilities and crop ranges") {
  AugPolicy p = strong_policy_default();
  p.jitter_prob = 1.5f;
  CHECK_THROWS_AS(p.validate(), ValueError);
  p = strong_policy_default();
  p.crop_scale_lo = 0.0f;
  CHECK_THROWS_AS(p.validate(), ValueError);
}
