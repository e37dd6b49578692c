#include "doctest.h"

#include <filesystem>

#include "ihk/common/array_file.hpp"
#include "ihk/common/hashing.hpp"
#include "ihk/common/image_io.hpp"

using namespace ihk;

TEST_CASE("array file round trip keeps names, order, values and metadata") {
  torch::manual_seed(3);
  ArrayFile f;
  f.add("b_weights", torch::randn({3, 4}));
  f.add("a_bias", torch::randn({5}));
  f.metadata = {{"format", "test/1"}, {"step", 12}};
  const auto back = decode_array_file(encode_array_file(f));
  REQUIRE(back.arrays.size() == 2);
  CHECK(back.arrays[0].first == "b_weights");
  CHECK(torch::equal(back.at("b_weights"), f.at("b_weights")));
  CHECK(torch::equal(back.at("a_bias"), f.at("a_bias")));
  CHECK(back.metadata["format"] == "test/1");
  CHECK(back.metadata["step"] == 12);
}

TEST_CASE("array file header is 8-byte length plus JSON") {
  ArrayFile f;
  f.add("x", torch::ones({2}));
  const auto bytes = encode_array_file(f);
  uint64_t len = 0;
  std::memcpy(&len, bytes.data(), 8);
  CHECK(bytes.size() == 8 + len + 8);
  CHECK(bytes[8] == '{');
  CHECK_THROWS(decode_array_file(bytes.substr(0, 12)));
}

TEST_CASE("sha256 and base64 known answers") {
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(base64_encode("hello") == "aGVsbG8=");
  CHECK(base64_decode("aGVsbG8=") == "hello");
  CHECK(base64_decode(base64_encode(std::string("\0\1\2", 3))) == std::string("\0\1\2", 3));
}

TEST_CASE("png encode/decode is exact on 8-bit values") {
  auto img = torch::randint(0, 256, {7, 5, 4}).to(torch::kFloat32) / 255.0;
  auto back = decode_png(encode_png(img));
  CHECK(back.sizes() == img.sizes());
  CHECK((back - img).abs().max().item<float>() < 1e-6f);
  CHECK(psnr(img, img) == std::numeric_limits<double>::infinity());
}
