#include <doctest.h>

#include <bit>
#include <cmath>
#include <fstream>
#include <limits>

#include "helpers.hpp"
#include "patchlm/checkpoint.hpp"
#include "patchlm/errors.hpp"

using namespace patchlm;

TEST_CASE("container layout: magic, version, config, little-endian records") {
  Checkpoint ck;
  ck.config_json = "{}";
  ck.tensors.emplace("w", Tensor({1, 2}, std::vector<double>{1.0, -2.0}));
  const auto bytes = encode_checkpoint(ck);
  const std::string magic(bytes.begin(), bytes.begin() + 8);
  CHECK(magic == std::string("PLMCKPT\0", 8));
  CHECK(bytes[8] == 1);  // version, little-endian u32
  CHECK(bytes[9] == 0);
  CHECK(bytes[12] == 2);  // config length
  // 8 magic + 4 version + 8 + 2 config + 8 count + 8 + 1 name + 8 rank + 16 dims + 16 data
  CHECK(bytes.size() == 79);
  std::uint64_t first = 0;
  for (int i = 0; i < 8; ++i) first |= static_cast<std::uint64_t>(bytes[63 + i]) << (8 * i);
  CHECK(std::bit_cast<double>(first) == 1.0);
}

TEST_CASE("encode/decode preserves every bit including special values") {
  Checkpoint ck;
  ck.config_json = R"({"note":"x"})";
  const double specials[] = {-0.0, std::numeric_limits<double>::denorm_min(), std::numeric_limits<double>::infinity(),
                             std::numeric_limits<double>::max(), 0.1};
  ck.tensors.emplace("a.b", Tensor({5}, std::vector<double>(std::begin(specials), std::end(specials))));
  ck.tensors.emplace("m", Tensor::identity(3));
  const Checkpoint back = decode_checkpoint(encode_checkpoint(ck));
  CHECK(back.config_json == ck.config_json);
  CHECK(back.tensors.size() == 2);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(std::bit_cast<std::uint64_t>(back.tensors.at("a.b")[i]) == std::bit_cast<std::uint64_t>(specials[i]));
  }
  CHECK(back.tensors.at("m") == Tensor::identity(3));
}

TEST_CASE("corrupt containers are I/O errors") {
  Checkpoint ck;
  ck.tensors.emplace("w", Tensor::ones({2, 2}));
  auto bytes = encode_checkpoint(ck);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad_magic), IoError);
  auto truncated = bytes;
  truncated.pop_back();
  CHECK_THROWS_AS(decode_checkpoint(truncated), IoError);
  auto trailing = bytes;
  trailing.push_back(0);
  CHECK_THROWS_AS(decode_checkpoint(trailing), IoError);
  auto version = bytes;
  version[8] = 9;
  CHECK_THROWS_AS(decode_checkpoint(version), IoError);
  CHECK_THROWS_AS(decode_checkpoint({}), IoError);
}

TEST_CASE("save then load reproduces parameters and logits bit for bit") {
  testutil::TempDir dir;
  const ModelParams p = testutil::perturbed_params(testutil::tiny_config(), 4);
  save_params(dir / "m.ckpt", p);
  const ModelParams q = load_params(dir / "m.ckpt");
  CHECK(q.config == p.config);
  CHECK(q.tensors == p.tensors);
  CHECK(fingerprint(q.tensors) == fingerprint(p.tensors));
  const SequenceInput seq = testutil::mixed_sequence(p.config, 9, 1);
  CHECK(compute_logits(p, seq) == compute_logits(q, seq));
}

TEST_CASE("writes replace atomically and leave no temporary files") {
  testutil::TempDir dir;
  const ModelParams p = testutil::perturbed_params(testutil::tiny_config(), 1);
  const ModelParams q = testutil::perturbed_params(testutil::tiny_config(), 2);
  save_params(dir / "m.ckpt", p);
  save_params(dir / "m.ckpt", q);
  CHECK(load_params(dir / "m.ckpt").tensors == q.tensors);
  std::size_t files = 0;
  for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(dir.path())) ++files;
  CHECK(files == 1);
  CHECK_THROWS_AS(save_params(dir / "missing-dir" / "x" / "m.ckpt", p), IoError);
}

TEST_CASE("loading validates tensors against the stored config") {
  testutil::TempDir dir;
  ModelParams p = testutil::perturbed_params(testutil::tiny_config(), 1);
  p.tensors.at("output_head") = Tensor::zeros({3, 3});
  Checkpoint ck{kCheckpointVersion, p.config.to_json(), p.tensors};
  write_checkpoint(dir / "bad.ckpt", ck);
  CHECK_THROWS_AS(load_params(dir / "bad.ckpt"), DimensionError);
  CHECK_THROWS_AS(load_params(dir / "none.ckpt"), IoError);
}
