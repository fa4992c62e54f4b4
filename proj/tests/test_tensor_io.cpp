#include <filesystem>

#include "cimsim/error.hpp"
#include "cimsim/tensor_io.hpp"
#include "doctest.h"

using namespace cimsim;

TEST_CASE("int8 tensor header layout") {
  QuantTensor t({2, 3}, {1, -2, 3, -4, 5, -128}, 0.5);
  auto bytes = encode_tensor(to_blob(t));
  REQUIRE(bytes.size() == 4 + 3 + 2 * 4 + 8 + 6);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "CIMT");
  CHECK(bytes[4] == 1);
  CHECK(bytes[5] == 0);
  CHECK(bytes[6] == 2);
  CHECK(bytes[7] == 2);
  CHECK(bytes[8] == 0);
  CHECK(bytes[11] == 3);
  // 0.5 = 0x3FE0000000000000, little-endian
  CHECK(bytes[15 + 7] == 0x3F);
  CHECK(bytes[15 + 6] == 0xE0);
  CHECK(bytes.back() == 0x80);

  auto back = quant_from_blob(decode_tensor(bytes));
  CHECK(back.shape == t.shape);
  CHECK(back.codes == t.codes);
  CHECK(back.scale == t.scale);
}

TEST_CASE("int32 and float64 round trips through files") {
  auto dir = std::filesystem::temp_directory_path() / "cimsim_tensor_io_test";
  std::filesystem::create_directories(dir);
  AccTensor a({2, 2}, 1e-3);
  a.values = {1, -70000, 2147483647, -2147483647 - 1};
  write_tensor(dir / "a.cimt", a);
  auto a2 = read_acc_tensor(dir / "a.cimt");
  CHECK(a2.values == a.values);
  CHECK(a2.scale == a.scale);

  RealTensor r{{0.1, -2.5, 1e300}, {3}};
  write_tensor(dir / "r.cimt", r);
  auto r2 = read_real_tensor(dir / "r.cimt");
  CHECK(r2.values == r.values);
  std::filesystem::remove_all(dir);
}

TEST_CASE("extension header uses version 2") {
  TensorBlob b;
  b.dtype = DType::Int8;
  b.dims = {2};
  b.extension = {9, 8, 7};
  b.payload = {1, 2};
  auto bytes = encode_tensor(b);
  CHECK(bytes[4] == 2);
  auto d = decode_tensor(bytes);
  CHECK(d.extension == b.extension);
  CHECK(d.payload == b.payload);
}

TEST_CASE("malformed containers are rejected") {
  QuantTensor t({2}, {1, 2}, 1.0);
  auto bytes = encode_tensor(to_blob(t));
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_tensor(bad), SimError);
  auto truncated = bytes;
  truncated.pop_back();
  CHECK_THROWS_AS(decode_tensor(truncated), SimError);
  auto version = bytes;
  version[4] = 9;
  CHECK_THROWS_AS(decode_tensor(version), SimError);
  auto wrong_type = decode_tensor(bytes);
  CHECK_THROWS_AS(acc_from_blob(wrong_type), SimError);
}
