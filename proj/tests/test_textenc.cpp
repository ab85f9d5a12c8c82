#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "t2ldm/textenc.hpp"

using namespace t2ldm::textenc;

namespace {

double row_norm(const TextEmbedding& e, int i) {
  double s = 0;
  for (int k = 0; k < kTextWidth; ++k) s += double(e.row(i)[k]) * e.row(i)[k];
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("encoding is deterministic and case-insensitive") {
  CHECK(encode_text("One car is around one pedestrian.") == encode_text("One car is around one pedestrian."));
  CHECK(encode_text("Rainy.") == encode_text("rainy"));
}

TEST_CASE("one row per token") {
  const auto e = encode_text("Two cars.");
  CHECK(e.tokens == 2);
  CHECK(e.values.size() == 2u * kTextWidth);
  CHECK(tokenize("Two cars.") == std::vector<std::string>{"two", "cars"});
}

TEST_CASE("rows have unit norm") {
  const auto e = encode_text("Night. More than five cars.");
  for (int i = 0; i < e.tokens; ++i) CHECK(std::abs(row_norm(e, i) - 1.0) <= 1e-6);
  CHECK(std::abs(row_norm(null_embedding(), 0) - 1.0) <= 1e-6);
}

TEST_CASE("null embedding is a single reserved row") {
  HashTextEncoder enc;
  const auto n = enc.null_embedding();
  CHECK(n.tokens == 1);
  CHECK(n == enc.null_embedding());
  CHECK(n.values != enc.token_row(""));
  CHECK(n.values != enc.token_row("null"));
  // A prompt without tokens falls back to the null row.
  CHECK(enc.encode("...") == n);
}

TEST_CASE("token order permutes rows") {
  const auto a = encode_text("car pedestrian"), b = encode_text("pedestrian car");
  CHECK(std::equal(a.row(0), a.row(0) + kTextWidth, b.row(1)));
  CHECK(std::equal(a.row(1), a.row(1) + kTextWidth, b.row(0)));
  CHECK(a != b);
}

TEST_CASE("prompt JSONL round trip") {
  const auto path = std::filesystem::temp_directory_path() / "t2ldm_prompts.jsonl";
  write_prompts_jsonl(path, {{"a", "One car."}, {"b", "Rainy. No car."}});
  const auto r = read_prompts_jsonl(path);
  REQUIRE(r.size() == 2);
  CHECK(r[1].id == "b");
  CHECK(r[1].prompt == "Rainy. No car.");
}
