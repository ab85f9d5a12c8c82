#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace t2ldm::textenc {

inline constexpr int kTextWidth = 768;

/// Token features, row-major [tokens, 768].
struct TextEmbedding {
  int tokens = 0;
  std::vector<float> values;

  const float* row(int i) const { return values.data() + static_cast<std::size_t>(i) * kTextWidth; }
  bool operator==(const TextEmbedding&) const = default;
};

/// Interface matching a CLIP-style text tower (n x 768 output).
class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual TextEmbedding encode(std::string_view prompt) const = 0;
  /// Single reserved token used for unconditional (CFG) passes.
  virtual TextEmbedding null_embedding() const = 0;
};

/// Lowercase and split on anything that is not a letter or digit.
std::vector<std::string> tokenize(std::string_view prompt);

/// Deterministic encoder: every token is hashed to a seeded unit-norm Gaussian row.
class HashTextEncoder final : public TextEncoder {
 public:
  explicit HashTextEncoder(std::uint64_t seed = 0x7e57'1d'a5ULL);

  TextEmbedding encode(std::string_view prompt) const override;
  TextEmbedding null_embedding() const override;

  /// The raw row for one token string (no tokenization applied).
  std::vector<float> token_row(std::string_view token) const;

 private:
  std::vector<float> row_for_key(std::uint64_t key) const;
  std::uint64_t seed_;
};

TextEmbedding encode_text(std::string_view prompt);
TextEmbedding null_embedding();

struct PromptRecord {
  std::string id;
  std::string prompt;
};

/// Reads {"id": ..., "prompt": ...} lines; blank lines are skipped.
std::vector<PromptRecord> read_prompts_jsonl(const std::filesystem::path& path);
void write_prompts_jsonl(const std::filesystem::path& path, const std::vector<PromptRecord>& records);

}  // namespace t2ldm::textenc
