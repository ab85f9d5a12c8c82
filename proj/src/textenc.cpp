#include "t2ldm/textenc.hpp"

#include <cctype>
#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include <json.hpp>

namespace t2ldm::textenc {

namespace {

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double unit_open(std::uint64_t& state) {
  return (static_cast<double>(splitmix64(state) >> 11) + 0.5) * 0x1.0p-53;
}

// Keys in this range are never produced by hashing a token.
constexpr std::uint64_t kNullKey = 0x6e756c6c'00000000ULL;

}  // namespace

std::vector<std::string> tokenize(std::string_view prompt) {
  std::vector<std::string> tokens;
  std::string cur;
  for (unsigned char c : prompt) {
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      tokens.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

HashTextEncoder::HashTextEncoder(std::uint64_t seed) : seed_(seed) {}

std::vector<float> HashTextEncoder::row_for_key(std::uint64_t key) const {
  std::uint64_t state = key ^ (seed_ * 0x9e3779b97f4a7c15ULL);
  std::vector<double> g(kTextWidth);
  for (int i = 0; i < kTextWidth; i += 2) {
    const double u1 = unit_open(state);
    const double u2 = unit_open(state);
    const double r = std::sqrt(-2.0 * std::log(u1));
    g[i] = r * std::cos(2.0 * std::numbers::pi * u2);
    g[i + 1] = r * std::sin(2.0 * std::numbers::pi * u2);
  }
  double norm = 0.0;
  for (double x : g) norm += x * x;
  norm = std::sqrt(norm);
  std::vector<float> row(kTextWidth);
  for (int i = 0; i < kTextWidth; ++i) row[i] = static_cast<float>(g[i] / norm);
  return row;
}

std::vector<float> HashTextEncoder::token_row(std::string_view token) const {
  // Clear the top tag bits so hashed keys never collide with the reserved range.
  return row_for_key(fnv1a(token) & 0x00ff'ffff'ffff'ffffULL);
}

TextEmbedding HashTextEncoder::encode(std::string_view prompt) const {
  const auto tokens = tokenize(prompt);
  if (tokens.empty()) return null_embedding();
  TextEmbedding e;
  e.tokens = static_cast<int>(tokens.size());
  e.values.reserve(tokens.size() * kTextWidth);
  for (const auto& tok : tokens) {
    const auto row = token_row(tok);
    e.values.insert(e.values.end(), row.begin(), row.end());
  }
  return e;
}

TextEmbedding HashTextEncoder::null_embedding() const {
  TextEmbedding e;
  e.tokens = 1;
  e.values = row_for_key(kNullKey);
  return e;
}

TextEmbedding encode_text(std::string_view prompt) {
  static const HashTextEncoder encoder;
  return encoder.encode(prompt);
}

TextEmbedding null_embedding() {
  static const HashTextEncoder encoder;
  return encoder.null_embedding();
}

std::vector<PromptRecord> read_prompts_jsonl(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::vector<PromptRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto j = nlohmann::json::parse(line);
    out.push_back({j.value("id", std::string{}), j.at("prompt").get<std::string>()});
  }
  return out;
}

void write_prompts_jsonl(const std::filesystem::path& path,
                         const std::vector<PromptRecord>& records) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  for (const auto& r : records) {
    os << nlohmann::json{{"id", r.id}, {"prompt", r.prompt}}.dump() << '\n';
  }
}

}  // namespace t2ldm::textenc
