#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace patchvlm::toyvlm {

class VocabError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct VocabSpec {
  std::vector<std::string> categories;
  int coord_bins = 100;
  int reserved_refs = 128;
};

// Default category names; longer lists fall back to "category<k>".
std::vector<std::string> default_category_names(int count);

// Closed word-level vocabulary. Layout (ids dense, in this order):
//   structural + prompt words | category words | <x_0>..<x_{B-1}> | [ref1]..[refR]
// The [ref] block sits at the tail so the base vocabulary (everything the
// model can embed from its own table or predict) is the prefix [0, base_size).
class Vocab {
 public:
  static Vocab build(const VocabSpec& spec);
  static Vocab from_tokens(std::vector<std::string> tokens);
  static Vocab load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return tokens_.size(); }
  std::size_t base_size() const { return ref_begin_; }
  int num_categories() const { return num_categories_; }
  int coord_bins() const { return coord_bins_; }
  int reserved_refs() const { return reserved_refs_; }

  int id(std::string_view token) const;
  std::optional<int> find(std::string_view token) const;
  const std::string& token(int id) const;

  int category_token(int category) const;
  std::optional<int> category_of(int token) const;
  int coord_token(int bin) const;
  std::optional<int> bin_of(int token) const;
  // k is 1-based: ref_token(1) is [ref1].
  int ref_token(int k) const;
  std::optional<int> ref_index(int token) const;  // 0-based row into a virtual block
  bool is_ref(int token) const { return token >= static_cast<int>(ref_begin_); }
  int digit_token(int digit) const;

  int yes() const { return yes_; }
  int no() const { return no_; }

  // Splits lowercase words and punctuation (',', '?', '\'') into tokens.
  std::vector<int> tokenize(std::string_view text) const;
  std::string hash() const;
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  void index();

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
  std::size_t category_begin_ = 0;
  int num_categories_ = 0;
  std::size_t coord_begin_ = 0;
  int coord_bins_ = 0;
  std::size_t ref_begin_ = 0;
  int reserved_refs_ = 0;
  int yes_ = -1;
  int no_ = -1;
};

namespace tok {
inline constexpr std::string_view kPad = "<pad>";
inline constexpr std::string_view kEos = "<eos>";
inline constexpr std::string_view kImgOpen = "<Img>";
inline constexpr std::string_view kImgClose = "</Img>";
inline constexpr std::string_view kVqa = "[vqa]";
inline constexpr std::string_view kObjects = "Objects:";
inline constexpr std::string_view kLBrace = "{";
inline constexpr std::string_view kRBrace = "}";
inline constexpr std::string_view kObject = "object";
inline constexpr std::string_view kYes = "yes";
inline constexpr std::string_view kNo = "no";
}  // namespace tok

}  // namespace patchvlm::toyvlm
