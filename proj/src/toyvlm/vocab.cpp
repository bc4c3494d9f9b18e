#include "patchvlm/toyvlm/vocab.hpp"

#include <cctype>
#include <fstream>

#include "patchvlm/numcore/hash.hpp"

namespace patchvlm::toyvlm {
namespace {

// Structural tokens, the question template, and the words of the two text
// initialisation prompts for virtual tokens.
const std::vector<std::string>& fixed_tokens() {
  static const std::vector<std::string> kFixed = {
      std::string(tok::kPad), std::string(tok::kEos), std::string(tok::kImgOpen),
      std::string(tok::kImgClose), std::string(tok::kVqa), std::string(tok::kObjects),
      std::string(tok::kLBrace), std::string(tok::kRBrace), std::string(tok::kObject),
      std::string(tok::kYes), std::string(tok::kNo),
      "is", "there", "a", "in", "the", "image", "?",
      "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
      "according", "to", "previous", "detection", "results", ",", "please", "answer",
      "following", "question", "with", "'", "or"};
  return kFixed;
}

const std::vector<std::string>& known_categories() {
  static const std::vector<std::string> kNames = {
      "person", "bicycle", "car", "motorcycle", "airplane", "bus", "train", "truck",
      "boat", "bench", "bird", "cat", "dog", "horse", "sheep", "cow",
      "elephant", "bear", "zebra", "giraffe", "backpack", "umbrella", "handbag", "tie",
      "suitcase", "frisbee", "skis", "snowboard", "kite", "leash", "bottle", "cup",
      "fork", "knife", "spoon", "bowl", "banana", "apple", "sandwich", "pizza",
      "orange", "broccoli", "carrot", "chair", "couch", "bed", "toilet", "tv",
      "laptop", "mouse", "remote", "keyboard", "clock", "vase", "book", "scissors"};
  return kNames;
}

bool starts_with(std::string_view s, std::string_view prefix) {
  return s.substr(0, prefix.size()) == prefix;
}

}  // namespace

std::vector<std::string> default_category_names(int count) {
  std::vector<std::string> out;
  const auto& names = known_categories();
  for (int k = 0; k < count; ++k) {
    if (static_cast<std::size_t>(k) < names.size()) {
      out.push_back(names[static_cast<std::size_t>(k)]);
    } else {
      out.push_back("category" + std::to_string(k));
    }
  }
  return out;
}

Vocab Vocab::build(const VocabSpec& spec) {
  if (spec.categories.empty()) throw VocabError("vocab needs at least one category");
  if (spec.coord_bins < 1) throw VocabError("vocab needs at least one coordinate bin");
  if (spec.reserved_refs < 0) throw VocabError("negative reserved ref range");
  std::vector<std::string> tokens = fixed_tokens();
  tokens.insert(tokens.end(), spec.categories.begin(), spec.categories.end());
  for (int b = 0; b < spec.coord_bins; ++b) tokens.push_back("<x_" + std::to_string(b) + ">");
  for (int k = 1; k <= spec.reserved_refs; ++k) tokens.push_back("[ref" + std::to_string(k) + "]");
  return from_tokens(std::move(tokens));
}

Vocab Vocab::from_tokens(std::vector<std::string> tokens) {
  const auto& fixed = fixed_tokens();
  if (tokens.size() < fixed.size()) throw VocabError("vocab too short");
  for (std::size_t i = 0; i < fixed.size(); ++i) {
    if (tokens[i] != fixed[i]) {
      throw VocabError("vocab line " + std::to_string(i) + ": expected '" + fixed[i] +
                       "', found '" + tokens[i] + "'");
    }
  }
  Vocab v;
  v.tokens_ = std::move(tokens);
  v.category_begin_ = fixed.size();
  std::size_t i = v.category_begin_;
  while (i < v.tokens_.size() && !starts_with(v.tokens_[i], "<x_") &&
         !starts_with(v.tokens_[i], "[ref")) {
    ++i;
  }
  v.num_categories_ = static_cast<int>(i - v.category_begin_);
  v.coord_begin_ = i;
  while (i < v.tokens_.size() && starts_with(v.tokens_[i], "<x_")) {
    if (v.tokens_[i] != "<x_" + std::to_string(i - v.coord_begin_) + ">") {
      throw VocabError("coordinate tokens out of order at '" + v.tokens_[i] + "'");
    }
    ++i;
  }
  v.coord_bins_ = static_cast<int>(i - v.coord_begin_);
  v.ref_begin_ = i;
  while (i < v.tokens_.size()) {
    if (v.tokens_[i] != "[ref" + std::to_string(i - v.ref_begin_ + 1) + "]") {
      throw VocabError("unexpected token after ref block: '" + v.tokens_[i] + "'");
    }
    ++i;
  }
  v.reserved_refs_ = static_cast<int>(i - v.ref_begin_);
  if (v.num_categories_ < 1) throw VocabError("vocab has no category words");
  if (v.coord_bins_ < 1) throw VocabError("vocab has no coordinate bins");
  v.index();
  return v;
}

void Vocab::index() {
  ids_.clear();
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!ids_.emplace(tokens_[i], static_cast<int>(i)).second) {
      throw VocabError("duplicate token '" + tokens_[i] + "'");
    }
  }
  yes_ = id(tok::kYes);
  no_ = id(tok::kNo);
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw VocabError("cannot open vocab file " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) tokens.push_back(line);
  return from_tokens(std::move(tokens));
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw VocabError("cannot write vocab file " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

int Vocab::id(std::string_view token) const {
  auto found = find(token);
  if (!found) throw VocabError("unknown token '" + std::string(token) + "'");
  return *found;
}

std::optional<int> Vocab::find(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw VocabError("token id " + std::to_string(id) + " out of range");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

int Vocab::category_token(int category) const {
  if (category < 0 || category >= num_categories_) {
    throw VocabError("category " + std::to_string(category) + " out of range");
  }
  return static_cast<int>(category_begin_) + category;
}

std::optional<int> Vocab::category_of(int token) const {
  const int k = token - static_cast<int>(category_begin_);
  if (k < 0 || k >= num_categories_) return std::nullopt;
  return k;
}

int Vocab::coord_token(int bin) const {
  if (bin < 0 || bin >= coord_bins_) {
    throw VocabError("coordinate bin " + std::to_string(bin) + " out of range");
  }
  return static_cast<int>(coord_begin_) + bin;
}

std::optional<int> Vocab::bin_of(int token) const {
  const int b = token - static_cast<int>(coord_begin_);
  if (b < 0 || b >= coord_bins_) return std::nullopt;
  return b;
}

int Vocab::ref_token(int k) const {
  if (k < 1 || k > reserved_refs_) {
    throw VocabError("[ref" + std::to_string(k) + "] outside reserved range of " +
                     std::to_string(reserved_refs_));
  }
  return static_cast<int>(ref_begin_) + k - 1;
}

std::optional<int> Vocab::ref_index(int token) const {
  const int k = token - static_cast<int>(ref_begin_);
  if (k < 0 || k >= reserved_refs_) return std::nullopt;
  return k;
}

int Vocab::digit_token(int digit) const {
  if (digit < 0 || digit > 9) throw VocabError("not a digit: " + std::to_string(digit));
  return id(std::to_string(digit));
}

std::vector<int> Vocab::tokenize(std::string_view text) const {
  std::vector<int> out;
  std::string word;
  auto flush = [&] {
    if (!word.empty()) {
      out.push_back(id(word));
      word.clear();
    }
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (ch == ',' || ch == '?' || ch == '\'') {
      flush();
      out.push_back(id(std::string(1, ch)));
    } else {
      word.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return out;
}

std::string Vocab::hash() const {
  numcore::Fnv1a h;
  for (const auto& t : tokens_) {
    h.update(t);
    h.update(std::string_view("\n"));
  }
  return h.hex();
}

}  // namespace patchvlm::toyvlm
