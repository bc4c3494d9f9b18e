#pragma once

#include <cstddef>
#include <string_view>
#include <vector>

namespace patchvlm::toyvlm {

enum class Segment { kImage, kVirtual, kDetection, kQuestion, kAnswer };
inline constexpr std::size_t kSegmentCount = 5;

std::string_view segment_name(Segment s);

// Marks a position that takes its input row from the image features rather
// than the token embedding table.
inline constexpr int kImageFeature = -1;

// Token ids plus a segment tag per position. Image-feature positions carry
// kImageFeature; the k-th such position reads row k of the feature matrix.
struct TokenSequence {
  std::vector<int> tokens;
  std::vector<Segment> segments;

  std::size_t size() const { return tokens.size(); }
  bool empty() const { return tokens.empty(); }
  void push(int token, Segment segment) {
    tokens.push_back(token);
    segments.push_back(segment);
  }
  std::size_t count(Segment s) const;
  // Index of the first position tagged `s`, or size() when absent.
  std::size_t first(Segment s) const;
  // One past the last position tagged `s`, or 0 when absent.
  std::size_t last_end(Segment s) const;
  // The prompt without its ANSWER segment.
  TokenSequence prompt() const;
};

}  // namespace patchvlm::toyvlm
