#include "patchvlm/toyvlm/sequence.hpp"

#include <algorithm>

namespace patchvlm::toyvlm {

std::string_view segment_name(Segment s) {
  switch (s) {
    case Segment::kImage: return "IMAGE";
    case Segment::kVirtual: return "VIRTUAL";
    case Segment::kDetection: return "DETECTION";
    case Segment::kQuestion: return "QUESTION";
    case Segment::kAnswer: return "ANSWER";
  }
  return "?";
}

std::size_t TokenSequence::count(Segment s) const {
  return static_cast<std::size_t>(std::count(segments.begin(), segments.end(), s));
}

std::size_t TokenSequence::first(Segment s) const {
  auto it = std::find(segments.begin(), segments.end(), s);
  return static_cast<std::size_t>(it - segments.begin());
}

std::size_t TokenSequence::last_end(Segment s) const {
  for (std::size_t i = segments.size(); i-- > 0;) {
    if (segments[i] == s) return i + 1;
  }
  return 0;
}

TokenSequence TokenSequence::prompt() const {
  TokenSequence out;
  for (std::size_t i = 0; i < size(); ++i) {
    if (segments[i] != Segment::kAnswer) out.push(tokens[i], segments[i]);
  }
  return out;
}

}  // namespace patchvlm::toyvlm
