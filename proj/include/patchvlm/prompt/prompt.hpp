#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "patchvlm/toyvlm/scene.hpp"
#include "patchvlm/toyvlm/sequence.hpp"
#include "patchvlm/toyvlm/vocab.hpp"

namespace patchvlm::prompt {

using toyvlm::Segment;
using toyvlm::TokenSequence;
using toyvlm::Vocab;

class SerializationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class TemplateError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// One detector output: a category id (or, after placeholder rendering, a
// positional index) and a quantized box.
struct Detection {
  int category = 0;
  std::array<int, 4> bins{};  // x1, y1, x2, y2 in [0, B-1]
  friend bool operator==(const Detection&, const Detection&) = default;
};

// Round-half-up of coord * bins, clamped into [0, bins-1].
int quantize(double coord, int bins);
Detection quantize_detection(int category, const toyvlm::BBox& box, int bins);

// Sorted by (category, x1, y1, x2, y2).
void sort_detections(std::vector<Detection>& dets);

enum class DetectionMode { kCategory, kPlaceholder, kCategoryNoBbox, kNone };

std::string_view mode_name(DetectionMode mode);
std::optional<DetectionMode> parse_mode(std::string_view name);

// Renders detections in list order. Non-empty output starts with "Objects:".
//   category:          dog { <x_1> <x_2> <x_3> <x_4> }
//   placeholder:       object { 0 } { <x_1> <x_2> <x_3> <x_4> }
//   category_no_bbox:  dog
//   none:              (nothing)
// Duplicates are kept verbatim.
std::vector<int> serialize_detections(std::span<const Detection> dets, DetectionMode mode,
                                      const Vocab& vocab);

struct ParsedDetection {
  int label = 0;  // category id, or placeholder index
  std::optional<std::array<int, 4>> bins;
  friend bool operator==(const ParsedDetection&, const ParsedDetection&) = default;
};

// Inverse of serialize_detections for every mode but none.
std::vector<ParsedDetection> parse_detections(std::span<const int> tokens, DetectionMode mode,
                                              const Vocab& vocab);

enum class PromptTemplate { kP1Baseline, kP2Hard, kPatchStandard, kPatchLate };

std::string_view template_name(PromptTemplate t);
std::optional<PromptTemplate> parse_template(std::string_view name);
// Segment order the template lays out (ANSWER excluded).
std::vector<Segment> segment_order(PromptTemplate t);
bool uses_virtual_tokens(PromptTemplate t);

// "is there a <category>", ending on the queried category.
std::vector<int> question_tokens(int category, const Vocab& vocab);

// Builds the prompt for one sample:
//   P1:             <Img> [image] </Img> [vqa] question
//   P2:             <Img> [image] </Img> Objects: ... [vqa] question
//   PATCH_STANDARD: <Img> [image] </Img> [ref1..refn] Objects: ... [vqa] question
//   PATCH_LATE:     <Img> [image] </Img> Objects: ... [ref1..refn] [vqa] question
// P1 takes no detections; P1 and P2 take no virtual tokens.
TokenSequence assemble(PromptTemplate tmpl, std::size_t image_rows,
                       std::span<const Detection> dets, DetectionMode mode,
                       std::span<const int> question, int virtual_count, const Vocab& vocab);

void append_answer(TokenSequence& seq, bool yes, const Vocab& vocab);

// One line per position: "index<TAB>segment<TAB>token". Image rows print as
// "<patch_k>".
void write_debug_dump(std::ostream& out, const TokenSequence& seq, const Vocab& vocab);

}  // namespace patchvlm::prompt
