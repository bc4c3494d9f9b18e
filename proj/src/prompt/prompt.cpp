#include "patchvlm/prompt/prompt.hpp"

#include <algorithm>
#include <cmath>

namespace patchvlm::prompt {

int quantize(double coord, int bins) {
  if (bins < 1) throw SerializationError("quantize: bin count must be positive");
  const double scaled = std::floor(coord * bins + 0.5);
  return static_cast<int>(std::clamp(scaled, 0.0, static_cast<double>(bins - 1)));
}

Detection quantize_detection(int category, const toyvlm::BBox& box, int bins) {
  return {category,
          {quantize(box.x1, bins), quantize(box.y1, bins), quantize(box.x2, bins),
           quantize(box.y2, bins)}};
}

void sort_detections(std::vector<Detection>& dets) {
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
    if (a.category != b.category) return a.category < b.category;
    return a.bins < b.bins;
  });
}

std::string_view mode_name(DetectionMode mode) {
  switch (mode) {
    case DetectionMode::kCategory: return "category";
    case DetectionMode::kPlaceholder: return "placeholder";
    case DetectionMode::kCategoryNoBbox: return "category_no_bbox";
    case DetectionMode::kNone: return "none";
  }
  return "?";
}

std::optional<DetectionMode> parse_mode(std::string_view name) {
  for (auto m : {DetectionMode::kCategory, DetectionMode::kPlaceholder,
                 DetectionMode::kCategoryNoBbox, DetectionMode::kNone}) {
    if (mode_name(m) == name) return m;
  }
  return std::nullopt;
}

namespace {

void push_bins(std::vector<int>& out, const Detection& d, const Vocab& vocab) {
  out.push_back(vocab.id(toyvlm::tok::kLBrace));
  for (int b : d.bins) {
    if (b < 0 || b >= vocab.coord_bins()) {
      throw SerializationError("bin " + std::to_string(b) + " outside [0, " +
                               std::to_string(vocab.coord_bins() - 1) + "]");
    }
    out.push_back(vocab.coord_token(b));
  }
  out.push_back(vocab.id(toyvlm::tok::kRBrace));
}

void push_index(std::vector<int>& out, std::size_t idx, const Vocab& vocab) {
  const std::string digits = std::to_string(idx);
  for (char c : digits) out.push_back(vocab.digit_token(c - '0'));
}

class Cursor {
 public:
  Cursor(std::span<const int> tokens, const Vocab& vocab) : tokens_(tokens), vocab_(vocab) {}

  bool done() const { return pos_ >= tokens_.size(); }
  int peek() const {
    if (done()) throw SerializationError("parse: unexpected end of detection tokens");
    return tokens_[pos_];
  }
  int next() {
    const int t = peek();
    ++pos_;
    return t;
  }
  void expect(std::string_view token) {
    const int t = next();
    if (t != vocab_.id(token)) {
      throw SerializationError("parse: expected '" + std::string(token) + "', found '" +
                               vocab_.token(t) + "'");
    }
  }
  std::array<int, 4> bins() {
    expect(toyvlm::tok::kLBrace);
    std::array<int, 4> out{};
    for (int& b : out) {
      const auto bin = vocab_.bin_of(next());
      if (!bin) throw SerializationError("parse: expected a coordinate token");
      b = *bin;
    }
    expect(toyvlm::tok::kRBrace);
    return out;
  }
  int category() {
    const auto cat = vocab_.category_of(next());
    if (!cat) throw SerializationError("parse: expected a category token");
    return *cat;
  }
  int index() {
    expect(toyvlm::tok::kLBrace);
    int value = 0;
    int count = 0;
    while (peek() != vocab_.id(toyvlm::tok::kRBrace)) {
      const std::string& t = vocab_.token(next());
      if (t.size() != 1 || t[0] < '0' || t[0] > '9') {
        throw SerializationError("parse: expected a digit, found '" + t + "'");
      }
      value = value * 10 + (t[0] - '0');
      ++count;
    }
    if (count == 0) throw SerializationError("parse: empty placeholder index");
    expect(toyvlm::tok::kRBrace);
    return value;
  }

 private:
  std::span<const int> tokens_;
  const Vocab& vocab_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<int> serialize_detections(std::span<const Detection> dets, DetectionMode mode,
                                      const Vocab& vocab) {
  std::vector<int> out;
  if (mode == DetectionMode::kNone || dets.empty()) return out;
  out.push_back(vocab.id(toyvlm::tok::kObjects));
  for (std::size_t i = 0; i < dets.size(); ++i) {
    const Detection& d = dets[i];
    switch (mode) {
      case DetectionMode::kCategory:
        out.push_back(vocab.category_token(d.category));
        push_bins(out, d, vocab);
        break;
      case DetectionMode::kPlaceholder:
        out.push_back(vocab.id(toyvlm::tok::kObject));
        out.push_back(vocab.id(toyvlm::tok::kLBrace));
        push_index(out, i, vocab);
        out.push_back(vocab.id(toyvlm::tok::kRBrace));
        push_bins(out, d, vocab);
        break;
      case DetectionMode::kCategoryNoBbox:
        out.push_back(vocab.category_token(d.category));
        break;
      case DetectionMode::kNone:
        break;
    }
  }
  return out;
}

std::vector<ParsedDetection> parse_detections(std::span<const int> tokens, DetectionMode mode,
                                              const Vocab& vocab) {
  std::vector<ParsedDetection> out;
  if (tokens.empty()) return out;
  if (mode == DetectionMode::kNone) {
    throw SerializationError("parse: mode none renders no tokens");
  }
  Cursor cur(tokens, vocab);
  cur.expect(toyvlm::tok::kObjects);
  while (!cur.done()) {
    ParsedDetection p;
    switch (mode) {
      case DetectionMode::kCategory:
        p.label = cur.category();
        p.bins = cur.bins();
        break;
      case DetectionMode::kPlaceholder:
        cur.expect(toyvlm::tok::kObject);
        p.label = cur.index();
        p.bins = cur.bins();
        break;
      case DetectionMode::kCategoryNoBbox:
        p.label = cur.category();
        break;
      case DetectionMode::kNone:
        break;
    }
    out.push_back(p);
  }
  return out;
}

std::string_view template_name(PromptTemplate t) {
  switch (t) {
    case PromptTemplate::kP1Baseline: return "P1_BASELINE";
    case PromptTemplate::kP2Hard: return "P2_HARD";
    case PromptTemplate::kPatchStandard: return "PATCH_STANDARD";
    case PromptTemplate::kPatchLate: return "PATCH_LATE";
  }
  return "?";
}

std::optional<PromptTemplate> parse_template(std::string_view name) {
  for (auto t : {PromptTemplate::kP1Baseline, PromptTemplate::kP2Hard,
                 PromptTemplate::kPatchStandard, PromptTemplate::kPatchLate}) {
    if (template_name(t) == name) return t;
  }
  return std::nullopt;
}

std::vector<Segment> segment_order(PromptTemplate t) {
  switch (t) {
    case PromptTemplate::kP1Baseline: return {Segment::kImage, Segment::kQuestion};
    case PromptTemplate::kP2Hard:
      return {Segment::kImage, Segment::kDetection, Segment::kQuestion};
    case PromptTemplate::kPatchStandard:
      return {Segment::kImage, Segment::kVirtual, Segment::kDetection, Segment::kQuestion};
    case PromptTemplate::kPatchLate:
      return {Segment::kImage, Segment::kDetection, Segment::kVirtual, Segment::kQuestion};
  }
  return {};
}

bool uses_virtual_tokens(PromptTemplate t) {
  return t == PromptTemplate::kPatchStandard || t == PromptTemplate::kPatchLate;
}

std::vector<int> question_tokens(int category, const Vocab& vocab) {
  return {vocab.id("is"), vocab.id("there"), vocab.id("a"), vocab.category_token(category)};
}

TokenSequence assemble(PromptTemplate tmpl, std::size_t image_rows,
                       std::span<const Detection> dets, DetectionMode mode,
                       std::span<const int> question, int virtual_count, const Vocab& vocab) {
  if (virtual_count < 0) throw TemplateError("negative virtual token count");
  if (tmpl == PromptTemplate::kP1Baseline && !dets.empty()) {
    throw TemplateError("P1_BASELINE takes no detections");
  }
  if (!uses_virtual_tokens(tmpl) && virtual_count != 0) {
    throw TemplateError(std::string(template_name(tmpl)) + " takes no virtual tokens");
  }
  if (virtual_count > vocab.reserved_refs()) {
    throw TemplateError("virtual token count " + std::to_string(virtual_count) +
                        " exceeds reserved [ref] range " + std::to_string(vocab.reserved_refs()));
  }
  if (question.empty()) throw TemplateError("empty question");

  TokenSequence seq;
  for (Segment s : segment_order(tmpl)) {
    switch (s) {
      case Segment::kImage:
        seq.push(vocab.id(toyvlm::tok::kImgOpen), s);
        for (std::size_t r = 0; r < image_rows; ++r) seq.push(toyvlm::kImageFeature, s);
        seq.push(vocab.id(toyvlm::tok::kImgClose), s);
        break;
      case Segment::kVirtual:
        for (int k = 1; k <= virtual_count; ++k) seq.push(vocab.ref_token(k), s);
        break;
      case Segment::kDetection:
        for (int t : serialize_detections(dets, mode, vocab)) seq.push(t, s);
        break;
      case Segment::kQuestion:
        seq.push(vocab.id(toyvlm::tok::kVqa), s);
        for (int t : question) seq.push(t, s);
        break;
      case Segment::kAnswer:
        break;
    }
  }
  return seq;
}

void append_answer(TokenSequence& seq, bool yes, const Vocab& vocab) {
  seq.push(yes ? vocab.yes() : vocab.no(), Segment::kAnswer);
}

void write_debug_dump(std::ostream& out, const TokenSequence& seq, const Vocab& vocab) {
  std::size_t patch = 0;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    out << i << '\t' << toyvlm::segment_name(seq.segments[i]) << '\t';
    if (seq.tokens[i] == toyvlm::kImageFeature) {
      out << "<patch_" << patch++ << ">";
    } else {
      out << vocab.token(seq.tokens[i]);
    }
    out << '\n';
  }
}

}  // namespace patchvlm::prompt
