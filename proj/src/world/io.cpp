#include <istream>
#include <ostream>
#include <string>

#include <nlohmann/json.hpp>

#include "patchvlm/world/world.hpp"

namespace patchvlm::world {

using json = nlohmann::json;

namespace {

void write_header(std::ostream& out, const char* format, json extra = json::object()) {
  extra["format"] = format;
  extra["version"] = kFormatVersion;
  out << extra.dump() << '\n';
}

json read_header(std::istream& in, const char* format) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError(std::string(format) + ": empty input");
  json h;
  try {
    h = json::parse(line);
  } catch (const json::exception& e) {
    throw FormatError(std::string(format) + ": bad header: " + e.what());
  }
  if (!h.is_object() || h.value("format", "") != format) {
    throw FormatError(std::string("expected a ") + format + " file");
  }
  if (h.value("version", 0) != kFormatVersion) {
    throw FormatError(std::string(format) + ": unsupported version " + h["version"].dump());
  }
  return h;
}

template <typename F>
void for_each_record(std::istream& in, const char* format, F&& fn) {
  std::string line;
  std::size_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      fn(json::parse(line));
    } catch (const json::exception& e) {
      throw FormatError(std::string(format) + " line " + std::to_string(n) + ": " + e.what());
    }
  }
}

json box_json(const toyvlm::BBox& b) { return json::array({b.x1, b.y1, b.x2, b.y2}); }

}  // namespace

void write_scenes(std::ostream& out, std::span<const Scene> corpus, int num_categories) {
  write_header(out, "patchvlm-scenes", {{"count", corpus.size()}, {"categories", num_categories}});
  for (const auto& s : corpus) {
    json objs = json::array();
    for (const auto& o : s.objects) objs.push_back({{"category", o.category}, {"box", box_json(o.box)}});
    out << json{{"id", s.id}, {"objects", objs}}.dump() << '\n';
  }
}

std::vector<Scene> read_scenes(std::istream& in) {
  const auto h = read_header(in, "patchvlm-scenes");
  std::vector<Scene> out;
  for_each_record(in, "patchvlm-scenes", [&](const json& j) {
    Scene s;
    s.id = j.at("id").get<int>();
    for (const auto& o : j.at("objects")) {
      const auto b = o.at("box").get<std::vector<double>>();
      if (b.size() != 4) throw FormatError("scene " + std::to_string(s.id) + ": box needs 4 values");
      s.objects.push_back({o.at("category").get<int>(), {b[0], b[1], b[2], b[3]}});
    }
    out.push_back(std::move(s));
  });
  if (out.size() != h.at("count").get<std::size_t>()) {
    throw FormatError("patchvlm-scenes: header count does not match records");
  }
  return out;
}

void write_qa(std::ostream& out, const QASet& qa) {
  write_header(out, "patchvlm-qa",
               {{"count", qa.samples.size()}, {"skipped_scenes", qa.skipped_scenes}});
  for (const auto& q : qa.samples) {
    out << json{{"id", q.id},           {"scene_id", q.scene_id},
                {"category", q.category}, {"label", q.label ? "yes" : "no"},
                {"split", split_name(q.split)}}
               .dump()
        << '\n';
  }
}

QASet read_qa(std::istream& in) {
  const auto h = read_header(in, "patchvlm-qa");
  QASet qa;
  qa.skipped_scenes = h.at("skipped_scenes").get<std::vector<int>>();
  for_each_record(in, "patchvlm-qa", [&](const json& j) {
    QASample q;
    q.id = j.at("id").get<int>();
    q.scene_id = j.at("scene_id").get<int>();
    q.category = j.at("category").get<int>();
    const auto label = j.at("label").get<std::string>();
    if (label != "yes" && label != "no") throw FormatError("qa: label must be yes or no");
    q.label = label == "yes";
    const auto split = j.at("split").get<std::string>();
    if (split != "train" && split != "test") throw FormatError("qa: split must be train or test");
    q.split = split == "train" ? Split::kTrain : Split::kTest;
    qa.samples.push_back(q);
  });
  if (qa.samples.size() != h.at("count").get<std::size_t>()) {
    throw FormatError("patchvlm-qa: header count does not match records");
  }
  return qa;
}

void write_detections(std::ostream& out, std::span<const DetectionSet> sets,
                      const OracleConfig& cfg, std::uint64_t seed) {
  write_header(out, "patchvlm-detections",
               {{"count", sets.size()},
                {"seed", seed},
                {"oracle",
                 {{"p_miss", cfg.p_miss},
                  {"p_false", cfg.p_false},
                  {"p_swap", cfg.p_swap},
                  {"jitter_sigma", cfg.jitter_sigma}}}});
  for (const auto& s : sets) {
    json dets = json::array();
    for (const auto& d : s.detections) dets.push_back({{"category", d.category}, {"bins", d.bins}});
    out << json{{"scene_id", s.scene_id},
                {"detections", dets},
                {"stats",
                 {{"true_objects", s.stats.true_objects},
                  {"missed", s.stats.missed},
                  {"swapped", s.stats.swapped},
                  {"spurious", s.stats.spurious}}}}
               .dump()
        << '\n';
  }
}

DetectionFile read_detections(std::istream& in) {
  const auto h = read_header(in, "patchvlm-detections");
  DetectionFile f;
  f.seed = h.at("seed").get<std::uint64_t>();
  const auto& o = h.at("oracle");
  f.config.p_miss = o.at("p_miss").get<double>();
  f.config.p_false = o.at("p_false").get<double>();
  f.config.p_swap = o.at("p_swap").get<double>();
  f.config.jitter_sigma = o.at("jitter_sigma").get<double>();
  for_each_record(in, "patchvlm-detections", [&](const json& j) {
    DetectionSet s;
    s.scene_id = j.at("scene_id").get<int>();
    for (const auto& d : j.at("detections")) {
      s.detections.push_back({d.at("category").get<int>(), d.at("bins").get<std::array<int, 4>>()});
    }
    const auto& st = j.at("stats");
    s.stats.true_objects = st.at("true_objects").get<std::size_t>();
    s.stats.missed = st.at("missed").get<std::size_t>();
    s.stats.swapped = st.at("swapped").get<std::size_t>();
    s.stats.spurious = st.at("spurious").get<std::size_t>();
    f.sets.push_back(std::move(s));
  });
  if (f.sets.size() != h.at("count").get<std::size_t>()) {
    throw FormatError("patchvlm-detections: header count does not match records");
  }
  return f;
}

}  // namespace patchvlm::world
