#include "patchvlm/toyvlm/scene.hpp"

#include <algorithm>
#include <string>

namespace patchvlm::toyvlm {

bool BBox::valid() const {
  return 0.0 <= x1 && x1 < x2 && x2 <= 1.0 && 0.0 <= y1 && y1 < y2 && y2 <= 1.0;
}

bool Scene::contains(int category) const { return count(category) > 0; }

int Scene::count(int category) const {
  return static_cast<int>(std::count_if(objects.begin(), objects.end(),
                                        [&](const SceneObject& o) { return o.category == category; }));
}

std::vector<int> Scene::categories() const {
  std::vector<int> out;
  for (const auto& o : objects) out.push_back(o.category);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

void validate(const Scene& scene, int num_categories, std::size_t max_objects) {
  const std::string where = "scene " + std::to_string(scene.id) + ": ";
  if (scene.objects.empty() || scene.objects.size() > max_objects) {
    throw SceneError(where + std::to_string(scene.objects.size()) +
                     " objects, expected 1.." + std::to_string(max_objects));
  }
  for (const auto& o : scene.objects) {
    if (o.category < 0 || o.category >= num_categories) {
      throw SceneError(where + "category " + std::to_string(o.category) + " out of range");
    }
    if (!o.box.valid()) throw SceneError(where + "degenerate bounding box");
  }
}

}  // namespace patchvlm::toyvlm
