#pragma once

#include <cstddef>
#include <stdexcept>
#include <vector>

namespace patchvlm::toyvlm {

class SceneError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Normalized box, 0 <= x1 < x2 <= 1 and 0 <= y1 < y2 <= 1.
struct BBox {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  bool valid() const;
  friend bool operator==(const BBox&, const BBox&) = default;
};

struct SceneObject {
  int category = 0;
  BBox box;
  friend bool operator==(const SceneObject&, const SceneObject&) = default;
};

// Ground truth for one synthetic image.
struct Scene {
  int id = 0;
  std::vector<SceneObject> objects;

  bool contains(int category) const;
  int count(int category) const;
  // Distinct categories in ascending id order.
  std::vector<int> categories() const;
  friend bool operator==(const Scene&, const Scene&) = default;
};

// Throws SceneError when a box is degenerate, a category is outside
// [0, num_categories), or the object count is outside [1, max_objects].
void validate(const Scene& scene, int num_categories, std::size_t max_objects);

}  // namespace patchvlm::toyvlm
