#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace patchvlm::numcore {

// 64-bit FNV-1a. Used for content fingerprints (model params, vocab, files),
// not for anything adversarial.
class Fnv1a {
 public:
  Fnv1a& update(std::span<const std::byte> bytes);
  Fnv1a& update(std::string_view text);
  Fnv1a& update(std::span<const double> values);
  Fnv1a& update(std::uint64_t value);
  std::uint64_t digest() const { return state_; }
  std::string hex() const;

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::string to_hex(std::uint64_t value);

}  // namespace patchvlm::numcore
