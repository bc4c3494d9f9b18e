#include "patchvlm/numcore/hash.hpp"

#include <cstdio>

namespace patchvlm::numcore {

Fnv1a& Fnv1a::update(std::span<const std::byte> bytes) {
  for (std::byte b : bytes) {
    state_ ^= static_cast<std::uint64_t>(b);
    state_ *= 0x100000001b3ULL;
  }
  return *this;
}

Fnv1a& Fnv1a::update(std::string_view text) { return update(std::as_bytes(std::span(text))); }

Fnv1a& Fnv1a::update(std::span<const double> values) { return update(std::as_bytes(values)); }

Fnv1a& Fnv1a::update(std::uint64_t value) {
  return update(std::as_bytes(std::span<const std::uint64_t>(&value, 1)));
}

std::string Fnv1a::hex() const { return to_hex(state_); }

std::string to_hex(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

}  // namespace patchvlm::numcore
