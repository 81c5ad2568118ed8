#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace mscada {

inline constexpr std::uint8_t kIgnoreLabel = 255;

class InvalidLabelError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Batch of class-index grids, B×H×W row-major. 255 marks ignored pixels.
struct LabelMap {
  std::size_t batch = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> values;

  LabelMap() = default;
  LabelMap(std::size_t b, std::size_t h, std::size_t w, std::uint8_t fill = kIgnoreLabel)
      : batch(b), height(h), width(w), values(b * h * w, fill) {}

  std::size_t plane() const { return height * width; }
  std::size_t size() const { return values.size(); }
  std::uint8_t& at(std::size_t b, std::size_t y, std::size_t x) {
    return values[(b * height + y) * width + x];
  }
  std::uint8_t at(std::size_t b, std::size_t y, std::size_t x) const {
    return values[(b * height + y) * width + x];
  }

  // Copy of sample `b` as a one-sample map.
  LabelMap sample(std::size_t b) const;
  // Concatenates one-or-more-sample maps along the batch axis.
  static LabelMap stack(const std::vector<LabelMap>& parts);

  bool operator==(const LabelMap&) const = default;
};

}  // namespace mscada
