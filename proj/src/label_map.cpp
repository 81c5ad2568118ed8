#include "mscada/label_map.hpp"

#include <algorithm>

namespace mscada {

LabelMap LabelMap::sample(std::size_t b) const {
  if (b >= batch) throw std::out_of_range("label sample index out of range");
  LabelMap out(1, height, width);
  std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(b * plane()), plane(),
              out.values.begin());
  return out;
}

LabelMap LabelMap::stack(const std::vector<LabelMap>& parts) {
  if (parts.empty()) return {};
  LabelMap out;
  out.height = parts.front().height;
  out.width = parts.front().width;
  for (const auto& p : parts) {
    if (p.height != out.height || p.width != out.width) {
      throw std::invalid_argument("cannot stack label maps of different spatial size");
    }
    out.batch += p.batch;
    out.values.insert(out.values.end(), p.values.begin(), p.values.end());
  }
  return out;
}

}  // namespace mscada
