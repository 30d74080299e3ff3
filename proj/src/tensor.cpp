#include "lmdir/tensor.hpp"

namespace lmdir {

std::string shape_string(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw Error(ErrorCode::ShapeMismatch, "negative extent in " + shape_string(shape));
    n *= d;
  }
  return n;
}

}  // namespace lmdir
