#include "blab/tensor.hpp"

#include <cmath>
#include <sstream>

namespace blab {

void fail(const std::string& msg) { throw std::runtime_error(msg); }

std::string shape_to_string(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

int Tensor::checked_numel(const std::vector<int>& shape) {
  long long n = 1;
  for (int d : shape) {
    if (d < 0) fail("Tensor: negative extent in shape " + shape_to_string(shape));
    n *= d;
  }
  if (n > (1LL << 31)) fail("Tensor: shape too large " + shape_to_string(shape));
  return static_cast<int>(n);
}

}  // namespace blab
