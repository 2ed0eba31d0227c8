#pragma once

#include "hdpgpc/linalg.hpp"

#include <stdexcept>
#include <string>

namespace hdpgpc {

/// One observed time sequence (t, y) — the unit of clustering.
struct Segment {
  std::string id;
  Vec t;
  Vec y;
  std::string label;  // empty when unlabeled

  void validate() const {
    if (t.size() != y.size() || t.size() < 2)
      throw std::invalid_argument("Segment '" + id + "': need |t| = |y| >= 2");
    if (!t.allFinite() || !y.allFinite())
      throw std::invalid_argument("Segment '" + id + "': non-finite values");
    for (Eigen::Index i = 1; i < t.size(); ++i)
      if (!(t[i] > t[i - 1]))
        throw std::invalid_argument("Segment '" + id + "': t must be strictly increasing");
  }
};

}  // namespace hdpgpc
