#pragma once

#include <compare>
#include <cstdio>
#include <string>

#include "fvlab/error.hpp"

namespace fvlab {

// One attention head: (layer, head) ordered layer-major.
struct HeadId {
  int layer = 0;
  int head = 0;

  auto operator<=>(const HeadId&) const = default;

  std::string str() const { return "L" + std::to_string(layer) + "H" + std::to_string(head); }

  static HeadId parse(const std::string& s) {
    HeadId id;
    char tail = 0;
    if (std::sscanf(s.c_str(), "L%dH%d%c", &id.layer, &id.head, &tail) != 2)
      throw FormatError("bad head id '" + s + "'");
    return id;
  }
};

}  // namespace fvlab
