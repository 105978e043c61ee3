#pragma once

#include <cstdint>
#include <utility>

namespace htmtree {

using Key = uint64_t;
using Value = uint64_t;
using KeyValue = std::pair<Key, Value>;

}  // namespace htmtree
