#pragma once

#include <string>

#include "cgpattn/transformer.hpp"

namespace cgpattn {

/// Flat binary checkpoint layout, all integers 64-bit little-endian:
///   magic "CGPCKPT1" (8 bytes)
///   version u64 (currently 1)
///   tensor count u64
///   name table: count x { length u64, UTF-8 bytes }
///   shapes: count x { rows u64, cols u64 }
///   data: count x rows*cols f64, row-major, in name-table order
void save_checkpoint(const std::string& path, const ParamStore& params);
ParamStore load_checkpoint(const std::string& path);

}  // namespace cgpattn
