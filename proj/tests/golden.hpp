// SPDX-License-Identifier: Apache-2.0
// Golden files live in tests/golden. Set QLIP_UPDATE_GOLDEN=1 to rewrite
// them from the current build instead of comparing.
#pragma once

#include <cstdlib>
#include <filesystem>
#include <string>

#include "qlip/binary_io.hpp"

namespace qlip::test {

inline bool updating_goldens() {
  const char* v = std::getenv("QLIP_UPDATE_GOLDEN");
  return v && std::string(v) == "1";
}

inline std::filesystem::path golden_path(const std::string& name) {
  return std::filesystem::path(QLIP_GOLDEN_DIR) / name;
}

/// Returns the committed golden bytes, or writes `actual` and returns it when updating.
inline std::string golden_bytes(const std::string& name, const std::string& actual) {
  const auto path = golden_path(name);
  if (updating_goldens()) {
    write_file_atomic(path, actual);
    return actual;
  }
  return read_file(path);
}

}  // namespace qlip::test
