#pragma once

namespace cmi {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace cmi
