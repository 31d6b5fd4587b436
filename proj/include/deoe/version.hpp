#pragma once

namespace deoe {

inline constexpr const char* kVersion = "deoe 0.1.0";

}  // namespace deoe
