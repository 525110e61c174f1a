#pragma once

namespace pfedhr {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace pfedhr
