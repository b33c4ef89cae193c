#pragma once

namespace ehrtext {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace ehrtext
