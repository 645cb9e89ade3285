#pragma once

namespace gradvac {

inline constexpr const char* kVersion = "0.1.0";

// Bumped whenever the layout of a written artifact changes.
inline constexpr int kSpecVersion = 1;

}  // namespace gradvac
