#pragma once

namespace rudder {

inline constexpr const char* kEngineVersion = "rudder-engine/1.0.0";

}  // namespace rudder
