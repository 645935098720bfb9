#pragma once

namespace seqdens {

inline constexpr const char* kSuiteVersion = "0.1.0";

}  // namespace seqdens
