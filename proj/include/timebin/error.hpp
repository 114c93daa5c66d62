#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace timebin {

/// Picoseconds since the stream epoch. Signed so that offsets and
/// differences share the type; stream timestamps are always >= 0.
using Picoseconds = std::int64_t;

inline constexpr Picoseconds kPicosecondsPerSecond = 1'000'000'000'000;

enum class Errc {
  MalformedHeader,
  TruncatedRecord,
  NonMonotonicTimestamp,
  InvalidRecord,
  UnknownChannel,
  InvalidChannelMap,
  NoPeak,
  InvalidConfig,
  EmptySetting,
  Infeasible,
  Io,
};

constexpr std::string_view to_string(Errc code) {
  switch (code) {
    case Errc::MalformedHeader: return "MalformedHeader";
    case Errc::TruncatedRecord: return "TruncatedRecord";
    case Errc::NonMonotonicTimestamp: return "NonMonotonicTimestamp";
    case Errc::InvalidRecord: return "InvalidRecord";
    case Errc::UnknownChannel: return "UnknownChannel";
    case Errc::InvalidChannelMap: return "InvalidChannelMap";
    case Errc::NoPeak: return "NoPeak";
    case Errc::InvalidConfig: return "InvalidConfig";
    case Errc::EmptySetting: return "EmptySetting";
    case Errc::Infeasible: return "Infeasible";
    case Errc::Io: return "Io";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace timebin
