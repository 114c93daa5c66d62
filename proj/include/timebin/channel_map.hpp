#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>

#include <json.hpp>

#include "timebin/error.hpp"

namespace timebin {

enum class Party : std::uint8_t { A, B };
enum class Arm : std::uint8_t { Toa, Tsup };
/// H/V are the TOA polarization outcomes, D/A the TSUP readout after the MZI.
enum class Outcome : std::uint8_t { H, V, D, A };

inline constexpr std::string_view to_string(Party p) { return p == Party::A ? "A" : "B"; }
inline constexpr std::string_view to_string(Arm a) { return a == Arm::Toa ? "TOA" : "TSUP"; }
inline constexpr std::string_view to_string(Outcome o) {
  constexpr std::array<std::string_view, 4> names{"H", "V", "D", "A"};
  return names[static_cast<std::size_t>(o)];
}

inline constexpr bool outcome_belongs_to(Outcome o, Arm arm) {
  return arm == Arm::Toa ? (o == Outcome::H || o == Outcome::V) : (o == Outcome::D || o == Outcome::A);
}

struct ChannelInfo {
  Party party = Party::A;
  Arm arm = Arm::Toa;
  Outcome outcome = Outcome::H;

  friend bool operator==(const ChannelInfo&, const ChannelInfo&) = default;
};

/// Channel id -> (party, arm, outcome). A valid map has exactly the four
/// channels {TOA-H, TOA-V, TSUP-D, TSUP-A} for each party, each once.
class ChannelMap {
 public:
  ChannelMap() = default;

  /// Channels 0..3 belong to A and 4..7 to B, each ordered TOA-H, TOA-V, TSUP-D, TSUP-A.
  static ChannelMap standard() {
    ChannelMap map;
    for (Party party : {Party::A, Party::B}) {
      const std::uint16_t base = party == Party::A ? 0 : 4;
      map.entries_[base + 0] = {party, Arm::Toa, Outcome::H};
      map.entries_[base + 1] = {party, Arm::Toa, Outcome::V};
      map.entries_[base + 2] = {party, Arm::Tsup, Outcome::D};
      map.entries_[base + 3] = {party, Arm::Tsup, Outcome::A};
    }
    return map;
  }

  void set(std::uint16_t channel, ChannelInfo info) { entries_[channel] = info; }

  const ChannelInfo* find(std::uint16_t channel) const {
    auto it = entries_.find(channel);
    return it == entries_.end() ? nullptr : &it->second;
  }

  const ChannelInfo& at(std::uint16_t channel) const {
    if (const auto* info = find(channel)) return *info;
    throw Error(Errc::UnknownChannel, "channel " + std::to_string(channel) + " is not in the channel map");
  }

  std::optional<std::uint16_t> channel_for(Party party, Arm arm, Outcome outcome) const {
    for (const auto& [id, info] : entries_)
      if (info == ChannelInfo{party, arm, outcome}) return id;
    return std::nullopt;
  }

  std::uint16_t require_channel(Party party, Arm arm, Outcome outcome) const {
    if (auto id = channel_for(party, arm, outcome)) return *id;
    throw Error(Errc::InvalidChannelMap, "no channel for " + std::string(to_string(party)) + "-" +
                                             std::string(to_string(arm)) + "-" + std::string(to_string(outcome)));
  }

  const std::map<std::uint16_t, ChannelInfo>& entries() const { return entries_; }

  void validate() const {
    std::array<int, 2 * 2 * 4> seen{};
    for (const auto& [id, info] : entries_) {
      if (!outcome_belongs_to(info.outcome, info.arm))
        throw Error(Errc::InvalidChannelMap, "channel " + std::to_string(id) + ": outcome " +
                                                 std::string(to_string(info.outcome)) + " does not belong to arm " +
                                                 std::string(to_string(info.arm)));
      const auto slot = static_cast<std::size_t>(info.party) * 8 + static_cast<std::size_t>(info.arm) * 4 +
                        static_cast<std::size_t>(info.outcome);
      if (++seen[slot] > 1)
        throw Error(Errc::InvalidChannelMap, "duplicate (party, arm, outcome) at channel " + std::to_string(id));
    }
    for (Party party : {Party::A, Party::B}) {
      int count = 0;
      for (const auto& [id, info] : entries_) count += info.party == party;
      if (count != 4)
        throw Error(Errc::InvalidChannelMap,
                    "party " + std::string(to_string(party)) + " has " + std::to_string(count) + " channels, expected 4");
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [id, info] : entries_) {
      j[std::to_string(id)] = {{"party", to_string(info.party)},
                               {"arm", to_string(info.arm)},
                               {"outcome", to_string(info.outcome)}};
    }
    return j;
  }

  static ChannelMap from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw Error(Errc::InvalidChannelMap, "channel map must be a JSON object");
    ChannelMap map;
    for (const auto& [key, value] : j.items()) {
      std::uint16_t id = 0;
      try {
        const unsigned long parsed = std::stoul(key);
        if (parsed > 0xFFFF || std::to_string(parsed) != key) throw std::out_of_range(key);
        id = static_cast<std::uint16_t>(parsed);
      } catch (const std::exception&) {
        throw Error(Errc::InvalidChannelMap, "channel key '" + key + "' is not a u16 id");
      }
      try {
        map.set(id, {parse_party(value.at("party").get<std::string>()), parse_arm(value.at("arm").get<std::string>()),
                     parse_outcome(value.at("outcome").get<std::string>())});
      } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::InvalidChannelMap, "channel " + key + ": " + e.what());
      }
    }
    map.validate();
    return map;
  }

 private:
  static Party parse_party(const std::string& s) {
    if (s == "A") return Party::A;
    if (s == "B") return Party::B;
    throw Error(Errc::InvalidChannelMap, "unknown party '" + s + "'");
  }
  static Arm parse_arm(const std::string& s) {
    if (s == "TOA") return Arm::Toa;
    if (s == "TSUP") return Arm::Tsup;
    throw Error(Errc::InvalidChannelMap, "unknown arm '" + s + "'");
  }
  static Outcome parse_outcome(const std::string& s) {
    if (s == "H") return Outcome::H;
    if (s == "V") return Outcome::V;
    if (s == "D") return Outcome::D;
    if (s == "A") return Outcome::A;
    throw Error(Errc::InvalidChannelMap, "unknown outcome '" + s + "'");
  }

  std::map<std::uint16_t, ChannelInfo> entries_;
};

}  // namespace timebin
