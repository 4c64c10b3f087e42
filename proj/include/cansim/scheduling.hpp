#pragma once

// Identifier-priority policies: fixed priority, maximum-urgency-first
// feedback scheduling and the mixed EDF/RMS traffic schedule.
//
// MUF and MTS identifiers share one 11-bit layout:
//   D10     class bit (MUF: always 0; MTS: 0 high, 1 low)
//   D9..D4  6-bit priority code (MUF rank, EDF deadline, RMS rank)
//   D3..D0  source address, the unique tie-break

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cansim/error.hpp"
#include "cansim/frame.hpp"

namespace cansim {

enum class Policy : std::uint8_t { fixed, muf, mts };

inline const char* to_string(Policy p) noexcept
{
    switch (p) {
    case Policy::fixed: return "fixed";
    case Policy::muf: return "muf";
    case Policy::mts: return "mts";
    }
    return "?";
}

inline std::optional<Policy> parse_policy(std::string_view s) noexcept
{
    if (s == "fixed") return Policy::fixed;
    if (s == "muf") return Policy::muf;
    if (s == "mts") return Policy::mts;
    return std::nullopt;
}

constexpr unsigned kPriorityCodeMax = 63;

enum class Arbitration : std::uint8_t { a_wins, b_wins };

/// Lower identifier wins, as on the wire.
inline Arbitration fixed_priority_compare(std::uint32_t id_a, std::uint32_t id_b)
{
    if (id_a == id_b) throw Error(Errc::protocol_violation, "identical identifiers");
    return id_a < id_b ? Arbitration::a_wins : Arbitration::b_wins;
}

inline std::uint16_t pack_priority_id(unsigned class_bit, unsigned code, unsigned address)
{
    if (class_bit > 1) throw Error(Errc::out_of_range, "class bit must be 0 or 1");
    if (code > kPriorityCodeMax) throw Error(Errc::out_of_range, "priority code must fit 6 bits");
    if (address > 0xF) throw Error(Errc::out_of_range, "address must fit 4 bits");
    return static_cast<std::uint16_t>((class_bit << 10) | (code << 4) | address);
}

struct ControlLoop {
    std::uint8_t address = 0;
    double setpoint = 0.0;
    double output = 0.0;
    double range = 1.0;
    std::uint32_t period_slots = 1;
    std::uint32_t deadline_slots = 1;
};

/// Normalized control error.
inline double urgency(const ControlLoop& loop)
{
    if (!(loop.range > 0.0)) throw Error(Errc::out_of_range, "loop range must be positive");
    return std::abs(loop.setpoint - loop.output) / loop.range;
}

struct PolicyAssignment {
    std::map<std::uint8_t, std::uint16_t> ids;  // address -> identifier

    friend bool operator==(const PolicyAssignment&, const PolicyAssignment&) = default;
};

namespace detail {

inline void require_distinct_addresses(std::span<const ControlLoop> loops)
{
    std::set<std::uint8_t> seen;
    for (const auto& l : loops) {
        if (l.address > 0xF) throw Error(Errc::out_of_range, "loop address must fit 4 bits");
        if (!seen.insert(l.address).second) {
            throw Error(Errc::duplicate_address, "loop address " + std::to_string(l.address) + " repeated");
        }
    }
}

}  // namespace detail

/// Ranks loops by urgency, most urgent first (ties: lower address), and
/// gives rank k the identifier (0, k, address). Independent of input order.
inline PolicyAssignment muf_update(std::span<const ControlLoop> loops)
{
    if (loops.empty()) throw Error(Errc::out_of_range, "muf_update needs at least one loop");
    detail::require_distinct_addresses(loops);

    struct Ranked {
        double urgency;
        std::uint8_t address;
    };
    std::vector<Ranked> ranked;
    ranked.reserve(loops.size());
    for (const auto& l : loops) ranked.push_back({urgency(l), l.address});
    std::sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
        return a.urgency != b.urgency ? a.urgency > b.urgency : a.address < b.address;
    });

    PolicyAssignment out;
    for (std::size_t k = 0; k < ranked.size(); ++k) {
        out.ids[ranked[k].address] = pack_priority_id(0, static_cast<unsigned>(k), ranked[k].address);
    }
    return out;
}

enum class TrafficClass : std::uint8_t { high, low };

inline const char* to_string(TrafficClass c) noexcept { return c == TrafficClass::high ? "high" : "low"; }

/// High class: `value_slots` is the absolute deadline slot; the field holds
/// the remaining slots, clamped to [0, 63]. Low class: `value_slots` is the
/// RMS rank code, clamped to 63.
inline std::uint16_t mts_encode(TrafficClass cls, std::int64_t value_slots, unsigned address, std::int64_t now_slot)
{
    std::int64_t code = cls == TrafficClass::high ? value_slots - now_slot : value_slots;
    code = std::clamp<std::int64_t>(code, 0, kPriorityCodeMax);
    return pack_priority_id(cls == TrafficClass::high ? 0 : 1, static_cast<unsigned>(code), address);
}

/// Rate-monotonic rank codes: shorter period gets the smaller code, ties by
/// address. Computed once per configuration.
inline std::map<std::uint8_t, unsigned> rms_rank_codes(std::span<const ControlLoop> loops)
{
    detail::require_distinct_addresses(loops);
    std::vector<const ControlLoop*> order;
    for (const auto& l : loops) order.push_back(&l);
    std::sort(order.begin(), order.end(), [](const ControlLoop* a, const ControlLoop* b) {
        return a->period_slots != b->period_slots ? a->period_slots < b->period_slots : a->address < b->address;
    });
    std::map<std::uint8_t, unsigned> codes;
    for (std::size_t k = 0; k < order.size(); ++k) {
        codes[order[k]->address] = static_cast<unsigned>(std::min<std::size_t>(k, kPriorityCodeMax));
    }
    return codes;
}

struct MtsRelease {
    TrafficClass cls = TrafficClass::high;
    std::uint8_t address = 0;
    std::int64_t value_slots = 0;  // deadline slot (high) or rank code (low)
};

inline PolicyAssignment mts_assign(std::span<const MtsRelease> releases, std::int64_t now_slot)
{
    PolicyAssignment out;
    for (const auto& r : releases) {
        if (out.ids.count(r.address)) {
            throw Error(Errc::duplicate_address, "address " + std::to_string(r.address) + " repeated in release set");
        }
        out.ids[r.address] = mts_encode(r.cls, r.value_slots, r.address, now_slot);
    }
    return out;
}

}  // namespace cansim
