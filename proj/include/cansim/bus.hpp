#pragma once

// Slot-synchronous shared medium: wired-AND resolution, bitwise arbitration
// and whole-window frame transfer with ACK and error signalling.

#include <algorithm>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cansim/error.hpp"
#include "cansim/frame.hpp"

namespace cansim {

/// Bus roster key. Independent of the 4-bit application address so the
/// roster can reach the transceiver's node limit.
struct NodeId {
    std::uint16_t value = 0;

    friend auto operator<=>(const NodeId&, const NodeId&) = default;
};

struct BusConfig {
    std::size_t max_nodes = 112;
    double termination_ohms = 120.0;
    double dominant_threshold_volts = 1.2;
};

constexpr std::size_t kIntermissionSlots = 3;
constexpr std::size_t kErrorFlagSlots = 6;
constexpr std::size_t kErrorDelimiterSlots = 8;

inline Bit diff_to_logic(double v_canh, double v_canl, const BusConfig& cfg = {}) noexcept
{
    return (v_canh - v_canl) > cfg.dominant_threshold_volts ? Bit::dominant : Bit::recessive;
}

struct BusSample {
    double v_canh = 2.5;
    double v_canl = 2.5;
    Bit logic = Bit::recessive;

    double v_diff() const noexcept { return v_canh - v_canl; }

    static BusSample from_voltages(double canh, double canl, const BusConfig& cfg = {}) noexcept
    {
        return {canh, canl, diff_to_logic(canh, canl, cfg)};
    }

    /// Nominal transceiver output levels for a logical bit.
    static BusSample nominal(Bit b) noexcept
    {
        return b == Bit::dominant ? BusSample{3.5, 1.5, Bit::dominant} : BusSample{2.5, 2.5, Bit::recessive};
    }
};

/// Wired-AND: any dominant driver wins the slot.
inline Bit resolve_slot(std::span<const Bit> driven) noexcept
{
    return std::any_of(driven.begin(), driven.end(), [](Bit b) { return b == Bit::dominant; }) ? Bit::dominant
                                                                                               : Bit::recessive;
}

class Bus {
public:
    explicit Bus(BusConfig cfg = {}) : cfg_(cfg) {}

    void attach(NodeId node)
    {
        if (contains(node)) {
            throw Error(Errc::duplicate_address, "node " + std::to_string(node.value) + " already attached");
        }
        if (roster_.size() + 1 > cfg_.max_nodes) {
            throw Error(Errc::capacity_exceeded,
                        "bus holds at most " + std::to_string(cfg_.max_nodes) + " nodes");
        }
        roster_.insert(std::upper_bound(roster_.begin(), roster_.end(), node), node);
    }

    bool contains(NodeId node) const noexcept { return std::binary_search(roster_.begin(), roster_.end(), node); }
    std::size_t size() const noexcept { return roster_.size(); }
    std::span<const NodeId> roster() const noexcept { return roster_; }
    const BusConfig& config() const noexcept { return cfg_; }

private:
    BusConfig cfg_;
    std::vector<NodeId> roster_;  // sorted
};

// ---------------------------------------------------------------------------
// Arbitration

struct ArbitrationLoss {
    std::size_t contender = 0;  // index into the contender list
    std::size_t slot = 0;       // slot offset from SOF where it read dominant over its recessive
};

struct ArbitrationResult {
    std::size_t winner = 0;
    std::vector<ArbitrationLoss> losers;
};

namespace detail {

inline void require_distinct_ids(std::span<const Frame* const> frames)
{
    for (std::size_t i = 0; i < frames.size(); ++i) {
        for (std::size_t j = i + 1; j < frames.size(); ++j) {
            if (frames[i]->kind() == frames[j]->kind() && frames[i]->id() == frames[j]->id()) {
                throw Error(Errc::protocol_violation, "contenders share identifier");
            }
        }
    }
}

}  // namespace detail

/// Wired-AND contention over the stuffed arbitration fields, MSB first.
inline ArbitrationResult arbitrate(std::span<const Frame> contenders)
{
    if (contenders.empty()) throw Error(Errc::internal_error, "arbitrate needs at least one contender");
    std::vector<const Frame*> ptrs;
    for (const auto& f : contenders) ptrs.push_back(&f);
    detail::require_distinct_ids(ptrs);

    std::vector<FrameLayout> layouts;
    layouts.reserve(contenders.size());
    for (const auto& f : contenders) layouts.push_back(layout_frame(f));

    std::vector<std::size_t> active(contenders.size());
    for (std::size_t i = 0; i < active.size(); ++i) active[i] = i;

    ArbitrationResult result;
    std::vector<Bit> driven;
    for (std::size_t slot = 0; active.size() > 1; ++slot) {
        driven.clear();
        for (std::size_t i : active) driven.push_back(layouts[i].bits[slot]);
        const Bit line = resolve_slot(driven);
        std::vector<std::size_t> still;
        for (std::size_t i : active) {
            if (layouts[i].bits[slot] == Bit::recessive && line == Bit::dominant && slot < layouts[i].arbitration_end) {
                result.losers.push_back({i, slot});
            } else {
                still.push_back(i);
            }
        }
        active.swap(still);
    }
    result.winner = active.front();
    return result;
}

// ---------------------------------------------------------------------------
// Frame transfer

enum class BusEvent : std::uint8_t { tx_ok, rx_ok, arb_lost, crc_err, stuff_err, no_ack };

inline const char* to_string(BusEvent e) noexcept
{
    switch (e) {
    case BusEvent::tx_ok: return "TX_OK";
    case BusEvent::rx_ok: return "RX_OK";
    case BusEvent::arb_lost: return "ARB_LOST";
    case BusEvent::crc_err: return "CRC_ERR";
    case BusEvent::stuff_err: return "STUFF_ERR";
    case BusEvent::no_ack: return "NO_ACK";
    }
    return "?";
}

/// Error that terminated a window. Form and transmitter bit errors show up on
/// the bus as an error flag, i.e. a stuff violation, so they share STUFF_ERR.
enum class WindowError : std::uint8_t { stuff, crc, form, bit, ack };

inline BusEvent to_event(WindowError e) noexcept
{
    switch (e) {
    case WindowError::crc: return BusEvent::crc_err;
    case WindowError::ack: return BusEvent::no_ack;
    case WindowError::stuff:
    case WindowError::form:
    case WindowError::bit: return BusEvent::stuff_err;
    }
    return BusEvent::stuff_err;
}

inline WindowError to_window_error(DecodeError e) noexcept
{
    switch (e) {
    case DecodeError::stuff: return WindowError::stuff;
    case DecodeError::crc: return WindowError::crc;
    case DecodeError::form:
    case DecodeError::truncated: return WindowError::form;
    }
    return WindowError::form;
}

struct Contender {
    NodeId node;
    Frame frame;
};

/// Injected disturbances for one window.
struct FaultPlan {
    /// Slot offset (from SOF) at which every receiver samples the complement.
    std::optional<std::size_t> receiver_flip_slot;
    /// Node whose transmitter reads back a wrong level on its first
    /// post-arbitration slot.
    std::optional<NodeId> transmitter_bit_error;
};

struct NodeReport {
    NodeId node;
    BusEvent event = BusEvent::tx_ok;
    std::size_t slot = 0;  // offset from SOF
};

struct TransmitReport {
    std::optional<std::size_t> winner;  // index into contenders; empty if an error hit mid-arbitration
    bool delivered = false;
    std::optional<WindowError> error;
    std::size_t frame_slots = 0;  // SOF to end of EOF, or to end of error delimiter
    std::size_t idle_after = 0;   // frame_slots + intermission
    std::vector<NodeReport> reports;
    std::vector<NodeId> received;  // nodes holding a correctly received frame
    Bitstream line;                // resolved level per slot, intermission included
};

/// Runs one bus window from an idle boundary. Every attached node not in
/// `silent` samples the line and acknowledges correct frames; losers of
/// arbitration turn into receivers and keep their frames.
inline TransmitReport transmit_frame(const Bus& bus, std::span<const Contender> contenders,
                                     std::span<const NodeId> silent = {}, const FaultPlan& faults = {})
{
    if (contenders.empty()) throw Error(Errc::internal_error, "transmit_frame needs a contender");
    std::vector<const Frame*> frames;
    for (const auto& c : contenders) {
        if (!bus.contains(c.node)) throw Error(Errc::internal_error, "contender not attached");
        frames.push_back(&c.frame);
    }
    detail::require_distinct_ids(frames);

    struct Participant {
        NodeId node;
        FrameDecoder decoder;
        std::optional<std::size_t> contender;  // set while transmitting
        bool failed = false;
    };

    std::vector<Participant> parts;
    parts.reserve(bus.size());
    for (NodeId n : bus.roster()) {
        if (std::find(silent.begin(), silent.end(), n) != silent.end()) continue;
        Participant p{n, {}, std::nullopt};
        for (std::size_t i = 0; i < contenders.size(); ++i) {
            if (contenders[i].node == n) p.contender = i;
        }
        parts.push_back(std::move(p));
    }

    std::vector<FrameLayout> layouts;
    layouts.reserve(contenders.size());
    for (const auto& c : contenders) layouts.push_back(layout_frame(c.frame));

    TransmitReport report;
    std::vector<Bit> driven;
    std::size_t transmitting = contenders.size();
    std::optional<std::size_t> error_slot;

    for (std::size_t slot = 0;; ++slot) {
        driven.clear();
        for (const auto& p : parts) {
            if (p.contender) {
                driven.push_back(layouts[*p.contender].bits[slot]);
            } else if (p.decoder.awaiting_ack_slot()) {
                driven.push_back(Bit::dominant);
            }
        }
        const Bit line = resolve_slot(driven);
        report.line.push_back(line);

        std::optional<WindowError> rx_error;
        std::optional<WindowError> tx_error;
        for (auto& p : parts) {
            if (p.contender) {
                const auto& lay = layouts[*p.contender];
                const Bit sent = lay.bits[slot];
                p.decoder.push(line);
                if (slot < lay.arbitration_end) {
                    if (sent == Bit::recessive && line == Bit::dominant) {
                        report.reports.push_back({p.node, BusEvent::arb_lost, slot});
                        p.contender.reset();
                        --transmitting;
                    }
                    continue;
                }
                if (slot == lay.arbitration_end && faults.transmitter_bit_error == p.node) {
                    tx_error = WindowError::bit;
                } else if (slot == lay.ack_slot) {
                    if (line != Bit::dominant) tx_error = WindowError::ack;
                } else if (sent != line) {
                    tx_error = WindowError::bit;
                }
                if (slot + 1 == lay.bits.size() && !tx_error) {
                    report.delivered = true;
                }
                continue;
            }
            if (p.failed) continue;
            const Bit sample = faults.receiver_flip_slot == slot ? !line : line;
            if (p.decoder.push(sample) == FrameDecoder::Status::failed) {
                p.failed = true;
                const auto e = to_window_error(*p.decoder.error());
                if (!rx_error || e < *rx_error) rx_error = e;
            }
        }
        if (transmitting == 0) throw Error(Errc::internal_error, "all contenders lost arbitration");

        if (rx_error || tx_error) {
            report.error = rx_error ? rx_error : tx_error;
            report.delivered = false;
            error_slot = slot;
            break;
        }
        if (report.delivered) break;
    }

    std::vector<NodeId> senders;
    for (const auto& p : parts) {
        if (p.contender) senders.push_back(p.node);
    }
    if (senders.size() == 1) {
        for (const auto& p : parts) {
            if (p.contender) report.winner = *p.contender;
        }
    }
    const auto is_sender = [&](NodeId n) { return std::find(senders.begin(), senders.end(), n) != senders.end(); };

    if (error_slot) {
        report.line.insert(report.line.end(), kErrorFlagSlots, Bit::dominant);
        report.line.insert(report.line.end(), kErrorDelimiterSlots, Bit::recessive);
        report.frame_slots = report.line.size();
        const std::size_t last = report.frame_slots - 1;
        const BusEvent ev = to_event(*report.error);
        for (const auto& p : parts) {
            if (is_sender(p.node) || *report.error != WindowError::ack) report.reports.push_back({p.node, ev, last});
        }
    } else {
        report.frame_slots = report.line.size();
        const std::size_t last = report.frame_slots - 1;
        for (const auto& p : parts) {
            if (is_sender(p.node)) {
                report.reports.push_back({p.node, BusEvent::tx_ok, last});
            } else if (p.decoder.status() == FrameDecoder::Status::complete) {
                report.received.push_back(p.node);
                report.reports.push_back({p.node, BusEvent::rx_ok, last});
            }
        }
    }
    report.line.insert(report.line.end(), kIntermissionSlots, Bit::recessive);
    report.idle_after = report.line.size();

    std::stable_sort(report.reports.begin(), report.reports.end(), [](const NodeReport& a, const NodeReport& b) {
        return a.slot != b.slot ? a.slot < b.slot : a.node < b.node;
    });
    return report;
}

}  // namespace cansim
