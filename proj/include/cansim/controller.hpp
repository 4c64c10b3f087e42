#pragma once

// Stand-alone CAN controller: three prioritized TX buffers with abort, two
// RX buffers behind two masks and six filters, and TEC/REC fault confinement.

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cansim/error.hpp"
#include "cansim/frame.hpp"

namespace cansim {

enum class ErrorState : std::uint8_t { active, passive, bus_off };

inline const char* to_string(ErrorState s) noexcept
{
    switch (s) {
    case ErrorState::active: return "active";
    case ErrorState::passive: return "passive";
    case ErrorState::bus_off: return "busoff";
    }
    return "?";
}

constexpr unsigned kTecPerTxError = 8;
constexpr unsigned kRecPerRxError = 1;
constexpr unsigned kPassiveThreshold = 128;  // either counter at or above -> passive
constexpr unsigned kBusOffThreshold = 256;   // TEC at or above -> bus-off

/// Confinement state as a pure function of the counters.
constexpr ErrorState error_state_for(unsigned tec, unsigned rec) noexcept
{
    if (tec >= kBusOffThreshold) return ErrorState::bus_off;
    if (tec >= kPassiveThreshold || rec >= kPassiveThreshold) return ErrorState::passive;
    return ErrorState::active;
}

struct ErrorCounters {
    unsigned tec = 0;
    unsigned rec = 0;
    ErrorState state = ErrorState::active;

    friend bool operator==(const ErrorCounters&, const ErrorCounters&) = default;
};

struct TxBuffer {
    std::optional<Frame> frame;
    std::uint8_t priority = 0;  // 2 bits, 3 is highest
    bool txreq = false;
    bool txerr = false;
    bool mloa = false;
    bool abtf = false;

    friend bool operator==(const TxBuffer&, const TxBuffer&) = default;
};

enum class RxMode : std::uint8_t {
    filtered = 0b00,
    standard_only = 0b01,
    extended_only = 0b10,
    accept_all = 0b11,
};

struct RxBuffer {
    std::size_t index = 0;
    RxMode mode = RxMode::filtered;
    std::optional<Frame> frame;
    bool full = false;
    bool errored = false;  // accept_all buffer loaded from a frame that failed before EOF

    friend bool operator==(const RxBuffer&, const RxBuffer&) = default;
};

struct AcceptanceFilter {
    std::uint32_t value = 0;
    bool exide = false;

    friend bool operator==(const AcceptanceFilter&, const AcceptanceFilter&) = default;
};

/// Masks: bit 1 means the identifier bit must equal the filter bit.
/// Filters 0-1 use mask 0 and feed RXB0; filters 2-5 use mask 1 and feed RXB1.
struct FilterBank {
    std::array<std::uint32_t, 2> masks{};
    std::array<AcceptanceFilter, 6> filters{};

    static constexpr std::size_t first_filter(std::size_t rx_index) noexcept { return rx_index == 0 ? 0 : 2; }
    static constexpr std::size_t filter_count(std::size_t rx_index) noexcept { return rx_index == 0 ? 2 : 4; }

    friend bool operator==(const FilterBank&, const FilterBank&) = default;
};

struct FilterMatch {
    bool accepted = false;
    std::optional<std::size_t> filter;  // matching filter, absent for accept_all

    explicit operator bool() const noexcept { return accepted; }
};

inline bool filter_bits_match(std::uint32_t mask, const AcceptanceFilter& f, const Frame& frame) noexcept
{
    if (f.exide != frame.is_extended()) return false;
    const std::uint32_t width = frame.is_extended() ? (kExtendedIdLimit - 1) : (kStandardIdLimit - 1);
    return ((frame.id() ^ f.value) & mask & width) == 0;
}

inline FilterMatch filter_match(const FilterBank& bank, const RxBuffer& rx, const Frame& frame) noexcept
{
    switch (rx.mode) {
    case RxMode::accept_all: return {true, std::nullopt};
    case RxMode::standard_only:
        if (frame.is_extended()) return {};
        break;
    case RxMode::extended_only:
        if (!frame.is_extended()) return {};
        break;
    case RxMode::filtered: break;
    }
    const std::size_t mask_index = rx.index == 0 ? 0 : 1;
    const std::size_t first = FilterBank::first_filter(rx.index);
    for (std::size_t i = first; i < first + FilterBank::filter_count(rx.index); ++i) {
        if (filter_bits_match(bank.masks[mask_index], bank.filters[i], frame)) return {true, i};
    }
    return {};
}

enum class RtsPath : std::uint8_t { register_write, rts_command, txnrts_pin };

enum class TxOutcome : std::uint8_t { success, bit_error, arbitration_lost, no_ack };
enum class RxOutcome : std::uint8_t { success, error };

constexpr std::size_t kTxBuffers = 3;
constexpr std::size_t kRxBuffers = 2;

class Controller {
public:
    Controller()
    {
        for (std::size_t i = 0; i < kRxBuffers; ++i) rx_[i].index = i;
    }

    // -- configuration ------------------------------------------------------

    FilterBank& filters() noexcept { return filters_; }
    const FilterBank& filters() const noexcept { return filters_; }

    void set_rx_mode(std::size_t index, RxMode mode)
    {
        check_rx(index);
        rx_[index].mode = mode;
    }

    /// Configures both RX buffers to reject every standard and extended frame.
    void reject_all()
    {
        filters_.masks = {kExtendedIdLimit - 1, kExtendedIdLimit - 1};
        for (auto& f : filters_.filters) f = {kExtendedIdLimit - 1, true};
        for (auto& r : rx_) r.mode = RxMode::standard_only;
    }

    // -- transmit path ------------------------------------------------------

    void load_tx_buffer(std::size_t index, const Frame& frame, std::uint8_t priority = 0)
    {
        check_tx(index);
        if (priority > 3) throw Error(Errc::out_of_range, "priority must fit 2 bits");
        auto& b = tx_[index];
        if (b.txreq) throw Error(Errc::buffer_busy, "TX buffer " + std::to_string(index) + " has TXREQ set");
        b = TxBuffer{frame, priority, false, false, false, false};
    }

    /// Sets TXREQ; the three entry paths are equivalent.
    void request_to_send(RtsPath, std::span<const std::size_t> indices)
    {
        for (std::size_t i : indices) {
            check_tx(i);
            if (!tx_[i].frame) throw Error(Errc::empty_buffer, "TX buffer " + std::to_string(i) + " is empty");
        }
        for (std::size_t i : indices) {
            tx_[i].txreq = true;
            tx_[i].abtf = false;
        }
    }
    void request_to_send(RtsPath path, std::initializer_list<std::size_t> indices)
    {
        request_to_send(path, std::span<const std::size_t>(indices.begin(), indices.size()));
    }

    /// Pending buffer with the highest priority field, lowest index on ties.
    std::optional<std::size_t> select_tx_buffer() const noexcept
    {
        std::optional<std::size_t> best;
        for (std::size_t i = 0; i < kTxBuffers; ++i) {
            if (tx_[i].txreq && (!best || tx_[i].priority > tx_[*best].priority)) best = i;
        }
        return best;
    }

    bool can_transmit() const noexcept { return counters_.state != ErrorState::bus_off && !abat_; }

    /// Picks the buffer to put on the bus at the next idle boundary and marks
    /// it in flight. Refused in bus-off and while ABAT is set.
    std::optional<std::size_t> start_transmission() noexcept
    {
        if (!can_transmit()) return std::nullopt;
        in_flight_ = select_tx_buffer();
        return in_flight_;
    }

    std::optional<std::size_t> in_flight() const noexcept { return in_flight_; }

    void abort(std::size_t index)
    {
        check_tx(index);
        tx_[index].txreq = false;
        if (in_flight_ == index) in_flight_.reset();
    }

    void abort_all() noexcept
    {
        abat_ = true;
        for (auto& b : tx_) {
            if (b.txreq) {
                b.txreq = false;
                b.abtf = true;
            }
        }
        in_flight_.reset();
    }

    /// Host clears ABAT once it has seen the TXREQ bits drop.
    void clear_abat() noexcept { abat_ = false; }

    void on_tx_result(TxOutcome outcome)
    {
        if (!in_flight_) throw Error(Errc::internal_error, "no transmission in flight");
        auto& b = tx_[*in_flight_];
        switch (outcome) {
        case TxOutcome::success:
            b.txreq = false;
            if (counters_.tec > 0) --counters_.tec;
            break;
        case TxOutcome::bit_error:
        case TxOutcome::no_ack:
            b.txerr = true;
            merrf_ = true;
            counters_.tec += kTecPerTxError;
            break;
        case TxOutcome::arbitration_lost: b.mloa = true; break;
        }
        in_flight_.reset();
        counters_.state = error_state_for(counters_.tec, counters_.rec);
    }

    // -- receive path -------------------------------------------------------

    void on_rx_result(RxOutcome outcome) noexcept
    {
        if (outcome == RxOutcome::success) {
            if (counters_.rec > 0) --counters_.rec;
        } else {
            counters_.rec += kRecPerRxError;
        }
        counters_.state = error_state_for(counters_.tec, counters_.rec);
    }

    /// Stores a correctly received frame into the first RX buffer whose
    /// acceptance logic matches. Returns the buffer index.
    std::optional<std::size_t> receive(const Frame& frame) noexcept
    {
        for (auto& r : rx_) {
            if (r.full) continue;
            if (filter_match(filters_, r, frame)) {
                r.frame = frame;
                r.full = true;
                r.errored = false;
                return r.index;
            }
        }
        return std::nullopt;
    }

    /// Accept-all buffers also load frames that failed before EOF; the
    /// content is not reconstructed, only the annotation is kept.
    std::optional<std::size_t> receive_erroneous() noexcept
    {
        for (auto& r : rx_) {
            if (!r.full && r.mode == RxMode::accept_all) {
                r.frame.reset();
                r.full = true;
                r.errored = true;
                return r.index;
            }
        }
        return std::nullopt;
    }

    /// Host read; frees the buffer.
    std::optional<Frame> read_rx(std::size_t index)
    {
        check_rx(index);
        auto f = rx_[index].frame;
        rx_[index].frame.reset();
        rx_[index].full = false;
        rx_[index].errored = false;
        return f;
    }

    // -- state --------------------------------------------------------------

    /// Returns to error-active with zeroed counters, cleared flags and empty
    /// buffers. Filter and mode configuration is kept.
    void host_reset() noexcept
    {
        for (auto& b : tx_) b = TxBuffer{};
        for (auto& r : rx_) {
            r.frame.reset();
            r.full = false;
            r.errored = false;
        }
        counters_ = ErrorCounters{};
        merrf_ = false;
        abat_ = false;
        in_flight_.reset();
    }

    /// Diagnostic injection of counter values; the state follows.
    void force_counters(unsigned tec, unsigned rec) noexcept
    {
        counters_ = {tec, rec, error_state_for(tec, rec)};
    }

    const ErrorCounters& counters() const noexcept { return counters_; }
    ErrorState state() const noexcept { return counters_.state; }
    const TxBuffer& tx(std::size_t i) const { return check_tx(i), tx_[i]; }
    const RxBuffer& rx(std::size_t i) const { return check_rx(i), rx_[i]; }
    bool merrf() const noexcept { return merrf_; }
    bool abat() const noexcept { return abat_; }
    void clear_merrf() noexcept { merrf_ = false; }

    std::vector<std::string> flag_names() const
    {
        std::vector<std::string> out;
        for (std::size_t i = 0; i < kTxBuffers; ++i) {
            const auto n = std::to_string(i);
            if (tx_[i].txreq) out.push_back("TXREQ" + n);
            if (tx_[i].txerr) out.push_back("TXERR" + n);
            if (tx_[i].mloa) out.push_back("MLOA" + n);
            if (tx_[i].abtf) out.push_back("ABTF" + n);
        }
        if (merrf_) out.push_back("MERRF");
        if (abat_) out.push_back("ABAT");
        return out;
    }

    /// `node=<addr> state=<active|passive|busoff> tec=<n> rec=<n> flags=[...]`
    std::string status(unsigned node) const
    {
        std::string s = "node=" + std::to_string(node) + " state=" + to_string(counters_.state) +
                        " tec=" + std::to_string(counters_.tec) + " rec=" + std::to_string(counters_.rec) + " flags=[";
        const auto flags = flag_names();
        for (std::size_t i = 0; i < flags.size(); ++i) {
            if (i) s += ',';
            s += flags[i];
        }
        return s + "]";
    }

    friend bool operator==(const Controller&, const Controller&) = default;

private:
    static void check_tx(std::size_t i)
    {
        if (i >= kTxBuffers) throw Error(Errc::out_of_range, "TX buffer index must be 0..2");
    }
    static void check_rx(std::size_t i)
    {
        if (i >= kRxBuffers) throw Error(Errc::out_of_range, "RX buffer index must be 0..1");
    }

    std::array<TxBuffer, kTxBuffers> tx_{};
    std::array<RxBuffer, kRxBuffers> rx_{};
    FilterBank filters_{};
    ErrorCounters counters_{};
    bool merrf_ = false;
    bool abat_ = false;
    std::optional<std::size_t> in_flight_;
};

}  // namespace cansim
