#pragma once

// CAN 2.0B data frame codec: identifier layout, CRC-15, bit stuffing,
// serialization to slot-level bitstreams and an incremental decoder.

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cansim/error.hpp"

namespace cansim {

/// Bus logic level. Dominant is logic 0 and overwrites recessive.
enum class Bit : std::uint8_t { dominant = 0, recessive = 1 };

using Bitstream = std::vector<Bit>;

constexpr Bit operator!(Bit b) noexcept
{
    return b == Bit::dominant ? Bit::recessive : Bit::dominant;
}

constexpr Bit to_bit(bool one) noexcept { return one ? Bit::recessive : Bit::dominant; }

enum class IdKind : std::uint8_t { standard, extended };

constexpr std::uint32_t kStandardIdLimit = 1u << 11;
constexpr std::uint32_t kExtendedIdLimit = 1u << 29;
constexpr std::size_t kMaxDlc = 8;

constexpr std::uint16_t kCrc15Polynomial = 0x4599;  // x^15+x^14+x^10+x^8+x^7+x^4+x^3+1

constexpr std::size_t kStuffRun = 5;
constexpr std::size_t kEofBits = 7;

class Frame {
public:
    Frame() = default;

    static Frame standard(std::uint32_t id, std::span<const std::uint8_t> payload = {})
    {
        return Frame(IdKind::standard, id, payload);
    }
    static Frame standard(std::uint32_t id, std::initializer_list<std::uint8_t> payload)
    {
        return Frame(IdKind::standard, id, std::span<const std::uint8_t>(payload.begin(), payload.size()));
    }
    static Frame extended(std::uint32_t id, std::span<const std::uint8_t> payload = {})
    {
        return Frame(IdKind::extended, id, payload);
    }
    static Frame extended(std::uint32_t id, std::initializer_list<std::uint8_t> payload)
    {
        return Frame(IdKind::extended, id, std::span<const std::uint8_t>(payload.begin(), payload.size()));
    }

    Frame(IdKind kind, std::uint32_t id, std::span<const std::uint8_t> payload)
        : kind_(kind), id_(id), dlc_(static_cast<std::uint8_t>(payload.size()))
    {
        const auto limit = kind == IdKind::standard ? kStandardIdLimit : kExtendedIdLimit;
        if (id >= limit) {
            throw Error(Errc::out_of_range, "identifier does not fit " +
                                                std::string(kind == IdKind::standard ? "11" : "29") + " bits");
        }
        if (payload.size() > kMaxDlc) {
            throw Error(Errc::out_of_range, "dlc must be in [0, 8]");
        }
        std::copy(payload.begin(), payload.end(), data_.begin());
    }

    IdKind kind() const noexcept { return kind_; }
    bool is_extended() const noexcept { return kind_ == IdKind::extended; }
    std::uint32_t id() const noexcept { return id_; }
    std::uint8_t dlc() const noexcept { return dlc_; }
    std::span<const std::uint8_t> payload() const noexcept { return {data_.data(), dlc_}; }

    /// CRC-15 over the unstuffed SOF..data bits.
    std::uint16_t crc() const;

    friend bool operator==(const Frame& a, const Frame& b) noexcept
    {
        return a.kind_ == b.kind_ && a.id_ == b.id_ && a.dlc_ == b.dlc_ &&
               std::equal(a.data_.begin(), a.data_.begin() + a.dlc_, b.data_.begin());
    }

private:
    IdKind kind_ = IdKind::standard;
    std::uint32_t id_ = 0;
    std::uint8_t dlc_ = 0;
    std::array<std::uint8_t, kMaxDlc> data_{};
};

// ---------------------------------------------------------------------------
// "address code + type code" identifier layout: D10-D8 backup, D7-D4 address,
// D3-D0 type code.

struct SchemeIdentifier {
    std::uint8_t backup = 0;
    std::uint8_t address = 0;
    std::uint8_t type_code = 0;

    friend bool operator==(const SchemeIdentifier&, const SchemeIdentifier&) = default;
};

inline std::uint16_t pack_scheme_id(unsigned backup, unsigned address, unsigned type_code)
{
    if (backup > 0x7) throw Error(Errc::out_of_range, "backup must fit 3 bits");
    if (address > 0xF) throw Error(Errc::out_of_range, "address must fit 4 bits");
    if (type_code > 0xF) throw Error(Errc::out_of_range, "type_code must fit 4 bits");
    return static_cast<std::uint16_t>((backup << 8) | (address << 4) | type_code);
}

inline std::uint16_t pack_scheme_id(const SchemeIdentifier& s)
{
    return pack_scheme_id(s.backup, s.address, s.type_code);
}

inline SchemeIdentifier unpack_scheme_id(std::uint32_t id)
{
    if (id >= kStandardIdLimit) throw Error(Errc::out_of_range, "identifier must fit 11 bits");
    return {static_cast<std::uint8_t>((id >> 8) & 0x7), static_cast<std::uint8_t>((id >> 4) & 0xF),
            static_cast<std::uint8_t>(id & 0xF)};
}

// ---------------------------------------------------------------------------
// CRC and stuffing

/// Shift-register form of the CAN CRC-15; equals the remainder of
/// bits * x^15 divided by the generator polynomial.
inline std::uint16_t crc15(std::span<const Bit> bits) noexcept
{
    std::uint16_t crc = 0;
    for (Bit b : bits) {
        const bool next = (b == Bit::recessive) != (((crc >> 14) & 1u) != 0);
        crc = static_cast<std::uint16_t>((crc << 1) & 0x7FFF);
        if (next) crc ^= kCrc15Polynomial;
    }
    return crc;
}

/// Inserts the complement after every run of five identical bits. The
/// inserted bit starts the next run.
inline Bitstream stuff_bits(std::span<const Bit> bits)
{
    Bitstream out;
    out.reserve(bits.size() + bits.size() / 4 + 1);
    std::size_t run = 0;
    Bit last = Bit::dominant;
    for (Bit b : bits) {
        run = (run > 0 && b == last) ? run + 1 : 1;
        last = b;
        out.push_back(b);
        if (run == kStuffRun) {
            out.push_back(!b);
            last = !b;
            run = 1;
        }
    }
    return out;
}

/// Incremental destuffer: feed stuffed bits, get back data bits.
class Destuffer {
public:
    enum class Result { data, stuff, error };

    Result push(Bit b) noexcept
    {
        if (run_ == kStuffRun) {
            if (b == last_) return Result::error;
            last_ = b;
            run_ = 1;
            return Result::stuff;
        }
        run_ = (run_ > 0 && b == last_) ? run_ + 1 : 1;
        last_ = b;
        return Result::data;
    }

    /// True when the next stuffed bit must be a stuff bit.
    bool stuff_pending() const noexcept { return run_ == kStuffRun; }

private:
    std::size_t run_ = 0;
    Bit last_ = Bit::dominant;
};

struct UnstuffResult {
    Bitstream bits;
    bool stuff_error = false;
    std::size_t error_index = 0;  // stuffed index of the offending bit
};

/// Removes stuff bits; a sixth identical bit is a stuff error. A run of five
/// at the very end of the input (no stuff bit yet) is accepted.
inline UnstuffResult unstuff_bits(std::span<const Bit> bits)
{
    UnstuffResult r;
    Destuffer d;
    for (std::size_t i = 0; i < bits.size(); ++i) {
        switch (d.push(bits[i])) {
        case Destuffer::Result::data: r.bits.push_back(bits[i]); break;
        case Destuffer::Result::stuff: break;
        case Destuffer::Result::error:
            r.stuff_error = true;
            r.error_index = i;
            return r;
        }
    }
    return r;
}

// ---------------------------------------------------------------------------
// Serialization

enum class Field : std::uint8_t {
    sof, id_a, srr, ide, id_b, rtr, r1, r0, dlc, data, crc, crc_delim, ack_slot, ack_delim, eof
};

struct FrameLayout {
    Bitstream bits;                                      // stuffed, SOF..EOF
    std::vector<std::pair<Field, std::size_t>> fields;   // field and its exclusive end in `bits`
    std::size_t arbitration_end = 0;                     // exclusive end of the arbitration field
    std::size_t ack_slot = 0;                            // index of the ACK slot
};

namespace detail {

inline void append_value(Bitstream& out, std::uint32_t value, unsigned width)
{
    for (unsigned i = width; i-- > 0;) out.push_back(to_bit(((value >> i) & 1u) != 0));
}

struct UnstuffedFields {
    Bitstream bits;
    std::vector<std::pair<Field, std::size_t>> ends;

    void mark(Field f) { ends.emplace_back(f, bits.size()); }
};

/// SOF through the data field, unstuffed, with field boundaries.
inline UnstuffedFields header_fields(const Frame& f)
{
    UnstuffedFields u;
    u.bits.reserve(39 + 64);
    u.bits.push_back(Bit::dominant);
    u.mark(Field::sof);
    if (!f.is_extended()) {
        append_value(u.bits, f.id(), 11);
        u.mark(Field::id_a);
        u.bits.push_back(Bit::dominant);  // RTR: data frame
        u.mark(Field::rtr);
        u.bits.push_back(Bit::dominant);  // IDE
        u.mark(Field::ide);
        u.bits.push_back(Bit::dominant);  // r0
        u.mark(Field::r0);
    } else {
        append_value(u.bits, f.id() >> 18, 11);
        u.mark(Field::id_a);
        u.bits.push_back(Bit::recessive);  // SRR
        u.mark(Field::srr);
        u.bits.push_back(Bit::recessive);  // IDE
        u.mark(Field::ide);
        append_value(u.bits, f.id() & 0x3FFFF, 18);
        u.mark(Field::id_b);
        u.bits.push_back(Bit::dominant);  // RTR
        u.mark(Field::rtr);
        u.bits.push_back(Bit::dominant);  // r1
        u.mark(Field::r1);
        u.bits.push_back(Bit::dominant);  // r0
        u.mark(Field::r0);
    }
    append_value(u.bits, f.dlc(), 4);
    u.mark(Field::dlc);
    for (std::uint8_t byte : f.payload()) append_value(u.bits, byte, 8);
    if (f.dlc() > 0) u.mark(Field::data);
    return u;
}

}  // namespace detail

/// Unstuffed SOF..data bits, the CRC input.
inline Bitstream frame_header_bits(const Frame& f) { return detail::header_fields(f).bits; }

inline std::uint16_t Frame::crc() const { return crc15(frame_header_bits(*this)); }

inline FrameLayout layout_frame(const Frame& f)
{
    auto u = detail::header_fields(f);
    const std::uint16_t crc = crc15(u.bits);
    detail::append_value(u.bits, crc, 15);
    u.mark(Field::crc);

    FrameLayout layout;
    layout.bits.reserve(u.bits.size() + u.bits.size() / 4 + 1 + 3 + kEofBits);

    // Stuff SOF..CRC, keeping field ends in stuffed coordinates. A stuff bit
    // belongs to the field of the bit that completed the run.
    std::size_t run = 0;
    Bit last = Bit::dominant;
    std::size_t next_field = 0;
    for (std::size_t i = 0; i < u.bits.size(); ++i) {
        const Bit b = u.bits[i];
        run = (run > 0 && b == last) ? run + 1 : 1;
        last = b;
        layout.bits.push_back(b);
        if (run == kStuffRun) {
            layout.bits.push_back(!b);
            last = !b;
            run = 1;
        }
        while (next_field < u.ends.size() && u.ends[next_field].second == i + 1) {
            layout.fields.emplace_back(u.ends[next_field].first, layout.bits.size());
            if (u.ends[next_field].first == Field::rtr) layout.arbitration_end = layout.bits.size();
            ++next_field;
        }
    }

    layout.bits.push_back(Bit::recessive);
    layout.fields.emplace_back(Field::crc_delim, layout.bits.size());
    layout.ack_slot = layout.bits.size();
    layout.bits.push_back(Bit::recessive);  // transmitter leaves the ACK slot recessive
    layout.fields.emplace_back(Field::ack_slot, layout.bits.size());
    layout.bits.push_back(Bit::recessive);
    layout.fields.emplace_back(Field::ack_delim, layout.bits.size());
    layout.bits.insert(layout.bits.end(), kEofBits, Bit::recessive);
    layout.fields.emplace_back(Field::eof, layout.bits.size());
    return layout;
}

inline Bitstream serialize_frame(const Frame& f) { return layout_frame(f).bits; }

// ---------------------------------------------------------------------------
// Decoding

enum class DecodeError : std::uint8_t { stuff, crc, form, truncated };

inline const char* to_string(DecodeError e) noexcept
{
    switch (e) {
    case DecodeError::stuff: return "stuff-error";
    case DecodeError::crc: return "crc-error";
    case DecodeError::form: return "form-error";
    case DecodeError::truncated: return "truncated";
    }
    return "unknown";
}

/// Bit-at-a-time receiver for one frame starting at SOF. The ACK slot is
/// accepted at either level.
class FrameDecoder {
public:
    enum class Status { in_progress, complete, failed };

    Status push(Bit b)
    {
        if (status_ != Status::in_progress) {
            fail(DecodeError::form);
            return status_;
        }
        ++consumed_;
        switch (stage_) {
        case Stage::stuffed: push_stuffed(b); break;
        case Stage::crc_delim:
            if (b != Bit::recessive) {
                fail(DecodeError::form);
            } else if (crc_mismatch_) {
                fail(DecodeError::crc);
            } else {
                stage_ = Stage::ack_slot;
            }
            break;
        case Stage::ack_slot:
            acked_ = b == Bit::dominant;
            stage_ = Stage::ack_delim;
            break;
        case Stage::ack_delim:
            if (b != Bit::recessive) fail(DecodeError::form);
            else stage_ = Stage::eof;
            break;
        case Stage::eof:
            if (b != Bit::recessive) {
                fail(DecodeError::form);
            } else if (++eof_seen_ == kEofBits) {
                status_ = Status::complete;
            }
            break;
        }
        return status_;
    }

    Status status() const noexcept { return status_; }
    std::optional<DecodeError> error() const noexcept { return error_; }

    /// True once the CRC delimiter checked out and the next bit is the ACK slot.
    bool awaiting_ack_slot() const noexcept
    {
        return status_ == Status::in_progress && stage_ == Stage::ack_slot;
    }

    /// CRC mismatch is known right after the last CRC bit; reported at the delimiter.
    bool crc_failed() const noexcept { return crc_mismatch_; }

    bool acked() const noexcept { return acked_; }
    std::size_t consumed() const noexcept { return consumed_; }

    /// Decoded frame; only meaningful once status() == complete.
    Frame frame() const
    {
        return Frame(extended_ ? IdKind::extended : IdKind::standard, id_,
                     std::span<const std::uint8_t>(data_.data(), dlc_));
    }

private:
    enum class Stage { stuffed, crc_delim, ack_slot, ack_delim, eof };

    void fail(DecodeError e)
    {
        status_ = Status::failed;
        if (!error_) error_ = e;
    }

    void push_stuffed(Bit b)
    {
        switch (destuffer_.push(b)) {
        case Destuffer::Result::error: fail(DecodeError::stuff); return;
        case Destuffer::Result::stuff:
            if (fields_done_) stage_ = Stage::crc_delim;
            return;
        case Destuffer::Result::data: break;
        }
        on_data_bit(b);
        if (fields_done_ && !destuffer_.stuff_pending()) stage_ = Stage::crc_delim;
    }

    void on_data_bit(Bit b)
    {
        const std::size_t i = index_++;
        const unsigned v = b == Bit::recessive ? 1u : 0u;
        if (crc_start_ == 0 || i < crc_start_) header_.push_back(b);

        if (i == 0) {
            if (b != Bit::dominant) fail(DecodeError::form);
            return;
        }
        if (i <= 11) {
            id_ = (id_ << 1) | v;
            return;
        }
        if (i == 12) {  // RTR (standard) or SRR (extended); resolved at IDE
            bit12_ = b;
            return;
        }
        if (i == 13) {
            extended_ = b == Bit::recessive;
            if (!extended_ && bit12_ != Bit::dominant) fail(DecodeError::form);  // remote frame
            if (extended_ && bit12_ != Bit::recessive) fail(DecodeError::form);  // SRR must be recessive
            return;
        }
        const std::size_t control = extended_ ? 33 : 14;  // first reserved bit
        if (extended_ && i < 32) {
            id_ = (id_ << 1) | v;
            return;
        }
        if (extended_ && i == 32) {
            if (b != Bit::dominant) fail(DecodeError::form);  // remote frame
            return;
        }
        const std::size_t dlc_start = extended_ ? 35 : 15;
        if (i >= control && i < dlc_start) {
            if (b != Bit::dominant) fail(DecodeError::form);
            return;
        }
        if (i < dlc_start + 4) {
            dlc_ = static_cast<std::uint8_t>((dlc_ << 1) | v);
            if (i == dlc_start + 3) {
                if (dlc_ > kMaxDlc) {
                    fail(DecodeError::form);
                    return;
                }
                crc_start_ = dlc_start + 4 + 8u * dlc_;
            }
            return;
        }
        if (i < crc_start_) {
            const std::size_t bit = i - (dlc_start + 4);
            data_[bit / 8] = static_cast<std::uint8_t>((data_[bit / 8] << 1) | v);
            return;
        }
        // CRC field
        crc_value_ = static_cast<std::uint16_t>((crc_value_ << 1) | v);
        if (++crc_seen_ == 15) {
            fields_done_ = true;
            crc_mismatch_ = crc_value_ != crc15(header_);
        }
    }

    Status status_ = Status::in_progress;
    std::optional<DecodeError> error_;
    Stage stage_ = Stage::stuffed;
    Destuffer destuffer_;
    Bitstream header_;
    std::size_t crc_start_ = 0;
    std::size_t crc_seen_ = 0;
    std::size_t index_ = 0;  // unstuffed bits seen
    std::uint16_t crc_value_ = 0;
    bool fields_done_ = false;
    bool crc_mismatch_ = false;
    bool extended_ = false;
    bool acked_ = false;
    Bit bit12_ = Bit::dominant;
    std::uint32_t id_ = 0;
    std::uint8_t dlc_ = 0;
    std::array<std::uint8_t, kMaxDlc> data_{};
    std::size_t eof_seen_ = 0;
    std::size_t consumed_ = 0;
};

struct DecodeResult {
    std::optional<Frame> frame;
    std::optional<DecodeError> error;
    std::size_t bit_index = 0;  // stuffed index where decoding stopped

    explicit operator bool() const noexcept { return frame.has_value(); }
};

/// Decodes exactly one frame; trailing bits after EOF are a form error.
inline DecodeResult deserialize_frame(std::span<const Bit> bits)
{
    FrameDecoder dec;
    DecodeResult r;
    for (std::size_t i = 0; i < bits.size(); ++i) {
        const auto st = dec.push(bits[i]);
        if (st == FrameDecoder::Status::failed) {
            r.error = dec.error();
            r.bit_index = i;
            return r;
        }
        if (st == FrameDecoder::Status::complete) {
            if (i + 1 != bits.size()) {
                r.error = DecodeError::form;
                r.bit_index = i + 1;
                return r;
            }
            r.frame = dec.frame();
            r.bit_index = i + 1;
            return r;
        }
    }
    r.error = DecodeError::truncated;
    r.bit_index = bits.size();
    return r;
}

// ---------------------------------------------------------------------------
// Text dump: 'D'/'R' per bit.

inline std::string to_string(std::span<const Bit> bits)
{
    std::string s;
    s.reserve(bits.size());
    for (Bit b : bits) s.push_back(b == Bit::dominant ? 'D' : 'R');
    return s;
}

/// Parses 'D'/'R' (or '0'/'1'); '|' and whitespace are skipped.
inline Bitstream parse_bits(std::string_view text)
{
    Bitstream out;
    for (char c : text) {
        if (c == 'D' || c == '0') out.push_back(Bit::dominant);
        else if (c == 'R' || c == '1') out.push_back(Bit::recessive);
        else if (c == '|' || c == ' ' || c == '\t' || c == '\n') continue;
        else throw Error(Errc::out_of_range, std::string("bad bit character '") + c + "'");
    }
    return out;
}

/// Stuffed frame with '|' between fields.
inline std::string dump_frame(const Frame& f)
{
    const auto layout = layout_frame(f);
    std::string s;
    std::size_t begin = 0;
    for (const auto& [field, end] : layout.fields) {
        if (begin != 0) s.push_back('|');
        s += to_string(std::span<const Bit>(layout.bits).subspan(begin, end - begin));
        begin = end;
    }
    return s;
}

}  // namespace cansim
