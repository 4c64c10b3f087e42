#pragma once

// Accident-avoidance application: the sensor node encodes readings into
// address+type frames, the host node turns received frames into warnings.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "cansim/error.hpp"
#include "cansim/frame.hpp"

namespace cansim {

enum class MessageKind : std::uint8_t {
    ack = 0x0,
    distance = 0x1,
    x_alcohol = 0x2,
    y_lane = 0x3,
    z_speed = 0x4,
    a_impact = 0x5,
};

inline const char* to_string(MessageKind k) noexcept
{
    switch (k) {
    case MessageKind::ack: return "ACK";
    case MessageKind::distance: return "DISTANCE";
    case MessageKind::x_alcohol: return "X";
    case MessageKind::y_lane: return "Y";
    case MessageKind::z_speed: return "Z";
    case MessageKind::a_impact: return "A";
    }
    return "?";
}

inline std::optional<MessageKind> message_kind_from_type_code(unsigned code) noexcept
{
    if (code <= static_cast<unsigned>(MessageKind::a_impact)) return static_cast<MessageKind>(code);
    return std::nullopt;
}

struct Location {
    double lat = 0.0;
    double lon = 0.0;

    friend bool operator==(const Location&, const Location&) = default;
};

enum class ActionKind : std::uint8_t { lcd_distance_warning, lcd_cannot_start, lcd_wrong_lane, buzzer_on, send_sms };

inline const char* to_string(ActionKind a) noexcept
{
    switch (a) {
    case ActionKind::lcd_distance_warning: return "LCD_DISTANCE_WARNING";
    case ActionKind::lcd_cannot_start: return "LCD_CANNOT_START";
    case ActionKind::lcd_wrong_lane: return "LCD_WRONG_LANE";
    case ActionKind::buzzer_on: return "BUZZER_ON";
    case ActionKind::send_sms: return "SEND_SMS";
    }
    return "?";
}

struct WarningAction {
    ActionKind kind = ActionKind::lcd_distance_warning;
    std::optional<Location> location;  // set for send_sms only

    friend bool operator==(const WarningAction&, const WarningAction&) = default;
};

struct SensorReadings {
    std::optional<double> echo_round_trip_s;  // absent: no echo returned
    bool alcohol = false;
    bool lane_departure = false;
    double speed_kmh = 0.0;
    bool impact = false;
};

struct NodeConfig {
    std::uint8_t tx_address = 0x1;
    std::uint8_t rx_address = 0x2;
    std::uint8_t backup = 0;  // D10-D8 of every application identifier
    double distance_warn_m = 0.5;
    double speed_limit_kmh = 80.0;
    Location location{19.1, 72.8};
    double sound_speed_m_s = 343.0;
};

constexpr std::uint16_t kNoEchoCentimeters = 0xFFFF;

inline double measure_distance(double echo_round_trip_s, const NodeConfig& cfg = {})
{
    if (echo_round_trip_s < 0) throw Error(Errc::out_of_range, "echo time must be non-negative");
    return cfg.sound_speed_m_s * echo_round_trip_s / 2.0;
}

namespace detail {

inline std::uint16_t to_u16(double value, double scale, const char* what)
{
    if (!(value >= 0)) throw Error(Errc::encoding_error, std::string(what) + " must be non-negative");
    // The epsilon keeps exact centimeter values from truncating one below.
    const double scaled = std::floor(value * scale + 1e-9);
    if (scaled > 65535.0) throw Error(Errc::encoding_error, std::string(what) + " overflows 16 bits");
    return static_cast<std::uint16_t>(scaled);
}

}  // namespace detail

/// DISTANCE: centimeters, 16-bit big-endian, truncated. Z: km/h, 16-bit.
/// X, Y and A carry no payload.
inline Frame encode_sensor_message(MessageKind kind, std::optional<double> value, const NodeConfig& cfg)
{
    const auto id = pack_scheme_id(cfg.backup, cfg.tx_address, static_cast<unsigned>(kind));
    switch (kind) {
    case MessageKind::distance: {
        const std::uint16_t cm = value ? detail::to_u16(*value, 100.0, "distance") : kNoEchoCentimeters;
        return Frame::standard(id, {static_cast<std::uint8_t>(cm >> 8), static_cast<std::uint8_t>(cm & 0xFF)});
    }
    case MessageKind::z_speed: {
        const std::uint16_t kmh = detail::to_u16(value.value_or(0.0), 1.0, "speed");
        return Frame::standard(id, {static_cast<std::uint8_t>(kmh >> 8), static_cast<std::uint8_t>(kmh & 0xFF)});
    }
    case MessageKind::x_alcohol:
    case MessageKind::y_lane:
    case MessageKind::a_impact: return Frame::standard(id);
    case MessageKind::ack: break;
    }
    throw Error(Errc::encoding_error, "the sensor node does not send ACK");
}

inline std::optional<double> decode_distance_m(const Frame& f)
{
    if (f.dlc() != 2) return std::nullopt;
    const unsigned cm = (unsigned(f.payload()[0]) << 8) | f.payload()[1];
    return cm / 100.0;
}

inline std::optional<double> decode_speed_kmh(const Frame& f)
{
    if (f.dlc() != 2) return std::nullopt;
    return static_cast<double>((unsigned(f.payload()[0]) << 8) | f.payload()[1]);
}

/// One pass of the sensor loop: DISTANCE, then the first of alcohol, lane,
/// over-speed, impact that holds.
inline std::vector<Frame> transmitter_tick(const SensorReadings& r, const NodeConfig& cfg)
{
    std::vector<Frame> out;
    const std::optional<double> distance =
        r.echo_round_trip_s ? std::optional<double>(measure_distance(*r.echo_round_trip_s, cfg)) : std::nullopt;
    out.push_back(encode_sensor_message(MessageKind::distance, distance, cfg));
    if (r.alcohol) {
        out.push_back(encode_sensor_message(MessageKind::x_alcohol, std::nullopt, cfg));
    } else if (r.lane_departure) {
        out.push_back(encode_sensor_message(MessageKind::y_lane, std::nullopt, cfg));
    } else if (r.speed_kmh > cfg.speed_limit_kmh) {
        out.push_back(encode_sensor_message(MessageKind::z_speed, r.speed_kmh, cfg));
    } else if (r.impact) {
        out.push_back(encode_sensor_message(MessageKind::a_impact, std::nullopt, cfg));
    }
    return out;
}

struct Dispatch {
    std::vector<WarningAction> actions;
    bool lockout = false;  // inhibit the sensor node
    bool unknown = false;  // unknown type code or malformed payload
};

inline Dispatch receiver_dispatch(const Frame& frame, const NodeConfig& cfg)
{
    Dispatch d;
    if (frame.is_extended()) {
        d.unknown = true;
        return d;
    }
    const auto kind = message_kind_from_type_code(unpack_scheme_id(frame.id()).type_code);
    if (!kind) {
        d.unknown = true;
        return d;
    }
    switch (*kind) {
    case MessageKind::distance: {
        const auto m = decode_distance_m(frame);
        if (!m) d.unknown = true;
        else if (*m < cfg.distance_warn_m) d.actions.push_back({ActionKind::lcd_distance_warning, std::nullopt});
        break;
    }
    case MessageKind::x_alcohol:
        d.actions.push_back({ActionKind::lcd_cannot_start, std::nullopt});
        d.lockout = true;
        break;
    case MessageKind::y_lane: d.actions.push_back({ActionKind::lcd_wrong_lane, std::nullopt}); break;
    case MessageKind::z_speed: d.actions.push_back({ActionKind::buzzer_on, std::nullopt}); break;
    case MessageKind::a_impact: d.actions.push_back({ActionKind::send_sms, cfg.location}); break;
    case MessageKind::ack: d.unknown = true; break;
    }
    return d;
}

/// Startup acknowledgment from the host node.
inline Frame receiver_ack(const NodeConfig& cfg)
{
    return Frame::standard(pack_scheme_id(cfg.backup, cfg.rx_address, static_cast<unsigned>(MessageKind::ack)));
}

// ---------------------------------------------------------------------------
// SMS outbox

struct SmsRecord {
    std::uint64_t slot = 0;
    Location location;

    std::string line() const
    {
        return fmt::format("slot={} lat={} lon={} text=\"Accident detected\"", slot, location.lat, location.lon);
    }
};

/// Append-only record store standing in for the GSM modem. With a path,
/// every record is also appended to that file as it is sent.
class SmsOutbox {
public:
    SmsOutbox() = default;

    explicit SmsOutbox(const std::filesystem::path& path) : file_(path, std::ios::app)
    {
        if (!file_) throw Error(Errc::store_unwritable, "cannot open SMS outbox " + path.string());
    }

    /// Returns false when `event_id` was already sent.
    bool send(std::uint64_t event_id, const Location& loc, std::uint64_t slot)
    {
        if (!sent_.insert(event_id).second) return false;
        records_.push_back({slot, loc});
        if (file_.is_open()) {
            file_ << records_.back().line() << '\n';
            file_.flush();
            if (!file_) throw Error(Errc::store_unwritable, "write to SMS outbox failed");
        }
        return true;
    }

    const std::vector<SmsRecord>& records() const noexcept { return records_; }

private:
    std::ofstream file_;
    std::set<std::uint64_t> sent_;
    std::vector<SmsRecord> records_;
};

}  // namespace cansim
