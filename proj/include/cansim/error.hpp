#pragma once

#include <stdexcept>
#include <string>

namespace cansim {

enum class Errc {
    out_of_range,        // field does not fit its bit width
    encoding_error,      // application value not representable in a payload
    capacity_exceeded,   // bus roster full
    duplicate_address,   // node id / loop address already in use
    protocol_violation,  // identical identifiers contending
    buffer_busy,         // TX buffer has TXREQ set
    empty_buffer,        // RTS on a buffer with no frame
    store_unwritable,    // SMS outbox / trace sink failed
    internal_error,      // invariant breach
};

inline const char* to_string(Errc e) noexcept
{
    switch (e) {
    case Errc::out_of_range: return "out-of-range";
    case Errc::encoding_error: return "encoding-error";
    case Errc::capacity_exceeded: return "capacity-exceeded";
    case Errc::duplicate_address: return "duplicate-address";
    case Errc::protocol_violation: return "protocol-violation";
    case Errc::buffer_busy: return "buffer-busy";
    case Errc::empty_buffer: return "empty-buffer";
    case Errc::store_unwritable: return "store-unwritable";
    case Errc::internal_error: return "internal-error";
    }
    return "unknown";
}

/// Exception carrying a machine-checkable error code next to the message.
class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code)
    {
    }

    Errc code() const noexcept { return code_; }

private:
    Errc code_;
};

}  // namespace cansim
