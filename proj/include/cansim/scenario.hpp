#pragma once

// Scenario files, the simulation loop and trace output.
//
// Scenario text is line oriented. `#` starts a comment. Sections:
//
//   [bus]        max_nodes <n> | termination_ohms <x> | dominant_threshold_volts <x>
//   [nodes]      transmitter <addr> | receiver <addr> | listener <node-id>
//   [thresholds] distance_warn_m <x> | speed_limit_kmh <x> | sound_speed_m_s <x>
//                tick_slots <n> | location <lat> <lon>
//   [policy]     policy fixed|muf|mts | horizon <slots> | seed <n>
//                muf_interval <frames> | loop_gain <x> | fault_jitter <slots>
//   [loops]      <addr> <setpoint> <output> <range> <period> <deadline> high|low
//   [events]     <slot> <target> <value>
//
// Event targets: echo <s>, alcohol|lane|impact <bool>, speed <km/h>,
// bitflip <slot offset into the next frame>, node_error <node-id>.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <fmt/format.h>

#include "cansim/bus.hpp"
#include "cansim/controller.hpp"
#include "cansim/error.hpp"
#include "cansim/frame.hpp"
#include "cansim/scheduling.hpp"
#include "cansim/vehicle.hpp"

namespace cansim {

enum class EventTarget : std::uint8_t { echo, alcohol, lane, speed, impact, bitflip, node_error };

inline const char* to_string(EventTarget t) noexcept
{
    switch (t) {
    case EventTarget::echo: return "echo";
    case EventTarget::alcohol: return "alcohol";
    case EventTarget::lane: return "lane";
    case EventTarget::speed: return "speed";
    case EventTarget::impact: return "impact";
    case EventTarget::bitflip: return "bitflip";
    case EventTarget::node_error: return "node_error";
    }
    return "?";
}

struct ScenarioEvent {
    std::uint64_t at_slot = 0;
    EventTarget target = EventTarget::echo;
    double value = 0.0;  // booleans as 0/1
};

struct LoopSpec {
    ControlLoop loop;
    TrafficClass cls = TrafficClass::low;
};

struct Scenario {
    BusConfig bus;
    NodeConfig vehicle;
    std::vector<std::uint16_t> listeners;
    std::vector<LoopSpec> loops;
    std::vector<ScenarioEvent> events;  // sorted by slot
    Policy policy = Policy::fixed;
    std::uint64_t horizon_slots = 10000;
    std::uint64_t seed = 0;
    std::uint32_t tick_slots = 100;
    std::uint32_t muf_interval = 1;
    double loop_gain = 0.5;
    std::uint32_t fault_jitter = 0;
};

class ScenarioError : public std::runtime_error {
public:
    enum class Kind { syntax, semantic };

    ScenarioError(Kind kind, std::size_t line, const std::string& what)
        : std::runtime_error(fmt::format("{} at line {}: {}", kind == Kind::syntax ? "syntax-error" : "semantic-error",
                                         line, what)),
          kind_(kind), line_(line)
    {
    }

    Kind kind() const noexcept { return kind_; }
    std::size_t line() const noexcept { return line_; }

private:
    Kind kind_;
    std::size_t line_;
};

namespace detail {

inline std::vector<std::string_view> split_ws(std::string_view s)
{
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < s.size()) {
        while (i < s.size() && (s[i] == ' ' || s[i] == '\t' || s[i] == '\r')) ++i;
        std::size_t j = i;
        while (j < s.size() && !(s[j] == ' ' || s[j] == '\t' || s[j] == '\r')) ++j;
        if (j > i) out.push_back(s.substr(i, j - i));
        i = j;
    }
    return out;
}

class LineParser {
public:
    LineParser(std::size_t line, std::vector<std::string_view> tok) : line_(line), tok_(std::move(tok)) {}

    [[noreturn]] void syntax(const std::string& what) const
    {
        throw ScenarioError(ScenarioError::Kind::syntax, line_, what);
    }
    [[noreturn]] void semantic(const std::string& what) const
    {
        throw ScenarioError(ScenarioError::Kind::semantic, line_, what);
    }

    void arity(std::size_t n) const
    {
        if (tok_.size() != n) syntax(fmt::format("'{}' expects {} value(s)", tok_[0], n - 1));
    }

    std::string_view word(std::size_t i) const { return tok_.at(i); }

    double number(std::size_t i) const
    {
        const auto s = tok_.at(i);
        double v = 0;
        const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc() || p != s.data() + s.size()) syntax(fmt::format("'{}' is not a number", s));
        return v;
    }

    std::int64_t integer(std::size_t i) const
    {
        const auto s = tok_.at(i);
        std::int64_t v = 0;
        int base = 10;
        std::string_view digits = s;
        if (digits.size() > 2 && digits[0] == '0' && (digits[1] == 'x' || digits[1] == 'X')) {
            base = 16;
            digits.remove_prefix(2);
        }
        const auto [p, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), v, base);
        if (ec != std::errc() || p != digits.data() + digits.size()) {
            syntax(fmt::format("'{}' is not an integer", s));
        }
        return v;
    }

    double positive(std::size_t i) const
    {
        const double v = number(i);
        if (!(v > 0)) semantic(fmt::format("'{}' must be positive", tok_[0]));
        return v;
    }

    std::uint64_t non_negative(std::size_t i) const
    {
        const auto v = integer(i);
        if (v < 0) semantic(fmt::format("'{}' must be non-negative", tok_.at(i)));
        return static_cast<std::uint64_t>(v);
    }

    std::uint8_t address(std::size_t i) const
    {
        const auto v = integer(i);
        if (v < 0 || v > 0xF) semantic(fmt::format("address {} does not fit 4 bits", v));
        return static_cast<std::uint8_t>(v);
    }

    std::optional<bool> boolean(std::size_t i) const
    {
        const auto s = tok_.at(i);
        if (s == "true" || s == "1" || s == "on") return true;
        if (s == "false" || s == "0" || s == "off") return false;
        return std::nullopt;
    }

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
    std::vector<std::string_view> tok_;
};

}  // namespace detail

inline Scenario parse_scenario(std::string_view text)
{
    Scenario sc;
    std::optional<std::uint8_t> tx;
    std::optional<std::uint8_t> rx;
    std::string section;
    std::size_t line_no = 0;
    std::size_t tx_line = 0;

    // node id -> line where it was declared
    std::map<std::uint16_t, std::size_t> ids;
    auto claim = [&](const detail::LineParser& lp, std::uint16_t id) {
        if (!ids.emplace(id, lp.line()).second) {
            lp.semantic(fmt::format("duplicate node address {} (first declared at line {})", id, ids[id]));
        }
    };

    while (!text.empty()) {
        ++line_no;
        const auto nl = text.find('\n');
        std::string_view line = text.substr(0, nl);
        text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        auto tok = detail::split_ws(line);
        if (tok.empty()) continue;

        if (tok[0].front() == '[') {
            if (tok.size() != 1 || tok[0].back() != ']') {
                throw ScenarioError(ScenarioError::Kind::syntax, line_no, "malformed section header");
            }
            section = std::string(tok[0].substr(1, tok[0].size() - 2));
            static const std::set<std::string> known{"bus", "nodes", "thresholds", "policy", "loops", "events"};
            if (!known.count(section)) {
                throw ScenarioError(ScenarioError::Kind::syntax, line_no, "unknown section [" + section + "]");
            }
            continue;
        }

        const detail::LineParser lp(line_no, tok);
        const std::string key(tok[0]);
        if (section.empty()) lp.syntax("entry outside of any section");

        if (section == "bus") {
            lp.arity(2);
            if (key == "max_nodes") {
                sc.bus.max_nodes = static_cast<std::size_t>(lp.non_negative(1));
                if (sc.bus.max_nodes == 0) lp.semantic("max_nodes must be positive");
            } else if (key == "termination_ohms") {
                sc.bus.termination_ohms = lp.positive(1);
            } else if (key == "dominant_threshold_volts") {
                sc.bus.dominant_threshold_volts = lp.positive(1);
            } else {
                lp.syntax("unknown key '" + key + "'");
            }
        } else if (section == "nodes") {
            lp.arity(2);
            if (key == "transmitter") {
                if (tx) lp.semantic("second transmitter");
                tx = lp.address(1);
                tx_line = line_no;
                claim(lp, *tx);
            } else if (key == "receiver") {
                if (rx) lp.semantic("second receiver");
                rx = lp.address(1);
                claim(lp, *rx);
            } else if (key == "listener") {
                const auto id = lp.integer(1);
                if (id < 0 || id > 0xFFFF) lp.semantic("listener id must fit 16 bits");
                claim(lp, static_cast<std::uint16_t>(id));
                sc.listeners.push_back(static_cast<std::uint16_t>(id));
            } else {
                lp.syntax("unknown key '" + key + "'");
            }
        } else if (section == "thresholds") {
            if (key == "location") {
                lp.arity(3);
                sc.vehicle.location = {lp.number(1), lp.number(2)};
                continue;
            }
            lp.arity(2);
            if (key == "distance_warn_m") sc.vehicle.distance_warn_m = lp.positive(1);
            else if (key == "speed_limit_kmh") sc.vehicle.speed_limit_kmh = lp.positive(1);
            else if (key == "sound_speed_m_s") sc.vehicle.sound_speed_m_s = lp.positive(1);
            else if (key == "tick_slots") {
                const auto v = lp.non_negative(1);
                if (v == 0 || v > 0xFFFFFFFFu) lp.semantic("tick_slots must be in [1, 2^32)");
                sc.tick_slots = static_cast<std::uint32_t>(v);
            } else lp.syntax("unknown key '" + key + "'");
        } else if (section == "policy") {
            lp.arity(2);
            if (key == "policy") {
                const auto p = parse_policy(lp.word(1));
                if (!p) lp.semantic("policy must be fixed, muf or mts");
                sc.policy = *p;
            } else if (key == "horizon") {
                sc.horizon_slots = lp.non_negative(1);
            } else if (key == "seed") {
                sc.seed = lp.non_negative(1);
            } else if (key == "muf_interval") {
                const auto v = lp.non_negative(1);
                if (v == 0) lp.semantic("muf_interval must be positive");
                sc.muf_interval = static_cast<std::uint32_t>(v);
            } else if (key == "loop_gain") {
                sc.loop_gain = lp.number(1);
                if (sc.loop_gain < 0 || sc.loop_gain > 1) lp.semantic("loop_gain must be in [0, 1]");
            } else if (key == "fault_jitter") {
                sc.fault_jitter = static_cast<std::uint32_t>(lp.non_negative(1));
            } else {
                lp.syntax("unknown key '" + key + "'");
            }
        } else if (section == "loops") {
            lp.arity(7);
            LoopSpec ls;
            ls.loop.address = lp.address(0);
            claim(lp, ls.loop.address);
            ls.loop.setpoint = lp.number(1);
            ls.loop.output = lp.number(2);
            ls.loop.range = lp.positive(3);
            const auto period = lp.non_negative(4);
            const auto deadline = lp.non_negative(5);
            if (period == 0 || deadline == 0) lp.semantic("period and deadline must be at least one slot");
            ls.loop.period_slots = static_cast<std::uint32_t>(period);
            ls.loop.deadline_slots = static_cast<std::uint32_t>(deadline);
            if (lp.word(6) == "high") ls.cls = TrafficClass::high;
            else if (lp.word(6) == "low") ls.cls = TrafficClass::low;
            else lp.syntax("loop class must be high or low");
            sc.loops.push_back(ls);
        } else if (section == "events") {
            lp.arity(3);
            ScenarioEvent ev;
            const auto slot = lp.integer(0);
            if (slot < 0) lp.semantic("event slot must be non-negative");
            ev.at_slot = static_cast<std::uint64_t>(slot);
            const auto target = lp.word(1);
            auto as_bool = [&] {
                const auto b = lp.boolean(2);
                if (!b) lp.semantic(fmt::format("'{}' expects a boolean", target));
                return *b ? 1.0 : 0.0;
            };
            if (target == "echo") {
                ev.target = EventTarget::echo;
                ev.value = lp.number(2);
                if (ev.value < 0) lp.semantic("echo time must be non-negative");
            } else if (target == "alcohol") {
                ev.target = EventTarget::alcohol;
                ev.value = as_bool();
            } else if (target == "lane") {
                ev.target = EventTarget::lane;
                ev.value = as_bool();
            } else if (target == "impact") {
                ev.target = EventTarget::impact;
                ev.value = as_bool();
            } else if (target == "speed") {
                ev.target = EventTarget::speed;
                ev.value = lp.number(2);
                if (ev.value < 0) lp.semantic("speed must be non-negative");
            } else if (target == "bitflip") {
                ev.target = EventTarget::bitflip;
                ev.value = static_cast<double>(lp.non_negative(2));
            } else if (target == "node_error") {
                ev.target = EventTarget::node_error;
                const auto id = lp.integer(2);
                if (id < 0 || id > 0xFFFF) lp.semantic("node_error expects a node id");
                ev.value = static_cast<double>(id);
            } else {
                lp.syntax(fmt::format("unknown event target '{}'", target));
            }
            sc.events.push_back(ev);
        }
    }

    if (!tx || !rx) {
        throw ScenarioError(ScenarioError::Kind::semantic, line_no, "scenario needs one transmitter and one receiver");
    }
    sc.vehicle.tx_address = *tx;
    sc.vehicle.rx_address = *rx;
    if (ids.size() > sc.bus.max_nodes) {
        throw ScenarioError(ScenarioError::Kind::semantic, tx_line,
                            fmt::format("{} nodes exceed the bus limit of {}", ids.size(), sc.bus.max_nodes));
    }
    for (const auto& ev : sc.events) {
        if (ev.target == EventTarget::node_error && !ids.count(static_cast<std::uint16_t>(ev.value))) {
            throw ScenarioError(ScenarioError::Kind::semantic, line_no,
                                fmt::format("node_error names unknown node {}", ev.value));
        }
    }
    std::stable_sort(sc.events.begin(), sc.events.end(),
                     [](const ScenarioEvent& a, const ScenarioEvent& b) { return a.at_slot < b.at_slot; });
    return sc;
}

// ---------------------------------------------------------------------------
// Trace

enum class TraceSource : std::uint8_t { node, action, status, policy, log };

struct TraceRecord {
    std::uint64_t slot = 0;
    TraceSource source = TraceSource::node;
    std::string text;  // everything after the slot column

    std::string line() const { return fmt::format("{}  {}", slot, text); }
};

inline std::string format_payload(std::span<const std::uint8_t> payload)
{
    if (payload.empty()) return "-";
    std::string s;
    for (auto b : payload) s += fmt::format("{:02X}", b);
    return s;
}

inline std::string format_id(const Frame& f)
{
    return f.is_extended() ? fmt::format("{:08X}", f.id()) : fmt::format("{:03X}", f.id());
}

/// `time_slot  node_addr  id(hex)  dlc  payload(hex)  event`
inline TraceRecord frame_record(std::uint64_t slot, NodeId node, const Frame& f, BusEvent ev)
{
    return {slot, TraceSource::node,
            fmt::format("{}  {}  {}  {}  {}", node.value, format_id(f), f.dlc(), format_payload(f.payload()),
                        to_string(ev))};
}

inline void emit_trace(std::span<const TraceRecord> records, std::ostream& out)
{
    std::uint64_t last = 0;
    for (const auto& r : records) {
        if (r.slot < last) {
            throw Error(Errc::internal_error, fmt::format("trace record at slot {} follows slot {}", r.slot, last));
        }
        last = r.slot;
    }
    for (const auto& r : records) out << r.line() << '\n';
    out.flush();
    if (!out) throw Error(Errc::store_unwritable, "trace destination rejected the write");
}

inline void emit_trace(std::span<const TraceRecord> records, const std::filesystem::path& path)
{
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error(Errc::store_unwritable, "cannot open trace file " + path.string());
    emit_trace(records, out);
}

// ---------------------------------------------------------------------------
// Simulation

struct RunStats {
    std::uint64_t windows = 0;
    std::uint64_t frames_ok = 0;
    std::uint64_t error_windows = 0;
    std::uint64_t arbitration_losses = 0;
    std::uint64_t dropped_frames = 0;  // sensor frames refused by a full software queue
    std::uint64_t end_slot = 0;
};

struct RunResult {
    std::vector<TraceRecord> trace;
    std::vector<SmsRecord> outbox;
    RunStats stats;
    std::uint64_t bus_digest = 0;  // FNV-1a over every window's start slot and line levels
};

namespace detail {

enum class Role : std::uint8_t { transmitter, receiver, loop, listener };

constexpr std::size_t kSensorQueueDepth = 8;
constexpr std::uint8_t kLoopBackupFixed = 0x1;
constexpr std::uint8_t kVehicleBackupPolicy = 0x7;

struct SimNode {
    NodeId id;
    Role role = Role::listener;
    Controller ctrl;
    std::deque<Frame> queue;
    std::optional<std::size_t> loop;  // index into Simulation::loops_
    ErrorState last_state = ErrorState::active;
    bool bit_error_armed = false;
};

class Simulation {
public:
    Simulation(const Scenario& sc, SmsOutbox& outbox) : sc_(sc), outbox_(outbox), bus_(sc.bus), rng_(sc.seed)
    {
        cfg_ = sc.vehicle;
        cfg_.backup = sc.policy == Policy::fixed ? 0 : kVehicleBackupPolicy;
        for (const auto& l : sc.loops) loops_.push_back(l.loop);

        add_node(cfg_.tx_address, Role::transmitter);
        add_node(cfg_.rx_address, Role::receiver);
        for (std::size_t i = 0; i < sc.loops.size(); ++i) add_node(sc.loops[i].loop.address, Role::loop).loop = i;
        for (auto id : sc.listeners) add_node(id, Role::listener);
        std::sort(nodes_.begin(), nodes_.end(), [](const SimNode& a, const SimNode& b) { return a.id < b.id; });

        // Sensor node listens for the host's address, host for the sensor's.
        configure_peer_filter(node(Role::transmitter).ctrl, cfg_.rx_address);
        configure_peer_filter(node(Role::receiver).ctrl, cfg_.tx_address);

        next_release_.assign(loops_.size(), 0);
        if (!loops_.empty()) {
            rms_codes_ = rms_rank_codes(loops_);
            if (sc.policy == Policy::muf) assignment_ = muf_update(loops_);
        }
    }

    RunResult run()
    {
        if (!loops_.empty() && sc_.policy != Policy::fixed) record_policy(0);
        enqueue(node(Role::receiver), receiver_ack(cfg_));

        std::uint64_t slot = 0;
        while (slot <= sc_.horizon_slots) {
            advance_to(slot);
            std::vector<Contender> contenders;
            std::vector<SimNode*> senders;
            std::vector<NodeId> silent;
            for (auto& n : nodes_) {
                if (n.ctrl.state() == ErrorState::bus_off) {
                    silent.push_back(n.id);
                    continue;
                }
                if (const auto idx = n.ctrl.start_transmission()) {
                    contenders.push_back({n.id, *n.ctrl.tx(*idx).frame});
                    senders.push_back(&n);
                }
            }
            if (contenders.empty()) {
                const auto next = next_activity();
                if (!next || *next > sc_.horizon_slots) break;
                slot = std::max(*next, slot + 1);
                continue;
            }

            FaultPlan faults;
            if (flip_armed_) faults.receiver_flip_slot = static_cast<std::size_t>(*flip_armed_);
            for (auto* s : senders) {
                if (s->bit_error_armed) {
                    faults.transmitter_bit_error = s->id;
                    break;
                }
            }

            auto report = transmit_frame(bus_, contenders, silent, faults);
            const std::uint64_t end = slot + report.frame_slots - 1;
            if (end > sc_.horizon_slots) break;
            flip_armed_.reset();
            if (faults.transmitter_bit_error && report.error == WindowError::bit && report.winner &&
                contenders[*report.winner].node == *faults.transmitter_bit_error) {
                find(*faults.transmitter_bit_error)->bit_error_armed = false;
            }

            digest(slot, report.line);
            advance_to(end - 1);
            apply(slot, end, contenders, senders, report);
            stats_.end_slot = end;
            slot += report.idle_after;
        }

        RunResult r;
        r.trace = std::move(trace_);
        r.outbox = outbox_.records();
        r.stats = stats_;
        r.bus_digest = digest_;
        return r;
    }

private:
    // -- setup ---------------------------------------------------------------

    SimNode& add_node(std::uint16_t id, Role role)
    {
        bus_.attach(NodeId{id});
        SimNode n;
        n.id = NodeId{id};
        n.role = role;
        n.ctrl.reject_all();
        nodes_.push_back(std::move(n));
        return nodes_.back();
    }

    void configure_peer_filter(Controller& c, std::uint8_t peer)
    {
        auto& bank = c.filters();
        const std::uint32_t value = pack_scheme_id(cfg_.backup, peer, 0);
        bank.masks = {0x7F0, 0x7F0};
        for (auto& f : bank.filters) f = {value, false};
        c.set_rx_mode(0, RxMode::filtered);
        c.set_rx_mode(1, RxMode::filtered);
    }

    SimNode& node(Role role)
    {
        for (auto& n : nodes_) {
            if (n.role == role) return n;
        }
        throw Error(Errc::internal_error, "missing node role");
    }

    SimNode* find(NodeId id)
    {
        for (auto& n : nodes_) {
            if (n.id == id) return &n;
        }
        return nullptr;
    }

    // -- scheduled activity ----------------------------------------------------

    std::optional<std::uint64_t> next_activity() const
    {
        std::optional<std::uint64_t> t;
        auto take = [&](std::uint64_t v) {
            if (!t || v < *t) t = v;
        };
        if (next_event_ < sc_.events.size()) take(sc_.events[next_event_].at_slot);
        if (next_tick_) take(*next_tick_);
        for (auto r : next_release_) take(r);
        return t;
    }

    void advance_to(std::uint64_t limit)
    {
        for (;;) {
            const auto t = next_activity();
            if (!t || *t > limit) break;
            while (next_event_ < sc_.events.size() && sc_.events[next_event_].at_slot == *t) {
                apply_event(sc_.events[next_event_++]);
            }
            if (next_tick_ == *t) {
                tick(*t);
                next_tick_ = locked_out_ ? std::nullopt : std::optional<std::uint64_t>(*t + sc_.tick_slots);
            }
            for (std::size_t i = 0; i < loops_.size(); ++i) {
                if (next_release_[i] == *t) {
                    release(i, *t);
                    next_release_[i] = *t + loops_[i].period_slots;
                }
            }
        }
        for (auto& n : nodes_) refill(n);
    }

    void apply_event(const ScenarioEvent& ev)
    {
        switch (ev.target) {
        case EventTarget::echo: readings_.echo_round_trip_s = ev.value; break;
        case EventTarget::alcohol: readings_.alcohol = ev.value != 0; break;
        case EventTarget::lane: readings_.lane_departure = ev.value != 0; break;
        case EventTarget::speed: readings_.speed_kmh = ev.value; break;
        case EventTarget::impact: readings_.impact = ev.value != 0; break;
        case EventTarget::bitflip: {
            std::uint64_t jitter = 0;
            if (sc_.fault_jitter > 0) jitter = rng_() % (std::uint64_t{sc_.fault_jitter} + 1);
            flip_armed_ = static_cast<std::uint64_t>(ev.value) + jitter;
            break;
        }
        case EventTarget::node_error:
            if (auto* n = find(NodeId{static_cast<std::uint16_t>(ev.value)})) n->bit_error_armed = true;
            break;
        }
    }

    void tick(std::uint64_t)
    {
        if (locked_out_) return;
        auto& tx = node(Role::transmitter);
        for (const auto& f : transmitter_tick(readings_, cfg_)) {
            if (tx.queue.size() >= kSensorQueueDepth) {
                ++stats_.dropped_frames;
                continue;
            }
            tx.queue.push_back(f);
            if (unpack_scheme_id(f.id()).type_code == static_cast<unsigned>(MessageKind::a_impact)) {
                readings_.impact = false;  // one A frame per impact
            }
        }
    }

    std::uint16_t loop_identifier(std::size_t i, std::uint64_t now) const
    {
        const auto& l = loops_[i];
        switch (sc_.policy) {
        case Policy::fixed: return pack_scheme_id(kLoopBackupFixed, l.address, 0);
        case Policy::muf: return assignment_.ids.at(l.address);
        case Policy::mts:
            if (sc_.loops[i].cls == TrafficClass::high) {
                return mts_encode(TrafficClass::high, static_cast<std::int64_t>(now + l.deadline_slots), l.address,
                                  static_cast<std::int64_t>(now));
            }
            return mts_encode(TrafficClass::low, rms_codes_.at(l.address), l.address, 0);
        }
        return 0;
    }

    Frame loop_frame(std::size_t i, std::uint16_t id) const
    {
        const double scaled = std::clamp(loops_[i].output * 100.0, -32768.0, 32767.0);
        const auto raw = static_cast<std::uint16_t>(static_cast<std::int16_t>(scaled));
        return Frame::standard(id, {static_cast<std::uint8_t>(raw >> 8), static_cast<std::uint8_t>(raw & 0xFF)});
    }

    void release(std::size_t i, std::uint64_t now)
    {
        auto& n = *find(NodeId{loops_[i].address});
        if (n.ctrl.tx(0).txreq || n.ctrl.state() == ErrorState::bus_off) return;  // overrun: previous still pending
        n.ctrl.load_tx_buffer(0, loop_frame(i, loop_identifier(i, now)));
        n.ctrl.request_to_send(RtsPath::rts_command, {0});
    }

    void refill(SimNode& n)
    {
        while (!n.queue.empty()) {
            std::optional<std::size_t> free;
            for (std::size_t i = 0; i < kTxBuffers; ++i) {
                if (!n.ctrl.tx(i).txreq) {
                    free = i;
                    break;
                }
            }
            if (!free) return;
            n.ctrl.load_tx_buffer(*free, n.queue.front());
            n.ctrl.request_to_send(RtsPath::rts_command, {*free});
            n.queue.pop_front();
        }
    }

    void enqueue(SimNode& n, const Frame& f)
    {
        n.queue.push_back(f);
        refill(n);
    }

    // -- window results ----------------------------------------------------------

    void apply(std::uint64_t start, std::uint64_t end, const std::vector<Contender>& contenders,
               const std::vector<SimNode*>& senders, const TransmitReport& report)
    {
        ++stats_.windows;
        if (report.error) ++stats_.error_windows;

        // Frame on the wire for participants that were receiving.
        const Frame& wire = contenders[report.winner.value_or(0)].frame;

        std::vector<std::pair<SimNode*, Frame>> accepted;
        for (const auto& r : report.reports) {
            SimNode* n = find(r.node);
            auto sender = std::find(senders.begin(), senders.end(), n);
            const std::uint64_t at = start + r.slot;
            if (sender != senders.end()) {
                const Frame& own = contenders[static_cast<std::size_t>(sender - senders.begin())].frame;
                switch (r.event) {
                case BusEvent::arb_lost:
                    ++stats_.arbitration_losses;
                    n->ctrl.on_tx_result(TxOutcome::arbitration_lost);
                    trace_.push_back(frame_record(at, n->id, own, r.event));
                    continue;
                case BusEvent::tx_ok:
                    ++stats_.frames_ok;
                    n->ctrl.on_tx_result(TxOutcome::success);
                    trace_.push_back(frame_record(at, n->id, own, r.event));
                    on_sent(*n, own);
                    continue;
                case BusEvent::no_ack:
                    n->ctrl.on_tx_result(TxOutcome::no_ack);
                    trace_.push_back(frame_record(at, n->id, own, r.event));
                    continue;
                case BusEvent::crc_err:
                case BusEvent::stuff_err:
                    if (n->ctrl.in_flight()) {
                        n->ctrl.on_tx_result(TxOutcome::bit_error);
                        trace_.push_back(frame_record(at, n->id, own, r.event));
                        continue;
                    }
                    break;  // lost arbitration earlier, now a receiver
                case BusEvent::rx_ok: break;
                }
            }
            switch (r.event) {
            case BusEvent::rx_ok:
                n->ctrl.on_rx_result(RxOutcome::success);
                if (const auto buf = n->ctrl.receive(wire)) {
                    trace_.push_back(frame_record(at, n->id, wire, r.event));
                    if (auto f = n->ctrl.read_rx(*buf)) accepted.emplace_back(n, *f);
                }
                break;
            case BusEvent::crc_err:
            case BusEvent::stuff_err:
            case BusEvent::no_ack:
                n->ctrl.on_rx_result(RxOutcome::error);
                trace_.push_back(frame_record(at, n->id, wire, r.event));
                if (const auto buf = n->ctrl.receive_erroneous()) n->ctrl.read_rx(*buf);
                break;
            default: break;
            }
        }

        for (auto& [n, f] : accepted) on_received(*n, f, start, end);

        for (auto& n : nodes_) {
            if (n.ctrl.state() != n.last_state) {
                n.last_state = n.ctrl.state();
                trace_.push_back({end, TraceSource::status, n.ctrl.status(n.id.value)});
            }
        }

        if (report.delivered && sc_.policy == Policy::muf && !loops_.empty() &&
            ++completions_ % sc_.muf_interval == 0) {
            reassign(end);
        }
    }

    void on_sent(SimNode& n, const Frame&)
    {
        if (n.role == Role::loop && n.loop) {
            auto& l = loops_[*n.loop];
            l.output += sc_.loop_gain * (l.setpoint - l.output);
        }
    }

    void on_received(SimNode& n, const Frame& f, std::uint64_t start, std::uint64_t end)
    {
        if (n.role == Role::transmitter) {
            const auto s = unpack_scheme_id(f.id());
            if (!f.is_extended() && s.address == cfg_.rx_address && s.type_code == static_cast<unsigned>(MessageKind::ack) &&
                !ack_seen_) {
                ack_seen_ = true;
                if (!locked_out_) next_tick_ = end + 1;
            }
            return;
        }
        if (n.role != Role::receiver) return;

        const auto d = receiver_dispatch(f, cfg_);
        if (d.unknown) {
            trace_.push_back({end, TraceSource::log,
                              fmt::format("{}  LOG  unknown-message id={}", n.id.value, format_id(f))});
            return;
        }
        for (const auto& a : d.actions) {
            std::string text = fmt::format("{}  ACTION  {}", n.id.value, to_string(a.kind));
            if (a.kind == ActionKind::send_sms) {
                text += fmt::format(" lat={} lon={}", a.location->lat, a.location->lon);
                outbox_.send(start, *a.location, end);  // one delivered A frame per impact
            }
            trace_.push_back({end, TraceSource::action, std::move(text)});
        }
        if (d.lockout) lock_out_transmitter();
    }

    void lock_out_transmitter()
    {
        if (locked_out_) return;
        locked_out_ = true;
        next_tick_.reset();
        auto& tx = node(Role::transmitter);
        tx.queue.clear();
        tx.ctrl.abort_all();
        tx.ctrl.clear_abat();
    }

    void reassign(std::uint64_t at)
    {
        auto next = muf_update(loops_);
        if (next == assignment_) return;
        assignment_ = std::move(next);
        record_policy(at);
        for (std::size_t i = 0; i < loops_.size(); ++i) {
            auto& n = *find(NodeId{loops_[i].address});
            const auto& b = n.ctrl.tx(0);
            const auto id = assignment_.ids.at(loops_[i].address);
            if (b.txreq && b.frame && b.frame->id() != id) {
                n.ctrl.abort(0);
                n.ctrl.load_tx_buffer(0, loop_frame(i, id));
                n.ctrl.request_to_send(RtsPath::register_write, {0});
            }
        }
    }

    void record_policy(std::uint64_t at)
    {
        std::string text = fmt::format("POLICY  {}", to_string(sc_.policy));
        for (std::size_t i = 0; i < loops_.size(); ++i) {
            const auto a = loops_[i].address;
            if (sc_.policy == Policy::muf) {
                text += fmt::format("  {}={:03X}", a, assignment_.ids.at(a));
            } else {
                text += fmt::format("  {}={}:{}", a, to_string(sc_.loops[i].cls),
                                    sc_.loops[i].cls == TrafficClass::high ? loops_[i].deadline_slots
                                                                           : rms_codes_.at(a));
            }
        }
        trace_.push_back({at, TraceSource::policy, std::move(text)});
    }

    void digest(std::uint64_t start, const Bitstream& line)
    {
        auto mix = [&](std::uint64_t v) {
            for (int i = 0; i < 8; ++i) {
                digest_ ^= (v >> (8 * i)) & 0xFF;
                digest_ *= 0x100000001b3ULL;
            }
        };
        mix(start);
        for (Bit b : line) {
            digest_ ^= static_cast<std::uint8_t>(b);
            digest_ *= 0x100000001b3ULL;
        }
    }

    const Scenario& sc_;
    SmsOutbox& outbox_;
    Bus bus_;
    NodeConfig cfg_;
    std::vector<SimNode> nodes_;
    std::vector<ControlLoop> loops_;
    std::vector<std::uint64_t> next_release_;
    std::map<std::uint8_t, unsigned> rms_codes_;
    PolicyAssignment assignment_;
    SensorReadings readings_;
    std::mt19937_64 rng_;
    std::size_t next_event_ = 0;
    std::optional<std::uint64_t> next_tick_;
    std::optional<std::uint64_t> flip_armed_;
    bool ack_seen_ = false;
    bool locked_out_ = false;
    std::uint64_t completions_ = 0;
    std::vector<TraceRecord> trace_;
    RunStats stats_;
    std::uint64_t digest_ = 0xcbf29ce484222325ULL;
};

}  // namespace detail

inline RunResult run(const Scenario& sc, SmsOutbox& outbox)
{
    return detail::Simulation(sc, outbox).run();
}

inline RunResult run(const Scenario& sc)
{
    SmsOutbox outbox;
    return run(sc, outbox);
}

}  // namespace cansim
