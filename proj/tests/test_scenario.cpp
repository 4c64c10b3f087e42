#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cansim/scenario.hpp"

using namespace cansim;

namespace {

std::string slurp(const std::filesystem::path& p)
{
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Scenario load(const std::string& name)
{
    return parse_scenario(slurp(std::filesystem::path(CANSIM_SCENARIO_DIR) / name));
}

std::string render(const RunResult& r)
{
    std::ostringstream out;
    emit_trace(r.trace, out);
    return out.str();
}

struct Fields {
    std::uint64_t slot;
    std::string node, id, event;
};

std::vector<Fields> frame_lines(const RunResult& r)
{
    std::vector<Fields> out;
    for (const auto& t : r.trace) {
        if (t.source != TraceSource::node) continue;
        std::istringstream in(t.text);
        std::string node, id, dlc, payload, event;
        in >> node >> id >> dlc >> payload >> event;
        out.push_back({t.slot, node, id, event});
    }
    return out;
}

std::size_t count_text(const RunResult& r, const std::string& needle)
{
    std::size_t n = 0;
    for (const auto& t : r.trace) n += t.text.find(needle) != std::string::npos;
    return n;
}

ScenarioError::Kind error_kind(const std::string& text)
{
    try {
        parse_scenario(text);
    } catch (const ScenarioError& e) {
        return e.kind();
    }
    ADD_FAILURE() << "no error for:\n" << text;
    return ScenarioError::Kind::syntax;
}

constexpr const char* kMinimal = "[nodes]\ntransmitter 1\nreceiver 2\n[events]\n100 alcohol true\n";

}  // namespace

TEST(Parse, MinimalScenarioGetsDefaults)
{
    const auto sc = parse_scenario(kMinimal);
    EXPECT_EQ(sc.vehicle.tx_address, 1);
    EXPECT_EQ(sc.vehicle.rx_address, 2);
    EXPECT_EQ(sc.vehicle.distance_warn_m, 0.5);
    EXPECT_EQ(sc.vehicle.speed_limit_kmh, 80.0);
    EXPECT_EQ(sc.bus.max_nodes, 112u);
    EXPECT_EQ(sc.policy, Policy::fixed);
    EXPECT_EQ(sc.tick_slots, 100u);
    ASSERT_EQ(sc.events.size(), 1u);
    EXPECT_EQ(sc.events[0].target, EventTarget::alcohol);
    EXPECT_EQ(sc.events[0].at_slot, 100u);
}

TEST(Parse, EventsAreSortedStably)
{
    const auto sc = parse_scenario("[nodes]\ntransmitter 1\nreceiver 2\n[events]\n"
                                   "50 speed 10\n10 speed 20\n50 speed 30\n");
    ASSERT_EQ(sc.events.size(), 3u);
    EXPECT_EQ(sc.events[0].value, 20);
    EXPECT_EQ(sc.events[1].value, 10);
    EXPECT_EQ(sc.events[2].value, 30);
}

TEST(Parse, SemanticErrors)
{
    EXPECT_EQ(error_kind("[nodes]\ntransmitter 1\nreceiver 1\n"), ScenarioError::Kind::semantic);
    EXPECT_EQ(error_kind("[nodes]\ntransmitter 1\nreceiver 2\n[events]\n-1 alcohol true\n"),
              ScenarioError::Kind::semantic);
    EXPECT_EQ(error_kind("[nodes]\ntransmitter 1\n"), ScenarioError::Kind::semantic);
    EXPECT_EQ(error_kind("[nodes]\ntransmitter 1\nreceiver 2\n[events]\n5 node_error 40\n"),
              ScenarioError::Kind::semantic);
    EXPECT_EQ(error_kind("[bus]\nmax_nodes 2\n[nodes]\ntransmitter 1\nreceiver 2\nlistener 3\n"),
              ScenarioError::Kind::semantic);
    EXPECT_EQ(error_kind("[nodes]\ntransmitter 17\nreceiver 2\n"), ScenarioError::Kind::semantic);
    EXPECT_EQ(error_kind("[nodes]\ntransmitter 1\nreceiver 2\n[loops]\n1 0 0 1 10 10 low\n"),
              ScenarioError::Kind::semantic);
}

TEST(Parse, SyntaxErrorsCarryLineNumbers)
{
    try {
        parse_scenario("[nodes]\ntransmitter 1\nreceiver 2\n\n[thresholds]\nbogus 3\n");
        FAIL();
    } catch (const ScenarioError& e) {
        EXPECT_EQ(e.kind(), ScenarioError::Kind::syntax);
        EXPECT_EQ(e.line(), 6u);
        EXPECT_NE(std::string(e.what()).find("line 6"), std::string::npos);
    }
    EXPECT_EQ(error_kind("transmitter 1\n"), ScenarioError::Kind::syntax);
    EXPECT_EQ(error_kind("[nodes\n"), ScenarioError::Kind::syntax);
    EXPECT_EQ(error_kind("[weather]\n"), ScenarioError::Kind::syntax);
    EXPECT_EQ(error_kind("[nodes]\ntransmitter 1\nreceiver 2\n[events]\n5 radar 1\n"), ScenarioError::Kind::syntax);
    EXPECT_EQ(error_kind("[nodes]\ntransmitter one\nreceiver 2\n"), ScenarioError::Kind::syntax);
}

TEST(Parse, CommentsAndBlankLinesIgnored)
{
    const auto sc = parse_scenario("# header\n\n[nodes]  \ntransmitter 3 # sensor\nreceiver 0x4\n");
    EXPECT_EQ(sc.vehicle.tx_address, 3);
    EXPECT_EQ(sc.vehicle.rx_address, 4);
}

TEST(Run, AlcoholLocksOutTransmitter)
{
    const auto r = run(load("alcohol.scn"));
    std::size_t x_frames = 0;
    std::optional<std::uint64_t> lockout;
    for (const auto& t : r.trace) {
        if (t.source == TraceSource::action && t.text.find("LCD_CANNOT_START") != std::string::npos) {
            lockout = t.slot;
        }
    }
    ASSERT_TRUE(lockout);
    for (const auto& f : frame_lines(r)) {
        if (f.node == "1" && f.id == "012" && f.event == "TX_OK") ++x_frames;
        if (f.node == "1" && f.slot > *lockout) {
            EXPECT_NE(f.event, "TX_OK") << f.slot;
            EXPECT_NE(f.event, "ARB_LOST") << f.slot;
        }
    }
    EXPECT_EQ(x_frames, 1u);
    EXPECT_EQ(count_text(r, "LCD_CANNOT_START"), 1u);
}

TEST(Run, ImpactSendsOneSms)
{
    const auto r = run(load("impact.scn"));
    ASSERT_EQ(r.outbox.size(), 1u);
    EXPECT_EQ(r.outbox[0].location, (Location{19.1, 72.8}));
    std::size_t a_frames = 0;
    for (const auto& f : frame_lines(r)) a_frames += (f.id == "015" && f.event == "RX_OK" && f.node == "2");
    EXPECT_EQ(a_frames, r.outbox.size());
    EXPECT_EQ(count_text(r, "SEND_SMS"), 1u);
}

TEST(Run, LaneAndSpeedWarnings)
{
    const auto lane = run(load("lane.scn"));
    EXPECT_GE(count_text(lane, "LCD_WRONG_LANE"), 1u);
    EXPECT_EQ(count_text(lane, "BUZZER_ON"), 0u);
    const auto speed = run(load("speed.scn"));
    EXPECT_GE(count_text(speed, "BUZZER_ON"), 1u);
    EXPECT_EQ(count_text(speed, "LCD_WRONG_LANE"), 0u);
}

TEST(Run, QuiescentBaseline)
{
    const auto r = run(load("quiescent.scn"));
    ASSERT_FALSE(r.trace.empty());
    const auto frames = frame_lines(r);
    ASSERT_EQ(frames.size(), r.trace.size());
    EXPECT_EQ(frames.front().id, "020");
    std::size_t distance = 0;
    for (const auto& f : frames) {
        EXPECT_TRUE(f.id == "020" || f.id == "011") << f.id;
        EXPECT_TRUE(f.event == "TX_OK" || f.event == "RX_OK") << f.event;
        distance += f.id == "011" && f.event == "TX_OK";
    }
    EXPECT_GE(distance, 5u);
    EXPECT_TRUE(r.outbox.empty());
}

TEST(Run, SensorLoopWaitsForAck)
{
    const auto frames = frame_lines(run(load("quiescent.scn")));
    std::uint64_t ack_done = 0;
    for (const auto& f : frames) {
        if (f.id == "020" && f.event == "TX_OK") ack_done = f.slot;
    }
    for (const auto& f : frames) {
        if (f.id == "011") {
            EXPECT_GT(f.slot, ack_done);
        }
    }
    std::size_t acks = 0;
    for (const auto& f : frames) acks += f.id == "020" && f.event == "TX_OK";
    EXPECT_EQ(acks, 1u);
}

TEST(Run, DeterministicAcrossRuns)
{
    for (const char* name : {"mixed.scn", "muf.scn", "mts.scn", "impact.scn"}) {
        const auto sc = load(name);
        const auto a = run(sc);
        const auto b = run(sc);
        EXPECT_EQ(render(a), render(b)) << name;
        EXPECT_EQ(a.bus_digest, b.bus_digest) << name;
        ASSERT_EQ(a.outbox.size(), b.outbox.size());
        for (std::size_t i = 0; i < a.outbox.size(); ++i) EXPECT_EQ(a.outbox[i].line(), b.outbox[i].line());
    }
}

TEST(Run, SeedOnlyMovesFaultTiming)
{
    auto sc = load("quiescent.scn");
    const auto a = run(sc);
    sc.seed = 99;
    sc.fault_jitter = 5;
    EXPECT_EQ(render(run(sc)), render(a));
}

TEST(Run, HorizonAndOrdering)
{
    for (const char* name : {"alcohol.scn", "impact.scn", "lane.scn", "speed.scn", "muf.scn", "mts.scn"}) {
        auto sc = load(name);
        const std::uint64_t full = sc.horizon_slots;
        for (std::uint64_t h : {std::uint64_t{0}, std::uint64_t{47}, std::uint64_t{333}, full}) {
            sc.horizon_slots = h;
            const auto r = run(sc);
            std::uint64_t last = 0;
            for (const auto& t : r.trace) {
                ASSERT_LE(t.slot, h) << name;
                ASSERT_GE(t.slot, last) << name;
                last = t.slot;
            }
        }
    }
}

TEST(Run, ActionsFollowTheirFrame)
{
    for (const char* name : {"alcohol.scn", "impact.scn", "lane.scn", "speed.scn", "mixed.scn"}) {
        const auto r = run(load(name));
        for (std::size_t i = 0; i < r.trace.size(); ++i) {
            if (r.trace[i].source != TraceSource::action) continue;
            bool found = false;
            for (std::size_t j = i; j-- > 0 && r.trace[j].slot == r.trace[i].slot;) {
                const auto& t = r.trace[j];
                if (t.source == TraceSource::node && t.text.rfind("2  ", 0) == 0 &&
                    t.text.find("RX_OK") != std::string::npos) {
                    found = true;
                }
            }
            ASSERT_TRUE(found) << name << " slot " << r.trace[i].slot << " " << r.trace[i].text;
        }
    }
}

TEST(Run, RepeatedNodeErrorsReachBusOff)
{
    // one armed fault per window keeps every retransmission failing
    std::string text = "[nodes]\ntransmitter 1\nreceiver 2\n[policy]\nhorizon 20000\n[events]\n";
    for (int i = 0; i < 200; ++i) text += std::to_string(200 + i * 40) + " node_error 1\n";
    const auto r = run(parse_scenario(text));
    EXPECT_GE(count_text(r, "node=1 state=passive"), 1u);
    EXPECT_EQ(count_text(r, "node=1 state=busoff"), 1u);
    std::optional<std::uint64_t> off;
    for (const auto& t : r.trace) {
        if (t.text.find("state=busoff") != std::string::npos) off = t.slot;
    }
    ASSERT_TRUE(off);
    for (const auto& f : frame_lines(r)) {
        if (f.node == "1" && f.slot > *off) {
            EXPECT_NE(f.event, "TX_OK");
        }
    }
}

TEST(Run, BitflipCorruptsOneWindow)
{
    const auto r = run(parse_scenario("[nodes]\ntransmitter 1\nreceiver 2\n[policy]\nhorizon 3000\n"
                                      "[events]\n0 echo 0.01\n500 bitflip 25\n"));
    std::size_t errors = 0;
    for (const auto& f : frame_lines(r)) errors += f.event == "CRC_ERR" || f.event == "STUFF_ERR";
    EXPECT_EQ(errors, 2u);
    EXPECT_EQ(r.stats.error_windows, 1u);
}

TEST(Run, MufScenarioRecordsAssignments)
{
    const auto r = run(load("muf.scn"));
    ASSERT_FALSE(r.trace.empty());
    EXPECT_EQ(r.trace.front().source, TraceSource::policy);
    EXPECT_GE(count_text(r, "POLICY  muf"), 2u);
}

TEST(Run, MixedScenarioScale)
{
    const auto r = run(load("mixed.scn"));
    EXPECT_GE(r.stats.frames_ok, 10000u);
    EXPECT_EQ(r.outbox.size(), 2u);
}

TEST(Run, FileBackedOutboxMatchesMemory)
{
    const auto path = std::filesystem::temp_directory_path() / "cansim_scenario_outbox.txt";
    std::filesystem::remove(path);
    RunResult r;
    {
        SmsOutbox box(path);
        r = run(load("impact.scn"), box);
    }
    const auto text = slurp(path);
    ASSERT_EQ(r.outbox.size(), 1u);
    EXPECT_EQ(text, r.outbox[0].line() + "\n");
    std::filesystem::remove(path);
}

TEST(EmitTrace, EmptyAndOutOfOrder)
{
    std::ostringstream out;
    emit_trace(std::vector<TraceRecord>{}, out);
    EXPECT_TRUE(out.str().empty());

    const std::vector<TraceRecord> bad{{10, TraceSource::log, "a"}, {5, TraceSource::log, "b"}};
    std::ostringstream sink;
    try {
        emit_trace(bad, sink);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::internal_error);
    }
    EXPECT_TRUE(sink.str().empty());
}

TEST(EmitTrace, FrameRecordFormat)
{
    const auto rec = frame_record(480, NodeId{1}, Frame::standard(0x011, {0x00, 0x22}), BusEvent::tx_ok);
    EXPECT_EQ(rec.line(), "480  1  011  2  0022  TX_OK");
    const auto ext = frame_record(7, NodeId{3}, Frame::extended(0x1ABCDEF), BusEvent::no_ack);
    EXPECT_EQ(ext.line(), "7  3  01ABCDEF  0  -  NO_ACK");
}

TEST(EmitTrace, UnwritableDestination)
{
    try {
        emit_trace(std::vector<TraceRecord>{}, std::filesystem::path("/nonexistent-dir/trace.txt"));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::store_unwritable);
    }
}
