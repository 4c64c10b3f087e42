#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <set>

#include "cansim/bus.hpp"
#include "support/oracles.hpp"

using namespace cansim;

namespace {

Bus bus_with(std::initializer_list<std::uint16_t> ids)
{
    Bus bus;
    for (auto id : ids) bus.attach(NodeId{id});
    return bus;
}

std::size_t count_event(const TransmitReport& r, BusEvent ev)
{
    return static_cast<std::size_t>(
        std::count_if(r.reports.begin(), r.reports.end(), [&](const NodeReport& n) { return n.event == ev; }));
}

}  // namespace

TEST(Levels, DifferentialThreshold)
{
    EXPECT_EQ(diff_to_logic(3.5, 1.5), Bit::dominant);
    EXPECT_EQ(diff_to_logic(2.5, 2.5), Bit::recessive);
    EXPECT_EQ(diff_to_logic(2.5, 1.4), Bit::recessive);
    EXPECT_EQ(diff_to_logic(2.5, 1.25), Bit::dominant);
    BusConfig exact;
    exact.dominant_threshold_volts = 1.0;
    // strictly greater: a difference equal to the threshold stays recessive
    EXPECT_EQ(diff_to_logic(2.0, 1.0, exact), Bit::recessive);
    EXPECT_DOUBLE_EQ(BusSample::nominal(Bit::dominant).v_diff(), 2.0);
    EXPECT_EQ(BusSample::from_voltages(3.5, 1.5).logic, Bit::dominant);
}

TEST(Roster, CapacityAndDuplicates)
{
    Bus bus;
    for (std::uint16_t i = 0; i < 112; ++i) ASSERT_NO_THROW(bus.attach(NodeId{i}));
    EXPECT_EQ(bus.size(), 112u);
    try {
        bus.attach(NodeId{200});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::capacity_exceeded);
    }
    Bus small;
    small.attach(NodeId{3});
    try {
        small.attach(NodeId{3});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::duplicate_address);
    }
}

TEST(Roster, SortedRegardlessOfOrder)
{
    const auto bus = bus_with({9, 2, 5});
    const auto r = bus.roster();
    EXPECT_TRUE(std::is_sorted(r.begin(), r.end()));
    EXPECT_TRUE(bus.contains(NodeId{5}));
    EXPECT_FALSE(bus.contains(NodeId{4}));
}

TEST(WiredAnd, Examples)
{
    const std::vector<Bit> a{Bit::dominant, Bit::recessive};
    const std::vector<Bit> b{Bit::recessive, Bit::recessive};
    const std::vector<Bit> c{Bit::dominant, Bit::dominant};
    EXPECT_EQ(resolve_slot(a), Bit::dominant);
    EXPECT_EQ(resolve_slot(b), Bit::recessive);
    EXPECT_EQ(resolve_slot(c), Bit::dominant);
    EXPECT_EQ(resolve_slot(std::vector<Bit>{}), Bit::recessive);
}

TEST(WiredAnd, CommutativeAndAssociative)
{
    const Bit v[] = {Bit::dominant, Bit::recessive};
    for (Bit x : v) {
        for (Bit y : v) {
            const std::vector<Bit> xy{x, y}, yx{y, x};
            EXPECT_EQ(resolve_slot(xy), resolve_slot(yx));
            for (Bit z : v) {
                const std::vector<Bit> left{resolve_slot(xy), z};
                const std::vector<Bit> yz{y, z};
                const std::vector<Bit> right{x, resolve_slot(yz)};
                const std::vector<Bit> all{x, y, z};
                EXPECT_EQ(resolve_slot(left), resolve_slot(right));
                EXPECT_EQ(resolve_slot(left), resolve_slot(all));
            }
        }
    }
}

TEST(Arbitration, LowerIdentifierWins)
{
    const std::vector<Frame> two{Frame::standard(0x012), Frame::standard(0x013)};
    const auto r = arbitrate(two);
    EXPECT_EQ(r.winner, 0u);
    ASSERT_EQ(r.losers.size(), 1u);
    EXPECT_EQ(r.losers[0].contender, 1u);

    const std::vector<Frame> three{Frame::standard(0x7FF), Frame::standard(0x000), Frame::standard(0x400)};
    EXPECT_EQ(arbitrate(three).winner, 1u);
}

TEST(Arbitration, LossSlotIsFirstDifferingIdentifierBit)
{
    // 0x012 and 0x013 differ only in the last identifier bit. SOF plus
    // eleven bits plus one stuff bit puts it at offset 12.
    const std::vector<Frame> two{Frame::standard(0x013), Frame::standard(0x012)};
    const auto r = arbitrate(two);
    EXPECT_EQ(r.winner, 1u);
    ASSERT_EQ(r.losers.size(), 1u);
    EXPECT_EQ(r.losers[0].slot, 12u);
}

TEST(Arbitration, IdenticalIdentifiersAreAProtocolViolation)
{
    const std::vector<Frame> dup{Frame::standard(0x100, {1}), Frame::standard(0x100, {2})};
    try {
        arbitrate(dup);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::protocol_violation);
    }
}

TEST(Arbitration, RandomSetsMatchOracleAndMinimum)
{
    std::mt19937_64 rng(11);
    for (int iter = 0; iter < 1000; ++iter) {
        const std::size_t n = 2 + rng() % 7;
        std::set<std::uint32_t> ids;
        while (ids.size() < n) ids.insert(static_cast<std::uint32_t>(rng() % kStandardIdLimit));
        std::vector<std::uint32_t> order(ids.begin(), ids.end());
        std::shuffle(order.begin(), order.end(), rng);
        std::vector<Frame> frames;
        for (auto id : order) {
            std::vector<std::uint8_t> data(rng() % 9);
            for (auto& b : data) b = static_cast<std::uint8_t>(rng());
            frames.push_back(Frame::standard(id, data));
        }
        const auto r = arbitrate(frames);
        ASSERT_EQ(r.winner, oracle::arbitration_winner(order));
        ASSERT_EQ(order[r.winner], *ids.begin());
        ASSERT_EQ(r.losers.size(), n - 1);
    }
}

TEST(Window, TwoContendersThreeListeners)
{
    const auto bus = bus_with({1, 2, 3, 4, 5});
    const std::vector<Contender> c{{NodeId{1}, Frame::standard(0x012, {0x01})},
                                   {NodeId{2}, Frame::standard(0x013, {0x02})}};
    const auto r = transmit_frame(bus, c);
    ASSERT_TRUE(r.winner);
    EXPECT_EQ(*r.winner, 0u);
    EXPECT_TRUE(r.delivered);
    EXPECT_FALSE(r.error);
    EXPECT_EQ(count_event(r, BusEvent::tx_ok), 1u);
    EXPECT_EQ(count_event(r, BusEvent::arb_lost), 1u);
    // the loser and the three listeners all receive
    EXPECT_EQ(count_event(r, BusEvent::rx_ok), 4u);
    EXPECT_EQ(r.received.size(), 4u);
    EXPECT_EQ(r.idle_after, r.frame_slots + kIntermissionSlots);
    EXPECT_EQ(r.frame_slots, serialize_frame(c[0].frame).size());
}

TEST(Window, ReportsAreOrderedBySlotThenNode)
{
    const auto bus = bus_with({1, 2, 3});
    const std::vector<Contender> c{{NodeId{3}, Frame::standard(0x001)}};
    const auto r = transmit_frame(bus, c);
    EXPECT_TRUE(std::is_sorted(r.reports.begin(), r.reports.end(), [](const NodeReport& a, const NodeReport& b) {
        return a.slot != b.slot ? a.slot < b.slot : a.node < b.node;
    }));
}

TEST(Window, LoneNodeGetsNoAck)
{
    const auto bus = bus_with({1});
    const std::vector<Contender> c{{NodeId{1}, Frame::standard(0x012, {0x55})}};
    const auto r = transmit_frame(bus, c);
    ASSERT_TRUE(r.error);
    EXPECT_EQ(*r.error, WindowError::ack);
    EXPECT_FALSE(r.delivered);
    ASSERT_EQ(r.reports.size(), 1u);
    EXPECT_EQ(r.reports[0].event, BusEvent::no_ack);
    // error flag is six dominant slots ahead of the delimiter
    const auto tail = std::span<const Bit>(r.line).last(kErrorFlagSlots + kErrorDelimiterSlots + kIntermissionSlots);
    EXPECT_EQ(to_string(tail), std::string(6, 'D') + std::string(11, 'R'));
}

TEST(Window, SilentNodesDoNotAcknowledge)
{
    const auto bus = bus_with({1, 2});
    const std::vector<Contender> c{{NodeId{1}, Frame::standard(0x012)}};
    const std::vector<NodeId> silent{NodeId{2}};
    const auto r = transmit_frame(bus, c, silent);
    ASSERT_TRUE(r.error);
    EXPECT_EQ(*r.error, WindowError::ack);
}

TEST(Window, ReceiverFlipInPayloadIsCrcError)
{
    const auto bus = bus_with({1, 2, 3});
    const auto f = Frame::standard(0x012, {0x55, 0xAA});
    const std::vector<Contender> c{{NodeId{1}, f}};
    std::size_t data_begin = 0;
    const auto layout = layout_frame(f);
    for (std::size_t i = 1; i < layout.fields.size(); ++i) {
        if (layout.fields[i].first == Field::data) data_begin = layout.fields[i - 1].second;
    }
    FaultPlan plan;
    plan.receiver_flip_slot = data_begin + 3;
    const auto r = transmit_frame(bus, c, {}, plan);
    ASSERT_TRUE(r.error);
    EXPECT_EQ(*r.error, WindowError::crc);
    EXPECT_FALSE(r.delivered);
    EXPECT_EQ(count_event(r, BusEvent::crc_err), 3u);
    EXPECT_TRUE(r.received.empty());
}

TEST(Window, TransmitterBitErrorAfterArbitration)
{
    const auto bus = bus_with({1, 2});
    const std::vector<Contender> c{{NodeId{1}, Frame::standard(0x012, {0x01})}};
    FaultPlan plan;
    plan.transmitter_bit_error = NodeId{1};
    const auto r = transmit_frame(bus, c, {}, plan);
    ASSERT_TRUE(r.error);
    EXPECT_EQ(*r.error, WindowError::bit);
    EXPECT_EQ(count_event(r, BusEvent::stuff_err), 2u);
    ASSERT_TRUE(r.winner);
}

TEST(Window, RandomWindowsDeliverToEveryListener)
{
    std::mt19937_64 rng(5);
    const auto bus = bus_with({1, 2, 3, 4, 5, 6});
    for (int iter = 0; iter < 300; ++iter) {
        const std::size_t n = 1 + rng() % 4;
        std::set<std::uint32_t> ids;
        while (ids.size() < n) ids.insert(static_cast<std::uint32_t>(rng() % kStandardIdLimit));
        std::vector<Contender> c;
        std::uint16_t node = 1;
        for (auto id : ids) c.push_back({NodeId{node++}, Frame::standard(id, {static_cast<std::uint8_t>(rng())})});
        const auto r = transmit_frame(bus, c);
        ASSERT_TRUE(r.delivered);
        ASSERT_TRUE(r.winner);
        ASSERT_EQ(c[*r.winner].frame.id(), *ids.begin());
        ASSERT_EQ(r.received.size(), bus.size() - 1);
        ASSERT_EQ(count_event(r, BusEvent::arb_lost), n - 1);
    }
}
