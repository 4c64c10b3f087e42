// cansim: run a scenario file through the bus simulator.
//
//   cansim --scenario s.txt --trace trace.txt --outbox sms.txt --policy muf --until 20000 --seed 7
//   cansim --dump-frame 0x012:55
//
// Exit codes: 0 clean run, 1 configuration error, 2 internal invariant breach.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cansim/scenario.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitInternal = 2;

cansim::Frame parse_frame_arg(const std::string& arg)
{
    const auto colon = arg.find(':');
    const std::string id_text = arg.substr(0, colon);
    const std::string data = colon == std::string::npos ? "" : arg.substr(colon + 1);
    const auto id = static_cast<std::uint32_t>(std::stoul(id_text, nullptr, 0));
    if (data.size() % 2 != 0) throw cansim::Error(cansim::Errc::out_of_range, "payload needs whole bytes");
    std::vector<std::uint8_t> bytes;
    for (std::size_t i = 0; i < data.size(); i += 2) {
        bytes.push_back(static_cast<std::uint8_t>(std::stoul(data.substr(i, 2), nullptr, 16)));
    }
    const auto kind = id >= cansim::kStandardIdLimit ? cansim::IdKind::extended : cansim::IdKind::standard;
    return cansim::Frame(kind, id, bytes);
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Slot-level CAN bus simulator for the accident-avoidance vehicle network"};

    std::string scenario_path;
    std::string trace_path;
    std::string outbox_path;
    std::string policy_text;
    std::optional<std::uint64_t> until;
    std::optional<std::uint64_t> seed;
    std::string dump_arg;

    app.add_option("--scenario", scenario_path, "Scenario file")->check(CLI::ExistingFile);
    app.add_option("--trace", trace_path, "Trace output file (default: stdout)");
    app.add_option("--outbox", outbox_path, "SMS outbox file");
    app.add_option("--policy", policy_text, "Identifier policy")->check(CLI::IsMember({"fixed", "muf", "mts"}));
    app.add_option("--until", until, "Horizon in bus slots");
    app.add_option("--seed", seed, "Fault-injection jitter seed");
    app.add_option("--dump-frame", dump_arg, "Print the stuffed bitstream of ID[:HEXPAYLOAD] and exit");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitConfig;
    }

    if (!dump_arg.empty()) {
        try {
            std::cout << cansim::dump_frame(parse_frame_arg(dump_arg)) << '\n';
            return kExitOk;
        } catch (const std::exception& e) {
            std::cerr << "cansim: " << e.what() << '\n';
            return kExitConfig;
        }
    }
    if (scenario_path.empty()) {
        std::cerr << "cansim: --scenario is required\n";
        return kExitConfig;
    }

    cansim::Scenario scenario;
    try {
        std::ifstream in(scenario_path);
        std::stringstream buf;
        buf << in.rdbuf();
        scenario = cansim::parse_scenario(buf.str());
        if (!policy_text.empty()) scenario.policy = *cansim::parse_policy(policy_text);
        if (until) scenario.horizon_slots = *until;
        if (seed) scenario.seed = *seed;
    } catch (const cansim::ScenarioError& e) {
        std::cerr << scenario_path << ": " << e.what() << '\n';
        return kExitConfig;
    }

    try {
        std::optional<cansim::SmsOutbox> file_outbox;
        if (!outbox_path.empty()) {
            std::ofstream(outbox_path, std::ios::trunc);
            file_outbox.emplace(outbox_path);
        }
        cansim::SmsOutbox memory_outbox;
        const auto result = cansim::run(scenario, file_outbox ? *file_outbox : memory_outbox);
        if (trace_path.empty()) {
            cansim::emit_trace(result.trace, std::cout);
        } else {
            cansim::emit_trace(result.trace, std::filesystem::path(trace_path));
        }
    } catch (const cansim::Error& e) {
        std::cerr << "cansim: " << e.what() << '\n';
        return e.code() == cansim::Errc::store_unwritable ? kExitConfig : kExitInternal;
    } catch (const std::exception& e) {
        std::cerr << "cansim: internal error: " << e.what() << '\n';
        return kExitInternal;
    }
    return kExitOk;
}
