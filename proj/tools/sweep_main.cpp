// Parameter sweep CLI: build templates interactively, preview expansions,
// run them on a cloud.

#include "deskgrid/sweep.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

using nlohmann::json;

namespace {

int fail(const deskgrid::Error& error) {
    std::fprintf(stderr, "error: %s\n", error.to_string().c_str());
    if (error.code == deskgrid::errc::timeout || error.code == deskgrid::errc::connection_failed) return 3;
    return 5;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App cli{"deskgrid parameter sweeping"};
    cli.require_subcommand(1);

    auto* wizard_cmd = cli.add_subcommand("wizard", "interactively build a task template");
    std::string out_path = "sweep.json";
    wizard_cmd->add_option("--out", out_path, "template file to write")->capture_default_str();

    auto* expand_cmd = cli.add_subcommand("expand", "expand a template");
    std::string expand_path;
    bool dry_run = false;
    expand_cmd->add_option("file", expand_path, "template file")->required();
    expand_cmd->add_flag("--dry-run", dry_run, "print every combination's command sequence");

    auto* run_cmd = cli.add_subcommand("run", "run a template on a cloud");
    std::string run_path;
    std::string master = "127.0.0.1:7000";
    std::string user;
    std::string token;
    std::string channel_uri;
    run_cmd->add_option("file", run_path, "template file")->required();
    run_cmd->add_option("--master", master, "master endpoint")->capture_default_str();
    run_cmd->add_option("--user", user, "credential user id");
    run_cmd->add_option("--token", token, "credential token");
    run_cmd->add_option("--channel", channel_uri, "staging channel uri (scheme://endpoint/root)");

    CLI11_PARSE(cli, argc, argv);

    if (wizard_cmd->parsed()) {
        auto built = deskgrid::sweep::wizard(std::cin, std::cout);
        if (!built) return fail(built.error());
        if (auto st = built.value().save_file(out_path); !st) return fail(st.error());
        auto combos = deskgrid::sweep::expand(built.value());
        std::printf("wrote %s (%zu combinations)\n", out_path.c_str(),
                    combos ? combos.value().size() : 0);
        return 0;
    }

    if (expand_cmd->parsed()) {
        auto loaded = deskgrid::sweep::TaskTemplate::load_file(expand_path);
        if (!loaded) return fail(loaded.error());
        auto combos = deskgrid::sweep::expand(loaded.value());
        if (!combos) return fail(combos.error());
        std::printf("%zu combination(s)\n", combos.value().size());
        if (dry_run) {
            for (std::size_t i = 0; i < combos.value().size(); ++i) {
                const auto& combo = combos.value()[i];
                std::printf("[%zu]", i);
                for (const auto& value : combo.value_tuple) std::printf(" %s", value.c_str());
                std::printf("\n");
                for (const auto& command : combo.commands) {
                    std::printf("    %s", command.command.c_str());
                    for (const auto& arg : command.args) std::printf(" %s", arg.c_str());
                    std::printf("\n");
                }
            }
        }
        return 0;
    }

    if (run_cmd->parsed()) {
        auto loaded = deskgrid::sweep::TaskTemplate::load_file(run_path);
        if (!loaded) return fail(loaded.error());

        auto master_ep = deskgrid::parse_endpoint(master);
        if (!master_ep) return fail(master_ep.error());
        deskgrid::app::Client client(master_ep.value(), {user, token});
        if (auto st = client.connect(); !st) return fail(st.error());
        auto app = client.create_application("task", "sweep " + run_path);
        if (!app) return fail(app.error());

        deskgrid::store::DataChannelSpec channel;
        if (!channel_uri.empty()) {
            auto parsed = deskgrid::store::DataChannelSpec::parse_uri(channel_uri);
            if (!parsed) return fail(parsed.error());
            channel = parsed.value();
        }

        auto report = deskgrid::sweep::run_sweep(app.value(), loaded.value(), channel);
        if (!report) return fail(report.error());

        std::printf("ran %lld combination(s):", static_cast<long long>(report.value().total));
        for (const auto& [state, count] : report.value().counts_by_state) {
            std::printf(" %s=%d", state.c_str(), count);
        }
        std::printf("\n");
        int failed = 0;
        for (const auto& entry : report.value().entries) {
            if (entry.state == deskgrid::exec::JobState::Completed) continue;
            ++failed;
            std::printf("  failed:");
            for (const auto& value : entry.value_tuple) std::printf(" %s", value.c_str());
            std::printf("  (%s)\n", entry.failure_cause.c_str());
        }
        return failed == 0 ? 0 : 5;
    }
    return 2;
}
