// Container binary: hosts the services named in a config file until stopped.

#include "deskgrid/container.hpp"

#include <CLI11.hpp>

#include <csignal>
#include <cstdio>

namespace {
deskgrid::Container* g_container = nullptr;

void handle_signal(int) {
    if (g_container) g_container->request_stop_async();
}
}  // namespace

int main(int argc, char** argv) {
    CLI::App cli{"deskgrid node container"};
    std::string config_path;
    cli.add_option("--config", config_path, "path to the container config file")->required();
    CLI11_PARSE(cli, argc, argv);

    auto config = deskgrid::ContainerConfig::load_file(config_path);
    if (!config) {
        std::fprintf(stderr, "bad config: %s\n", config.error().to_string().c_str());
        return 5;
    }

    deskgrid::Container container(std::move(config.value()));
    g_container = &container;
    std::signal(SIGINT, handle_signal);
    std::signal(SIGTERM, handle_signal);

    if (auto st = container.start(); !st) {
        std::fprintf(stderr, "container failed to start: %s\n", st.error().to_string().c_str());
        return 3;
    }
    std::printf("node %s listening on %s\n", container.node_id().c_str(),
                container.endpoint().to_string().c_str());
    std::fflush(stdout);

    container.wait_until_stopped();
    g_container = nullptr;
    return 0;
}
