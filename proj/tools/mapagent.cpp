#include <atomic>
#include <csignal>
#include <iostream>
#include <string>
#include <vector>

#include "mapagent/cli.hpp"

namespace {

std::atomic<bool> g_stop{false};

extern "C" void on_sigint(int) { g_stop.store(true); }

}  // namespace

int main(int argc, char** argv) {
    std::signal(SIGINT, on_sigint);
    std::signal(SIGTERM, on_sigint);
    mapagent::CliHooks hooks;
    hooks.stop = &g_stop;
    return mapagent::run_cli(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr, hooks);
}
