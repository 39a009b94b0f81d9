#pragma once

#include <cstdlib>
#include <filesystem>
#include <string>

namespace testutil {

inline std::string cli_path() {
    const char* p = std::getenv("IKV_CLI");
    return p ? p : "";
}

// Runs the CLI with the given argument string inside `dir`; returns the exit
// code (or -1 if the binary is unavailable).
inline int run_cli(const std::filesystem::path& dir, const std::string& args) {
    const std::string bin = cli_path();
    if (bin.empty()) return -1;
    const std::string cmd =
        "cd '" + dir.string() + "' && '" + bin + "' " + args + " >/dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    if (rc == -1) return -1;
    return WEXITSTATUS(rc);
}

inline std::filesystem::path fresh_dir(const char* name) {
    auto dir = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace testutil
