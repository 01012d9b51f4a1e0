#pragma once

// run.json: what a command was asked to do and what it read and wrote.

#include <nlohmann/json.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "offcurate/error.hpp"
#include "offcurate/hash.hpp"

#ifndef OFFCURATE_VERSION
#define OFFCURATE_VERSION "0.0.0"
#endif

namespace offcurate {

inline constexpr std::string_view kToolVersion = OFFCURATE_VERSION;

inline std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

struct InputFile {
    std::string path;
    std::string sha256;
};

struct RunManifest {
    std::string command;
    nlohmann::json config = nlohmann::json::object();
    std::map<std::string, InputFile> inputs;
    std::vector<std::string> outputs;
    std::uint64_t seed = 0;
    std::string tool_version{kToolVersion};
    std::string timestamp;

    /// Records `path` under `name`, hashing the file (directories get no hash).
    void add_input(const std::string& name, const std::filesystem::path& path) {
        InputFile f{std::filesystem::absolute(path).lexically_normal().string(), ""};
        if (std::filesystem::is_regular_file(path)) f.sha256 = sha256_file(path);
        inputs[name] = std::move(f);
    }
};

inline nlohmann::json to_json(const RunManifest& m) {
    nlohmann::json inputs = nlohmann::json::object();
    for (const auto& [name, f] : m.inputs) inputs[name] = {{"path", f.path}, {"sha256", f.sha256}};
    return {{"command", m.command},   {"config", m.config},  {"inputs", inputs},
            {"outputs", m.outputs},   {"seed", m.seed},      {"tool_version", m.tool_version},
            {"timestamp", m.timestamp}};
}

inline RunManifest run_manifest_from_json(const nlohmann::json& j) {
    try {
        RunManifest m;
        m.command = j.at("command").get<std::string>();
        m.config = j.value("config", nlohmann::json::object());
        const auto inputs = j.value("inputs", nlohmann::json::object());
        for (const auto& [name, f] : inputs.items()) {
            m.inputs[name] = {f.at("path").get<std::string>(), f.value("sha256", "")};
        }
        m.outputs = j.value("outputs", std::vector<std::string>{});
        m.seed = j.value("seed", std::uint64_t{0});
        m.tool_version = j.value("tool_version", "");
        m.timestamp = j.value("timestamp", "");
        return m;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::ParseFailure, std::string("run manifest: ") + e.what());
    }
}

inline void write_manifest(const std::filesystem::path& path, RunManifest m) {
    if (m.timestamp.empty()) m.timestamp = utc_timestamp();
    std::ofstream out(path, std::ios::trunc);
    out << to_json(m).dump(2) << '\n';
    if (!out) fail(ErrorCode::IoFailure, "cannot write " + path.string());
}

inline RunManifest read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::IoFailure, "cannot read " + path.string());
    try {
        return run_manifest_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::ParseFailure, path.string() + ": " + e.what());
    }
}

}  // namespace offcurate
