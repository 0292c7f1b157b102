#pragma once

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "pointlabel/errors.hpp"

namespace pointlabel {

inline constexpr std::string_view kToolVersion = "0.1.0";

/// 64-bit FNV-1a over raw bytes.
class Fnv1a {
public:
    void update(const char* data, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) {
            h_ ^= static_cast<unsigned char>(data[i]);
            h_ *= 0x100000001b3ULL;
        }
    }
    std::uint64_t value() const noexcept { return h_; }

private:
    std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::string file_digest(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    Fnv1a h;
    std::vector<char> buf(1 << 16);
    while (in) {
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        h.update(buf.data(), static_cast<std::size_t>(in.gcount()));
    }
    return "fnv1a64:" + hex64(h.value());
}

/// One run's provenance: command, configuration, input digests, seed and
/// timings. Written as sorted `key = value` lines; only the `time.*` entries
/// vary between otherwise identical runs.
struct RunManifest {
    std::string command;
    std::map<std::string, std::string> config;
    std::map<std::string, std::string> inputs;  // name -> digest
    std::map<std::string, double> timings;      // seconds
    std::uint64_t seed = 0;

    void add_input(const std::string& name, const std::filesystem::path& path) { inputs[name] = file_digest(path); }

    void write(const std::filesystem::path& path) const {
        std::ofstream out(path);
        if (!out) throw IoError("cannot create " + path.string());
        out << "command = " << command << "\ntool_version = " << kToolVersion << "\nseed = " << seed << '\n';
        for (const auto& [k, v] : config) out << "config." << k << " = " << v << '\n';
        for (const auto& [k, v] : inputs) out << "input." << k << " = " << v << '\n';
        char buf[32];
        for (const auto& [k, v] : timings) {
            std::snprintf(buf, sizeof buf, "%.3f", v);
            out << "time." << k << " = " << buf << '\n';
        }
        if (!out) throw IoError("failed writing " + path.string());
    }

    static std::map<std::string, std::string> read(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw IoError("cannot open " + path.string());
        std::map<std::string, std::string> kv;
        std::string line;
        while (std::getline(in, line)) {
            const auto eq = line.find(" = ");
            if (eq == std::string::npos) continue;
            kv[line.substr(0, eq)] = line.substr(eq + 3);
        }
        return kv;
    }
};

class Stopwatch {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

}  // namespace pointlabel
