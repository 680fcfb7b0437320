// Copyright (c) 2026 The moelab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Artifact I/O helpers: atomic writes, content hashing, JSON file access.

#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "moelab/errors.hpp"

namespace moelab {

using json = nlohmann::json;

inline constexpr int kFormatVersion = 1;

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

/// Writes through `writer` into a sibling temp file and renames it over
/// `path`, so an interrupted run never leaves a truncated artifact behind.
inline void atomic_write(const std::filesystem::path& path,
                         const std::function<void(std::ostream&)>& writer) {
    namespace fs = std::filesystem;
    if (path.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(path.parent_path(), ec);
        if (ec) throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
    }
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
        writer(out);
        out.flush();
        if (!out) throw IoError("write failed for " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp, ec);
        throw IoError("cannot rename temp file onto " + path.string());
    }
}

inline void atomic_write_text(const std::filesystem::path& path, const std::string& text) {
    atomic_write(path, [&](std::ostream& os) { os << text; });
}

inline void write_json(const std::filesystem::path& path, const json& doc) {
    atomic_write_text(path, doc.dump(2) + "\n");
}

inline std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline json read_json(const std::filesystem::path& path) {
    const auto text = read_text(path);
    try {
        return json::parse(text);
    } catch (const json::exception& e) {
        throw IoError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

} // namespace moelab
