#pragma once

// Binary embedding cache, little-endian:
//
//   "OFFE" | u32 version (=1) | u32 dimension | u64 record count
//   | u16 backend_id length | backend_id bytes
//   | count x (u16 id length | id bytes | dimension x f32)
//   | u32 CRC32 of every preceding byte
//
// The source manifest (image root and per-file content hashes) lives in a
// JSON sidecar next to the cache, "<cache>.manifest.json".

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <optional>
#include <fstream>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "offcurate/embedding.hpp"
#include "offcurate/hash.hpp"

namespace offcurate {

static_assert(std::endian::native == std::endian::little, "cache I/O assumes a little-endian host");

inline constexpr char kCacheMagic[4] = {'O', 'F', 'F', 'E'};
inline constexpr std::uint32_t kCacheVersion = 1;

struct SourceEntry {
    std::string id;
    std::string content_hash;  // sha256 of the file bytes

    friend bool operator==(const SourceEntry&, const SourceEntry&) = default;
};

struct SourceManifest {
    std::string root;
    std::vector<SourceEntry> entries;
};

class EmbeddingCache {
public:
    EmbeddingCache() = default;
    explicit EmbeddingCache(EmbeddingSpace space) : space_(std::move(space)) {
        if (space_.dimension == 0) fail(ErrorCode::InvalidArgument, "cache dimension must be positive");
    }

    const EmbeddingSpace& space() const noexcept { return space_; }
    std::size_t size() const noexcept { return ids_.size(); }
    bool empty() const noexcept { return ids_.empty(); }

    const std::vector<std::string>& ids() const noexcept { return ids_; }

    std::span<const float> vector(std::size_t index) const {
        return {data_.data() + index * space_.dimension, space_.dimension};
    }

    std::optional<std::size_t> find(const std::string& id) const {
        const auto it = index_.find(id);
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }

    bool contains(const std::string& id) const { return index_.contains(id); }

    void add(std::string id, std::span<const float> v) {
        if (v.size() != space_.dimension) {
            fail(ErrorCode::DimensionMismatch, "record '" + id + "' has " + std::to_string(v.size()) +
                                                   " values, cache dimension is " +
                                                   std::to_string(space_.dimension));
        }
        if (id.size() > 0xFFFF) fail(ErrorCode::InvalidArgument, "id longer than 65535 bytes");
        if (index_.contains(id)) fail(ErrorCode::DuplicateId, "duplicate cache id '" + id + "'");
        index_.emplace(id, ids_.size());
        ids_.push_back(std::move(id));
        data_.insert(data_.end(), v.begin(), v.end());
    }

    void add(std::string id, std::span<const double> v) {
        std::vector<float> f(v.begin(), v.end());
        add(std::move(id), std::span<const float>(f));
    }

    Embedding embedding(std::size_t index) const {
        const auto v = vector(index);
        return {ids_[index], std::vector<double>(v.begin(), v.end())};
    }

    Embedding embedding(const std::string& id) const {
        const auto index = find(id);
        if (!index) fail(ErrorCode::NotFound, "no embedding for '" + id + "'");
        return embedding(*index);
    }

    std::vector<Embedding> embeddings() const {
        std::vector<Embedding> out;
        out.reserve(size());
        for (std::size_t i = 0; i < size(); ++i) out.push_back(embedding(i));
        return out;
    }

    SourceManifest manifest;

private:
    EmbeddingSpace space_;
    std::vector<std::string> ids_;
    std::vector<float> data_;
    std::unordered_map<std::string, std::size_t> index_;
};

namespace detail {

class ByteWriter {
public:
    template <typename T>
    void put(T value) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
        bytes.insert(bytes.end(), p, p + sizeof(T));
    }
    void put_bytes(std::string_view s) { bytes.insert(bytes.end(), s.begin(), s.end()); }

    std::vector<std::uint8_t> bytes;
};

class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    template <typename T>
    T get() {
        need(sizeof(T));
        T value;
        std::memcpy(&value, bytes_.data() + offset_, sizeof(T));
        offset_ += sizeof(T);
        return value;
    }
    std::string get_string(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + offset_), n);
        offset_ += n;
        return s;
    }
    std::span<const std::uint8_t> take(std::size_t n) {
        need(n);
        auto s = bytes_.subspan(offset_, n);
        offset_ += n;
        return s;
    }
    std::size_t remaining() const noexcept { return bytes_.size() - offset_; }

private:
    void need(std::size_t n) const {
        if (remaining() < n) fail(ErrorCode::CorruptCache, "truncated cache");
    }

    std::span<const std::uint8_t> bytes_;
    std::size_t offset_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> serialize_cache(const EmbeddingCache& cache) {
    const auto& space = cache.space();
    if (space.backend_id.size() > 0xFFFF) fail(ErrorCode::InvalidArgument, "backend_id too long");
    detail::ByteWriter w;
    w.put_bytes(std::string_view(kCacheMagic, 4));
    w.put(kCacheVersion);
    w.put(static_cast<std::uint32_t>(space.dimension));
    w.put(static_cast<std::uint64_t>(cache.size()));
    w.put(static_cast<std::uint16_t>(space.backend_id.size()));
    w.put_bytes(space.backend_id);
    for (std::size_t i = 0; i < cache.size(); ++i) {
        const auto& id = cache.ids()[i];
        w.put(static_cast<std::uint16_t>(id.size()));
        w.put_bytes(id);
        for (float x : cache.vector(i)) w.put(x);
    }
    w.put(crc32_of(w.bytes));
    return std::move(w.bytes);
}

inline EmbeddingCache deserialize_cache(std::span<const std::uint8_t> bytes) {
    detail::ByteReader r(bytes);
    if (r.get_string(4) != std::string_view(kCacheMagic, 4)) fail(ErrorCode::CorruptCache, "bad magic");
    const auto version = r.get<std::uint32_t>();
    if (version != kCacheVersion) {
        fail(ErrorCode::VersionUnsupported, "cache version " + std::to_string(version));
    }
    if (bytes.size() < 4) fail(ErrorCode::CorruptCache, "truncated cache");
    const auto body = bytes.first(bytes.size() - 4);
    std::uint32_t stored_crc;
    std::memcpy(&stored_crc, bytes.data() + body.size(), 4);
    if (crc32_of(body) != stored_crc) fail(ErrorCode::CorruptCache, "CRC mismatch");

    detail::ByteReader br(body);
    br.get_string(8);
    const auto dimension = br.get<std::uint32_t>();
    const auto count = br.get<std::uint64_t>();
    const auto backend_len = br.get<std::uint16_t>();
    EmbeddingSpace space{dimension, br.get_string(backend_len)};
    if (dimension == 0) fail(ErrorCode::CorruptCache, "zero dimension");
    EmbeddingCache cache(space);
    std::vector<float> v(dimension);
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto id_len = br.get<std::uint16_t>();
        auto id = br.get_string(id_len);
        const auto raw = br.take(static_cast<std::size_t>(dimension) * 4);
        std::memcpy(v.data(), raw.data(), raw.size());
        try {
            cache.add(std::move(id), std::span<const float>(v));
        } catch (const Error& e) {
            fail(ErrorCode::CorruptCache, e.what());
        }
    }
    if (br.remaining() != 0) fail(ErrorCode::CorruptCache, "record count does not match file length");
    return cache;
}

inline std::filesystem::path manifest_path(const std::filesystem::path& cache_path) {
    return cache_path.string() + ".manifest.json";
}

inline nlohmann::json manifest_to_json(const SourceManifest& m) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : m.entries) entries.push_back({{"id", e.id}, {"sha256", e.content_hash}});
    return {{"root", m.root}, {"entries", entries}};
}

inline SourceManifest manifest_from_json(const nlohmann::json& j) {
    SourceManifest m;
    m.root = j.value("root", std::string());
    for (const auto& e : j.value("entries", nlohmann::json::array())) {
        m.entries.push_back({e.at("id").get<std::string>(), e.at("sha256").get<std::string>()});
    }
    return m;
}

/// Writes the binary cache and, when the manifest is non-empty, its sidecar.
inline void write_cache(const std::filesystem::path& path, const EmbeddingCache& cache) {
    const auto bytes = serialize_cache(cache);
    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) fail(ErrorCode::IoFailure, "cannot write " + path.string());
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) fail(ErrorCode::IoFailure, "write failed for " + path.string());
    }
    const auto sidecar = manifest_path(path);
    if (!cache.manifest.entries.empty() || !cache.manifest.root.empty()) {
        std::ofstream out(sidecar, std::ios::trunc);
        out << manifest_to_json(cache.manifest).dump(2) << '\n';
        if (!out) fail(ErrorCode::IoFailure, "cannot write " + sidecar.string());
    } else {
        std::error_code ec;
        std::filesystem::remove(sidecar, ec);
    }
}

inline EmbeddingCache read_cache(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) fail(ErrorCode::IoFailure, "cache not found: " + path.string());
    auto cache = deserialize_cache(read_file_bytes(path));
    const auto sidecar = manifest_path(path);
    if (std::filesystem::exists(sidecar)) {
        std::ifstream in(sidecar);
        try {
            cache.manifest = manifest_from_json(nlohmann::json::parse(in));
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorCode::CorruptCache, "manifest " + sidecar.string() + ": " + e.what());
        }
    }
    return cache;
}

}  // namespace offcurate
