#pragma once

#include <fnmatch.h>

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <optional>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "offcurate/backend.hpp"
#include "offcurate/cache.hpp"

namespace offcurate {

struct FileFailure {
    std::string id;
    std::string message;
};

struct EmbedResult {
    EmbeddingCache cache;
    std::vector<FileFailure> failures;
    std::size_t encoded = 0;
    std::size_t reused = 0;
};

struct EmbedOptions {
    std::vector<std::string> patterns{"*.jpg", "*.jpeg", "*.png", "*.bmp", "*.webp", "*.tif", "*.tiff"};
    std::size_t workers = 1;
    /// Vectors whose id and content hash match this cache are reused.
    const EmbeddingCache* previous = nullptr;
};

/// Root-relative path with '/' separators.
inline std::string relative_id(const std::filesystem::path& root, const std::filesystem::path& file) {
    return std::filesystem::relative(file, root).generic_string();
}

inline std::vector<std::string> list_images(const std::filesystem::path& root,
                                            const std::vector<std::string>& patterns) {
    std::vector<std::string> ids;
    for (const auto& entry : std::filesystem::recursive_directory_iterator(root)) {
        if (!entry.is_regular_file()) continue;
        const auto name = entry.path().filename().string();
        const bool match = std::any_of(patterns.begin(), patterns.end(), [&](const std::string& p) {
            return ::fnmatch(p.c_str(), name.c_str(), FNM_CASEFOLD) == 0;
        });
        if (match) ids.push_back(relative_id(root, entry.path()));
    }
    std::sort(ids.begin(), ids.end());
    return ids;
}

/// Embeds every matching image under `root` once. Per-file problems are
/// collected in `failures`; the batch keeps going. Output order is sorted by
/// id regardless of worker count.
inline EmbedResult embed_directory(const EncoderBackend& backend, const std::filesystem::path& root,
                                   const EmbedOptions& options = {}) {
    if (!std::filesystem::is_directory(root)) fail(ErrorCode::IoFailure, "not a directory: " + root.string());
    if (options.workers == 0) fail(ErrorCode::InvalidArgument, "worker_count must be >= 1");
    const auto ids = list_images(root, options.patterns);
    if (ids.empty()) fail(ErrorCode::NoImagesFound, "no images under " + root.string());

    const auto space = backend.space();
    std::unordered_map<std::string, std::string> previous_hashes;
    if (options.previous && options.previous->space() == space) {
        for (const auto& e : options.previous->manifest.entries) previous_hashes.emplace(e.id, e.content_hash);
    }

    struct Slot {
        std::vector<float> vector;
        std::string hash;
        std::string error;
        bool reused = false;
    };
    std::vector<Slot> slots(ids.size());
    std::atomic<std::size_t> next{0};

    auto work = [&] {
        for (std::size_t i = next++; i < ids.size(); i = next++) {
            auto& slot = slots[i];
            try {
                const auto bytes = read_file_bytes(root / ids[i]);
                slot.hash = sha256_hex(bytes);
                if (const auto it = previous_hashes.find(ids[i]);
                    it != previous_hashes.end() && it->second == slot.hash) {
                    if (const auto index = options.previous->find(ids[i])) {
                        const auto v = options.previous->vector(*index);
                        slot.vector.assign(v.begin(), v.end());
                        slot.reused = true;
                        continue;
                    }
                }
                const auto e = encode_image(backend, decode_image(bytes));
                slot.vector.assign(e.vector.begin(), e.vector.end());
            } catch (const std::exception& e) {
                slot.error = e.what();
            }
        }
    };

    const std::size_t n_threads = std::min(options.workers, ids.size());
    if (n_threads <= 1) {
        work();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(work);
    }

    EmbedResult result{EmbeddingCache(space), {}, 0, 0};
    result.cache.manifest.root = std::filesystem::absolute(root).lexically_normal().generic_string();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        auto& slot = slots[i];
        if (!slot.error.empty()) {
            result.failures.push_back({ids[i], slot.error});
            continue;
        }
        result.cache.add(ids[i], std::span<const float>(slot.vector));
        result.cache.manifest.entries.push_back({ids[i], slot.hash});
        (slot.reused ? result.reused : result.encoded)++;
    }
    return result;
}

}  // namespace offcurate
