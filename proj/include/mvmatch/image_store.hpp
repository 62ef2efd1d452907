#pragma once

#include <filesystem>
#include <map>
#include <shared_mutex>
#include <string>

#include "mvmatch/imaging.hpp"

namespace mvmatch {

// Decoded images keyed by record id. Paths are resolved against the manifest
// directory. Lookups may run concurrently; decoding and insertion are
// serialized.
class ImageStore {
public:
    explicit ImageStore(std::filesystem::path root = {}) : root_(std::move(root)) {}

    const Image& get(const std::string& id, const std::string& relative_path) const;
    void put(const std::string& id, Image img);
    bool contains(const std::string& id) const;

    const std::filesystem::path& root() const { return root_; }

private:
    std::filesystem::path root_;
    mutable std::shared_mutex mutex_;
    mutable std::map<std::string, Image, std::less<>> cache_;
};

}  // namespace mvmatch
