#include "mvmatch/image_store.hpp"

#include <mutex>

#include "mvmatch/error.hpp"

namespace mvmatch {

const Image& ImageStore::get(const std::string& id, const std::string& relative_path) const {
    {
        std::shared_lock lock(mutex_);
        if (auto it = cache_.find(id); it != cache_.end()) return it->second;
    }
    const auto path = root_ / relative_path;
    if (!std::filesystem::exists(path)) throw DataError("missing image " + path.string());
    Image img = read_png(path);
    std::unique_lock lock(mutex_);
    return cache_.try_emplace(id, std::move(img)).first->second;
}

void ImageStore::put(const std::string& id, Image img) {
    std::unique_lock lock(mutex_);
    cache_.insert_or_assign(id, std::move(img));
}

bool ImageStore::contains(const std::string& id) const {
    std::shared_lock lock(mutex_);
    return cache_.contains(id);
}

}  // namespace mvmatch
