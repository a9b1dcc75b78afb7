#pragma once

#include <filesystem>

#include <json.hpp>

namespace ctd {

/// Ordered JSON keeps key insertion order so that serialized files are
/// canonical and byte-stable across save/load round trips.
using Json = nlohmann::ordered_json;

Json load_json(const std::filesystem::path& path);
void save_json(const std::filesystem::path& path, const Json& j, int indent = 2);

}  // namespace ctd
