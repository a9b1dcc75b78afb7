#include "ctd/json_util.hpp"

#include <fstream>

#include "ctd/error.hpp"

namespace ctd {

Json load_json(const std::filesystem::path& path) {
    std::ifstream f(path);
    check(f.good(), Error::Kind::io, "cannot open " + path.string());
    try {
        return Json::parse(f);
    } catch (const nlohmann::json::parse_error& e) {
        throw Error(Error::Kind::parse, path.string() + ": " + e.what());
    }
}

void save_json(const std::filesystem::path& path, const Json& j, int indent) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path);
    check(f.good(), Error::Kind::io, "cannot write " + path.string());
    f << j.dump(indent) << "\n";
    check(f.good(), Error::Kind::io, "write failed for " + path.string());
}

}  // namespace ctd
