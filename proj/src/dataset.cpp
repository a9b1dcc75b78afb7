#include "ctd/dataset.hpp"

#include <algorithm>
#include <set>
#include <sstream>

#include "ctd/error.hpp"

namespace ctd::data {

const char* to_string(ImageClass c) {
    switch (c) {
        case ImageClass::healthy: return "healthy";
        case ImageClass::sick_non_tb: return "sick_non_tb";
        case ImageClass::tb_active: return "tb_active";
        case ImageClass::tb_latent: return "tb_latent";
        case ImageClass::tb_active_latent: return "tb_active_latent";
        case ImageClass::tb_uncertain: return "tb_uncertain";
    }
    return "?";
}

const char* to_string(TbClass c) {
    return c == TbClass::active_tb ? "active_tb" : "latent_tb";
}

const char* to_string(Gender g) {
    switch (g) {
        case Gender::male: return "male";
        case Gender::female: return "female";
        case Gender::unknown: return "unknown";
    }
    return "?";
}

ImageClass image_class_from(const std::string& s) {
    for (ImageClass c : {ImageClass::healthy, ImageClass::sick_non_tb, ImageClass::tb_active,
                         ImageClass::tb_latent, ImageClass::tb_active_latent,
                         ImageClass::tb_uncertain})
        if (s == to_string(c)) return c;
    throw Error(Error::Kind::parse, "unknown image_class: " + s);
}

TbClass tb_class_from(const std::string& s) {
    if (s == "active_tb") return TbClass::active_tb;
    if (s == "latent_tb") return TbClass::latent_tb;
    throw Error(Error::Kind::parse, "unknown tb_class: " + s);
}

Gender gender_from(const std::string& s) {
    if (s == "male") return Gender::male;
    if (s == "female") return Gender::female;
    if (s == "unknown") return Gender::unknown;
    throw Error(Error::Kind::parse, "unknown gender: " + s);
}

bool has_boxes(ImageClass c) {
    return c == ImageClass::tb_active || c == ImageClass::tb_latent ||
           c == ImageClass::tb_active_latent || c == ImageClass::tb_uncertain;
}

bool has_typed_boxes(ImageClass c) {
    return c == ImageClass::tb_active || c == ImageClass::tb_latent ||
           c == ImageClass::tb_active_latent;
}

int collapse3(ImageClass c) {
    if (c == ImageClass::healthy) return 0;
    if (c == ImageClass::sick_non_tb) return 1;
    return 2;
}

void DatasetIndex::recount() {
    class_counts.clear();
    for (ImageClass c : {ImageClass::healthy, ImageClass::sick_non_tb, ImageClass::tb_active,
                         ImageClass::tb_latent, ImageClass::tb_active_latent,
                         ImageClass::tb_uncertain})
        class_counts[c] = 0;
    for (const CxrRecord& r : records) ++class_counts[r.image_class];
}

void validate(const DatasetIndex& index) {
    std::vector<std::string> problems;
    std::set<std::string> seen_ids;
    for (const CxrRecord& r : index.records) {
        auto complain = [&](const std::string& what) {
            problems.push_back(r.image_id + ": " + what);
        };
        if (!seen_ids.insert(r.image_id).second) complain("duplicate image_id");
        if (r.width <= 0 || r.height <= 0) complain("non-positive image size");
        const bool expect_boxes = has_boxes(r.image_class);
        if (expect_boxes && r.boxes.empty())
            complain("TB image without boxes");
        if (!expect_boxes && !r.boxes.empty())
            complain("non-TB image with boxes");
        bool saw_active = false, saw_latent = false;
        for (const TbBox& b : r.boxes) {
            if (b.w <= 0 || b.h <= 0) complain("degenerate box");
            if (b.x < 0 || b.y < 0 || b.x + b.w > r.width || b.y + b.h > r.height)
                complain("box outside image bounds");
            if (r.image_class == ImageClass::tb_uncertain) {
                // uncertain boxes carry no type; a present type is ignored
                continue;
            }
            if (!b.tb_class.has_value()) {
                complain("typed TB image with untyped box");
                continue;
            }
            if (*b.tb_class == TbClass::active_tb) saw_active = true;
            if (*b.tb_class == TbClass::latent_tb) saw_latent = true;
        }
        if (r.image_class == ImageClass::tb_active && saw_latent)
            complain("active-TB image contains a latent box");
        if (r.image_class == ImageClass::tb_latent && saw_active)
            complain("latent-TB image contains an active box");
        if (r.image_class == ImageClass::tb_active_latent && !(saw_active && saw_latent))
            complain("active&latent image must contain both box types");
    }
    // class_counts consistency
    DatasetIndex copy = index;
    copy.recount();
    if (copy.class_counts != index.class_counts)
        problems.push_back("class_counts inconsistent with records");

    if (!problems.empty()) {
        std::ostringstream os;
        os << problems.size() << " validation problem(s):";
        for (const std::string& p : problems) os << "\n  - " << p;
        throw Error(Error::Kind::validation, os.str());
    }
}

DatasetIndex load_dataset(const std::filesystem::path& path,
                          const std::string& expected_split) {
    const Json j = load_json(path);
    DatasetIndex index;
    try {
        index.split = j.at("split").get<std::string>();
        std::map<std::string, size_t> by_id;
        for (const Json& im : j.at("images")) {
            CxrRecord r;
            r.image_id = im.at("id").get<std::string>();
            r.file_name = im.at("file_name").get<std::string>();
            r.width = im.at("width").get<int>();
            r.height = im.at("height").get<int>();
            r.gender = gender_from(im.at("gender").get<std::string>());
            r.age = im.at("age").get<int>();
            r.image_class = image_class_from(im.at("image_class").get<std::string>());
            by_id[r.image_id] = index.records.size();
            index.records.push_back(std::move(r));
        }
        for (const Json& an : j.at("annotations")) {
            const std::string id = an.at("image_id").get<std::string>();
            auto it = by_id.find(id);
            check(it != by_id.end(), Error::Kind::validation,
                  "annotation references unknown image_id " + id);
            auto bbox = an.at("bbox").get<std::vector<double>>();
            check(bbox.size() == 4, Error::Kind::parse, "bbox must have 4 entries");
            TbBox b;
            b.x = bbox[0];
            b.y = bbox[1];
            b.w = bbox[2];
            b.h = bbox[3];
            if (!an.at("tb_class").is_null())
                b.tb_class = tb_class_from(an.at("tb_class").get<std::string>());
            index.records[it->second].boxes.push_back(b);
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(Error::Kind::parse, path.string() + ": " + e.what());
    }
    index.recount();
    if (!expected_split.empty())
        check(index.split == expected_split, Error::Kind::validation,
              path.string() + ": split is '" + index.split + "', expected '" +
                  expected_split + "'");
    validate(index);
    return index;
}

void save_dataset(const std::filesystem::path& path, const DatasetIndex& index) {
    Json images = Json::array();
    Json annotations = Json::array();
    for (const CxrRecord& r : index.records) {
        images.push_back({{"id", r.image_id},
                          {"file_name", r.file_name},
                          {"width", r.width},
                          {"height", r.height},
                          {"gender", to_string(r.gender)},
                          {"age", r.age},
                          {"image_class", to_string(r.image_class)}});
        for (const TbBox& b : r.boxes) {
            Json a = {{"image_id", r.image_id},
                      {"bbox", {b.x, b.y, b.w, b.h}},
                      {"tb_class", nullptr}};
            if (b.tb_class.has_value()) a["tb_class"] = to_string(*b.tb_class);
            annotations.push_back(std::move(a));
        }
    }
    Json j;
    j["images"] = std::move(images);
    j["annotations"] = std::move(annotations);
    j["split"] = index.split;
    save_json(path, j);
}

SplitStats split_stats(const DatasetIndex& index) {
    SplitStats stats;
    for (ImageClass c : {ImageClass::healthy, ImageClass::sick_non_tb, ImageClass::tb_active,
                         ImageClass::tb_latent, ImageClass::tb_active_latent,
                         ImageClass::tb_uncertain})
        stats.per_class[c] = 0;
    for (const CxrRecord& r : index.records) ++stats.per_class[r.image_class];
    stats.total = static_cast<int>(index.records.size());
    return stats;
}

std::vector<int64_t> box_area_histogram(const DatasetIndex& index,
                                        const std::vector<double>& bin_edges) {
    check(bin_edges.size() >= 2, Error::Kind::validation, "need at least two bin edges");
    for (size_t i = 1; i < bin_edges.size(); ++i)
        check(bin_edges[i] > bin_edges[i - 1], Error::Kind::validation,
              "bin edges must be strictly increasing");
    std::vector<int64_t> counts(bin_edges.size() - 1, 0);
    for (const CxrRecord& r : index.records) {
        for (const TbBox& b : r.boxes) {
            const double area = b.w * b.h;
            for (size_t i = 0; i + 1 < bin_edges.size(); ++i) {
                if (area > bin_edges[i] && area <= bin_edges[i + 1]) {
                    ++counts[i];
                    break;
                }
            }
        }
    }
    return counts;
}

}  // namespace ctd::data
