#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ctd/json_util.hpp"

namespace ctd::data {

enum class ImageClass {
    healthy,
    sick_non_tb,
    tb_active,
    tb_latent,
    tb_active_latent,
    tb_uncertain,
};

enum class TbClass { active_tb, latent_tb };

enum class Gender { male, female, unknown };

const char* to_string(ImageClass c);
const char* to_string(TbClass c);
const char* to_string(Gender g);
ImageClass image_class_from(const std::string& s);
TbClass tb_class_from(const std::string& s);
Gender gender_from(const std::string& s);

/// Classes whose records carry bounding boxes.
bool has_boxes(ImageClass c);
/// Classes whose boxes carry a type (uncertain boxes do not).
bool has_typed_boxes(ImageClass c);
/// Collapse the six-way image class to {0 healthy, 1 sick_non_tb, 2 tb}.
int collapse3(ImageClass c);

struct TbBox {
    double x = 0, y = 0, w = 0, h = 0;       // top-left + size, pixels
    std::optional<TbClass> tb_class;          // absent only for uncertain images
};

struct CxrRecord {
    std::string image_id;
    std::string file_name;
    int width = 0, height = 0;
    Gender gender = Gender::unknown;
    int age = -1;  // -1 = unknown
    ImageClass image_class = ImageClass::healthy;
    std::vector<TbBox> boxes;
};

struct DatasetIndex {
    std::string split;
    std::vector<CxrRecord> records;
    std::map<ImageClass, int> class_counts;

    void recount();
};

/// Throws Error::validation listing every violating record.
void validate(const DatasetIndex& index);

/// Loads and validates an annotation file. When `expected_split` is
/// non-empty the file's split name must match it.
DatasetIndex load_dataset(const std::filesystem::path& path,
                          const std::string& expected_split = "");
/// Canonical serialization; load_dataset(save_dataset(x)) is
/// byte-identical on re-save.
void save_dataset(const std::filesystem::path& path, const DatasetIndex& index);

struct SplitStats {
    std::map<ImageClass, int> per_class;
    int total = 0;
};
SplitStats split_stats(const DatasetIndex& index);

/// Histogram of TB box areas (w*h) over (edge[i], edge[i+1]] bins.
/// `bin_edges` must be strictly increasing; boxes outside the outer
/// edges are not counted.
std::vector<int64_t> box_area_histogram(const DatasetIndex& index,
                                        const std::vector<double>& bin_edges);

}  // namespace ctd::data
