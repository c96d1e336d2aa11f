#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace caspian {

// Multi-channel image volume, [C,H,W,D] row-major. Values are 32-bit on disk
// and widened to 64-bit in memory.
struct Volume {
    std::string case_id;
    int64_t channels = 0, h = 0, w = 0, d = 0;
    std::vector<double> data;

    int64_t spatial() const { return h * w * d; }
    int64_t numel() const { return channels * spatial(); }
    double at(int64_t c, int64_t hh, int64_t ww, int64_t dd) const {
        return data[((c * h + hh) * w + ww) * d + dd];
    }
    double& at(int64_t c, int64_t hh, int64_t ww, int64_t dd) {
        return data[((c * h + hh) * w + ww) * d + dd];
    }
};

// Ground-truth labels over the same grid, values restricted to {0,1,2,4}.
struct LabelMap {
    int64_t h = 0, w = 0, d = 0;
    std::vector<uint8_t> values;

    int64_t numel() const { return h * w * d; }
    uint8_t at(int64_t hh, int64_t ww, int64_t dd) const {
        return values[(hh * w + ww) * d + dd];
    }
    uint8_t& at(int64_t hh, int64_t ww, int64_t dd) {
        return values[(hh * w + ww) * d + dd];
    }
};

// CVOL container: magic "CVOL1\0", dtype byte (0 = f32, 1 = u8), rank byte,
// rank x u32 little-endian extents, then the payload row-major little-endian.
void write_cvol(const std::filesystem::path& path, const Volume& v);
void write_cvol(const std::filesystem::path& path, const LabelMap& l);
Volume read_volume(const std::filesystem::path& path);
LabelMap read_labels(const std::filesystem::path& path);

// Dataset layout: <dir>/<case-id>/image.cvol (rank 4) + label.cvol (rank 3).
void save_case(const std::filesystem::path& dataset_dir, const Volume& v, const LabelMap& l);
std::pair<Volume, LabelMap> load_case(const std::filesystem::path& case_dir);
std::vector<std::string> list_cases(const std::filesystem::path& dataset_dir);

}  // namespace caspian
