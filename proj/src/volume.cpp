#include "caspian/volume.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace caspian {

namespace {

constexpr char kMagic[6] = {'C', 'V', 'O', 'L', '1', '\0'};

void put_u32_le(std::ostream& os, uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32_le(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("cvol: truncated header");
    return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 |
           static_cast<uint32_t>(b[2]) << 16 | static_cast<uint32_t>(b[3]) << 24;
}

void put_f32_le(std::ostream& os, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32_le(os, bits);
}

float get_f32_le(std::istream& is) {
    const uint32_t bits = get_u32_le(is);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

void write_header(std::ostream& os, uint8_t dtype, const std::vector<uint32_t>& extents) {
    os.write(kMagic, 6);
    os.put(static_cast<char>(dtype));
    os.put(static_cast<char>(extents.size()));
    for (uint32_t e : extents) put_u32_le(os, e);
}

struct Header {
    uint8_t dtype;
    std::vector<uint32_t> extents;
    uint64_t count;
};

Header read_header(std::istream& is) {
    char magic[6];
    if (!is.read(magic, 6) || std::memcmp(magic, kMagic, 6) != 0)
        throw std::runtime_error("cvol: bad magic");
    const int dtype = is.get();
    const int rank = is.get();
    if (dtype != 0 && dtype != 1) throw std::runtime_error("cvol: unknown dtype code");
    if (rank <= 0 || rank > 8) throw std::runtime_error("cvol: bad rank");
    Header h;
    h.dtype = static_cast<uint8_t>(dtype);
    h.count = 1;
    for (int i = 0; i < rank; ++i) {
        const uint32_t e = get_u32_le(is);
        if (e == 0) throw std::runtime_error("cvol: zero extent");
        h.extents.push_back(e);
        h.count *= e;
    }
    return h;
}

void check_fully_consumed(std::istream& is, const char* what) {
    is.peek();
    if (!is.eof()) throw std::runtime_error(std::string("cvol: payload larger than ") + what +
                                            " header declares");
}

}  // namespace

void write_cvol(const std::filesystem::path& path, const Volume& v) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cvol: cannot open " + path.string() + " for writing");
    write_header(os, 0,
                 {static_cast<uint32_t>(v.channels), static_cast<uint32_t>(v.h),
                  static_cast<uint32_t>(v.w), static_cast<uint32_t>(v.d)});
    for (double x : v.data) put_f32_le(os, static_cast<float>(x));
    if (!os) throw std::runtime_error("cvol: write failed for " + path.string());
}

void write_cvol(const std::filesystem::path& path, const LabelMap& l) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cvol: cannot open " + path.string() + " for writing");
    write_header(os, 1,
                 {static_cast<uint32_t>(l.h), static_cast<uint32_t>(l.w),
                  static_cast<uint32_t>(l.d)});
    os.write(reinterpret_cast<const char*>(l.values.data()),
             static_cast<std::streamsize>(l.values.size()));
    if (!os) throw std::runtime_error("cvol: write failed for " + path.string());
}

Volume read_volume(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cvol: cannot open " + path.string());
    const Header h = read_header(is);
    if (h.dtype != 0 || h.extents.size() != 4)
        throw std::runtime_error("cvol: " + path.string() + " is not a rank-4 float volume");
    Volume v;
    v.channels = h.extents[0];
    v.h = h.extents[1];
    v.w = h.extents[2];
    v.d = h.extents[3];
    v.data.resize(h.count);
    for (uint64_t i = 0; i < h.count; ++i) {
        if (is.peek() == EOF) throw std::runtime_error("cvol: truncated payload in " + path.string());
        v.data[i] = static_cast<double>(get_f32_le(is));
    }
    check_fully_consumed(is, "volume");
    return v;
}

LabelMap read_labels(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cvol: cannot open " + path.string());
    const Header h = read_header(is);
    if (h.dtype != 1 || h.extents.size() != 3)
        throw std::runtime_error("cvol: " + path.string() + " is not a rank-3 label map");
    LabelMap l;
    l.h = h.extents[0];
    l.w = h.extents[1];
    l.d = h.extents[2];
    l.values.resize(h.count);
    if (!is.read(reinterpret_cast<char*>(l.values.data()), static_cast<std::streamsize>(h.count)))
        throw std::runtime_error("cvol: truncated payload in " + path.string());
    check_fully_consumed(is, "label");
    for (uint8_t v : l.values)
        if (v != 0 && v != 1 && v != 2 && v != 4)
            throw std::runtime_error("cvol: label value outside {0,1,2,4} in " + path.string());
    return l;
}

void save_case(const std::filesystem::path& dataset_dir, const Volume& v, const LabelMap& l) {
    const auto dir = dataset_dir / v.case_id;
    std::filesystem::create_directories(dir);
    write_cvol(dir / "image.cvol", v);
    write_cvol(dir / "label.cvol", l);
}

std::pair<Volume, LabelMap> load_case(const std::filesystem::path& case_dir) {
    Volume v = read_volume(case_dir / "image.cvol");
    v.case_id = case_dir.filename().string();
    LabelMap l = read_labels(case_dir / "label.cvol");
    if (l.h != v.h || l.w != v.w || l.d != v.d)
        throw std::runtime_error("case " + v.case_id + ": image and label grids differ");
    return {std::move(v), std::move(l)};
}

std::vector<std::string> list_cases(const std::filesystem::path& dataset_dir) {
    std::vector<std::string> ids;
    if (!std::filesystem::is_directory(dataset_dir))
        throw std::runtime_error("dataset directory not found: " + dataset_dir.string());
    for (const auto& entry : std::filesystem::directory_iterator(dataset_dir))
        if (entry.is_directory() && std::filesystem::exists(entry.path() / "image.cvol"))
            ids.push_back(entry.path().filename().string());
    std::sort(ids.begin(), ids.end());
    return ids;
}

}  // namespace caspian
