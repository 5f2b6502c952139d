#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "dive/encoder.hpp"
#include "dive/errors.hpp"
#include "dive/numeric.hpp"

namespace dive {

struct PairedSample {
    Vec image_input;
    Vec text_input;
    int class_index = 0;
    std::uint64_t pair_id = 0;
};

struct PairedDataset {
    std::vector<PairedSample> samples;

    std::size_t size() const { return samples.size(); }
    bool empty() const { return samples.empty(); }
};

struct LabeledSample {
    Vec image_input;
    int label = 0;
};

struct LabeledDataset {
    std::vector<LabeledSample> samples;

    std::size_t size() const { return samples.size(); }
    bool empty() const { return samples.empty(); }
};

// --- columnar binary format -------------------------------------------------
//
// Little-endian. magic "DIVD", u32 version, u8 kind (0 paired, 1 labeled),
// u32 sample count, u32 image dim, u32 text dim (0 for labeled), then per
// sample: u64 pair id (paired only), u32 class index / label, image doubles,
// text doubles (paired only).

namespace detail {

inline constexpr char kDatasetMagic[4] = {'D', 'I', 'V', 'D'};
inline constexpr std::uint32_t kDatasetVersion = 1;

inline void write_u64(std::FILE* f, std::uint64_t v) {
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    write_bytes(f, buf, 8);
}

inline std::uint64_t read_u64(std::FILE* f) {
    unsigned char buf[8];
    read_bytes(f, buf, 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return v;
}

inline FileHandle open_or_throw(const std::filesystem::path& path, const char* mode) {
    FileHandle f(std::fopen(path.string().c_str(), mode));
    if (!f) throw IoError("dataset: cannot open " + path.string());
    return f;
}

inline void check_dataset_header(std::FILE* f, std::uint8_t expected_kind) {
    char magic[4];
    read_bytes(f, magic, 4);
    if (std::memcmp(magic, kDatasetMagic, 4) != 0) throw FormatError("dataset: bad magic bytes");
    if (read_u32(f) != kDatasetVersion) throw FormatError("dataset: unsupported version");
    std::uint8_t kind;
    read_bytes(f, &kind, 1);
    if (kind != expected_kind) throw FormatError("dataset: wrong dataset kind");
}

}  // namespace detail

inline void save_paired_dataset(const PairedDataset& ds, const std::filesystem::path& path) {
    auto f = detail::open_or_throw(path, "wb");
    detail::write_bytes(f.get(), detail::kDatasetMagic, 4);
    detail::write_u32(f.get(), detail::kDatasetVersion);
    const std::uint8_t kind = 0;
    detail::write_bytes(f.get(), &kind, 1);
    detail::write_u32(f.get(), static_cast<std::uint32_t>(ds.size()));
    const std::uint32_t image_dim = ds.empty() ? 0 : static_cast<std::uint32_t>(ds.samples[0].image_input.size());
    const std::uint32_t text_dim = ds.empty() ? 0 : static_cast<std::uint32_t>(ds.samples[0].text_input.size());
    detail::write_u32(f.get(), image_dim);
    detail::write_u32(f.get(), text_dim);
    for (const auto& s : ds.samples) {
        if (s.image_input.size() != image_dim || s.text_input.size() != text_dim)
            throw ShapeMismatch("dataset: ragged sample dimensions");
        detail::write_u64(f.get(), s.pair_id);
        detail::write_u32(f.get(), static_cast<std::uint32_t>(s.class_index));
        for (double v : s.image_input) detail::write_f64(f.get(), v);
        for (double v : s.text_input) detail::write_f64(f.get(), v);
    }
    if (std::fflush(f.get()) != 0) throw IoError("dataset: flush failed");
}

inline PairedDataset load_paired_dataset(const std::filesystem::path& path) {
    auto f = detail::open_or_throw(path, "rb");
    detail::check_dataset_header(f.get(), 0);
    const std::uint32_t count = detail::read_u32(f.get());
    const std::uint32_t image_dim = detail::read_u32(f.get());
    const std::uint32_t text_dim = detail::read_u32(f.get());
    PairedDataset ds;
    ds.samples.resize(count);
    for (auto& s : ds.samples) {
        s.pair_id = detail::read_u64(f.get());
        s.class_index = static_cast<int>(detail::read_u32(f.get()));
        s.image_input.resize(image_dim);
        for (double& v : s.image_input) v = detail::read_f64(f.get());
        s.text_input.resize(text_dim);
        for (double& v : s.text_input) v = detail::read_f64(f.get());
    }
    if (std::fgetc(f.get()) != EOF) throw FormatError("dataset: trailing bytes");
    return ds;
}

inline void save_labeled_dataset(const LabeledDataset& ds, const std::filesystem::path& path) {
    auto f = detail::open_or_throw(path, "wb");
    detail::write_bytes(f.get(), detail::kDatasetMagic, 4);
    detail::write_u32(f.get(), detail::kDatasetVersion);
    const std::uint8_t kind = 1;
    detail::write_bytes(f.get(), &kind, 1);
    detail::write_u32(f.get(), static_cast<std::uint32_t>(ds.size()));
    const std::uint32_t dim = ds.empty() ? 0 : static_cast<std::uint32_t>(ds.samples[0].image_input.size());
    detail::write_u32(f.get(), dim);
    detail::write_u32(f.get(), 0);
    for (const auto& s : ds.samples) {
        if (s.image_input.size() != dim) throw ShapeMismatch("dataset: ragged sample dimensions");
        detail::write_u32(f.get(), static_cast<std::uint32_t>(s.label));
        for (double v : s.image_input) detail::write_f64(f.get(), v);
    }
    if (std::fflush(f.get()) != 0) throw IoError("dataset: flush failed");
}

inline LabeledDataset load_labeled_dataset(const std::filesystem::path& path) {
    auto f = detail::open_or_throw(path, "rb");
    detail::check_dataset_header(f.get(), 1);
    const std::uint32_t count = detail::read_u32(f.get());
    const std::uint32_t dim = detail::read_u32(f.get());
    detail::read_u32(f.get());  // text dim, unused for labeled data
    LabeledDataset ds;
    ds.samples.resize(count);
    for (auto& s : ds.samples) {
        s.label = static_cast<int>(detail::read_u32(f.get()));
        s.image_input.resize(dim);
        for (double& v : s.image_input) v = detail::read_f64(f.get());
    }
    if (std::fgetc(f.get()) != EOF) throw FormatError("dataset: trailing bytes");
    return ds;
}

// CSV export for eyeballing; not a load format.
inline void export_paired_csv(const PairedDataset& ds, const std::filesystem::path& path) {
    auto f = detail::open_or_throw(path, "w");
    std::fprintf(f.get(), "pair_id,class");
    const std::size_t image_dim = ds.empty() ? 0 : ds.samples[0].image_input.size();
    const std::size_t text_dim = ds.empty() ? 0 : ds.samples[0].text_input.size();
    for (std::size_t i = 0; i < image_dim; ++i) std::fprintf(f.get(), ",img%zu", i);
    for (std::size_t i = 0; i < text_dim; ++i) std::fprintf(f.get(), ",txt%zu", i);
    std::fprintf(f.get(), "\n");
    for (const auto& s : ds.samples) {
        std::fprintf(f.get(), "%llu,%d", static_cast<unsigned long long>(s.pair_id), s.class_index);
        for (double v : s.image_input) std::fprintf(f.get(), ",%.17g", v);
        for (double v : s.text_input) std::fprintf(f.get(), ",%.17g", v);
        std::fprintf(f.get(), "\n");
    }
}

inline void export_labeled_csv(const LabeledDataset& ds, const std::filesystem::path& path) {
    auto f = detail::open_or_throw(path, "w");
    std::fprintf(f.get(), "label");
    const std::size_t dim = ds.empty() ? 0 : ds.samples[0].image_input.size();
    for (std::size_t i = 0; i < dim; ++i) std::fprintf(f.get(), ",img%zu", i);
    std::fprintf(f.get(), "\n");
    for (const auto& s : ds.samples) {
        std::fprintf(f.get(), "%d", s.label);
        for (double v : s.image_input) std::fprintf(f.get(), ",%.17g", v);
        std::fprintf(f.get(), "\n");
    }
}

}  // namespace dive
