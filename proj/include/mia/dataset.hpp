#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mia/config.hpp"
#include "mia/model.hpp"

namespace mia {

struct DatasetError : std::runtime_error {
    explicit DatasetError(const std::string& m) : std::runtime_error(m) {}
};

// In-memory dataset: u8 pixels, one label per sample.
struct Dataset {
    int n = 0, channels = 0, height = 0, width = 0, classes = 0;
    uint64_t gen_seed = 0;
    std::vector<uint8_t> pixels;  // (n, c, h, w)
    std::vector<uint8_t> labels;

    int64_t sample_numel() const { return static_cast<int64_t>(channels) * height * width; }
    const uint8_t* sample(int i) const { return pixels.data() + i * sample_numel(); }
};

// Loaded dataset plus its deterministic train/val split.
struct DatasetHandle {
    Dataset data;
    std::vector<int> train_idx;
    std::vector<int> val_idx;

    Batch make_batch(const std::vector<int>& indices) const;
    Batch make_batch(const std::vector<int>& order, size_t start, size_t count) const;
};

// Class-structured synthetic images: per-class texture prototypes with
// random shift, contrast and noise so sample difficulty varies. Fully
// determined by (classes, n, per-sample seed); regeneration is byte-stable.
Dataset synth_generate(int classes, int n, uint64_t seed, int image_size = 32, int channels = 3);

void write_packed(const Dataset& d, const std::string& path);
Dataset read_packed(const std::string& path);

// Directory format: labels.csv with `filename,label` rows plus binary PPM
// (P6) images of the configured size.
Dataset read_directory(const std::string& dir, int classes, int image_size, int channels);

// Resolves the spec (synthetic | packed | directory) and splits by the
// rank of a seeded per-sample hash, so counts are exact.
DatasetHandle load_dataset(const DatasetSpec& spec);

}  // namespace mia
