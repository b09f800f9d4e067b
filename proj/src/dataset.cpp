#include "mia/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mia/rng.hpp"

namespace fs = std::filesystem;

namespace mia {

Batch DatasetHandle::make_batch(const std::vector<int>& indices) const {
    Batch b;
    b.size = static_cast<int>(indices.size());
    b.channels = data.channels;
    b.height = data.height;
    b.width = data.width;
    b.pixels.resize(static_cast<size_t>(b.size) * data.sample_numel());
    b.labels.resize(b.size);
    for (int i = 0; i < b.size; ++i) {
        const uint8_t* src = data.sample(indices[i]);
        double* dst = b.pixels.data() + static_cast<size_t>(i) * data.sample_numel();
        for (int64_t j = 0; j < data.sample_numel(); ++j) dst[j] = src[j] / 255.0;
        b.labels[i] = data.labels[indices[i]];
    }
    return b;
}

Batch DatasetHandle::make_batch(const std::vector<int>& order, size_t start, size_t count) const {
    std::vector<int> idx(order.begin() + start,
                         order.begin() + std::min(order.size(), start + count));
    return make_batch(idx);
}

namespace {

struct Proto {
    // six sinusoid components per channel
    std::vector<double> amp, fx, fy, phase;  // size channels*6
};

Proto make_proto(int channels, Rng& rng) {
    Proto p;
    int k = channels * 6;
    p.amp.resize(k);
    p.fx.resize(k);
    p.fy.resize(k);
    p.phase.resize(k);
    for (int i = 0; i < k; ++i) {
        p.amp[i] = rng.uniform_range(0.3, 1.0);
        p.fx[i] = rng.uniform_range(0.5, 4.0);
        p.fy[i] = rng.uniform_range(0.5, 4.0);
        p.phase[i] = rng.uniform_range(0.0, 2.0 * M_PI);
    }
    return p;
}

double proto_value(const Proto& p, int channel, double x, double y) {
    double s = 0.0, norm = 0.0;
    for (int j = 0; j < 6; ++j) {
        int i = channel * 6 + j;
        s += p.amp[i] * std::sin(2.0 * M_PI * (p.fx[i] * x + p.fy[i] * y) + p.phase[i]);
        norm += p.amp[i];
    }
    return 0.5 + 0.5 * s / norm;
}

}  // namespace

Dataset synth_generate(int classes, int n, uint64_t seed, int image_size, int channels) {
    if (n < classes) throw DatasetError("synth_generate: need at least one sample per class");
    Dataset d;
    d.n = n;
    d.channels = channels;
    d.height = image_size;
    d.width = image_size;
    d.classes = classes;
    d.gen_seed = seed;
    d.pixels.resize(static_cast<size_t>(n) * d.sample_numel());
    d.labels.resize(n);

    std::vector<Proto> protos;
    for (int k = 0; k < classes; ++k) {
        Rng prng(mix_seed(seed, 0xC1A55000ULL + k));
        protos.push_back(make_proto(channels, prng));
    }

    for (int i = 0; i < n; ++i) {
        int label = i % classes;  // balanced within +-1
        d.labels[i] = static_cast<uint8_t>(label);
        Rng rng(mix_seed(seed, 0x5A3B1E00ULL + i));
        // difficulty knobs: shift, contrast, additive noise
        double dx = rng.uniform_range(-4.0, 4.0) / image_size;
        double dy = rng.uniform_range(-4.0, 4.0) / image_size;
        double contrast = rng.uniform_range(0.6, 1.0);
        double sigma = rng.uniform_range(0.02, 0.35);
        uint8_t* px = d.pixels.data() + static_cast<size_t>(i) * d.sample_numel();
        const Proto& p = protos[label];
        for (int c = 0; c < channels; ++c)
            for (int y = 0; y < image_size; ++y)
                for (int x = 0; x < image_size; ++x) {
                    double u = static_cast<double>(x) / image_size - dx;
                    double v = static_cast<double>(y) / image_size - dy;
                    double val = 0.5 + contrast * (proto_value(p, c, u, v) - 0.5);
                    val += sigma * rng.gaussian();
                    val = std::clamp(val, 0.0, 1.0);
                    px[(static_cast<size_t>(c) * image_size + y) * image_size + x] =
                        static_cast<uint8_t>(std::lround(val * 255.0));
                }
    }
    return d;
}

namespace {
constexpr char kMagic[4] = {'M', 'I', 'A', 'P'};
constexpr uint32_t kPackVersion = 1;

template <typename T>
void put(std::ofstream& f, T v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
template <typename T>
T get(std::ifstream& f) {
    T v{};
    f.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}
}  // namespace

void write_packed(const Dataset& d, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DatasetError("cannot write dataset: " + path);
    f.write(kMagic, 4);
    put<uint32_t>(f, kPackVersion);
    put<uint32_t>(f, static_cast<uint32_t>(d.n));
    put<uint16_t>(f, static_cast<uint16_t>(d.classes));
    put<uint16_t>(f, static_cast<uint16_t>(d.channels));
    put<uint16_t>(f, static_cast<uint16_t>(d.height));
    put<uint16_t>(f, static_cast<uint16_t>(d.width));
    put<uint64_t>(f, d.gen_seed);
    f.write(reinterpret_cast<const char*>(d.labels.data()), d.labels.size());
    f.write(reinterpret_cast<const char*>(d.pixels.data()), d.pixels.size());
    if (!f) throw DatasetError("short write: " + path);
}

Dataset read_packed(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DatasetError("dataset file not readable: " + path);
    char magic[4];
    f.read(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0) throw DatasetError("not a packed dataset: " + path);
    if (get<uint32_t>(f) != kPackVersion) throw DatasetError("unsupported dataset version");
    Dataset d;
    d.n = static_cast<int>(get<uint32_t>(f));
    d.classes = get<uint16_t>(f);
    d.channels = get<uint16_t>(f);
    d.height = get<uint16_t>(f);
    d.width = get<uint16_t>(f);
    d.gen_seed = get<uint64_t>(f);
    d.labels.resize(d.n);
    f.read(reinterpret_cast<char*>(d.labels.data()), d.labels.size());
    d.pixels.resize(static_cast<size_t>(d.n) * d.sample_numel());
    f.read(reinterpret_cast<char*>(d.pixels.data()), d.pixels.size());
    if (!f) throw DatasetError("truncated dataset: " + path);
    for (int i = 0; i < d.n; ++i)
        if (d.labels[i] >= d.classes)
            throw DatasetError("label out of range at sample " + std::to_string(i));
    return d;
}

namespace {

std::vector<uint8_t> read_ppm(const std::string& path, int expect_c, int expect_hw) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DatasetError("image not readable: " + path);
    std::string magic;
    f >> magic;
    if (magic != "P6") throw DatasetError("image not decodable (want binary PPM): " + path);
    auto next_int = [&]() {
        int v;
        f >> std::ws;
        while (f.peek() == '#') {
            std::string line;
            std::getline(f, line);
            f >> std::ws;
        }
        f >> v;
        return v;
    };
    int w = next_int(), h = next_int(), maxv = next_int();
    f.get();  // single whitespace after header
    if (maxv != 255) throw DatasetError("image not decodable (maxval != 255): " + path);
    if (w != expect_hw || h != expect_hw)
        throw DatasetError("image size mismatch: " + path);
    std::vector<uint8_t> rgb(static_cast<size_t>(w) * h * 3);
    f.read(reinterpret_cast<char*>(rgb.data()), rgb.size());
    if (!f) throw DatasetError("image truncated: " + path);
    // interleaved RGB -> planar, first expect_c channels
    std::vector<uint8_t> out(static_cast<size_t>(expect_c) * h * w);
    for (int c = 0; c < expect_c; ++c)
        for (int i = 0; i < h * w; ++i) out[static_cast<size_t>(c) * h * w + i] = rgb[3 * i + c];
    return out;
}

}  // namespace

Dataset read_directory(const std::string& dir, int classes, int image_size, int channels) {
    std::string csv = (fs::path(dir) / "labels.csv").string();
    std::ifstream f(csv);
    if (!f) throw DatasetError("labels.csv not readable in " + dir);
    Dataset d;
    d.channels = channels;
    d.height = image_size;
    d.width = image_size;
    d.classes = classes;
    std::string line;
    int row = 0;
    while (std::getline(f, line)) {
        ++row;
        if (line.empty()) continue;
        if (row == 1 && line.rfind("filename,", 0) == 0) continue;  // optional header
        auto comma = line.find(',');
        if (comma == std::string::npos)
            throw DatasetError("labels.csv row " + std::to_string(row) + ": missing label");
        std::string fname = line.substr(0, comma);
        int label;
        try {
            label = std::stoi(line.substr(comma + 1));
        } catch (...) {
            throw DatasetError("labels.csv row " + std::to_string(row) + " (" + fname +
                               "): label not an integer");
        }
        if (label < 0 || label >= classes)
            throw DatasetError("labels.csv row " + std::to_string(row) + " (" + fname +
                               "): label out of range");
        auto img = read_ppm((fs::path(dir) / fname).string(), channels, image_size);
        d.pixels.insert(d.pixels.end(), img.begin(), img.end());
        d.labels.push_back(static_cast<uint8_t>(label));
        ++d.n;
    }
    if (d.n == 0) throw DatasetError("dataset empty: " + dir);
    return d;
}

DatasetHandle load_dataset(const DatasetSpec& spec) {
    DatasetHandle h;
    if (spec.kind == "synthetic") {
        h.data = synth_generate(spec.classes, spec.samples, spec.seed);
    } else if (spec.kind == "packed") {
        h.data = read_packed(spec.path);
    } else if (spec.kind == "directory") {
        h.data = read_directory(spec.path, spec.classes, 32, 3);
    } else {
        throw DatasetError("unknown dataset kind: " + spec.kind);
    }
    // split by rank of a seeded hash of the sample id: deterministic with
    // exact counts
    int n = h.data.n;
    std::vector<std::pair<uint64_t, int>> ranked(n);
    for (int i = 0; i < n; ++i) ranked[i] = {mix_seed(spec.seed, 0x5B117000ULL + i), i};
    std::sort(ranked.begin(), ranked.end());
    int n_val = static_cast<int>(std::lround(spec.val_fraction * n));
    for (int i = 0; i < n; ++i) {
        if (i < n_val)
            h.val_idx.push_back(ranked[i].second);
        else
            h.train_idx.push_back(ranked[i].second);
    }
    std::sort(h.val_idx.begin(), h.val_idx.end());
    std::sort(h.train_idx.begin(), h.train_idx.end());
    return h;
}

}  // namespace mia
