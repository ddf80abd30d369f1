#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "histodiff/tensor.hpp"

namespace histodiff {

struct PatchItem {
    Tensor image;  // [3,H,W] in [0,1]
    std::optional<int> label;
    int source_id = 0;
};

struct PatchDataset {
    std::vector<PatchItem> items;
    std::vector<std::string> label_names;  // dense label id -> name, sorted

    int num_classes() const { return static_cast<int>(label_names.size()); }
    bool fully_labeled() const;
    void validate() const;  // shape / label-range / source-id invariants
};

struct BenchmarkSpec {
    int num_sources = 3;         // M
    int classes_per_source = 6;
    int patches_per_class = 200;
    int image_size = 32;
    uint64_t seed = 7;
    int downsample_factor = 4;   // LAE factor the size must divide by
};

struct Benchmark {
    PatchDataset pretrain_pool;  // sources 0..M-1, unlabeled
    PatchDataset labeled_set;    // source M, labels kept
    PatchDataset test_set;       // source M, disjoint from labeled_set
};

// CSV manifest with header exactly `path,label,source`; paths relative to root.
PatchDataset load_manifest(const std::string& manifest_path, const std::string& root);

// floor(fraction * n_c) items per class, without replacement, RNG per (seed, class).
PatchDataset subsample_evenly(const PatchDataset& ds, double fraction, uint64_t seed);

Benchmark generate_benchmark(const BenchmarkSpec& spec);

// Emits PNG tree plus pretrain.csv / labeled.csv / test.csv under dir.
void write_benchmark(const Benchmark& b, const std::string& dir);

}  // namespace histodiff
