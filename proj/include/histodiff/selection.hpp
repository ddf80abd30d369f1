#pragma once

#include <map>
#include <string>
#include <vector>

#include "histodiff/data.hpp"
#include "histodiff/networks.hpp"

namespace histodiff {

struct CandidateSample {
    Tensor image;
    Tensor latent;
    int target_label = 0;
    int predicted_label = 0;
    double confidence = 0.0;  // max softmax of the feature classifier
    Tensor feature;           // d_feat vector from the same classifier
    double centroid_distance = 0.0;
};

struct ClassCentroid {
    int label = 0;
    Tensor centroid;  // d_feat vector, arithmetic mean of real features
    int support = 0;
};

// Per-class mean of features; labels must cover 0..K-1 with no empty class.
std::vector<ClassCentroid> compute_centroids(const std::vector<Tensor>& features,
                                             const std::vector<int>& labels);

struct SelectionRow {
    size_t candidate_id = 0;
    double confidence = 0.0;
    double distance = 0.0;
    bool selected = false;
    std::string reason;  // selected | rank | label_mismatch | low_confidence
};

struct SelectionResult {
    std::vector<CandidateSample> selected;  // centroid_distance filled in
    std::vector<size_t> selected_indices;   // positions in the candidate list
    bool shortfall = false;
    std::vector<SelectionRow> rows;  // one disposition per input candidate
};

// Filter (predicted == target, confidence >= min), rank by ascending distance
// to the target centroid, ties by (confidence desc, index asc), take `count`.
SelectionResult select(const std::vector<CandidateSample>& candidates,
                       const std::vector<ClassCentroid>& centroids, int target_label, int count,
                       double confidence_min);

// Uniform without-replacement draw from candidates of the target label.
SelectionResult random_select(const std::vector<CandidateSample>& candidates, int target_label,
                              int count, uint64_t seed);

struct AugmentedSet {
    PatchDataset data;
    std::vector<bool> synthetic;          // parallel to data.items
    std::map<int, int> shortfall;         // class -> missing synthetic count
    std::map<int, int> requested;         // class -> apportioned quota
};

// real plus round(ratio * |real|) synthetics apportioned per class in
// proportion to real class counts (largest-remainder rounding).
AugmentedSet build_augmented_set(const PatchDataset& real,
                                 const std::map<int, SelectionResult>& per_class, double ratio);

// One CSV with a class column followed by the per-candidate disposition rows.
void write_selection_report(const std::string& path,
                            const std::map<int, SelectionResult>& per_class);

}  // namespace histodiff
