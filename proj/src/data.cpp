#include "histodiff/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "histodiff/image_io.hpp"
#include "histodiff/rng.hpp"

namespace fs = std::filesystem;

namespace histodiff {

bool PatchDataset::fully_labeled() const {
    return std::all_of(items.begin(), items.end(),
                       [](const PatchItem& it) { return it.label.has_value(); });
}

void PatchDataset::validate() const {
    if (items.empty()) return;
    const int h = items.front().image.dim(1), w = items.front().image.dim(2);
    for (size_t i = 0; i < items.size(); ++i) {
        const PatchItem& it = items[i];
        if (it.image.ndim() != 3 || it.image.dim(0) != 3)
            throw std::runtime_error("dataset item " + std::to_string(i) + ": not a [3,H,W] image");
        if (it.image.dim(1) != h || it.image.dim(2) != w)
            throw std::runtime_error("dataset item " + std::to_string(i) +
                                     ": inconsistent image size " + it.image.shape_str());
        if (it.label && (*it.label < 0 || *it.label >= num_classes()))
            throw std::runtime_error("dataset item " + std::to_string(i) + ": label out of range");
        if (it.source_id < 0)
            throw std::runtime_error("dataset item " + std::to_string(i) + ": negative source id");
    }
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.push_back("");
    return out;
}

std::string strip_cr(std::string s) {
    if (!s.empty() && s.back() == '\r') s.pop_back();
    return s;
}

}  // namespace

PatchDataset load_manifest(const std::string& manifest_path, const std::string& root) {
    std::ifstream in(manifest_path);
    if (!in) throw std::runtime_error("load_manifest: cannot open manifest: " + manifest_path);

    std::string header;
    std::getline(in, header);
    if (strip_cr(header) != "path,label,source")
        throw std::runtime_error("load_manifest: bad header, expected `path,label,source`, got `" +
                                 header + "`");

    struct Row { std::string path, label, source; };
    std::vector<Row> rows;
    std::string line;
    size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        line = strip_cr(line);
        if (line.empty()) continue;
        auto fields = split_csv_line(line);
        if (fields.size() != 3)
            throw std::runtime_error("load_manifest: row " + std::to_string(lineno) +
                                     ": expected 3 fields, got " + std::to_string(fields.size()));
        rows.push_back({fields[0], fields[1], fields[2]});
    }

    // dense ids in sorted name order
    std::vector<std::string> labels, sources;
    for (const Row& r : rows) {
        if (!r.label.empty()) labels.push_back(r.label);
        sources.push_back(r.source);
    }
    std::sort(labels.begin(), labels.end());
    labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
    std::sort(sources.begin(), sources.end());
    sources.erase(std::unique(sources.begin(), sources.end()), sources.end());
    std::map<std::string, int> label_id, source_id;
    for (size_t i = 0; i < labels.size(); ++i) label_id[labels[i]] = static_cast<int>(i);
    for (size_t i = 0; i < sources.size(); ++i) source_id[sources[i]] = static_cast<int>(i);

    PatchDataset ds;
    ds.label_names = labels;
    ds.items.reserve(rows.size());
    for (const Row& r : rows) {
        const fs::path full = fs::path(root) / r.path;
        PatchItem item;
        try {
            item.image = load_png(full.string());
        } catch (const std::exception& e) {
            throw std::runtime_error("load_manifest: row with path `" + r.path + "`: " + e.what());
        }
        if (!r.label.empty()) item.label = label_id.at(r.label);
        item.source_id = source_id.at(r.source);
        ds.items.push_back(std::move(item));
    }
    ds.validate();
    return ds;
}

PatchDataset subsample_evenly(const PatchDataset& ds, double fraction, uint64_t seed) {
    if (!(fraction > 0.0 && fraction <= 1.0))
        throw std::invalid_argument("subsample_evenly: fraction must lie in (0,1]");
    if (!ds.fully_labeled())
        throw std::invalid_argument("subsample_evenly: dataset must be fully labeled");

    std::vector<std::vector<size_t>> by_class(static_cast<size_t>(ds.num_classes()));
    for (size_t i = 0; i < ds.items.size(); ++i)
        by_class[static_cast<size_t>(*ds.items[i].label)].push_back(i);

    std::vector<size_t> chosen;
    for (int c = 0; c < ds.num_classes(); ++c) {
        auto& idx = by_class[static_cast<size_t>(c)];
        const size_t k = static_cast<size_t>(std::floor(fraction * static_cast<double>(idx.size())));
        if (k == 0)
            throw std::invalid_argument("subsample_evenly: class " + std::to_string(c) +
                                        " would vanish (floor(fraction*n)=0)");
        Rng rng(derive_seed(seed, static_cast<uint64_t>(c)));
        // partial Fisher-Yates: first k entries are a uniform sample
        for (size_t i = 0; i < k; ++i) {
            const size_t j = i + static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(idx.size() - 1 - i)));
            std::swap(idx[i], idx[j]);
        }
        chosen.insert(chosen.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
    }
    std::sort(chosen.begin(), chosen.end());

    PatchDataset out;
    out.label_names = ds.label_names;
    out.items.reserve(chosen.size());
    for (size_t i : chosen) out.items.push_back(ds.items[i]);
    return out;
}

namespace {

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
    h = h - std::floor(h);
    const double c = v * s;
    const double hp = h * 6.0;
    const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    if (hp < 1) { r = c; g = x; }
    else if (hp < 2) { r = x; g = c; }
    else if (hp < 3) { g = c; b = x; }
    else if (hp < 4) { g = x; b = c; }
    else if (hp < 5) { r = x; b = c; }
    else { r = c; b = x; }
    const double m = v - c;
    return {r + m, g + m, b + m};
}

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

// Pattern value in [0,1] at pixel (y,x) for one of the texture families.
double pattern_value(int family, double u, double v, double freq, double angle,
                     double phase, double lobes) {
    const double cu = u - 0.5, cv = v - 0.5;
    switch (family) {
        case 0: {  // stripes
            const double p = cu * std::cos(angle) + cv * std::sin(angle);
            return 0.5 + 0.5 * std::cos(2.0 * M_PI * freq * p + phase);
        }
        case 1: {  // dots
            const double gu = std::fmod(u * freq + phase, 1.0) - 0.5;
            const double gv = std::fmod(v * freq + phase * 0.7, 1.0) - 0.5;
            return std::exp(-18.0 * (gu * gu + gv * gv));
        }
        case 2: {  // checker
            const int iu = static_cast<int>(std::floor(u * freq + phase));
            const int iv = static_cast<int>(std::floor(v * freq + phase));
            return ((iu + iv) % 2 + 2) % 2 == 0 ? 0.85 : 0.15;
        }
        case 3: {  // diagonal gradient
            const double p = 0.5 * (std::sin(2.0 * M_PI * (u * 0.5 + v * 0.5) * freq * 0.25 + phase) + 1.0);
            return p;
        }
        default: {  // rings with angular lobes (held-out family)
            const double r = std::sqrt(cu * cu + cv * cv);
            const double th = std::atan2(cv, cu);
            return 0.5 + 0.45 * std::cos(2.0 * M_PI * freq * r + lobes * th + phase);
        }
    }
}

Tensor render_patch(int family, int size, const std::array<double, 3>& col_a,
                    const std::array<double, 3>& col_b, double freq, double angle,
                    double phase, double lobes, double noise_sigma, Rng& rng) {
    Tensor img({3, size, size});
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const double u = (x + 0.5) / size, v = (y + 0.5) / size;
            const double p = pattern_value(family, u, v, freq, angle, phase, lobes);
            for (int ch = 0; ch < 3; ++ch) {
                const double val = col_a[static_cast<size_t>(ch)] * p +
                                   col_b[static_cast<size_t>(ch)] * (1.0 - p) +
                                   noise_sigma * rng.normal();
                img.at(ch, y, x) = clamp01(val);
            }
        }
    }
    return img;
}

}  // namespace

Benchmark generate_benchmark(const BenchmarkSpec& spec) {
    if (spec.num_sources < 1) throw std::invalid_argument("generate_benchmark: num_sources >= 1");
    if (spec.classes_per_source < 1 || spec.patches_per_class < 1)
        throw std::invalid_argument("generate_benchmark: class/patch counts must be positive");
    if (spec.image_size % spec.downsample_factor != 0)
        throw std::invalid_argument("generate_benchmark: image_size not divisible by LAE factor");

    Benchmark b;
    const int per_source = spec.classes_per_source * spec.patches_per_class;

    // Pretrain sources draw from families 0..3; the labeled source uses the
    // held-out rings family (4) with its own palettes.
    for (int src = 0; src < spec.num_sources; ++src) {
        const int family = src % 4;
        Rng src_rng(derive_seed(spec.seed, 1, static_cast<uint64_t>(src)));
        const double base_hue = src_rng.uniform();
        for (int i = 0; i < per_source; ++i) {
            Rng rng(derive_seed(spec.seed, 2, static_cast<uint64_t>(src), static_cast<uint64_t>(i)));
            const auto col_a = hsv_to_rgb(base_hue + 0.08 * (rng.uniform() - 0.5),
                                          0.45 + 0.2 * rng.uniform(), 0.75 + 0.2 * rng.uniform());
            const auto col_b = hsv_to_rgb(base_hue + 0.5 + 0.08 * (rng.uniform() - 0.5),
                                          0.25 + 0.2 * rng.uniform(), 0.35 + 0.2 * rng.uniform());
            PatchItem item;
            item.image = render_patch(family, spec.image_size, col_a, col_b,
                                      2.0 + 5.0 * rng.uniform(), M_PI * rng.uniform(),
                                      2.0 * M_PI * rng.uniform(), 0.0, 0.04, rng);
            item.source_id = src;
            b.pretrain_pool.items.push_back(std::move(item));
        }
    }

    const int K = spec.classes_per_source;
    auto make_labeled_item = [&](int c, uint64_t stream, int i) {
        Rng rng(derive_seed(spec.seed, stream, static_cast<uint64_t>(c), static_cast<uint64_t>(i)));
        const double hue = static_cast<double>(c) / K + 0.06 * (rng.uniform() - 0.5);
        const auto col_a = hsv_to_rgb(hue, 0.5 + 0.25 * rng.uniform(), 0.7 + 0.25 * rng.uniform());
        const auto col_b = hsv_to_rgb(hue + 0.45, 0.2 + 0.2 * rng.uniform(), 0.25 + 0.2 * rng.uniform());
        const double freq = 2.0 + 1.1 * (c % 3) + 0.35 * (rng.uniform() - 0.5);
        const double lobes = 2.0 * (c / 3);
        PatchItem item;
        item.image = render_patch(4, spec.image_size, col_a, col_b, freq, 0.0,
                                  2.0 * M_PI * rng.uniform(), lobes, 0.07, rng);
        item.label = c;
        item.source_id = spec.num_sources;
        return item;
    };

    for (int c = 0; c < K; ++c)
        b.labeled_set.label_names.push_back("c" + std::to_string(c));
    b.test_set.label_names = b.labeled_set.label_names;

    for (int c = 0; c < K; ++c)
        for (int i = 0; i < spec.patches_per_class; ++i)
            b.labeled_set.items.push_back(make_labeled_item(c, 3, i));
    for (int c = 0; c < K; ++c)
        for (int i = 0; i < spec.patches_per_class; ++i)
            b.test_set.items.push_back(make_labeled_item(c, 4, i));

    b.pretrain_pool.validate();
    b.labeled_set.validate();
    b.test_set.validate();
    return b;
}

void write_benchmark(const Benchmark& b, const std::string& dir) {
    auto write_split = [&](const PatchDataset& ds, const std::string& split) {
        const fs::path split_dir = fs::path(dir) / split;
        fs::create_directories(split_dir);
        std::ofstream csv(fs::path(dir) / (split + ".csv"));
        csv << "path,label,source\n";
        for (size_t i = 0; i < ds.items.size(); ++i) {
            const PatchItem& it = ds.items[i];
            char name[64];
            std::snprintf(name, sizeof(name), "%s/img_%06zu.png", split.c_str(), i);
            save_png(it.image, (fs::path(dir) / name).string());
            const std::string label = it.label ? ds.label_names[static_cast<size_t>(*it.label)] : "";
            csv << name << "," << label << ",src" << it.source_id << "\n";
        }
    };
    write_split(b.pretrain_pool, "pretrain");
    write_split(b.labeled_set, "labeled");
    write_split(b.test_set, "test");
}

}  // namespace histodiff
