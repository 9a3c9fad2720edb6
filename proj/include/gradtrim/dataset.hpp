#pragma once

#include "gradtrim/common.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace gradtrim {

// Feature matrix (one sample per row), integer class labels, and an optional
// per-sample flag marking labels that were flipped away from ground truth.
struct LabeledDataset {
    Matrix features;                            // n x d
    std::vector<int> labels;                    // values in [0, num_classes)
    std::optional<std::vector<bool>> noise_mask;
    std::string name;

    Eigen::Index size() const { return features.rows(); }
    Eigen::Index dim() const { return features.cols(); }

    int num_classes() const {
        int c = 0;
        for (int y : labels) c = std::max(c, y + 1);
        return c;
    }

    void validate() const {
        require(static_cast<std::size_t>(features.rows()) == labels.size(),
                "dataset: label count does not match feature rows");
        require(all_finite(features), "dataset: non-finite feature value");
        for (int y : labels) require(y >= 0, "dataset: negative class label");
        if (noise_mask)
            require(noise_mask->size() == labels.size(),
                    "dataset: noise mask length does not match sample count");
    }
};

struct NoiseSpec {
    int flips_per_class = 0;
    std::uint64_t seed = 0;
};

namespace detail {

// Interleaves the two classes so any prefix of the sample list stays balanced.
inline void fill_interleaved(LabeledDataset& ds, const Matrix& a, const Matrix& b) {
    const Eigen::Index per_class = a.rows();
    ds.features.resize(2 * per_class, a.cols());
    ds.labels.resize(static_cast<std::size_t>(2 * per_class));
    for (Eigen::Index i = 0; i < per_class; ++i) {
        ds.features.row(2 * i) = a.row(i);
        ds.features.row(2 * i + 1) = b.row(i);
        ds.labels[static_cast<std::size_t>(2 * i)] = 0;
        ds.labels[static_cast<std::size_t>(2 * i + 1)] = 1;
    }
}

}  // namespace detail

// Two isotropic 2-D Gaussian clusters, one per class, linearly separable.
// Cluster sigma 0.8 with centers (0,0) and (5,5): separation > 6 sigma.
inline std::pair<LabeledDataset, LabeledDataset>
gen_linear_blobs(int n_train, int n_test, std::uint64_t seed) {
    require(n_train > 0 && n_test > 0, "gen_linear_blobs: counts must be positive");
    require(n_train % 2 == 0 && n_test % 2 == 0,
            "gen_linear_blobs: counts must be even for balanced classes");

    constexpr double kSigma = 0.8;
    const double centers[2][2] = {{0.0, 0.0}, {5.0, 5.0}};

    Rng rng(seed);
    auto make_split = [&](int n, const char* tag) {
        Matrix a(n / 2, 2), b(n / 2, 2);
        for (Eigen::Index i = 0; i < n / 2; ++i) {
            a(i, 0) = rng.normal(centers[0][0], kSigma);
            a(i, 1) = rng.normal(centers[0][1], kSigma);
            b(i, 0) = rng.normal(centers[1][0], kSigma);
            b(i, 1) = rng.normal(centers[1][1], kSigma);
        }
        LabeledDataset ds;
        ds.name = std::string("blobs_") + tag;
        detail::fill_interleaved(ds, a, b);
        return ds;
    };

    auto train = make_split(n_train, "train");
    auto test = make_split(n_test, "test");
    return {std::move(train), std::move(test)};
}

// Two interleaved crescents: class 0 on the upper unit half-circle, class 1 on
// the same arc mirrored and shifted by (1, -0.5), plus Gaussian jitter.
inline std::pair<LabeledDataset, LabeledDataset>
gen_half_moons(int n_train, int n_test, double gap_noise, std::uint64_t seed) {
    require(n_train > 0 && n_test > 0, "gen_half_moons: counts must be positive");
    require(n_train % 2 == 0 && n_test % 2 == 0,
            "gen_half_moons: counts must be even for balanced classes");
    require(gap_noise >= 0.0, "gen_half_moons: negative jitter");

    Rng rng(seed);
    auto make_split = [&](int n, const char* tag) {
        const Eigen::Index m = n / 2;
        Matrix a(m, 2), b(m, 2);
        for (Eigen::Index i = 0; i < m; ++i) {
            const double t = m > 1 ? M_PI * static_cast<double>(i) / static_cast<double>(m - 1)
                                   : 0.0;
            a(i, 0) = std::cos(t) + gap_noise * rng.normal();
            a(i, 1) = std::sin(t) + gap_noise * rng.normal();
            b(i, 0) = 1.0 - std::cos(t) + gap_noise * rng.normal();
            b(i, 1) = 0.5 - std::sin(t) + gap_noise * rng.normal();
        }
        LabeledDataset ds;
        ds.name = std::string("moons_") + tag;
        detail::fill_interleaved(ds, a, b);
        return ds;
    };

    auto train = make_split(n_train, "train");
    auto test = make_split(n_test, "test");
    return {std::move(train), std::move(test)};
}

// Flips `flips_per_class` labels in each class, chosen uniformly without
// replacement; the replacement label is drawn uniformly from the other
// classes. The returned mask marks exactly the flipped samples.
inline LabeledDataset inject_label_noise(const LabeledDataset& ds, const NoiseSpec& spec) {
    ds.validate();
    require(spec.flips_per_class >= 0, "inject_label_noise: negative flip count");

    const int num_classes = ds.num_classes();
    LabeledDataset out = ds;
    out.noise_mask = std::vector<bool>(ds.labels.size(), false);
    if (spec.flips_per_class == 0) return out;

    require(num_classes >= 2, "inject_label_noise: need at least two classes to flip");

    Rng rng(spec.seed);
    for (int c = 0; c < num_classes; ++c) {
        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < ds.labels.size(); ++i)
            if (ds.labels[i] == c) members.push_back(i);
        require(static_cast<std::size_t>(spec.flips_per_class) <= members.size(),
                "inject_label_noise: flip count exceeds class size");

        auto picks = rng.sample_without_replacement(members.size(),
                                                    static_cast<std::size_t>(spec.flips_per_class));
        for (std::size_t p : picks) {
            const std::size_t i = members[p];
            int new_label = static_cast<int>(rng.index(static_cast<std::size_t>(num_classes - 1)));
            if (new_label >= c) ++new_label;
            out.labels[i] = new_label;
            (*out.noise_mask)[i] = true;
        }
    }
    return out;
}

// CSV header: f0,...,f{d-1},label[,noisy]. Features use 17 significant digits
// so a write/read round trip reproduces doubles exactly.
inline void write_csv(const LabeledDataset& ds, const std::string& path) {
    ds.validate();
    std::ofstream out(path);
    require(out.good(), "write_csv: cannot open " + path);

    for (Eigen::Index j = 0; j < ds.dim(); ++j) out << "f" << j << ",";
    out << "label";
    if (ds.noise_mask) out << ",noisy";
    out << "\n";

    char buf[64];
    for (Eigen::Index i = 0; i < ds.size(); ++i) {
        for (Eigen::Index j = 0; j < ds.dim(); ++j) {
            std::snprintf(buf, sizeof(buf), "%.17g", ds.features(i, j));
            out << buf << ",";
        }
        out << ds.labels[static_cast<std::size_t>(i)];
        if (ds.noise_mask) out << "," << ((*ds.noise_mask)[static_cast<std::size_t>(i)] ? 1 : 0);
        out << "\n";
    }
    require(out.good(), "write_csv: write failed for " + path);
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur.push_back(ch);
        }
    }
    fields.push_back(cur);
    return fields;
}

inline double parse_double(const std::string& s, const std::string& ctx) {
    double v = 0.0;
    const char* begin = s.data();
    const char* end = begin + s.size();
    auto [ptr, ec] = std::from_chars(begin, end, v);
    require(ec == std::errc() && ptr == end, "read_csv: non-numeric value '" + s + "' " + ctx);
    return v;
}

inline int parse_int(const std::string& s, const std::string& ctx) {
    int v = 0;
    const char* begin = s.data();
    const char* end = begin + s.size();
    auto [ptr, ec] = std::from_chars(begin, end, v);
    require(ec == std::errc() && ptr == end, "read_csv: non-integer value '" + s + "' " + ctx);
    return v;
}

}  // namespace detail

inline LabeledDataset read_csv(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), "read_csv: cannot open " + path);

    std::string line;
    require(static_cast<bool>(std::getline(in, line)), "read_csv: empty file " + path);
    const auto header = detail::split_csv_line(line);

    // header must be f0..f{d-1},label[,noisy] in that order
    std::size_t d = 0;
    while (d < header.size() && header[d] == "f" + std::to_string(d)) ++d;
    require(d > 0, "read_csv: no feature columns (expected header f0,f1,...)");
    require(d < header.size() && header[d] == "label", "read_csv: missing label column");
    const bool has_mask = header.size() > d + 1;
    if (has_mask) {
        require(header[d + 1] == "noisy",
                "read_csv: unknown column '" + header[d + 1] + "'");
        require(header.size() == d + 2, "read_csv: unexpected extra columns");
    }

    std::vector<double> values;
    std::vector<int> labels;
    std::vector<bool> mask;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto fields = detail::split_csv_line(line);
        const std::string ctx = "at row " + std::to_string(n + 1);
        require(fields.size() == header.size(), "read_csv: ragged row " + ctx);
        for (std::size_t j = 0; j < d; ++j)
            values.push_back(detail::parse_double(fields[j], ctx));
        labels.push_back(detail::parse_int(fields[d], ctx));
        if (has_mask) {
            const int m = detail::parse_int(fields[d + 1], ctx);
            require(m == 0 || m == 1, "read_csv: noisy flag must be 0 or 1 " + ctx);
            mask.push_back(m == 1);
        }
        ++n;
    }
    require(n > 0, "read_csv: no data rows in " + path);

    LabeledDataset ds;
    ds.features.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j)
            ds.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                values[i * d + j];
    ds.labels = std::move(labels);
    if (has_mask) ds.noise_mask = std::move(mask);
    ds.name = path;
    ds.validate();
    return ds;
}

}  // namespace gradtrim
