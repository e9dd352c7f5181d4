#pragma once

#include "fip/network.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace fip {

/// Gaussian blobs with unit variance, exactly `n_per_class` rows per class, rows
/// shuffled. Class centers are pairwise at least `separation` apart.
BatchXd gen_blobs(int n_classes, Index n_per_class, Index dim, double separation, std::uint64_t seed);

/// Images (IDX magic 0x00000803, ubyte) scaled to [0, 1] and flattened row-major,
/// with labels from an IDX 0x00000801 file. Double-typed image files (0x00000E..)
/// written by write_idx_images are read back unscaled.
BatchXd load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

/// Writes N x k inputs as a double-typed 2-D IDX file (magic 0x00000E02).
void write_idx_images(const std::filesystem::path& path, const Eigen::MatrixXd& inputs);
void write_idx_labels(const std::filesystem::path& path, const std::vector<int>& labels);

struct TrainTest {
    BatchXd train;
    BatchXd test;
};

/// First round(test_fraction * N) rows become the test split.
TrainTest split_train_test(const BatchXd& batch, double test_fraction);

/// Keeps rows whose label is in `classes`, relabeled to their position in `classes`.
BatchXd select_classes(const BatchXd& batch, const std::vector<int>& classes);

/// Affine map of every column onto [0, 1] using the train split's range; the test
/// split is mapped with the same transform and clipped.
void minmax_normalize(TrainTest& data);

/// Rows of `a` followed by rows of `b`; labels are dropped unless both share a task.
BatchXd concat_inputs(const BatchXd& a, const BatchXd& b);

/// Contiguous rows [begin, begin + count).
BatchXd slice_rows(const BatchXd& batch, Index begin, Index count);

} // namespace fip
