#include "fip/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>

namespace fip {

BatchXd gen_blobs(int n_classes, Index n_per_class, Index dim, double separation, std::uint64_t seed)
{
    if (n_classes < 2)
        throw Error(Errc::invalid_argument, "gen_blobs needs at least two classes");
    if (!(separation > 0.0))
        throw Error(Errc::invalid_argument, "separation must be positive");
    if (n_per_class < 1 || dim < 1)
        throw Error(Errc::invalid_argument, "n_per_class and dim must be >= 1");

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);

    // Rejection sampling in a cube wide enough to hold the requested packing.
    const double cells = std::ceil(std::pow(static_cast<double>(n_classes), 1.0 / static_cast<double>(dim)));
    const double half_width = separation * std::max(1.0, cells);
    std::uniform_real_distribution<double> coord(-half_width, half_width);
    std::vector<Eigen::VectorXd> centers;
    int attempts = 0;
    constexpr int max_attempts = 100000;
    while (static_cast<int>(centers.size()) < n_classes) {
        if (++attempts > max_attempts)
            throw Error(Errc::infeasible, "could not place " + std::to_string(n_classes) + " centers " +
                                              std::to_string(separation) + " apart in " + std::to_string(dim) +
                                              " dimensions");
        Eigen::VectorXd c(dim);
        for (Index j = 0; j < dim; ++j)
            c(j) = coord(rng);
        const bool ok = std::all_of(centers.begin(), centers.end(),
                                    [&](const Eigen::VectorXd& other) { return (other - c).norm() >= separation; });
        if (ok)
            centers.push_back(std::move(c));
    }

    const Index total = n_per_class * n_classes;
    Eigen::MatrixXd rows(total, dim);
    std::vector<int> labels(static_cast<std::size_t>(total));
    for (int k = 0; k < n_classes; ++k)
        for (Index i = 0; i < n_per_class; ++i) {
            const Index r = k * n_per_class + i;
            for (Index j = 0; j < dim; ++j)
                rows(r, j) = centers[static_cast<std::size_t>(k)](j) + normal(rng);
            labels[static_cast<std::size_t>(r)] = k;
        }

    std::vector<Index> perm(static_cast<std::size_t>(total));
    std::iota(perm.begin(), perm.end(), Index{0});
    for (Index i = total - 1; i > 0; --i) {
        std::uniform_int_distribution<Index> pick(0, i);
        std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(pick(rng))]);
    }
    BatchXd out;
    out.inputs.resize(total, dim);
    out.labels.emplace(static_cast<std::size_t>(total));
    for (Index i = 0; i < total; ++i) {
        out.inputs.row(i) = rows.row(perm[static_cast<std::size_t>(i)]);
        (*out.labels)[static_cast<std::size_t>(i)] = labels[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
    }
    return out;
}

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw Error(Errc::io_error, "cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t at)
{
    return (std::uint32_t{buf[at]} << 24) | (std::uint32_t{buf[at + 1]} << 16) | (std::uint32_t{buf[at + 2]} << 8) |
           std::uint32_t{buf[at + 3]};
}

struct IdxHeader {
    unsigned char type = 0;
    std::vector<std::uint32_t> dims;
    std::size_t payload_offset = 0;
};

IdxHeader parse_idx(const std::vector<unsigned char>& buf, const std::filesystem::path& path)
{
    if (buf.size() < 4)
        throw Error(Errc::truncated, path.string() + ": file too short for an IDX header");
    if (buf[0] != 0 || buf[1] != 0)
        throw Error(Errc::bad_magic, path.string() + ": bad IDX magic");
    IdxHeader h;
    h.type = buf[2];
    const std::size_t ndim = buf[3];
    if (ndim == 0)
        throw Error(Errc::bad_magic, path.string() + ": IDX file declares zero dimensions");
    if (buf.size() < 4 + 4 * ndim)
        throw Error(Errc::truncated, path.string() + ": truncated IDX dimension block");
    for (std::size_t i = 0; i < ndim; ++i)
        h.dims.push_back(read_be32(buf, 4 + 4 * i));
    h.payload_offset = 4 + 4 * ndim;
    return h;
}

void append_be32(std::vector<unsigned char>& out, std::uint32_t v)
{
    for (int s = 24; s >= 0; s -= 8)
        out.push_back(static_cast<unsigned char>((v >> s) & 0xffU));
}

void write_file(const std::filesystem::path& path, const std::vector<unsigned char>& bytes)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw Error(Errc::io_error, "cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out)
        throw Error(Errc::io_error, "write failed for " + path.string());
}

} // namespace

BatchXd load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path)
{
    const auto img = read_file(images_path);
    const auto lab = read_file(labels_path);
    const IdxHeader ih = parse_idx(img, images_path);
    const IdxHeader lh = parse_idx(lab, labels_path);

    const bool ubyte_images = ih.type == 0x08 && ih.dims.size() == 3;
    const bool double_images = ih.type == 0x0E && ih.dims.size() >= 2;
    if (!ubyte_images && !double_images)
        throw Error(Errc::bad_magic, images_path.string() + ": expected image magic 0x00000803");
    if (lh.type != 0x08 || lh.dims.size() != 1)
        throw Error(Errc::bad_magic, labels_path.string() + ": expected label magic 0x00000801");

    const std::size_t n = ih.dims[0];
    std::size_t row = 1;
    for (std::size_t i = 1; i < ih.dims.size(); ++i)
        row *= ih.dims[i];
    if (lh.dims[0] != n)
        throw Error(Errc::count_mismatch, "image file has " + std::to_string(n) + " items, label file has " +
                                              std::to_string(lh.dims[0]));
    if (n == 0)
        throw Error(Errc::empty_batch, images_path.string() + ": no images");
    const std::size_t elem = ubyte_images ? 1 : 8;
    if (img.size() < ih.payload_offset + n * row * elem)
        throw Error(Errc::truncated, images_path.string() + ": pixel payload truncated");
    if (lab.size() < lh.payload_offset + n)
        throw Error(Errc::truncated, labels_path.string() + ": label payload truncated");

    BatchXd out;
    out.inputs.resize(static_cast<Index>(n), static_cast<Index>(row));
    out.labels.emplace(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < row; ++j) {
            const std::size_t at = ih.payload_offset + (i * row + j) * elem;
            double value = 0.0;
            if (ubyte_images) {
                value = static_cast<double>(img[at]) / 255.0;
            } else {
                std::uint64_t bits = 0;
                for (std::size_t b = 0; b < 8; ++b)
                    bits = (bits << 8) | img[at + b];
                value = std::bit_cast<double>(bits);
            }
            out.inputs(static_cast<Index>(i), static_cast<Index>(j)) = value;
        }
        (*out.labels)[i] = lab[lh.payload_offset + i];
    }
    return out;
}

void write_idx_images(const std::filesystem::path& path, const Eigen::MatrixXd& inputs)
{
    std::vector<unsigned char> bytes{0, 0, 0x0E, 2};
    append_be32(bytes, static_cast<std::uint32_t>(inputs.rows()));
    append_be32(bytes, static_cast<std::uint32_t>(inputs.cols()));
    for (Index i = 0; i < inputs.rows(); ++i)
        for (Index j = 0; j < inputs.cols(); ++j) {
            const auto bits = std::bit_cast<std::uint64_t>(inputs(i, j));
            for (int s = 56; s >= 0; s -= 8)
                bytes.push_back(static_cast<unsigned char>((bits >> s) & 0xffU));
        }
    write_file(path, bytes);
}

void write_idx_labels(const std::filesystem::path& path, const std::vector<int>& labels)
{
    std::vector<unsigned char> bytes{0, 0, 0x08, 1};
    append_be32(bytes, static_cast<std::uint32_t>(labels.size()));
    for (int l : labels) {
        if (l < 0 || l > 255)
            throw Error(Errc::invalid_argument, "IDX labels must fit in one byte");
        bytes.push_back(static_cast<unsigned char>(l));
    }
    write_file(path, bytes);
}

BatchXd slice_rows(const BatchXd& batch, Index begin, Index count)
{
    BatchXd out;
    out.task_id = batch.task_id;
    out.inputs = batch.inputs.middleRows(begin, count);
    if (batch.labels)
        out.labels.emplace(batch.labels->begin() + begin, batch.labels->begin() + begin + count);
    return out;
}

TrainTest split_train_test(const BatchXd& batch, double test_fraction)
{
    if (!(test_fraction > 0.0 && test_fraction < 1.0))
        throw Error(Errc::invalid_argument, "test_fraction must lie in (0, 1)");
    const auto n_test = static_cast<Index>(std::llround(test_fraction * static_cast<double>(batch.size())));
    if (n_test < 1 || n_test >= batch.size())
        throw Error(Errc::invalid_argument, "split leaves an empty partition");
    return {slice_rows(batch, n_test, batch.size() - n_test), slice_rows(batch, 0, n_test)};
}

BatchXd select_classes(const BatchXd& batch, const std::vector<int>& classes)
{
    if (!batch.labels)
        throw Error(Errc::missing_labels, "select_classes needs labels");
    std::vector<Index> keep;
    std::vector<int> relabeled;
    for (Index i = 0; i < batch.size(); ++i) {
        const int label = (*batch.labels)[static_cast<std::size_t>(i)];
        const auto it = std::find(classes.begin(), classes.end(), label);
        if (it != classes.end()) {
            keep.push_back(i);
            relabeled.push_back(static_cast<int>(it - classes.begin()));
        }
    }
    BatchXd out;
    out.task_id = batch.task_id;
    out.inputs.resize(static_cast<Index>(keep.size()), batch.inputs.cols());
    for (std::size_t i = 0; i < keep.size(); ++i)
        out.inputs.row(static_cast<Index>(i)) = batch.inputs.row(keep[i]);
    out.labels = std::move(relabeled);
    return out;
}

void minmax_normalize(TrainTest& data)
{
    const Eigen::RowVectorXd lo = data.train.inputs.colwise().minCoeff();
    const Eigen::RowVectorXd hi = data.train.inputs.colwise().maxCoeff();
    const Eigen::RowVectorXd span = (hi - lo).cwiseMax(1e-12);
    for (BatchXd* b : {&data.train, &data.test}) {
        b->inputs = (b->inputs.rowwise() - lo).array().rowwise() / span.array();
        b->inputs = b->inputs.cwiseMax(0.0).cwiseMin(1.0);
    }
}

BatchXd concat_inputs(const BatchXd& a, const BatchXd& b)
{
    if (a.inputs.cols() != b.inputs.cols())
        throw Error(Errc::dimension_mismatch, "cannot concatenate batches of different input width");
    BatchXd out;
    out.task_id = a.task_id;
    out.inputs.resize(a.size() + b.size(), a.inputs.cols());
    out.inputs << a.inputs, b.inputs;
    if (a.labels && b.labels && a.task_id == b.task_id) {
        out.labels = *a.labels;
        out.labels->insert(out.labels->end(), b.labels->begin(), b.labels->end());
    }
    return out;
}

} // namespace fip
