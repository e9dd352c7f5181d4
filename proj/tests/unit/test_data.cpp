#include "catch_amalgamated.hpp"

#include "fip/data.hpp"
#include "fip/training.hpp"
#include "support.hpp"

#include <fstream>

using namespace fip;
using fip::test::fixture;

namespace {

Errc load_error(const std::filesystem::path& images, const std::filesystem::path& labels)
{
    try {
        load_idx(images, labels);
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("expected an error");
    return Errc::invalid_argument;
}

void write_bytes(const std::filesystem::path& file, const std::vector<unsigned char>& bytes)
{
    std::ofstream out(file, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<unsigned char> read_bytes(const std::filesystem::path& file)
{
    std::ifstream in(file, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

} // namespace

TEST_CASE("blobs have exactly n_per_class rows per class", "[data]")
{
    const auto b = gen_blobs(3, 40, 4, 5.0, 1);
    REQUIRE(b.size() == 120);
    REQUIRE(b.inputs.cols() == 4);
    std::vector<int> counts(3, 0);
    for (int l : *b.labels)
        ++counts[static_cast<std::size_t>(l)];
    CHECK(counts == std::vector<int>{40, 40, 40});
}

TEST_CASE("blobs are bit-identical under a seed", "[data]")
{
    const auto a = gen_blobs(2, 50, 3, 4.0, 9);
    const auto b = gen_blobs(2, 50, 3, 4.0, 9);
    CHECK(std::memcmp(a.inputs.data(), b.inputs.data(), sizeof(double) * static_cast<std::size_t>(a.inputs.size())) ==
          0);
    CHECK(*a.labels == *b.labels);
    CHECK(gen_blobs(2, 50, 3, 4.0, 10).inputs != a.inputs);
}

TEST_CASE("blob centers respect the separation", "[data]")
{
    const auto b = gen_blobs(4, 2000, 2, 7.0, 3);
    std::vector<Eigen::RowVectorXd> means(4, Eigen::RowVectorXd::Zero(2));
    for (Index i = 0; i < b.size(); ++i)
        means[static_cast<std::size_t>((*b.labels)[static_cast<std::size_t>(i)])] += b.inputs.row(i) / 2000.0;
    // Sample means sit within 0.1 of the centers at this sample size.
    for (std::size_t p = 0; p < 4; ++p)
        for (std::size_t q = p + 1; q < 4; ++q)
            CHECK((means[p] - means[q]).norm() >= 7.0 - 0.2);
}

TEST_CASE("well separated blobs are linearly separable", "[data]")
{
    const auto data = gen_blobs(2, 100, 2, 10.0, 4);
    const auto spec = test::linear_spec(2, 2);
    TrainConfig tc;
    tc.epochs = 50;
    tc.lr = 0.05;
    const auto w = train_base(spec, data, tc);
    CHECK(accuracy(spec, w, data) == 1.0);
}

TEST_CASE("blobs reject invalid parameters", "[data]")
{
    CHECK_THROWS_AS(gen_blobs(1, 10, 2, 3.0, 1), Error);
    CHECK_THROWS_AS(gen_blobs(2, 10, 2, 0.0, 1), Error);
    CHECK_THROWS_AS(gen_blobs(2, 0, 2, 3.0, 1), Error);
}

TEST_CASE("IDX fixture loads to the recorded pixels", "[data]")
{
    const auto b = load_idx(fixture("four-images.idx"), fixture("four-labels.idx"));
    REQUIRE(b.size() == 4);
    REQUIRE(b.inputs.cols() == 6);
    const int pixels[4][6] = {
        {0, 255, 128, 64, 32, 16},
        {1, 2, 3, 4, 5, 6},
        {255, 255, 255, 0, 0, 0},
        {10, 20, 30, 40, 50, 60},
    };
    for (Index i = 0; i < 4; ++i)
        for (Index j = 0; j < 6; ++j)
            CHECK(b.inputs(i, j) == pixels[i][j] / 255.0);
    CHECK(*b.labels == std::vector<int>{3, 1, 4, 1});
}

TEST_CASE("IDX loading reports structured errors", "[data]")
{
    CHECK(load_error(fixture("four-images.idx"), fixture("three-labels.idx")) == Errc::count_mismatch);
    CHECK(load_error(fixture("empty.idx"), fixture("four-labels.idx")) == Errc::truncated);
    CHECK(load_error(fixture("four-labels.idx"), fixture("four-labels.idx")) == Errc::bad_magic);
    CHECK(load_error(fixture("four-images.idx"), fixture("four-images.idx")) == Errc::bad_magic);
    CHECK(load_error(fixture("missing.idx"), fixture("four-labels.idx")) == Errc::io_error);

    const auto dir = test::scratch_dir("idx-errors");
    auto bytes = read_bytes(fixture("four-images.idx"));
    bytes.resize(bytes.size() - 3);
    write_bytes(dir / "short.idx", bytes);
    CHECK(load_error(dir / "short.idx", fixture("four-labels.idx")) == Errc::truncated);

    bytes = read_bytes(fixture("four-images.idx"));
    bytes[0] = 0x12;
    write_bytes(dir / "magic.idx", bytes);
    CHECK(load_error(dir / "magic.idx", fixture("four-labels.idx")) == Errc::bad_magic);
}

TEST_CASE("double-typed IDX files round-trip exactly", "[data]")
{
    const auto dir = test::scratch_dir("idx-roundtrip");
    const Eigen::MatrixXd x = test::random_matrix(7, 5, 12);
    const std::vector<int> labels{0, 1, 2, 3, 4, 5, 255};
    write_idx_images(dir / "x.idx", x);
    write_idx_labels(dir / "y.idx", labels);
    const auto b = load_idx(dir / "x.idx", dir / "y.idx");
    CHECK(b.inputs == x);
    CHECK(*b.labels == labels);
    CHECK_THROWS_AS(write_idx_labels(dir / "bad.idx", {256}), Error);
}

TEST_CASE("train/test split takes the leading rows as test", "[data]")
{
    BatchXd b;
    b.inputs = Eigen::VectorXd::LinSpaced(8, 0, 7);
    b.labels = std::vector<int>{0, 1, 0, 1, 0, 1, 0, 1};
    const auto tt = split_train_test(b, 0.25);
    CHECK(tt.test.inputs == Eigen::MatrixXd(Eigen::Vector2d(0, 1)));
    CHECK(tt.train.size() == 6);
    CHECK(tt.train.inputs(0, 0) == 2.0);
    CHECK(*tt.test.labels == std::vector<int>{0, 1});
    CHECK_THROWS_AS(split_train_test(b, 0.0), Error);
    CHECK_THROWS_AS(split_train_test(b, 0.01), Error);
}

TEST_CASE("class selection relabels by position", "[data]")
{
    BatchXd b;
    b.inputs = Eigen::VectorXd::LinSpaced(6, 0, 5);
    b.labels = std::vector<int>{5, 2, 7, 2, 5, 9};
    const auto s = select_classes(b, {2, 5});
    CHECK(s.inputs == Eigen::MatrixXd(Eigen::Vector4d(0, 1, 3, 4)));
    CHECK(*s.labels == std::vector<int>{1, 0, 0, 1});
    b.labels.reset();
    CHECK_THROWS_AS(select_classes(b, {1}), Error);
}

TEST_CASE("min-max normalization uses the train range and clips the test split", "[data]")
{
    TrainTest tt;
    tt.train.inputs = Eigen::MatrixXd(3, 2);
    tt.train.inputs << 0, 10, 2, 20, 4, 30;
    tt.test.inputs = Eigen::MatrixXd(2, 2);
    tt.test.inputs << 1, 40, -2, 15;
    minmax_normalize(tt);
    Eigen::MatrixXd train(3, 2), test(2, 2);
    train << 0, 0, 0.5, 0.5, 1, 1;
    test << 0.25, 1, 0, 0.25;
    CHECK(tt.train.inputs.isApprox(train, 1e-15));
    CHECK(tt.test.inputs.isApprox(test, 1e-15));
}

TEST_CASE("concatenation keeps labels only within one task", "[data]")
{
    BatchXd a, b;
    a.inputs = Eigen::MatrixXd::Zero(2, 3);
    a.labels = std::vector<int>{0, 1};
    b.inputs = Eigen::MatrixXd::Ones(1, 3);
    b.labels = std::vector<int>{1};
    auto c = concat_inputs(a, b);
    CHECK(c.size() == 3);
    CHECK(*c.labels == std::vector<int>{0, 1, 1});
    b.task_id = 1;
    CHECK_FALSE(concat_inputs(a, b).labels.has_value());
    b.inputs = Eigen::MatrixXd::Ones(1, 2);
    CHECK_THROWS_AS(concat_inputs(a, b), Error);

    const auto s = slice_rows(c, 1, 2);
    CHECK(s.size() == 2);
    CHECK(*s.labels == std::vector<int>{1, 1});
}
