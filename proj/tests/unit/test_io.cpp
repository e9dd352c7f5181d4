#include "catch_amalgamated.hpp"

#include "fip/io.hpp"
#include "support.hpp"

#include <cstring>
#include <fstream>

using namespace fip;
using fip::test::random_vector;

namespace {

std::string slurp(const std::filesystem::path& file)
{
    std::ifstream in(file, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const std::filesystem::path& file, const std::string& bytes)
{
    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Errc load_error(const std::filesystem::path& file)
{
    try {
        load_checkpoint(file);
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("expected an error");
    return Errc::invalid_argument;
}

/// FNV-1a 64 over raw bytes.
std::uint64_t fnv1a(const unsigned char* data, std::size_t size)
{
    std::uint64_t h = 14695981039346656037ULL;
    for (std::size_t i = 0; i < size; ++i) {
        h ^= data[i];
        h *= 1099511628211ULL;
    }
    return h;
}

Checkpoint sample_checkpoint()
{
    Checkpoint c;
    c.spec = NetworkSpec({3, 4, 5}, {Activation::tanh, Activation::identity}, {{0, 0, 2}, {7, 2, 5}});
    c.weights = random_vector(c.spec.parameter_count(), 1);
    c.weights(0) = -0.0;
    c.weights(1) = std::numeric_limits<double>::denorm_min();
    c.metadata = {{"role", "test"}, {"seed", 42}};
    c.provenance = Json::array({{{"op", "train"}}, {{"op", "append_output_nodes"}, {"task_id", 7}}});
    return c;
}

} // namespace

TEST_CASE("checkpoint save, load, save is byte-identical", "[io]")
{
    const auto dir = test::scratch_dir("ckpt-roundtrip");
    const auto c = sample_checkpoint();
    save_checkpoint(dir / "a.fipc", c);
    const auto loaded = load_checkpoint(dir / "a.fipc");
    save_checkpoint(dir / "b.fipc", loaded);
    CHECK(slurp(dir / "a.fipc") == slurp(dir / "b.fipc"));

    CHECK(loaded.spec == c.spec);
    REQUIRE(loaded.weights.size() == c.weights.size());
    CHECK(std::memcmp(loaded.weights.data(), c.weights.data(), sizeof(double) * static_cast<std::size_t>(c.weights.size())) ==
          0);
    CHECK(std::signbit(loaded.weights(0)));
    CHECK(loaded.metadata == c.metadata);
    CHECK(loaded.provenance == c.provenance);
}

TEST_CASE("checkpoint layout is magic, header, little-endian payload, checksum", "[io]")
{
    const auto dir = test::scratch_dir("ckpt-layout");
    const auto c = sample_checkpoint();
    save_checkpoint(dir / "c.fipc", c);
    const std::string bytes = slurp(dir / "c.fipc");
    REQUIRE(bytes.substr(0, 4) == "FIPC");
    const auto* u = reinterpret_cast<const unsigned char*>(bytes.data());
    const std::size_t header_len = u[4] | (u[5] << 8) | (u[6] << 16) | (static_cast<std::size_t>(u[7]) << 24);
    const Json header = Json::parse(bytes.substr(8, header_len));
    CHECK(header["format_version"] == 1);
    const auto n = static_cast<std::size_t>(c.weights.size());
    CHECK(header["n"] == n);
    CHECK(bytes.size() == 8 + header_len + 8 * n + 8);

    const std::size_t payload_at = 8 + header_len;
    for (std::size_t i = 0; i < n; ++i) {
        std::uint64_t bits = 0;
        for (int b = 7; b >= 0; --b)
            bits = (bits << 8) | u[payload_at + 8 * i + static_cast<std::size_t>(b)];
        CHECK(bits == std::bit_cast<std::uint64_t>(c.weights(static_cast<Index>(i))));
    }
    const std::uint64_t oracle = fnv1a(u + payload_at, 8 * n);
    CHECK(payload_checksum(c.weights) == oracle);
    CHECK(header["checksum"] == hex64(oracle));
    std::uint64_t trailer = 0;
    for (int b = 7; b >= 0; --b)
        trailer = (trailer << 8) | u[payload_at + 8 * n + static_cast<std::size_t>(b)];
    CHECK(trailer == oracle);
}

TEST_CASE("checksum and hex formatting", "[io]")
{
    CHECK(payload_checksum(Eigen::VectorXd()) == 0xcbf29ce484222325ULL);
    CHECK(hex64(0xabcULL) == "0000000000000abc");
    CHECK(hex64(0xcbf29ce484222325ULL) == "cbf29ce484222325");
}

TEST_CASE("corrupted payload byte is a checksum error", "[io]")
{
    const auto dir = test::scratch_dir("ckpt-corrupt");
    save_checkpoint(dir / "c.fipc", sample_checkpoint());
    std::string bytes = slurp(dir / "c.fipc");
    bytes[bytes.size() - 20] = static_cast<char>(bytes[bytes.size() - 20] ^ 0x01);
    spit(dir / "bad.fipc", bytes);
    CHECK(load_error(dir / "bad.fipc") == Errc::checksum_mismatch);
}

TEST_CASE("unknown checkpoint version is rejected", "[io]")
{
    const auto dir = test::scratch_dir("ckpt-version");
    save_checkpoint(dir / "c.fipc", sample_checkpoint());
    const std::string bytes = slurp(dir / "c.fipc");
    const auto* u = reinterpret_cast<const unsigned char*>(bytes.data());
    const std::size_t header_len = u[4] | (u[5] << 8) | (u[6] << 16) | (static_cast<std::size_t>(u[7]) << 24);
    Json header = Json::parse(bytes.substr(8, header_len));

    auto rewrite = [&](const Json& h, const std::filesystem::path& file) {
        const std::string text = h.dump();
        std::string out = "FIPC";
        for (int b = 0; b < 4; ++b)
            out.push_back(static_cast<char>((text.size() >> (8 * b)) & 0xff));
        out += text;
        out += bytes.substr(8 + header_len);
        spit(file, out);
    };
    header["format_version"] = 999;
    rewrite(header, dir / "v999.fipc");
    CHECK(load_error(dir / "v999.fipc") == Errc::unsupported_version);
    header.erase("format_version");
    rewrite(header, dir / "none.fipc");
    CHECK(load_error(dir / "none.fipc") == Errc::unsupported_version);
}

TEST_CASE("truncated and foreign files are rejected", "[io]")
{
    const auto dir = test::scratch_dir("ckpt-truncated");
    save_checkpoint(dir / "c.fipc", sample_checkpoint());
    const std::string bytes = slurp(dir / "c.fipc");
    spit(dir / "short.fipc", bytes.substr(0, bytes.size() - 9));
    CHECK(load_error(dir / "short.fipc") == Errc::truncated);
    spit(dir / "tiny.fipc", "FIP");
    CHECK(load_error(dir / "tiny.fipc") == Errc::truncated);
    spit(dir / "header.fipc", bytes.substr(0, 20));
    CHECK(load_error(dir / "header.fipc") == Errc::truncated);
    spit(dir / "magic.fipc", "NOPE" + bytes.substr(4));
    CHECK(load_error(dir / "magic.fipc") == Errc::bad_magic);
    CHECK(load_error(dir / "absent.fipc") == Errc::io_error);
}

TEST_CASE("network spec and path config survive JSON", "[io]")
{
    const auto spec = sample_checkpoint().spec;
    CHECK(spec_from_json(to_json(spec)) == spec);
    const auto nobias = NetworkSpec({2, 3}, {Activation::relu}, {{0, 0, 3}}, false);
    CHECK(spec_from_json(to_json(nobias)) == nobias);

    PathConfig cfg;
    cfg.epsilon = 0.125;
    cfg.beta = 2.5;
    cfg.n_steps = 17;
    cfg.inner_iters = 9;
    cfg.inner_lr = 0.01;
    cfg.n_candidates = 3;
    cfg.seed = 123456789012345ULL;
    cfg.anchor_batch_size = 64;
    cfg.persist_stride = 4;
    cfg.output_mode = OutputMode::post_softmax;
    cfg.metric_tasks = {0, 2};
    const auto back = path_config_from_json(to_json(cfg));
    CHECK(back.epsilon == cfg.epsilon);
    CHECK(back.beta == cfg.beta);
    CHECK(back.n_steps == cfg.n_steps);
    CHECK(back.inner_iters == cfg.inner_iters);
    CHECK(back.inner_lr == cfg.inner_lr);
    CHECK(back.n_candidates == cfg.n_candidates);
    CHECK(back.seed == cfg.seed);
    CHECK(back.anchor_batch_size == cfg.anchor_batch_size);
    CHECK(back.persist_stride == cfg.persist_stride);
    CHECK(back.output_mode == cfg.output_mode);
    CHECK(back.metric_tasks == cfg.metric_tasks);

    CHECK_THROWS_AS(path_config_from_json(Json{{"output_mode", "logits"}}), Error);
    CHECK_THROWS_AS(spec_from_json(Json{{"layer_dims", "nope"}}), Error);
}

TEST_CASE("paths persist strided weights and every step's scalars", "[io]")
{
    FIPath path;
    path.spec = test::linear_spec(2, 2);
    path.w0 = random_vector(6, 3);
    path.config.epsilon = 0.01;
    path.config.persist_stride = 2;
    path.provenance["seed"] = "5";
    Eigen::VectorXd w = path.w0;
    for (int t = 0; t < 5; ++t) {
        PathStep s;
        s.t = t;
        s.theta_star = random_vector(6, 10 + static_cast<std::uint64_t>(t), 0.01);
        w += s.theta_star;
        s.w = w;
        s.g_norm_sq = 0.1 * t;
        s.obj_alignment = -0.5 * t;
        s.secondary_loss = 1.0 / (t + 1);
        s.diagnostics.candidate = t % 3;
        s.diagnostics.iterations = 4;
        s.diagnostics.initial_objective = 2.0;
        s.diagnostics.final_objective = 1.0;
        path.steps.push_back(s);
    }
    const auto dir = test::scratch_dir("path-io");
    save_path(dir, path);
    const auto back = load_path(dir);
    CHECK(back.spec == path.spec);
    CHECK(back.w0 == path.w0);
    CHECK(back.provenance == path.provenance);
    CHECK(back.config.persist_stride == 2);
    REQUIRE(back.steps.size() == 5);
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK(back.steps[i].t == path.steps[i].t);
        CHECK(back.steps[i].g_norm_sq == path.steps[i].g_norm_sq);
        CHECK(back.steps[i].obj_alignment == path.steps[i].obj_alignment);
        CHECK(back.steps[i].secondary_loss == path.steps[i].secondary_loss);
        CHECK(back.steps[i].diagnostics.candidate == path.steps[i].diagnostics.candidate);
        const bool persisted = i == 1 || i == 3 || i == 4;
        CHECK(back.steps[i].w.size() == (persisted ? 6 : 0));
        if (persisted)
            CHECK(back.steps[i].w == path.steps[i].w);
    }
    CHECK(back.endpoint() == path.endpoint());
}

TEST_CASE("run log stamps run id and sequence and mirrors to disk", "[io]")
{
    const auto dir = test::scratch_dir("runlog");
    RunLog log("demo-7");
    log.attach(dir / "log.jsonl");
    log.append("train", {{"epoch", 1}, {"wall_ms", 12.5}});
    log.append("fip", {{"step", 0}, {"g_norm_sq", 0.25}});
    log.append("fip", {{"step", 1}, {"g_norm_sq", 0.5}, {"wall_ms", 3.0}});
    CHECK_THROWS_AS(log.append("bad", Json::array()), Error);

    REQUIRE(log.records().size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(log.records()[i]["run_id"] == "demo-7");
        CHECK(log.records()[i]["seq"] == i);
    }
    CHECK(log.phase("fip").size() == 2);
    CHECK(log.phase("fip")[1]["step"] == 1);

    const auto view = log.deterministic_view();
    for (const auto& r : view)
        CHECK_FALSE(r.contains("wall_ms"));
    CHECK(view[0]["epoch"] == 1);

    const auto back = RunLog::read(dir / "log.jsonl");
    CHECK(back.run_id() == "demo-7");
    CHECK(back.records() == log.records());
    CHECK_THROWS_AS(RunLog::read(dir / "missing.jsonl"), Error);

    spit(dir / "broken.jsonl", "{\"a\":1}\n{oops\n");
    try {
        RunLog::read(dir / "broken.jsonl");
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::truncated);
    }
}

TEST_CASE("output directory lock is exclusive until released", "[io]")
{
    const auto dir = test::scratch_dir("lock");
    {
        OutputLock first(dir);
        try {
            OutputLock second(dir);
            FAIL("expected an error");
        } catch (const Error& e) {
            CHECK(e.code() == Errc::locked);
        }
    }
    CHECK_NOTHROW(OutputLock(dir));
}
