#include "fip/io.hpp"

#include <bit>
#include <cstdio>
#include <iomanip>
#include <iterator>
#include <sstream>

#include <unistd.h>

namespace fip {

Json to_json(const NetworkSpec& spec)
{
    Json heads = Json::array();
    for (const auto& h : spec.heads())
        heads.push_back({{"task_id", h.task_id}, {"begin", h.begin}, {"end", h.end}});
    Json acts = Json::array();
    for (Activation a : spec.activations())
        acts.push_back(std::string(to_string(a)));
    return {{"layer_dims", spec.layer_dims()}, {"activations", acts}, {"heads", heads}, {"use_bias", spec.use_bias()}};
}

NetworkSpec spec_from_json(const Json& j)
{
    try {
        std::vector<Activation> acts;
        for (const auto& a : j.at("activations"))
            acts.push_back(parse_activation(a.get<std::string>()));
        std::vector<HeadRange> heads;
        for (const auto& h : j.at("heads"))
            heads.push_back({h.at("task_id").get<int>(), h.at("begin").get<Index>(), h.at("end").get<Index>()});
        return NetworkSpec(j.at("layer_dims").get<std::vector<Index>>(), std::move(acts), std::move(heads),
                           j.value("use_bias", true));
    } catch (const Json::exception& e) {
        throw Error(Errc::config_error, std::string("malformed network spec: ") + e.what());
    }
}

Json to_json(const PathConfig& cfg)
{
    return {{"epsilon", cfg.epsilon},
            {"beta", cfg.beta},
            {"n_steps", cfg.n_steps},
            {"inner_iters", cfg.inner_iters},
            {"inner_lr", cfg.inner_lr ? Json(*cfg.inner_lr) : Json(nullptr)},
            {"n_candidates", cfg.n_candidates},
            {"seed", cfg.seed},
            {"anchor_batch_size", cfg.anchor_batch_size},
            {"persist_stride", cfg.persist_stride},
            {"output_mode", cfg.output_mode == OutputMode::pre_softmax ? "pre-softmax" : "post-softmax"},
            {"metric_tasks", cfg.metric_tasks}};
}

PathConfig path_config_from_json(const Json& j, PathConfig cfg)
{
    try {
        cfg.epsilon = j.value("epsilon", cfg.epsilon);
        cfg.beta = j.value("beta", cfg.beta);
        cfg.n_steps = j.value("n_steps", cfg.n_steps);
        cfg.inner_iters = j.value("inner_iters", cfg.inner_iters);
        if (j.contains("inner_lr"))
            cfg.inner_lr = j["inner_lr"].is_null() ? std::nullopt : std::optional<double>(j["inner_lr"].get<double>());
        cfg.n_candidates = j.value("n_candidates", cfg.n_candidates);
        cfg.seed = j.value("seed", cfg.seed);
        cfg.anchor_batch_size = j.value("anchor_batch_size", cfg.anchor_batch_size);
        cfg.persist_stride = j.value("persist_stride", cfg.persist_stride);
        if (j.contains("output_mode")) {
            const auto mode = j["output_mode"].get<std::string>();
            if (mode == "pre-softmax")
                cfg.output_mode = OutputMode::pre_softmax;
            else if (mode == "post-softmax")
                cfg.output_mode = OutputMode::post_softmax;
            else
                throw Error(Errc::config_error, "unknown output_mode '" + mode + "'");
        }
        cfg.metric_tasks = j.value("metric_tasks", cfg.metric_tasks);
    } catch (const Json::exception& e) {
        throw Error(Errc::config_error, std::string("malformed path config: ") + e.what());
    }
    return cfg;
}

Json to_json(const SpectrumReport& report)
{
    std::vector<double> eig(report.eigenvalues.data(), report.eigenvalues.data() + report.eigenvalues.size());
    return {{"eigenvalues", eig},
            {"degeneracy_dim", report.degeneracy_dim},
            {"tol_rel", report.tol_rel},
            {"n", report.n},
            {"N", report.batch_size}};
}

std::uint64_t payload_checksum(const Eigen::VectorXd& payload)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (Index i = 0; i < payload.size(); ++i) {
        const auto bits = std::bit_cast<std::uint64_t>(payload(i));
        for (int b = 0; b < 8; ++b) {
            h ^= (bits >> (8 * b)) & 0xffU;
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

std::string hex64(std::uint64_t value)
{
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << value;
    return os.str();
}

namespace {

void put_le(std::string& out, std::uint64_t v, int bytes)
{
    for (int b = 0; b < bytes; ++b)
        out.push_back(static_cast<char>((v >> (8 * b)) & 0xffU));
}

std::uint64_t get_le(const std::string& in, std::size_t at, int bytes)
{
    std::uint64_t v = 0;
    for (int b = bytes - 1; b >= 0; --b)
        v = (v << 8) | static_cast<unsigned char>(in[at + static_cast<std::size_t>(b)]);
    return v;
}

constexpr char checkpoint_magic[4] = {'F', 'I', 'P', 'C'};

} // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt)
{
    check_weights(ckpt.spec, ckpt.weights);
    const std::uint64_t sum = payload_checksum(ckpt.weights);
    const Json header = {{"format_version", checkpoint_format_version},
                         {"spec", to_json(ckpt.spec)},
                         {"spec_hash", hex64(ckpt.spec.hash())},
                         {"n", ckpt.weights.size()},
                         {"checksum", hex64(sum)},
                         {"metadata", ckpt.metadata},
                         {"provenance", ckpt.provenance}};
    const std::string text = header.dump();

    std::string bytes(checkpoint_magic, 4);
    put_le(bytes, text.size(), 4);
    bytes += text;
    for (Index i = 0; i < ckpt.weights.size(); ++i)
        put_le(bytes, std::bit_cast<std::uint64_t>(ckpt.weights(i)), 8);
    put_le(bytes, sum, 8);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw Error(Errc::io_error, "cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out)
        throw Error(Errc::io_error, "write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw Error(Errc::io_error, "cannot open " + path.string());
    const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    if (bytes.size() < 8)
        throw Error(Errc::truncated, path.string() + ": file too short");
    if (bytes.compare(0, 4, checkpoint_magic, 4) != 0)
        throw Error(Errc::bad_magic, path.string() + ": not a checkpoint (magic)");
    const auto header_len = static_cast<std::size_t>(get_le(bytes, 4, 4));
    if (bytes.size() < 8 + header_len)
        throw Error(Errc::truncated, path.string() + ": header truncated");

    Json header;
    try {
        header = Json::parse(bytes.substr(8, header_len));
    } catch (const Json::exception& e) {
        throw Error(Errc::truncated, path.string() + ": unreadable header: " + e.what());
    }
    if (!header.contains("format_version"))
        throw Error(Errc::unsupported_version, path.string() + ": header has no format_version");
    const int version = header["format_version"].get<int>();
    if (version != checkpoint_format_version)
        throw Error(Errc::unsupported_version, path.string() + ": unsupported format_version " + std::to_string(version));

    Checkpoint ckpt;
    ckpt.spec = spec_from_json(header.at("spec"));
    const auto n = header.at("n").get<std::size_t>();
    if (static_cast<Index>(n) != ckpt.spec.parameter_count())
        throw Error(Errc::dimension_mismatch, path.string() + ": header n differs from the network's parameter count");
    const std::size_t payload_at = 8 + header_len;
    if (bytes.size() != payload_at + 8 * n + 8)
        throw Error(Errc::truncated, path.string() + ": payload length does not match header n");

    ckpt.weights.resize(static_cast<Index>(n));
    for (std::size_t i = 0; i < n; ++i)
        ckpt.weights(static_cast<Index>(i)) = std::bit_cast<double>(get_le(bytes, payload_at + 8 * i, 8));
    const std::uint64_t sum = payload_checksum(ckpt.weights);
    const std::uint64_t trailer = get_le(bytes, payload_at + 8 * n, 8);
    if (sum != trailer || hex64(sum) != header.value("checksum", std::string()))
        throw Error(Errc::checksum_mismatch, path.string() + ": payload checksum mismatch");
    if (header.value("spec_hash", std::string()) != hex64(ckpt.spec.hash()))
        throw Error(Errc::checksum_mismatch, path.string() + ": spec hash mismatch");
    ckpt.metadata = header.value("metadata", Json::object());
    ckpt.provenance = header.value("provenance", Json::array());
    return ckpt;
}

namespace {

std::string step_file(std::size_t index)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "step_%05zu.fipc", index);
    return buf;
}

} // namespace

void save_path(const std::filesystem::path& dir, const FIPath& path)
{
    std::filesystem::create_directories(dir);
    Json provenance = Json::object();
    for (const auto& [k, v] : path.provenance)
        provenance[k] = v;

    save_checkpoint(dir / "start.fipc", {path.spec, path.w0, {{"role", "path-start"}}, Json::array()});
    const auto persisted = path.persisted_indices();
    Json steps = Json::array();
    std::size_t next = 0;
    for (std::size_t i = 0; i < path.steps.size(); ++i) {
        const auto& s = path.steps[i];
        Json rec = {{"t", s.t},
                    {"g_norm_sq", s.g_norm_sq},
                    {"obj_alignment", s.obj_alignment},
                    {"secondary_loss", s.secondary_loss},
                    {"theta_norm_sq", s.theta_star.squaredNorm()},
                    {"initial_objective", s.diagnostics.initial_objective},
                    {"final_objective", s.diagnostics.final_objective},
                    {"candidate", s.diagnostics.candidate},
                    {"iterations", s.diagnostics.iterations}};
        if (next < persisted.size() && persisted[next] == i) {
            rec["file"] = step_file(i);
            save_checkpoint(dir / step_file(i), {path.spec, s.w, {{"role", "path-step"}, {"t", s.t}}, Json::array()});
            ++next;
        }
        steps.push_back(std::move(rec));
    }
    const Json index = {{"format_version", checkpoint_format_version},
                        {"spec", to_json(path.spec)},
                        {"config", to_json(path.config)},
                        {"provenance", provenance},
                        {"steps", steps}};
    std::ofstream out(dir / "index.json", std::ios::trunc);
    if (!out)
        throw Error(Errc::io_error, "cannot write " + (dir / "index.json").string());
    out << index.dump(2) << '\n';
}

FIPath load_path(const std::filesystem::path& dir)
{
    std::ifstream in(dir / "index.json");
    if (!in)
        throw Error(Errc::io_error, "cannot open " + (dir / "index.json").string());
    Json index;
    try {
        index = Json::parse(in);
    } catch (const Json::exception& e) {
        throw Error(Errc::truncated, std::string("unreadable path index: ") + e.what());
    }
    FIPath path;
    path.spec = spec_from_json(index.at("spec"));
    path.config = path_config_from_json(index.at("config"));
    for (const auto& [k, v] : index.at("provenance").items())
        path.provenance[k] = v.get<std::string>();
    path.w0 = load_checkpoint(dir / "start.fipc").weights;
    for (const auto& rec : index.at("steps")) {
        PathStep s;
        s.t = rec.at("t").get<int>();
        s.g_norm_sq = rec.at("g_norm_sq").get<double>();
        s.obj_alignment = rec.at("obj_alignment").get<double>();
        s.secondary_loss = rec.at("secondary_loss").get<double>();
        s.diagnostics.initial_objective = rec.at("initial_objective").get<double>();
        s.diagnostics.final_objective = rec.at("final_objective").get<double>();
        s.diagnostics.candidate = rec.at("candidate").get<int>();
        s.diagnostics.iterations = rec.at("iterations").get<int>();
        if (rec.contains("file"))
            s.w = load_checkpoint(dir / rec["file"].get<std::string>()).weights;
        path.steps.push_back(std::move(s));
    }
    return path;
}

RunLog::RunLog(std::string run_id) : run_id_(std::move(run_id)) { }

void RunLog::attach(const std::filesystem::path& file)
{
    auto out = std::make_shared<std::ofstream>(file, std::ios::app);
    if (!*out)
        throw Error(Errc::io_error, "cannot open run log " + file.string());
    sink_ = std::move(out);
}

const Json& RunLog::append(const std::string& phase, Json fields)
{
    if (!fields.is_object())
        throw Error(Errc::invalid_argument, "run log records must be JSON objects");
    fields["run_id"] = run_id_;
    fields["seq"] = records_.size();
    fields["phase"] = phase;
    records_.push_back(std::move(fields));
    if (sink_) {
        *sink_ << records_.back().dump() << '\n';
        sink_->flush();
    }
    return records_.back();
}

std::vector<Json> RunLog::phase(const std::string& name) const
{
    std::vector<Json> out;
    for (const auto& r : records_)
        if (r.value("phase", std::string()) == name)
            out.push_back(r);
    return out;
}

std::vector<Json> RunLog::deterministic_view() const
{
    std::vector<Json> out = records_;
    for (auto& r : out)
        r.erase("wall_ms");
    return out;
}

RunLog RunLog::read(const std::filesystem::path& file)
{
    std::ifstream in(file);
    if (!in)
        throw Error(Errc::io_error, "cannot open run log " + file.string());
    std::vector<Json> records;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty())
            continue;
        try {
            records.push_back(Json::parse(line));
        } catch (const Json::exception& e) {
            throw Error(Errc::truncated, "malformed run log line: " + std::string(e.what()));
        }
    }
    RunLog log(records.empty() ? "run" : records.front().value("run_id", std::string("run")));
    log.records_ = std::move(records);
    return log;
}

OutputLock::OutputLock(const std::filesystem::path& dir) : file_(dir / ".lock")
{
    std::filesystem::create_directories(dir);
    std::FILE* f = std::fopen(file_.c_str(), "wx");
    if (!f)
        throw Error(Errc::locked, "output directory " + dir.string() + " is locked by another run");
    std::fprintf(f, "%ld\n", static_cast<long>(::getpid()));
    std::fclose(f);
}

OutputLock::~OutputLock()
{
    std::error_code ec;
    std::filesystem::remove(file_, ec);
}

} // namespace fip
