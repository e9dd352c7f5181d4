#include "fip/experiments.hpp"

#include "fip/plotdata.hpp"
#include "fip/seed.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <set>

namespace fip {

namespace fs = std::filesystem;

// Seed streams derived from the experiment seed.
namespace stream {
constexpr std::uint64_t base_train = 1;
constexpr std::uint64_t surrogate = 2;
constexpr std::uint64_t ensemble_path = 3;
constexpr std::uint64_t attack = 4;
constexpr std::uint64_t spectrum_anchor = 5;
constexpr std::uint64_t append = 20;   // + task position
constexpr std::uint64_t cl_path = 30;  // + task position
constexpr std::uint64_t naive = 40;    // + task position
constexpr std::uint64_t sparsify = 50; // + grid position
constexpr std::uint64_t dataset = 100; // + task position
} // namespace stream

void ExperimentConfig::validate() const
{
    static const std::set<std::string> kinds = {"continual", "sparsify", "ensemble", "compose", "spectrum"};
    if (!kinds.count(kind))
        throw Error(Errc::config_error, "unknown experiment kind '" + kind + "'");
    if (tasks.empty())
        throw Error(Errc::config_error, "at least one task is required");
    if ((kind == "compose") && tasks.size() < 2)
        throw Error(Errc::config_error, "compose needs two tasks");
    std::set<int> ids;
    for (const auto& t : tasks) {
        if (!ids.insert(t.task_id).second)
            throw Error(Errc::config_error, "duplicate task_id " + std::to_string(t.task_id));
        const auto& d = t.data;
        if (d.type == "blobs") {
            if (d.n_classes < 2 || d.n_per_class < 1 || d.dim < 1 || !(d.separation > 0.0))
                throw Error(Errc::config_error, "blobs need n_classes >= 2, n_per_class >= 1, dim >= 1, separation > 0");
        } else if (d.type == "idx") {
            for (const auto& f : {d.images, d.labels})
                if (!fs::exists(f))
                    throw Error(Errc::config_error, "dataset file not found: " + f.string());
        } else {
            throw Error(Errc::config_error, "unknown dataset type '" + d.type + "'");
        }
        if (!(d.test_fraction > 0.0 && d.test_fraction < 1.0))
            throw Error(Errc::config_error, "test_fraction must lie in (0, 1)");
    }
    for (Index h : hidden)
        if (h < 1)
            throw Error(Errc::config_error, "hidden widths must be >= 1");
    train.validate();
    finetune.validate();
    if (!(append_init_scale >= 0.0))
        throw Error(Errc::config_error, "append_init_scale must be >= 0");
    PathConfig probe = path;
    if (!(probe.epsilon > 0.0))
        probe.epsilon = 1.0;
    probe.validate();
    if (sparsify_path) {
        PathConfig sp = *sparsify_path;
        if (!(sp.epsilon > 0.0))
            sp.epsilon = 1.0;
        sp.validate();
    }
    if (!(relative_step > 0.0))
        throw Error(Errc::config_error, "relative_step must be > 0");
    for (double p : sparsity_grid)
        if (!(p >= 0.0 && p <= 1.0))
            throw Error(Errc::config_error, "sparsity grid values must lie in [0, 1]");
    if (!(compose_sparsity >= 0.0 && compose_sparsity <= 1.0))
        throw Error(Errc::config_error, "compose sparsity must lie in [0, 1]");
    if (ensemble_members < 1)
        throw Error(Errc::config_error, "ensemble needs >= 1 member");
    if (!(attack.eps_fraction >= 0.0) || !(attack.step_fraction > 0.0) || attack.n_iters < 1)
        throw Error(Errc::config_error, "attack needs eps_fraction >= 0, step_fraction > 0, n_iters >= 1");
    if (hidden.empty() && (kind == "ensemble"))
        throw Error(Errc::config_error, "diversity needs a hidden layer");
    if (!hidden.empty() && (diversity_layer < 1 || diversity_layer > static_cast<Index>(hidden.size())))
        throw Error(Errc::config_error, "diversity_layer must name a hidden layer");
    if (!(tol_rel > 0.0) || spectrum_batch < 1)
        throw Error(Errc::config_error, "spectrum needs tol_rel > 0 and batch_size >= 1");
}

namespace {

void check_keys(const Json& j, std::initializer_list<const char*> allowed, const std::string& where)
{
    if (!j.is_object())
        throw Error(Errc::config_error, where + " must be an object");
    for (const auto& [key, value] : j.items()) {
        bool known = false;
        for (const char* a : allowed)
            known = known || key == a;
        if (!known)
            throw Error(Errc::config_error, "unknown key '" + key + "' in " + where);
    }
}

TrainConfig train_from_json(const Json& j, TrainConfig cfg, const std::string& where)
{
    check_keys(j, {"lr", "momentum", "epochs", "batch_size"}, where);
    cfg.lr = j.value("lr", cfg.lr);
    cfg.momentum = j.value("momentum", cfg.momentum);
    cfg.epochs = j.value("epochs", cfg.epochs);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    return cfg;
}

Json train_to_json(const TrainConfig& cfg)
{
    return {{"lr", cfg.lr}, {"momentum", cfg.momentum}, {"epochs", cfg.epochs}, {"batch_size", cfg.batch_size}};
}

const std::initializer_list<const char*> path_keys = {"epsilon",      "relative_step",     "beta",
                                                      "n_steps",      "inner_iters",       "inner_lr",
                                                      "n_candidates", "anchor_batch_size", "persist_stride",
                                                      "output_mode"};

PathConfig path_from_json(const Json& j, PathConfig defaults, const std::string& where)
{
    check_keys(j, path_keys, where);
    Json copy = j;
    copy.erase("relative_step");
    return path_config_from_json(copy, defaults);
}

Json path_to_json(const PathConfig& cfg)
{
    Json j = to_json(cfg);
    j.erase("seed");
    j.erase("metric_tasks");
    return j;
}

DatasetConfig dataset_from_json(const Json& j, std::uint64_t default_seed, const fs::path& base_dir,
                                const std::string& where)
{
    check_keys(j,
               {"type", "n_classes", "n_per_class", "dim", "separation", "seed", "images", "labels", "classes",
                "test_fraction", "normalize"},
               where);
    DatasetConfig d;
    d.type = j.value("type", d.type);
    d.n_classes = j.value("n_classes", d.n_classes);
    d.n_per_class = j.value("n_per_class", d.n_per_class);
    d.dim = j.value("dim", d.dim);
    d.separation = j.value("separation", d.separation);
    d.seed = j.value("seed", default_seed);
    auto resolve = [&](const char* key) {
        if (!j.contains(key))
            return fs::path();
        fs::path p = j[key].get<std::string>();
        return p.is_relative() && !base_dir.empty() ? base_dir / p : p;
    };
    d.images = resolve("images");
    d.labels = resolve("labels");
    d.classes = j.value("classes", d.classes);
    d.test_fraction = j.value("test_fraction", d.test_fraction);
    d.normalize = j.value("normalize", d.normalize);
    return d;
}

Json dataset_to_json(const DatasetConfig& d)
{
    Json j = {{"type", d.type}, {"test_fraction", d.test_fraction}, {"normalize", d.normalize}};
    if (d.type == "blobs") {
        j["n_classes"] = d.n_classes;
        j["n_per_class"] = d.n_per_class;
        j["dim"] = d.dim;
        j["separation"] = d.separation;
        j["seed"] = d.seed;
    } else {
        j["images"] = d.images.string();
        j["labels"] = d.labels.string();
        j["classes"] = d.classes;
    }
    return j;
}

} // namespace

ExperimentConfig experiment_config_from_json(const Json& j, const fs::path& base_dir)
{
    ExperimentConfig cfg;
    try {
        check_keys(j,
                   {"kind", "seed", "output_dir", "network", "tasks", "train", "finetune", "append_init_scale", "path",
                    "sparsify", "ensemble", "compose", "spectrum"},
                   "config");
        cfg.kind = j.value("kind", cfg.kind);
        cfg.seed = j.value("seed", cfg.seed);
        if (j.contains("output_dir"))
            cfg.output_dir = j["output_dir"].get<std::string>();
        if (j.contains("network")) {
            const auto& n = j["network"];
            check_keys(n, {"hidden", "activation"}, "network");
            cfg.hidden = n.value("hidden", cfg.hidden);
            if (n.contains("activation"))
                cfg.activation = parse_activation(n["activation"].get<std::string>());
        }
        if (!j.contains("tasks"))
            throw Error(Errc::config_error, "config needs a tasks list");
        for (std::size_t i = 0; i < j["tasks"].size(); ++i) {
            const auto& t = j["tasks"][i];
            const std::string where = "tasks[" + std::to_string(i) + "]";
            check_keys(t, {"task_id", "dataset"}, where);
            TaskConfig task;
            task.task_id = t.value("task_id", static_cast<int>(i));
            task.data = dataset_from_json(t.value("dataset", Json::object()), derive_seed(cfg.seed, stream::dataset + i),
                                          base_dir, where + ".dataset");
            cfg.tasks.push_back(std::move(task));
        }
        if (j.contains("train"))
            cfg.train = train_from_json(j["train"], cfg.train, "train");
        cfg.finetune = cfg.train;
        if (j.contains("finetune"))
            cfg.finetune = train_from_json(j["finetune"], cfg.finetune, "finetune");
        cfg.append_init_scale = j.value("append_init_scale", cfg.append_init_scale);
        if (j.contains("path")) {
            cfg.path = path_from_json(j["path"], cfg.path, "path");
            cfg.relative_step = j["path"].value("relative_step", cfg.relative_step);
        }
        if (j.contains("sparsify")) {
            const auto& s = j["sparsify"];
            check_keys(s, {"grid", "ref_point", "exclude_biases", "path"}, "sparsify");
            cfg.sparsity_grid = s.value("grid", cfg.sparsity_grid);
            if (s.contains("ref_point"))
                cfg.ref_point = parse_ref_point(s["ref_point"].get<std::string>());
            cfg.exclude_biases = s.value("exclude_biases", cfg.exclude_biases);
            if (s.contains("path"))
                cfg.sparsify_path = path_from_json(s["path"], cfg.path, "sparsify.path");
        }
        if (j.contains("ensemble")) {
            const auto& e = j["ensemble"];
            check_keys(e, {"members", "diversity_layer", "attack"}, "ensemble");
            cfg.ensemble_members = e.value("members", cfg.ensemble_members);
            cfg.diversity_layer = e.value("diversity_layer", cfg.diversity_layer);
            if (e.contains("attack")) {
                const auto& a = e["attack"];
                check_keys(a, {"eps_fraction", "step_fraction", "n_iters", "random_start"}, "ensemble.attack");
                cfg.attack.eps_fraction = a.value("eps_fraction", cfg.attack.eps_fraction);
                cfg.attack.step_fraction = a.value("step_fraction", cfg.attack.step_fraction);
                cfg.attack.n_iters = a.value("n_iters", cfg.attack.n_iters);
                cfg.attack.random_start = a.value("random_start", cfg.attack.random_start);
            }
        }
        if (j.contains("compose")) {
            check_keys(j["compose"], {"sparsity"}, "compose");
            cfg.compose_sparsity = j["compose"].value("sparsity", cfg.compose_sparsity);
        }
        if (j.contains("spectrum")) {
            check_keys(j["spectrum"], {"tol_rel", "batch_size"}, "spectrum");
            cfg.tol_rel = j["spectrum"].value("tol_rel", cfg.tol_rel);
            cfg.spectrum_batch = j["spectrum"].value("batch_size", cfg.spectrum_batch);
        }
    } catch (const Json::exception& e) {
        throw Error(Errc::config_error, std::string("malformed config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

ExperimentConfig load_experiment_config(const fs::path& file)
{
    std::ifstream in(file);
    if (!in)
        throw Error(Errc::io_error, "cannot read config " + file.string());
    Json j;
    try {
        j = Json::parse(in);
    } catch (const Json::exception& e) {
        throw Error(Errc::config_error, std::string("config is not valid JSON: ") + e.what());
    }
    return experiment_config_from_json(j, file.parent_path());
}

Json to_json(const ExperimentConfig& cfg)
{
    Json tasks = Json::array();
    for (const auto& t : cfg.tasks)
        tasks.push_back({{"task_id", t.task_id}, {"dataset", dataset_to_json(t.data)}});
    Json path = path_to_json(cfg.path);
    path["relative_step"] = cfg.relative_step;
    return {{"kind", cfg.kind},
            {"seed", cfg.seed},
            {"output_dir", cfg.output_dir.string()},
            {"network", {{"hidden", cfg.hidden}, {"activation", std::string(to_string(cfg.activation))}}},
            {"tasks", tasks},
            {"train", train_to_json(cfg.train)},
            {"finetune", train_to_json(cfg.finetune)},
            {"append_init_scale", cfg.append_init_scale},
            {"path", path},
            {"sparsify",
             {{"grid", cfg.sparsity_grid},
              {"ref_point", std::string(to_string(cfg.ref_point))},
              {"exclude_biases", cfg.exclude_biases},
              {"path", path_to_json(cfg.sparsify_path.value_or(cfg.path))}}},
            {"ensemble",
             {{"members", cfg.ensemble_members},
              {"diversity_layer", cfg.diversity_layer},
              {"attack",
               {{"eps_fraction", cfg.attack.eps_fraction},
                {"step_fraction", cfg.attack.step_fraction},
                {"n_iters", cfg.attack.n_iters},
                {"random_start", cfg.attack.random_start}}}}},
            {"compose", {{"sparsity", cfg.compose_sparsity}}},
            {"spectrum", {{"tol_rel", cfg.tol_rel}, {"batch_size", cfg.spectrum_batch}}}};
}

TrainTest load_task_data(const TaskConfig& task)
{
    const auto& d = task.data;
    BatchXd all;
    if (d.type == "blobs") {
        all = gen_blobs(d.n_classes, d.n_per_class, d.dim, d.separation, d.seed);
    } else {
        all = load_idx(d.images, d.labels);
        if (!d.classes.empty())
            all = select_classes(all, d.classes);
    }
    all.task_id = task.task_id;
    TrainTest split = split_train_test(all, d.test_fraction);
    split.train.task_id = split.test.task_id = task.task_id;
    if (d.normalize)
        minmax_normalize(split);
    return split;
}

PathConfig resolve_path_config(const PathConfig& cfg, double relative_step, const Eigen::VectorXd& w_start)
{
    PathConfig out = cfg;
    if (!(out.epsilon > 0.0))
        out.epsilon = relative_epsilon(w_start, relative_step);
    out.validate();
    return out;
}

namespace {

Index class_count(const TaskConfig& task, const TrainTest& data)
{
    if (task.data.type == "blobs")
        return task.data.n_classes;
    if (!task.data.classes.empty())
        return static_cast<Index>(task.data.classes.size());
    int top = 0;
    for (const auto* b : {&data.train, &data.test})
        for (int l : *b->labels)
            top = std::max(top, l);
    return top + 1;
}

void write_json(const fs::path& file, const Json& j)
{
    std::ofstream out(file, std::ios::trunc);
    if (!out)
        throw Error(Errc::io_error, "cannot write " + file.string());
    out << j.dump(2) << '\n';
}

std::string input_checksum(const BatchXd& batch)
{
    const Eigen::MatrixXd m = batch.inputs;
    return hex64(payload_checksum(Eigen::Map<const Eigen::VectorXd>(m.data(), m.size())));
}

std::string weights_checksum(const Eigen::VectorXd& w)
{
    return hex64(payload_checksum(w));
}

double elapsed_ms(std::chrono::steady_clock::time_point start)
{
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
}

// Owns the output directory (if any) and the run log of one experiment.
struct Session {
    RunLog log;
    fs::path dir;
    std::optional<OutputLock> lock;
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

    explicit Session(const ExperimentConfig& cfg) : log(cfg.kind + "-" + std::to_string(cfg.seed))
    {
        if (!cfg.output_dir.empty()) {
            dir = cfg.output_dir;
            fs::create_directories(dir);
            lock.emplace(dir);
            fs::remove(dir / "run_log.jsonl");
            log.attach(dir / "run_log.jsonl");
            write_json(dir / "config.json", to_json(cfg));
        }
        log.append("config", {{"config", to_json(cfg)}});
    }

    bool persist() const { return !dir.empty(); }

    void checkpoint(const std::string& name, const NetworkSpec& spec, const Eigen::VectorXd& w, Json provenance)
    {
        if (!persist())
            return;
        fs::create_directories(dir / "checkpoints");
        Checkpoint ck{spec, w, {{"run_id", log.run_id()}, {"name", name}}, std::move(provenance)};
        save_checkpoint(dir / "checkpoints" / (name + ".fipc"), ck);
    }

    void summary(Json fields)
    {
        fields["wall_ms"] = elapsed_ms(start);
        log.append("summary", std::move(fields));
    }
};

Json task_accuracies(const NetworkSpec& spec, const Eigen::VectorXd& w, const std::vector<TaskConfig>& tasks,
                     const std::vector<TrainTest>& data, std::size_t count)
{
    Json out = Json::object();
    for (std::size_t i = 0; i < count; ++i)
        out[std::to_string(tasks[i].task_id)] = accuracy(spec, w, data[i].test);
    return out;
}

std::vector<TrainTest> load_all(const ExperimentConfig& cfg)
{
    std::vector<TrainTest> out;
    for (const auto& t : cfg.tasks)
        out.push_back(load_task_data(t));
    return out;
}

TrainConfig seeded(TrainConfig cfg, std::uint64_t seed)
{
    cfg.seed = seed;
    return cfg;
}

struct BaseModel {
    NetworkSpec spec;
    Eigen::VectorXd w;
};

BaseModel train_first_task(const ExperimentConfig& cfg, const std::vector<TrainTest>& data, Session& s,
                           const std::string& phase = "base", std::uint64_t seed_stream = stream::base_train,
                           const UpdateObserver& on_epoch = {})
{
    const auto& first = cfg.tasks.front();
    NetworkSpec spec = NetworkSpec::mlp(data.front().train.inputs.cols(), cfg.hidden, class_count(first, data.front()),
                                        cfg.activation, first.task_id);
    Eigen::VectorXd w = train_base(spec, data.front().train, seeded(cfg.train, derive_seed(cfg.seed, seed_stream)),
                                   &s.log, &data.front().test, phase, on_epoch);
    return {std::move(spec), std::move(w)};
}

// Metric data for heads learned so far: the train inputs of tasks [0, count).
BatchXd previous_inputs(const std::vector<TrainTest>& data, std::size_t count)
{
    BatchXd out = data.front().train;
    for (std::size_t i = 1; i < count; ++i)
        out = concat_inputs(out, data[i].train);
    out.labels.reset();
    return out;
}

Json step_record(const PathStep& step, const Eigen::VectorXd& w_start)
{
    return {{"step", step.t + 1},
            {"secondary_loss", step.secondary_loss},
            {"g_norm_sq", step.g_norm_sq},
            {"obj_alignment", step.obj_alignment},
            {"distance_from_start", (step.w - w_start).norm()},
            {"candidate", step.diagnostics.candidate},
            {"inner_initial", step.diagnostics.initial_objective},
            {"inner_final", step.diagnostics.final_objective}};
}

// Adapts (spec, w) to task position k by appending its head and following a
// task-loss path whose metric covers every earlier head.
struct Adapted {
    NetworkSpec spec;
    Eigen::VectorXd w;
    FIPath path;
};

Adapted continual_adapt(const ExperimentConfig& cfg, const std::vector<TrainTest>& data, std::size_t k,
                        const NetworkSpec& spec, const Eigen::VectorXd& w, Session& s, const std::string& phase,
                        int phase_index)
{
    const auto& task = cfg.tasks[k];
    auto [spec_k, w_k] = append_output_nodes(spec, w, task.task_id, class_count(task, data[k]), cfg.append_init_scale,
                                             derive_seed(cfg.seed, stream::append + k));
    PathConfig pcfg = resolve_path_config(cfg.path, cfg.relative_step, w_k);
    pcfg.seed = derive_seed(cfg.seed, stream::cl_path + k);
    pcfg.metric_tasks.clear();
    for (std::size_t i = 0; i < spec.heads().size(); ++i)
        pcfg.metric_tasks.push_back(spec.heads()[i].task_id);

    std::vector<TrainTest> seen;
    std::vector<TaskConfig> seen_tasks;
    for (const auto& h : spec_k.heads())
        for (std::size_t i = 0; i < cfg.tasks.size(); ++i)
            if (cfg.tasks[i].task_id == h.task_id) {
                seen.push_back(data[i]);
                seen_tasks.push_back(cfg.tasks[i]);
            }
    BatchXd metric_batch;
    bool first = true;
    for (std::size_t i = 0; i + 1 < seen.size(); ++i) {
        metric_batch = first ? seen[i].train : concat_inputs(metric_batch, seen[i].train);
        first = false;
    }
    metric_batch.labels.reset();

    const auto objective = ObjectiveSpec::task_loss(data[k].train);
    const auto start = std::chrono::steady_clock::now();
    const Eigen::VectorXd w_start = w_k;
    s.log.append(phase + "_start", {{"phase_index", phase_index},
                                    {"task_id", task.task_id},
                                    {"epsilon", pcfg.epsilon},
                                    {"metric_tasks", pcfg.metric_tasks},
                                    {"n_steps", pcfg.n_steps}});
    auto observer = [&](const PathStep& step) {
        Json rec = step_record(step, w_start);
        rec["phase_index"] = phase_index;
        rec["task_accuracy"] = task_accuracies(spec_k, step.w, seen_tasks, seen, seen.size());
        rec["wall_ms"] = elapsed_ms(start);
        s.log.append(phase, std::move(rec));
    };
    FIPath path = sample_path(spec_k, w_k, metric_batch, [&](int) { return objective; }, pcfg, observer);
    Eigen::VectorXd end = path.endpoint();
    return {std::move(spec_k), std::move(end), std::move(path)};
}

// p-sparse FIP: sparsity target ramps linearly to p over the path, then a hard
// projection. p == 0 is the identity.
struct Sparsified {
    Eigen::VectorXd w;
    double achieved = 0.0;
    std::optional<FIPath> path;
};

Sparsified sparsify_fip(const ExperimentConfig& cfg, const NetworkSpec& spec, const Eigen::VectorXd& w,
                        const BatchXd& metric_batch, double p, std::uint64_t seed, Session& s, const std::string& phase,
                        const std::function<Json(const Eigen::VectorXd&)>& evaluate)
{
    if (p == 0.0)
        return {w, 0.0, std::nullopt};
    PathConfig pcfg = resolve_path_config(cfg.sparsify_path.value_or(cfg.path), cfg.relative_step, w);
    pcfg.seed = seed;
    pcfg.metric_tasks.clear();
    const int n = pcfg.n_steps;
    const Eigen::VectorXd w_start = w;
    auto objective_at = [&](int t) {
        const double pt = p * static_cast<double>(t + 1) / static_cast<double>(n);
        std::optional<Eigen::VectorXd> fixed;
        if (cfg.ref_point == RefPoint::fixed_w)
            fixed = w_start;
        return ObjectiveSpec::sparsify(pt, cfg.ref_point, std::move(fixed), cfg.exclude_biases);
    };
    const auto start = std::chrono::steady_clock::now();
    s.log.append(phase + "_start", {{"target_sparsity", p}, {"epsilon", pcfg.epsilon}, {"n_steps", n}});
    auto observer = [&](const PathStep& step) {
        Json rec = step_record(step, w_start);
        rec["target_sparsity"] = p;
        if (evaluate)
            rec.update(evaluate(step.w));
        rec["wall_ms"] = elapsed_ms(start);
        s.log.append(phase, std::move(rec));
    };
    FIPath path = sample_path(spec, w, metric_batch, objective_at, pcfg, observer);
    auto hard = hard_sparsify(spec, path.endpoint(), p, cfg.exclude_biases);
    return {std::move(hard.w), hard.achieved_sparsity, std::move(path)};
}

} // namespace

RunLog run_continual(const ExperimentConfig& cfg)
{
    cfg.validate();
    Session s(cfg);
    const auto data = load_all(cfg);
    const auto base = train_first_task(cfg, data, s);
    s.checkpoint("base", base.spec, base.w, Json::array({"train_base"}));

    Json test_sets = Json::object();
    for (std::size_t i = 0; i < data.size(); ++i)
        test_sets[std::to_string(cfg.tasks[i].task_id)] = input_checksum(data[i].test);
    s.log.append("phase_end", {{"method", "base"},
                               {"phase_index", 0},
                               {"task_accuracy", task_accuracies(base.spec, base.w, cfg.tasks, data, 1)},
                               {"test_set_checksums", test_sets}});

    NetworkSpec spec_fip = base.spec, spec_naive = base.spec;
    Eigen::VectorXd w_fip = base.w, w_naive = base.w;
    Json phases = Json::array();
    std::vector<Trajectory> trajectories;

    for (std::size_t k = 1; k < cfg.tasks.size(); ++k) {
        const int phase_index = static_cast<int>(k);
        const Json fip_before = task_accuracies(spec_fip, w_fip, cfg.tasks, data, k);
        const Json naive_before = task_accuracies(spec_naive, w_naive, cfg.tasks, data, k);

        Adapted fip = continual_adapt(cfg, data, k, spec_fip, w_fip, s, "fip", phase_index);
        spec_fip = fip.spec;
        w_fip = fip.w;

        // Naive baseline: same appended head, then plain minibatch updates on the new
        // task with the same number of updates as the path has steps.
        auto [spec_n, w_n] = append_output_nodes(spec_naive, w_naive, cfg.tasks[k].task_id,
                                                 class_count(cfg.tasks[k], data[k]), cfg.append_init_scale,
                                                 derive_seed(cfg.seed, stream::append + k));
        const auto naive_start = std::chrono::steady_clock::now();
        const Eigen::VectorXd w_n_start = w_n;
        auto naive_observer = [&](Index u, const Eigen::VectorXd& cur) {
            s.log.append("naive", {{"phase_index", phase_index},
                                   {"step", u},
                                   {"distance_from_start", (cur - w_n_start).norm()},
                                   {"task_accuracy", task_accuracies(spec_n, cur, cfg.tasks, data, k + 1)},
                                   {"wall_ms", elapsed_ms(naive_start)}});
        };
        w_naive = sgd_updates(spec_n, w_n, data[k].train, seeded(cfg.finetune, derive_seed(cfg.seed, stream::naive + k)),
                              fip.path.config.n_steps, naive_observer);
        spec_naive = spec_n;

        const Json fip_after = task_accuracies(spec_fip, w_fip, cfg.tasks, data, k + 1);
        const Json naive_after = task_accuracies(spec_naive, w_naive, cfg.tasks, data, k + 1);
        for (const auto& [method, acc] : {std::pair{"fip", fip_after}, std::pair{"naive", naive_after}})
            s.log.append("phase_end", {{"method", method},
                                       {"phase_index", phase_index},
                                       {"task_accuracy", acc},
                                       {"test_set_checksums", test_sets}});
        phases.push_back({{"phase_index", phase_index},
                          {"task_id", cfg.tasks[k].task_id},
                          {"fip_steps", fip.path.steps.size()},
                          {"naive_updates", fip.path.config.n_steps},
                          {"fip_before", fip_before},
                          {"fip_after", fip_after},
                          {"naive_before", naive_before},
                          {"naive_after", naive_after}});

        if (s.persist()) {
            save_path(s.dir / "paths" / ("task_" + std::to_string(cfg.tasks[k].task_id)), fip.path);
            s.checkpoint("fip_task_" + std::to_string(cfg.tasks[k].task_id), spec_fip, w_fip,
                         Json::array({"train_base", "continual_fip"}));
            s.checkpoint("naive_task_" + std::to_string(cfg.tasks[k].task_id), spec_naive, w_naive,
                         Json::array({"train_base", "naive_finetune"}));
        }
        Trajectory tr{"fip_task_" + std::to_string(cfg.tasks[k].task_id), {}};
        tr.points.push_back(fip.path.w0);
        for (auto i : fip.path.persisted_indices())
            tr.points.push_back(fip.path.steps[i].w);
        trajectories.push_back(std::move(tr));
    }

    Json summary = {{"phases", phases}, {"base_accuracy", task_accuracies(base.spec, base.w, cfg.tasks, data, 1)}};
    const std::string first = std::to_string(cfg.tasks.front().task_id);
    if (!phases.empty()) {
        const double base_acc = summary["base_accuracy"][first].get<double>();
        const double fip_final = phases.back()["fip_after"][first].get<double>();
        const double naive_final = phases.back()["naive_after"][first].get<double>();
        const std::string last = std::to_string(cfg.tasks.back().task_id);
        summary["first_task_drop_fip"] = base_acc - fip_final;
        summary["first_task_drop_naive"] = base_acc - naive_final;
        summary["last_task_accuracy_fip"] = phases.back()["fip_after"][last];
        summary["last_task_accuracy_naive"] = phases.back()["naive_after"][last];
        summary["final_weights_fip"] = weights_checksum(w_fip);
    }
    s.summary(summary);
    if (s.persist()) {
        // PCA needs the trajectories in one weight space; only the final phase's path is projected.
        std::vector<Trajectory> last;
        if (!trajectories.empty())
            last.push_back(trajectories.back());
        emit_plotdata(s.log, "continual", s.dir, last);
    }
    return std::move(s.log);
}

RunLog run_sparsify(const ExperimentConfig& cfg)
{
    cfg.validate();
    Session s(cfg);
    const auto data = load_all(cfg);
    const auto base = train_first_task(cfg, data, s);
    s.checkpoint("base", base.spec, base.w, Json::array({"train_base"}));
    const auto& train = data.front().train;
    const auto& test = data.front().test;
    const double base_train = accuracy(base.spec, base.w, train);
    const double base_test = accuracy(base.spec, base.w, test);
    const Index n = base.spec.parameter_count();

    Json points = Json::array();
    std::vector<Trajectory> trajectories;
    for (std::size_t i = 0; i < cfg.sparsity_grid.size(); ++i) {
        const double p = cfg.sparsity_grid[i];
        auto evaluate = [&](const Eigen::VectorXd& w) { return Json{{"test_accuracy", accuracy(base.spec, w, test)}}; };
        Sparsified sp = sparsify_fip(cfg, base.spec, base.w, train, p, derive_seed(cfg.seed, stream::sparsify + i), s,
                                     "sparsify_path", evaluate);
        const Index eligible = cfg.exclude_biases
                                   ? n - static_cast<Index>(std::count(base.spec.bias_mask().begin(),
                                                                       base.spec.bias_mask().end(), true))
                                   : n;
        Json rec = {{"target_sparsity", p},
                    {"achieved_sparsity", sp.achieved},
                    {"expected_sparsity", static_cast<double>(sparse_count(eligible, p)) / static_cast<double>(n)},
                    {"train_accuracy", accuracy(base.spec, sp.w, train)},
                    {"test_accuracy", accuracy(base.spec, sp.w, test)},
                    {"path_steps", sp.path ? sp.path->steps.size() : std::size_t{0}},
                    {"distance_from_base", (sp.w - base.w).norm()},
                    {"direct_projection_test_accuracy",
                     accuracy(base.spec, hard_sparsify(base.spec, base.w, p, cfg.exclude_biases).w, test)}};
        s.log.append("sparsify_point", rec);
        points.push_back(rec);
        if (sp.path) {
            Trajectory tr{"p_" + std::to_string(static_cast<int>(std::lround(p * 100))), {sp.path->w0}};
            for (auto k : sp.path->persisted_indices())
                tr.points.push_back(sp.path->steps[k].w);
            trajectories.push_back(std::move(tr));
            s.checkpoint("sparse_" + std::to_string(i), base.spec, sp.w,
                         Json::array({"train_base", "sparsify_fip", "hard_sparsify"}));
        }
    }
    s.summary({{"base_train_accuracy", base_train}, {"base_test_accuracy", base_test}, {"n", n}, {"points", points}});
    if (s.persist())
        emit_plotdata(s.log, "sparsify", s.dir, trajectories);
    return std::move(s.log);
}

RunLog run_ensemble(const ExperimentConfig& cfg)
{
    cfg.validate();
    Session s(cfg);
    const auto data = load_all(cfg);
    const auto& train = data.front().train;
    const auto& test = data.front().test;

    // Checkpoints from the last epochs of base training form the comparison ensemble.
    std::vector<Eigen::VectorXd> epoch_weights;
    const auto base = train_first_task(cfg, data, s, "base", stream::base_train,
                                       [&](Index, const Eigen::VectorXd& w) { epoch_weights.push_back(w); });
    const auto surrogate = train_first_task(cfg, data, s, "surrogate", stream::surrogate);
    s.checkpoint("base", base.spec, base.w, Json::array({"train_base"}));
    s.checkpoint("surrogate", surrogate.spec, surrogate.w, Json::array({"train_base"}));

    PathConfig pcfg = resolve_path_config(cfg.path, cfg.relative_step, base.w);
    pcfg.seed = derive_seed(cfg.seed, stream::ensemble_path);
    pcfg.metric_tasks.clear();
    const auto path_start = std::chrono::steady_clock::now();
    auto observer = [&](const PathStep& step) {
        Json rec = step_record(step, base.w);
        rec["train_accuracy"] = accuracy(base.spec, step.w, train);
        rec["wall_ms"] = elapsed_ms(path_start);
        s.log.append("ensemble_path", std::move(rec));
    };
    const FIPath path = sample_path(base.spec, base.w, train, [](int) { return ObjectiveSpec::none(); }, pcfg, observer);
    const Ensemble ens = sample_ensemble_along_path(path, cfg.ensemble_members);

    Ensemble checkpoints{base.spec, {}, "independent-runs"};
    const std::size_t take = std::min<std::size_t>(epoch_weights.size(), static_cast<std::size_t>(cfg.ensemble_members));
    checkpoints.members.assign(epoch_weights.end() - static_cast<std::ptrdiff_t>(take), epoch_weights.end());

    // The clamp range is the input range of the data; eps_adv is a fraction of it.
    const double lo = std::min(train.inputs.minCoeff(), test.inputs.minCoeff());
    const double hi = std::max(train.inputs.maxCoeff(), test.inputs.maxCoeff());
    AttackConfig attack;
    attack.eps_adv = cfg.attack.eps_fraction * (hi - lo);
    attack.step_size = cfg.attack.step_fraction * attack.eps_adv;
    if (!(attack.step_size > 0.0))
        attack.step_size = cfg.attack.step_fraction * (hi - lo);
    attack.n_iters = cfg.attack.n_iters;
    attack.random_start = cfg.attack.random_start;
    attack.seed = derive_seed(cfg.seed, stream::attack);
    attack.clamp_lo = lo;
    attack.clamp_hi = hi > lo ? hi : lo + 1.0;

    BatchXd adversarial = test;
    adversarial.inputs = pgd_attack(surrogate.spec, surrogate.w, test, attack);
    const double linf = (adversarial.inputs - test.inputs).cwiseAbs().maxCoeff();

    auto model_record = [&](const std::string& name, double clean, double adv) {
        s.log.append("model", {{"model", name}, {"clean_accuracy", clean}, {"adversarial_accuracy", adv}});
    };
    const double base_clean = accuracy(base.spec, base.w, test);
    const double base_adv = accuracy(base.spec, base.w, adversarial);
    model_record("base", base_clean, base_adv);
    model_record("surrogate", accuracy(surrogate.spec, surrogate.w, test),
                 accuracy(surrogate.spec, surrogate.w, adversarial));
    double coherence_members = 0.0;
    for (std::size_t i = 0; i < ens.size(); ++i) {
        model_record("member_" + std::to_string(i), accuracy(ens.spec, ens.members[i], test),
                     accuracy(ens.spec, ens.members[i], adversarial));
        coherence_members += coherence_score(ens.spec, ens.members[i], surrogate.spec, surrogate.w, test);
    }
    coherence_members /= static_cast<double>(ens.size());
    const double ens_clean = ensemble_accuracy(ens, test);
    const double ens_adv = ensemble_accuracy(ens, adversarial);
    model_record("fip_ensemble", ens_clean, ens_adv);
    model_record("checkpoint_ensemble", ensemble_accuracy(checkpoints, test), ensemble_accuracy(checkpoints, adversarial));

    const Json summary = {
        {"members", ens.size()},
        {"eps_adv", attack.eps_adv},
        {"step_size", attack.step_size},
        {"clamp", {attack.clamp_lo, attack.clamp_hi}},
        {"max_perturbation", linf},
        {"base_clean_accuracy", base_clean},
        {"base_adversarial_accuracy", base_adv},
        {"ensemble_clean_accuracy", ens_clean},
        {"ensemble_adversarial_accuracy", ens_adv},
        {"coherence_surrogate_self", coherence_score(surrogate.spec, surrogate.w, surrogate.spec, surrogate.w, test)},
        {"coherence_base", coherence_score(base.spec, base.w, surrogate.spec, surrogate.w, test)},
        {"coherence_fip_members", coherence_members},
        {"diversity_fip", diversity_score(ens, cfg.diversity_layer, test.inputs)},
        {"diversity_checkpoints", diversity_score(checkpoints, cfg.diversity_layer, test.inputs)},
        {"path_length", (path.endpoint() - path.w0).norm()}};

    if (s.persist()) {
        const fs::path adv_dir = s.dir / "adversarial";
        fs::create_directories(adv_dir);
        write_idx_images(adv_dir / "images.idx", adversarial.inputs);
        write_idx_labels(adv_dir / "labels.idx", *adversarial.labels);
        write_json(adv_dir / "provenance.json",
                   {{"surrogate_checksum", weights_checksum(surrogate.w)},
                    {"surrogate_spec_hash", hex64(surrogate.spec.hash())},
                    {"attack",
                     {{"eps_adv", attack.eps_adv},
                      {"step_size", attack.step_size},
                      {"n_iters", attack.n_iters},
                      {"seed", attack.seed},
                      {"clamp_lo", attack.clamp_lo},
                      {"clamp_hi", attack.clamp_hi},
                      {"random_start", attack.random_start}}},
                    {"source", "test split of task " + std::to_string(cfg.tasks.front().task_id)}});
        save_path(s.dir / "path", path);
        for (std::size_t i = 0; i < ens.size(); ++i)
            s.checkpoint("member_" + std::to_string(i), ens.spec, ens.members[i],
                         Json::array({"train_base", "fip_null_path"}));
    }
    s.summary(summary);
    if (s.persist()) {
        Trajectory tr{"fip_ensemble_path", {path.w0}};
        for (auto i : path.persisted_indices())
            tr.points.push_back(path.steps[i].w);
        emit_plotdata(s.log, "ensemble", s.dir, {tr});
    }
    return std::move(s.log);
}

RunLog run_compose(const ExperimentConfig& cfg)
{
    cfg.validate();
    Session s(cfg);
    const auto data = load_all(cfg);
    const auto base = train_first_task(cfg, data, s);
    s.checkpoint("base", base.spec, base.w, Json::array({"train_base"}));
    const double p = cfg.compose_sparsity;

    auto metric_for = [&](const NetworkSpec& spec) { return previous_inputs(data, spec.heads().size()); };
    auto cl = [&](const NetworkSpec& spec, const Eigen::VectorXd& w, const std::string& order) {
        return continual_adapt(cfg, data, 1, spec, w, s, order + "_cl", 1);
    };
    auto co = [&](const NetworkSpec& spec, const Eigen::VectorXd& w, const std::string& order) {
        return sparsify_fip(cfg, spec, w, metric_for(spec), p, derive_seed(cfg.seed, stream::sparsify), s,
                            order + "_co", {});
    };

    // w1 = Co(CL(w))
    const Adapted cl_first = cl(base.spec, base.w, "co_after_cl");
    const Sparsified w1 = co(cl_first.spec, cl_first.w, "co_after_cl");
    // w2 = CL(Co(w))
    const Sparsified co_first = co(base.spec, base.w, "cl_after_co");
    const Adapted w2 = cl(base.spec, co_first.w, "cl_after_co");
    const NetworkSpec& spec = w2.spec;

    const Json acc1 = task_accuracies(spec, w1.w, cfg.tasks, data, 2);
    const Json acc2 = task_accuracies(spec, w2.w, cfg.tasks, data, 2);
    s.log.append("compose_endpoint", {{"order", "co_after_cl"},
                                      {"task_accuracy", acc1},
                                      {"sparsity", zero_fraction(w1.w)},
                                      {"checksum", weights_checksum(w1.w)}});
    s.log.append("compose_endpoint", {{"order", "cl_after_co"},
                                      {"task_accuracy", acc2},
                                      {"sparsity", zero_fraction(w2.w)},
                                      {"checksum", weights_checksum(w2.w)}});
    s.checkpoint("co_after_cl", spec, w1.w, Json::array({"train_base", "continual_fip", "sparsify_fip"}));
    s.checkpoint("cl_after_co", spec, w2.w, Json::array({"train_base", "sparsify_fip", "continual_fip"}));

    const double distance = (w1.w - w2.w).norm();
    const double norm1 = w1.w.norm();
    double max_gap = 0.0;
    for (const auto& [task, a] : acc1.items())
        max_gap = std::max(max_gap, std::abs(a.get<double>() - acc2[task].get<double>()));
    s.summary({{"sparsity", p},
               {"distance", distance},
               {"relative_distance", norm1 > 0.0 ? distance / norm1 : 0.0},
               {"max_accuracy_gap", max_gap},
               {"accuracy_co_after_cl", acc1},
               {"accuracy_cl_after_co", acc2},
               {"cl_only_accuracy", task_accuracies(cl_first.spec, cl_first.w, cfg.tasks, data, 2)},
               {"cl_only_checksum", weights_checksum(cl_first.w)},
               {"achieved_sparsity_co_after_cl", zero_fraction(w1.w)},
               {"achieved_sparsity_cl_after_co", zero_fraction(w2.w)}});
    if (s.persist())
        emit_plotdata(s.log, "compose", s.dir);
    return std::move(s.log);
}

RunLog run_spectrum(const ExperimentConfig& cfg)
{
    cfg.validate();
    Session s(cfg);
    const auto data = load_all(cfg);
    const auto base = train_first_task(cfg, data, s);
    s.checkpoint("base", base.spec, base.w, Json::array({"train_base"}));
    const BatchXd anchor =
        anchor_subsample(data.front().train, cfg.spectrum_batch, derive_seed(cfg.seed, stream::spectrum_anchor));
    MetricEvaluation<double> me(base.spec, base.w, anchor, cfg.path.output_mode);
    const Eigen::MatrixXd g = me.metric_matrix();
    const SpectrumReport report = metric_spectrum(me, cfg.tol_rel);
    const double trace = g.trace();
    const double sum = report.eigenvalues.sum();
    const double lmax = report.eigenvalues.size() ? report.eigenvalues(0) : 0.0;
    const double lmin = report.eigenvalues.size() ? report.eigenvalues(report.eigenvalues.size() - 1) : 0.0;
    if (s.persist())
        write_json(s.dir / "spectrum.json", to_json(report));
    s.summary({{"n", report.n},
               {"N", report.batch_size},
               {"tol_rel", report.tol_rel},
               {"degeneracy_dim", report.degeneracy_dim},
               {"rank", report.rank()},
               {"lambda_max", lmax},
               {"lambda_min", lmin},
               {"trace", trace},
               {"eigenvalue_sum", sum},
               {"trace_relative_error", trace > 0.0 ? std::abs(sum - trace) / trace : std::abs(sum - trace)},
               {"train_accuracy", accuracy(base.spec, base.w, data.front().train)}});
    return std::move(s.log);
}

RunLog run_experiment(const ExperimentConfig& cfg)
{
    if (cfg.kind == "continual")
        return run_continual(cfg);
    if (cfg.kind == "sparsify")
        return run_sparsify(cfg);
    if (cfg.kind == "ensemble")
        return run_ensemble(cfg);
    if (cfg.kind == "compose")
        return run_compose(cfg);
    if (cfg.kind == "spectrum")
        return run_spectrum(cfg);
    throw Error(Errc::config_error, "unknown experiment kind '" + cfg.kind + "'");
}

} // namespace fip
