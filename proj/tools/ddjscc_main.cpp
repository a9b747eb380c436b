#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ddjscc/checkpoint.hpp"
#include "ddjscc/dataset.hpp"
#include "ddjscc/evaluator.hpp"
#include "ddjscc/gradcheck.hpp"
#include "ddjscc/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "0.1.0";

// exit codes: 0 ok, 1 internal check failure, 2 usage/config, 3 divergence,
// 4 assertion failure
constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitUsage = 2;
constexpr int kExitDivergence = 3;
constexpr int kExitAssert = 4;

std::string utc_now() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t tt = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&tt));
    return buf;
}

// accepts decimals and fractions like "1/12"
double parse_ratio(const std::string& s) {
    const auto slash = s.find('/');
    std::size_t used = 0;
    if (slash == std::string::npos) {
        const double v = std::stod(s, &used);
        if (used != s.size()) throw ddjscc::UsageError("bad number '" + s + "'");
        return v;
    }
    const double num = std::stod(s.substr(0, slash), &used);
    if (used != slash) throw ddjscc::UsageError("bad fraction '" + s + "'");
    const double den = std::stod(s.substr(slash + 1), &used);
    if (used != s.size() - slash - 1 || den == 0.0) {
        throw ddjscc::UsageError("bad fraction '" + s + "'");
    }
    return num / den;
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= s.size(); ++i) {
        if (i == s.size() || s[i] == sep) {
            if (i > start) out.push_back(s.substr(start, i - start));
            start = i + 1;
        }
    }
    return out;
}

void parse_range(const std::string& s, double& lo, double& hi, const char* what) {
    const auto parts = split(s, ':');
    if (parts.size() != 2) {
        throw ddjscc::UsageError(std::string(what) + " expects lo:hi, got '" + s + "'");
    }
    lo = parse_ratio(parts[0]);
    hi = parse_ratio(parts[1]);
}

std::uint64_t env_seed_default() {
    if (const char* e = std::getenv("DDJSCC_SEED")) {
        return std::strtoull(e, nullptr, 10);
    }
    return 0;
}

// manifest.json goes down before any heavy work; finalized with the end time
struct Manifest {
    fs::path path;
    json body;

    void start(const std::string& out_dir, const std::string& command, const json& config,
               std::uint64_t seed) {
        fs::create_directories(out_dir);
        path = fs::path(out_dir) / "manifest.json";
        body = {{"command", command}, {"config", config},   {"seed", seed},
                {"version", kVersion}, {"out_dir", out_dir}, {"started_utc", utc_now()},
                {"finished_utc", nullptr}};
        write();
    }

    void finish() {
        body["finished_utc"] = utc_now();
        write();
    }

    void write() const {
        std::ofstream os(path);
        if (!os) throw ddjscc::IoError("cannot write " + path.string());
        os << body.dump(2) << '\n';
    }
};

// JSON config file whose values act as defaults; explicit flags win.
json load_config_file(const std::string& path) {
    if (path.empty()) return json::object();
    std::ifstream is(path);
    if (!is) throw ddjscc::UsageError("config file '" + path + "' not readable");
    try {
        return json::parse(is);
    } catch (const json::exception& e) {
        throw ddjscc::UsageError("config file '" + path + "': " + std::string(e.what()));
    }
}

template <typename T>
void maybe_default(const CLI::Option* opt, const json& cfg, const char* key, T& slot) {
    if (opt->count() > 0) return;  // explicit flag wins
    if (cfg.contains(key)) slot = cfg.at(key).get<T>();
}

struct TrainArgs {
    std::string mode = "dynamic";
    std::size_t n = 0;
    bool epochs_given = false;  // absent -> mode default (60 dynamic / 30 fixed)
    std::size_t epochs = 0;
    std::size_t batch = 16;
    double lr = 1e-4;
    std::string snr_range = "0:27";
    std::string cr_range = "0.1:0.9";
    std::uint64_t seed = env_seed_default();
    std::string out;
    std::string data_dir;
    std::size_t synth_count = 2000;
    std::size_t synth_size = 32;
    std::uint64_t synth_seed = 1;
    std::size_t layers = 8;
    std::size_t width1 = 32;
    std::size_t width2 = 64;
    double r_max = 0.9;
    std::string channel = "awgn";
};

int cmd_train(const TrainArgs& a) {
    ddjscc::TrainConfig cfg;
    if (a.mode == "dynamic") {
        cfg.mode = ddjscc::TrainMode::Dynamic;
    } else if (a.mode == "fixed") {
        cfg.mode = ddjscc::TrainMode::Fixed;
        cfg.fixed_n = a.n;
    } else {
        throw ddjscc::UsageError("--mode must be dynamic or fixed");
    }
    cfg.epochs = a.epochs_given ? a.epochs
                                : (cfg.mode == ddjscc::TrainMode::Dynamic ? 60 : 30);
    cfg.batch_size = a.batch;
    cfg.lr = a.lr;
    parse_range(a.snr_range, cfg.snr_min, cfg.snr_max, "--snr");
    parse_range(a.cr_range, cfg.cr_min, cfg.cr_max, "--cr");
    cfg.seed = a.seed;
    cfg.channel = a.channel == "rayleigh" ? ddjscc::ChannelMode::Rayleigh
                                          : ddjscc::ChannelMode::Awgn;

    ddjscc::CodecSpec arch;
    arch.layers = a.layers;
    arch.width1 = a.width1;
    arch.width2 = a.width2;
    arch.r_max = a.r_max;
    arch.snr_cond_min = cfg.snr_min;
    arch.snr_cond_max = cfg.snr_max;
    cfg.check(arch.layers);  // reject bad configs before touching any data

    json data_desc;
    if (!a.data_dir.empty()) {
        data_desc = {{"dir", a.data_dir}};
    } else {
        data_desc = {{"synth_count", a.synth_count},
                     {"synth_size", a.synth_size},
                     {"synth_seed", a.synth_seed}};
    }

    // manifest goes down before the corpus is generated or loaded
    Manifest manifest;
    json mcfg = cfg.to_json();
    mcfg["arch"] = {{"layers", arch.layers}, {"width1", arch.width1}, {"width2", arch.width2},
                    {"r_max", arch.r_max}};
    mcfg["data"] = data_desc;
    manifest.start(a.out, "train", mcfg, cfg.seed);

    ddjscc::ImageSet data = a.data_dir.empty()
                                ? ddjscc::synth_dataset(a.synth_count, a.synth_size, a.synth_seed)
                                : ddjscc::load_image_dir(a.data_dir, "*.p?m");
    if (!data.images.empty()) {
        arch.img_channels = data.images[0].dim(0);
        arch.img_h = data.images[0].dim(1);
        arch.img_w = data.images[0].dim(2);
    }
    arch.check();
    manifest.body["config"]["arch"]["img_h"] = arch.img_h;
    manifest.body["config"]["arch"]["img_w"] = arch.img_w;
    manifest.body["config"]["arch"]["img_channels"] = arch.img_channels;
    manifest.write();

    ddjscc::TrainResult result = ddjscc::train(data, cfg, arch, a.out);
    std::printf("trained %s model: %zu epochs, final mean loss %.6g, best val PSNR %.2f dB "
                "(epoch %zu)\n",
                a.mode.c_str(), cfg.epochs, result.stats.back().mean_loss,
                result.best_val_psnr_db, result.best_epoch);
    std::printf("run directory: %s\n", a.out.c_str());
    manifest.finish();
    return kExitOk;
}

struct SweepArgs {
    std::string dynamic_ckpt;
    std::vector<std::string> fixed_ckpts;
    std::string snr_list = "-6,-3,0,3,6,9,12,15,18,21,24,27";
    std::string cr_list = "1/12,1/6,1/4";
    std::string n_list;  // default: 2..L-1 from the checkpoint
    std::size_t trials = 8;
    std::uint64_t seed = env_seed_default();
    std::string out;
    std::string test_data_dir;
    std::size_t synth_count = 200;
    std::uint64_t synth_seed = 2;
    std::size_t jobs = 1;
    bool assert_criteria = false;
};

int cmd_sweep(const SweepArgs& a) {
    if (a.dynamic_ckpt.empty() && a.fixed_ckpts.empty()) {
        throw ddjscc::UsageError("sweep: need --dynamic and/or --fixed checkpoints");
    }
    for (const std::string& p : a.fixed_ckpts) {
        if (!fs::exists(p)) throw ddjscc::UsageError("sweep: missing checkpoint '" + p + "'");
    }
    if (!a.dynamic_ckpt.empty() && !fs::exists(a.dynamic_ckpt)) {
        throw ddjscc::UsageError("sweep: missing checkpoint '" + a.dynamic_ckpt + "'");
    }

    ddjscc::SweepSpec spec;
    for (const auto& s : split(a.snr_list, ',')) spec.snr_points.push_back(parse_ratio(s));
    for (const auto& s : split(a.cr_list, ',')) spec.cr_points.push_back(parse_ratio(s));
    spec.trials = a.trials;
    spec.seed = a.seed;

    Manifest manifest;
    json mcfg = {{"dynamic", a.dynamic_ckpt}, {"fixed", a.fixed_ckpts},
                 {"snr", a.snr_list},         {"cr", a.cr_list},
                 {"trials", a.trials},        {"jobs", a.jobs},
                 {"assert", a.assert_criteria}};
    if (!a.test_data_dir.empty()) {
        mcfg["test_data"] = a.test_data_dir;
    } else {
        mcfg["test_synth"] = {{"count", a.synth_count}, {"seed", a.synth_seed}};
    }
    manifest.start(a.out, "sweep", mcfg, a.seed);

    ddjscc::ImageSet test = a.test_data_dir.empty()
                                ? ddjscc::synth_dataset(a.synth_count, 32, a.synth_seed)
                                : ddjscc::load_image_dir(a.test_data_dir, "*.p?m");

    std::vector<ddjscc::SweepResult> results;
    ddjscc::SweepResult dyn_result;
    bool have_dyn = false;
    if (!a.dynamic_ckpt.empty()) {
        ddjscc::CheckpointMeta meta;
        ddjscc::DynamicCodec codec = ddjscc::load_codec(a.dynamic_ckpt, &meta);
        ddjscc::SweepSpec dspec = spec;
        if (a.n_list.empty()) {
            for (std::size_t n = 2; n <= codec.spec().layers - 1; ++n) {
                dspec.n_points.push_back(n);
            }
        } else {
            for (const auto& s : split(a.n_list, ',')) {
                dspec.n_points.push_back(std::stoul(s));
            }
        }
        dyn_result = ddjscc::evaluate_grid(codec, meta, test, dspec, a.dynamic_ckpt, a.jobs);
        results.push_back(dyn_result);
        have_dyn = true;
    }
    std::vector<ddjscc::SweepResult> fixed_results;
    for (const std::string& path : a.fixed_ckpts) {
        ddjscc::CheckpointMeta meta;
        ddjscc::DynamicCodec codec = ddjscc::load_codec(path, &meta);
        if (meta.mode != "fixed") {
            throw ddjscc::UsageError("sweep: '" + path + "' is not a fixed-mode checkpoint");
        }
        ddjscc::SweepSpec fspec = spec;
        fspec.n_points = {meta.fixed_n};
        fixed_results.push_back(ddjscc::evaluate_grid(codec, meta, test, fspec, path, a.jobs));
        results.push_back(fixed_results.back());
    }

    ddjscc::ComparisonReport report;
    const bool compared = have_dyn && !fixed_results.empty();
    if (compared) report = ddjscc::compare_dynamic_vs_fixed(dyn_result, fixed_results);
    ddjscc::export_results(results, compared ? &report : nullptr, a.out);

    for (const auto& r : results) {
        double avg = 0.0;
        for (const auto& c : r.cells) avg += c.mean_psnr_db;
        avg /= static_cast<double>(r.cells.size());
        std::printf("%-18s cells=%zu  mean over grid = %.2f dB\n", r.model.c_str(),
                    r.cells.size(), avg);
    }
    if (compared) {
        std::printf("epoch ledger: dynamic %lld vs fixed total %lld (ratio %.4f)\n",
                    static_cast<long long>(report.dynamic_epochs),
                    static_cast<long long>(report.fixed_epochs_total), report.epoch_ratio);
        std::printf("checks: per_n_monotone=%s outperforms_fixed=%s snr_monotone=%s\n",
                    report.checks.per_n_monotone ? "pass" : "fail",
                    report.checks.outperforms_fixed ? "pass" : "fail",
                    report.checks.snr_monotone ? "pass" : "fail");
    }
    std::printf("wrote %s/sweep.csv and report.json\n", a.out.c_str());
    manifest.finish();
    if (a.assert_criteria && compared && !report.all_pass()) return kExitAssert;
    return kExitOk;
}

struct GradcheckArgs {
    std::string op;
    std::uint64_t seed = env_seed_default();
    std::string out;
};

int cmd_gradcheck(const GradcheckArgs& a) {
    Manifest manifest;
    if (!a.out.empty()) {
        manifest.start(a.out, "gradcheck", {{"op", a.op}}, a.seed);
    }
    ddjscc::gradcheck::Report rep = ddjscc::gradcheck::run_all(a.seed, a.op);
    if (rep.results.empty()) throw ddjscc::UsageError("gradcheck: unknown op '" + a.op + "'");
    for (const auto& r : rep.results) {
        std::printf("[%s] %-24s max_rel_err=%.3e over %zu elements\n", r.pass ? "PASS" : "FAIL",
                    r.name.c_str(), r.max_rel_err, r.checked);
    }
    if (!a.out.empty()) {
        json j = json::array();
        for (const auto& r : rep.results) {
            j.push_back({{"name", r.name},
                         {"pass", r.pass},
                         {"max_rel_err", r.max_rel_err},
                         {"checked", r.checked}});
        }
        std::ofstream os(fs::path(a.out) / "gradcheck.json");
        os << j.dump(2) << '\n';
        manifest.finish();
    }
    return rep.all_pass() ? kExitOk : kExitCheckFailed;
}

struct SynthArgs {
    std::size_t count = 0;
    std::size_t size = 32;
    std::uint64_t seed = env_seed_default();
    std::string out;
};

int cmd_synth_data(const SynthArgs& a) {
    if (a.count < 1) throw ddjscc::UsageError("synth-data: --count must be >= 1");
    Manifest manifest;
    manifest.start(a.out, "synth-data",
                   {{"count", a.count}, {"size", a.size}, {"seed", a.seed}}, a.seed);
    ddjscc::ImageSet set = ddjscc::synth_dataset(a.count, a.size, a.seed);
    char name[32];
    for (std::size_t i = 0; i < set.size(); ++i) {
        std::snprintf(name, sizeof name, "img_%05zu.ppm", i);
        ddjscc::save_pnm((fs::path(a.out) / name).string(), set.images[i]);
    }
    std::printf("wrote %zu PPM images to %s\n", set.size(), a.out.c_str());
    manifest.finish();
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"DD-JSCC: dynamic-depth joint source-channel coding experiments"};
    app.require_subcommand(1);

    TrainArgs ta;
    SweepArgs sa;
    GradcheckArgs ga;
    SynthArgs ya;

    CLI::App* train_cmd = app.add_subcommand("train", "train a dynamic model or a fixed baseline");
    std::string train_config;
    train_cmd->add_option("--config", train_config, "JSON config file (flags override)");
    auto* o_mode = train_cmd->add_option("--mode", ta.mode, "dynamic | fixed");
    auto* o_n = train_cmd->add_option("--n", ta.n, "active depth for fixed mode (2..L-1)");
    auto* o_epochs = train_cmd->add_option("--epochs", ta.epochs, "training epochs");
    auto* o_batch = train_cmd->add_option("--batch", ta.batch, "mini-batch size");
    auto* o_lr = train_cmd->add_option("--lr", ta.lr, "Adam learning rate");
    auto* o_snr = train_cmd->add_option("--snr", ta.snr_range, "training SNR range lo:hi in dB");
    auto* o_cr = train_cmd->add_option("--cr", ta.cr_range, "training CR range lo:hi");
    auto* o_seed = train_cmd->add_option("--seed", ta.seed, "master seed (env DDJSCC_SEED)");
    train_cmd->add_option("--out", ta.out, "run directory")->required();
    auto* o_data = train_cmd->add_option("--data", ta.data_dir, "PPM/PGM training directory");
    auto* o_sc = train_cmd->add_option("--synth", ta.synth_count, "synthetic corpus size");
    auto* o_ss = train_cmd->add_option("--synth-size", ta.synth_size, "synthetic image size");
    auto* o_sseed = train_cmd->add_option("--synth-seed", ta.synth_seed, "synthetic corpus seed");
    auto* o_layers = train_cmd->add_option("--layers", ta.layers, "total layer count L");
    auto* o_w1 = train_cmd->add_option("--width1", ta.width1, "channels after layer 1");
    auto* o_w2 = train_cmd->add_option("--width2", ta.width2, "interior trunk channels");
    auto* o_rmax = train_cmd->add_option("--rmax", ta.r_max, "maximum supported CR");
    auto* o_chan = train_cmd->add_option("--channel", ta.channel, "awgn | rayleigh");

    CLI::App* sweep_cmd = app.add_subcommand("sweep", "evaluate checkpoints over the SNRxCRxn grid");
    sweep_cmd->add_option("--dynamic", sa.dynamic_ckpt, "dynamic checkpoint");
    sweep_cmd->add_option("--fixed", sa.fixed_ckpts, "fixed checkpoints")->delimiter(',');
    sweep_cmd->add_option("--snr", sa.snr_list, "comma-separated SNR points in dB");
    sweep_cmd->add_option("--cr", sa.cr_list, "comma-separated CRs (decimals or fractions)");
    sweep_cmd->add_option("--n", sa.n_list, "comma-separated n values for the dynamic model");
    sweep_cmd->add_option("--trials", sa.trials, "noise draws per test image per cell");
    sweep_cmd->add_option("--seed", sa.seed, "sweep seed (env DDJSCC_SEED)");
    sweep_cmd->add_option("--out", sa.out, "output directory")->required();
    sweep_cmd->add_option("--test-data", sa.test_data_dir, "PPM/PGM test directory");
    sweep_cmd->add_option("--synth-test", sa.synth_count, "synthetic test-set size");
    sweep_cmd->add_option("--synth-seed", sa.synth_seed, "synthetic test-set seed");
    sweep_cmd->add_option("--jobs", sa.jobs, "parallel grid cells");
    sweep_cmd->add_flag("--assert", sa.assert_criteria,
                        "exit 4 if any acceptance comparison check fails");

    CLI::App* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient audit");
    grad_cmd->add_option("--op", ga.op, "restrict to one op family");
    grad_cmd->add_option("--seed", ga.seed, "seed");
    grad_cmd->add_option("--out", ga.out, "optional output directory");

    CLI::App* synth_cmd = app.add_subcommand("synth-data", "materialize the synthetic corpus");
    synth_cmd->add_option("--count", ya.count, "image count")->required();
    synth_cmd->add_option("--size", ya.size, "image size");
    synth_cmd->add_option("--seed", ya.seed, "seed");
    synth_cmd->add_option("--out", ya.out, "output directory")->required();

    try {
        app.parse(argc, argv);
        if (train_cmd->parsed()) {
            const json file_cfg = load_config_file(train_config);
            maybe_default(o_mode, file_cfg, "mode", ta.mode);
            maybe_default(o_n, file_cfg, "n", ta.n);
            maybe_default(o_epochs, file_cfg, "epochs", ta.epochs);
            ta.epochs_given = o_epochs->count() > 0 || file_cfg.contains("epochs");
            maybe_default(o_batch, file_cfg, "batch", ta.batch);
            maybe_default(o_lr, file_cfg, "lr", ta.lr);
            maybe_default(o_snr, file_cfg, "snr", ta.snr_range);
            maybe_default(o_cr, file_cfg, "cr", ta.cr_range);
            maybe_default(o_seed, file_cfg, "seed", ta.seed);
            maybe_default(o_data, file_cfg, "data", ta.data_dir);
            maybe_default(o_sc, file_cfg, "synth", ta.synth_count);
            maybe_default(o_ss, file_cfg, "synth_size", ta.synth_size);
            maybe_default(o_sseed, file_cfg, "synth_seed", ta.synth_seed);
            maybe_default(o_layers, file_cfg, "layers", ta.layers);
            maybe_default(o_w1, file_cfg, "width1", ta.width1);
            maybe_default(o_w2, file_cfg, "width2", ta.width2);
            maybe_default(o_rmax, file_cfg, "rmax", ta.r_max);
            maybe_default(o_chan, file_cfg, "channel", ta.channel);
            return cmd_train(ta);
        }
        if (sweep_cmd->parsed()) return cmd_sweep(sa);
        if (grad_cmd->parsed()) return cmd_gradcheck(ga);
        if (synth_cmd->parsed()) return cmd_synth_data(ya);
        return kExitUsage;
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kExitOk : kExitUsage;
    } catch (const ddjscc::DivergenceError& e) {
        std::fprintf(stderr, "divergence: %s\n", e.what());
        return kExitDivergence;
    } catch (const ddjscc::UsageError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    } catch (const ddjscc::ParseError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    } catch (const ddjscc::IoError& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return kExitUsage;
    } catch (const ddjscc::Error& e) {
        std::fprintf(stderr, "internal error: %s\n", e.what());
        return kExitCheckFailed;
    }
}
