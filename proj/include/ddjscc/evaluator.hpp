#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "ddjscc/channel.hpp"
#include "ddjscc/checkpoint.hpp"
#include "ddjscc/codec.hpp"
#include "ddjscc/dataset.hpp"
#include "ddjscc/pipeline.hpp"

namespace ddjscc {

// Zero-MSE reconstructions are capped here and flagged instead of reporting
// +inf; capped samples are excluded from grid means.
constexpr double kPsnrCapDb = 99.0;

// Acceptance thresholds for the dynamic-vs-fixed comparison, pinned.
constexpr double kMonotoneNSlackDb = 0.3;
constexpr double kOutperformSlackDb = 0.25;

struct PsnrValue {
    double db = 0.0;
    bool capped = false;
};

inline PsnrValue compute_psnr(const Tensor& x, const Tensor& x_hat, double max_i = 1.0) {
    if (!x.same_shape(x_hat)) {
        throw DimensionError("psnr: shape mismatch " + x.shape_str() + " vs " + x_hat.shape_str());
    }
    if (!(max_i > 0.0)) throw UsageError("psnr: max_i must be > 0");
    double mse = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = x[i] - x_hat[i];
        mse += d * d;
    }
    mse /= static_cast<double>(x.size());
    if (mse == 0.0) return {kPsnrCapDb, true};
    return {10.0 * std::log10(max_i * max_i / mse), false};
}

inline double psnr(const Tensor& x, const Tensor& x_hat, double max_i = 1.0) {
    return compute_psnr(x, x_hat, max_i).db;
}

struct SweepSpec {
    std::vector<double> snr_points;  // dB
    std::vector<double> cr_points;
    std::vector<std::size_t> n_points;
    std::size_t trials = 8;  // independent noise draws per test image per cell
    std::uint64_t seed = 0;
    double p_max = 1.0;
    std::size_t eval_batch = 50;
    bool noiseless = false;  // diagnostic: zero noise power regardless of SNR

    void check() const {
        if (snr_points.empty() || cr_points.empty() || n_points.empty()) {
            throw UsageError("sweep: snr/cr/n point lists must be non-empty");
        }
        if (trials < 1) throw UsageError("sweep: trials must be >= 1");
        if (eval_batch < 1) throw UsageError("sweep: eval_batch must be >= 1");
    }

    bool grid_matches(const SweepSpec& o) const {
        return snr_points == o.snr_points && cr_points == o.cr_points && trials == o.trials;
    }
};

struct SweepCell {
    std::string model;
    std::size_t n = 0;
    double snr_db = 0.0;
    double cr = 0.0;
    double mean_psnr_db = 0.0;
    double stderr_db = 0.0;
    std::size_t samples = 0;  // trials * test-set size, capped included
    std::size_t capped = 0;
};

struct SweepResult {
    std::string model;       // "dynamic" or "fixed-Set..."
    std::string checkpoint;  // provenance
    std::uint64_t seed = 0;
    std::int64_t epochs = 0;
    SweepSpec spec;
    std::vector<SweepCell> cells;  // ordered n-major, then snr, then cr
};

namespace detail {

// One (n, snr, cr) cell: `trials` noise draws over the whole test set, PSNR
// per clamped reconstruction. The cell's generator depends only on
// (spec.seed, cell_index), so any execution schedule gives identical results.
// Trials of one image share that image, so the standard error clusters by
// image: sd of per-image mean PSNRs over sqrt(#images).
inline SweepCell evaluate_cell(DynamicCodec& codec, const ImageSet& test_set,
                               const SweepSpec& spec, const std::string& model_label,
                               std::size_t n, double snr_db, double cr,
                               std::size_t cell_index) {
    SweepCell cell;
    cell.model = model_label;
    cell.n = n;
    cell.snr_db = snr_db;
    cell.cr = cr;

    const LayerConfig cfg = config_from_n(n, codec.spec().layers);
    const Conditioning cond{snr_db, cr};
    Rng rng(derive_seed(spec.seed, cell_index));
    const std::size_t img_len = codec.spec().n_pixels();
    const std::size_t set_size = test_set.size();

    std::vector<double> img_sum(set_size, 0.0);
    std::vector<std::size_t> img_kept(set_size, 0);
    for (std::size_t trial = 0; trial < spec.trials; ++trial) {
        for (std::size_t start = 0; start < set_size; start += spec.eval_batch) {
            const std::size_t rows = std::min(spec.eval_batch, set_size - start);
            Tensor batch({rows, codec.spec().img_channels, codec.spec().img_h,
                          codec.spec().img_w});
            for (std::size_t r = 0; r < rows; ++r) {
                const Tensor& img = test_set.images[start + r];
                for (std::size_t j = 0; j < img_len; ++j) batch[r * img_len + j] = img[j];
            }
            ChannelRealization real = make_realization(snr_db, {1.0, 0.0}, spec.p_max);
            if (spec.noiseless) real.sigma2 = 0.0;
            std::vector<ChannelRealization> chans(rows, real);
            Tape tape;
            VarId x = tape.leaf(batch, false);
            auto run = run_pipeline(tape, codec, x, cond, cfg, chans, rng);
            Tensor recon = clamp01(tape.value(run.recon));
            for (std::size_t r = 0; r < rows; ++r) {
                double mse = 0.0;
                for (std::size_t j = 0; j < img_len; ++j) {
                    const double d = recon[r * img_len + j] - batch[r * img_len + j];
                    mse += d * d;
                }
                mse /= static_cast<double>(img_len);
                ++cell.samples;
                if (mse == 0.0) {
                    ++cell.capped;
                    continue;
                }
                img_sum[start + r] += 10.0 * std::log10(1.0 / mse);
                img_kept[start + r] += 1;
            }
        }
    }
    double sum = 0.0, sum_sq = 0.0;
    std::size_t imgs = 0;
    for (std::size_t i = 0; i < set_size; ++i) {
        if (img_kept[i] == 0) continue;
        const double m = img_sum[i] / static_cast<double>(img_kept[i]);
        sum += m;
        sum_sq += m * m;
        ++imgs;
    }
    if (imgs == 0) {
        cell.mean_psnr_db = kPsnrCapDb;
        cell.stderr_db = 0.0;
        return cell;
    }
    cell.mean_psnr_db = sum / static_cast<double>(imgs);
    if (imgs > 1) {
        const double var = std::max(
            0.0, (sum_sq - sum * sum / static_cast<double>(imgs)) / static_cast<double>(imgs - 1));
        cell.stderr_db = std::sqrt(var / static_cast<double>(imgs));
    }
    return cell;
}

}  // namespace detail

// Full grid evaluation against frozen weights. A fixed-mode model may only be
// evaluated at its trained n. Cells are independent; `jobs` > 1 runs them on
// worker threads with bitwise-identical output.
inline SweepResult evaluate_grid(DynamicCodec& codec, const CheckpointMeta& meta,
                                 const ImageSet& test_set, const SweepSpec& spec,
                                 const std::string& checkpoint_path = "", std::size_t jobs = 1) {
    spec.check();
    if (test_set.size() == 0) throw UsageError("sweep: empty test set");
    const bool fixed = meta.mode == "fixed";
    for (std::size_t n : spec.n_points) {
        if (n < 2 || n > codec.spec().layers - 1) {
            throw UsageError("sweep: n out of range for this codec");
        }
        if (fixed && n != meta.fixed_n) {
            throw ProtocolError("sweep: fixed model trained at n=" +
                                std::to_string(meta.fixed_n) + " requested at n=" +
                                std::to_string(n));
        }
    }

    SweepResult res;
    res.model = fixed ? "fixed-" + config_from_n(meta.fixed_n, codec.spec().layers).name()
                      : "dynamic";
    res.checkpoint = checkpoint_path;
    res.seed = spec.seed;
    res.epochs = meta.epoch;
    res.spec = spec;

    struct CellTask {
        std::size_t n;
        double snr_db, cr;
        std::size_t index;
    };
    std::vector<CellTask> tasks;
    std::size_t index = 0;
    for (std::size_t n : spec.n_points) {
        for (double snr : spec.snr_points) {
            for (double cr : spec.cr_points) {
                tasks.push_back({n, snr, cr, index++});
            }
        }
    }
    res.cells.resize(tasks.size());

    const std::size_t workers = std::max<std::size_t>(1, std::min(jobs, tasks.size()));
    if (workers == 1) {
        for (const auto& t : tasks) {
            res.cells[t.index] = detail::evaluate_cell(codec, test_set, spec, res.model, t.n,
                                                       t.snr_db, t.cr, t.index);
        }
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&, w]() {
                for (std::size_t i = w; i < tasks.size(); i += workers) {
                    const auto& t = tasks[i];
                    res.cells[t.index] = detail::evaluate_cell(codec, test_set, spec, res.model,
                                                               t.n, t.snr_db, t.cr, t.index);
                }
            });
        }
        for (auto& th : pool) th.join();
    }
    return res;
}

struct ComparisonChecks {
    bool per_n_monotone = false;   // dynamic per-n averages non-decreasing within slack
    bool outperforms_fixed = false;  // dynamic grand average >= fixed - slack
    bool snr_monotone = false;     // every model non-decreasing in SNR within pooled stderr
};

struct CellDelta {
    std::size_t n = 0;
    double snr_db = 0.0, cr = 0.0;
    double delta_db = 0.0;  // dynamic minus fixed(n)
};

struct ComparisonReport {
    std::vector<CellDelta> deltas;
    std::vector<std::pair<std::size_t, double>> per_n_dynamic;  // (n, avg dB)
    std::vector<std::pair<std::size_t, double>> per_n_fixed;
    double grand_dynamic = 0.0;
    double grand_fixed = 0.0;
    std::int64_t dynamic_epochs = 0;
    std::int64_t fixed_epochs_total = 0;
    double epoch_ratio = 0.0;
    ComparisonChecks checks;

    bool all_pass() const {
        return checks.per_n_monotone && checks.outperforms_fixed && checks.snr_monotone;
    }
};

namespace detail {

inline double mean_over_cells(const std::vector<const SweepCell*>& cells) {
    double acc = 0.0;
    std::size_t m = 0;
    for (const SweepCell* c : cells) {
        if (c->samples == c->capped) continue;  // all-capped cells are excluded from averages
        acc += c->mean_psnr_db;
        ++m;
    }
    return m == 0 ? kPsnrCapDb : acc / static_cast<double>(m);
}

// non-decreasing in SNR within one pooled standard error per adjacent pair,
// checked along every (n, cr) series of one model's grid
inline bool snr_monotone(const SweepResult& res) {
    for (std::size_t n : res.spec.n_points) {
        for (double cr : res.spec.cr_points) {
            std::vector<const SweepCell*> series;
            for (const auto& c : res.cells) {
                if (c.n == n && c.cr == cr) series.push_back(&c);
            }
            std::sort(series.begin(), series.end(),
                      [](const SweepCell* a, const SweepCell* b) { return a->snr_db < b->snr_db; });
            for (std::size_t i = 1; i < series.size(); ++i) {
                const double pooled = std::sqrt(series[i - 1]->stderr_db * series[i - 1]->stderr_db +
                                                series[i]->stderr_db * series[i]->stderr_db);
                if (series[i]->mean_psnr_db < series[i - 1]->mean_psnr_db - pooled) return false;
            }
        }
    }
    return true;
}

}  // namespace detail

// Dynamic-versus-fixed comparison: per-cell deltas, per-n averages over all
// (SNR, CR) cells, grand averages, the epoch-cost ledger, and the pinned
// acceptance checks.
inline ComparisonReport compare_dynamic_vs_fixed(const SweepResult& dyn,
                                                 const std::vector<SweepResult>& fixed) {
    for (const auto& f : fixed) {
        if (!dyn.spec.grid_matches(f.spec)) {
            throw UsageError("compare: sweep specs differ between dynamic and fixed results");
        }
    }

    ComparisonReport rep;
    auto dyn_cell = [&](std::size_t n, double snr, double cr) -> const SweepCell* {
        for (const auto& c : dyn.cells) {
            if (c.n == n && c.snr_db == snr && c.cr == cr) return &c;
        }
        return nullptr;
    };

    // per-cell deltas against each fixed model at its own n
    for (const auto& f : fixed) {
        for (const auto& fc : f.cells) {
            const SweepCell* dc = dyn_cell(fc.n, fc.snr_db, fc.cr);
            if (!dc) {
                throw UsageError("compare: dynamic sweep lacks cell n=" + std::to_string(fc.n));
            }
            rep.deltas.push_back({fc.n, fc.snr_db, fc.cr, dc->mean_psnr_db - fc.mean_psnr_db});
        }
    }

    // per-n unweighted averages over the (SNR, CR) grid
    for (std::size_t n : dyn.spec.n_points) {
        std::vector<const SweepCell*> cells;
        for (const auto& c : dyn.cells) {
            if (c.n == n) cells.push_back(&c);
        }
        rep.per_n_dynamic.push_back({n, detail::mean_over_cells(cells)});
    }
    for (const auto& f : fixed) {
        std::vector<const SweepCell*> cells;
        for (const auto& c : f.cells) cells.push_back(&c);
        rep.per_n_fixed.push_back({f.spec.n_points.front(), detail::mean_over_cells(cells)});
    }
    std::sort(rep.per_n_fixed.begin(), rep.per_n_fixed.end());

    {
        std::vector<const SweepCell*> all;
        for (const auto& c : dyn.cells) all.push_back(&c);
        rep.grand_dynamic = detail::mean_over_cells(all);
        all.clear();
        for (const auto& f : fixed) {
            for (const auto& c : f.cells) all.push_back(&c);
        }
        rep.grand_fixed = detail::mean_over_cells(all);
    }

    rep.dynamic_epochs = dyn.epochs;
    rep.fixed_epochs_total = 0;
    for (const auto& f : fixed) rep.fixed_epochs_total += f.epochs;
    rep.epoch_ratio = rep.fixed_epochs_total > 0
                          ? static_cast<double>(rep.dynamic_epochs) /
                                static_cast<double>(rep.fixed_epochs_total)
                          : 0.0;

    rep.checks.per_n_monotone = true;
    for (std::size_t i = 1; i < rep.per_n_dynamic.size(); ++i) {
        if (rep.per_n_dynamic[i].second <
            rep.per_n_dynamic[i - 1].second - kMonotoneNSlackDb) {
            rep.checks.per_n_monotone = false;
        }
    }
    rep.checks.outperforms_fixed = rep.grand_dynamic >= rep.grand_fixed - kOutperformSlackDb;
    rep.checks.snr_monotone = detail::snr_monotone(dyn);
    for (const auto& f : fixed) {
        rep.checks.snr_monotone = rep.checks.snr_monotone && detail::snr_monotone(f);
    }
    return rep;
}

inline nlohmann::json report_to_json(const ComparisonReport& rep) {
    nlohmann::json j;
    j["per_n_dynamic"] = nlohmann::json::array();
    for (const auto& [n, v] : rep.per_n_dynamic) {
        j["per_n_dynamic"].push_back({{"n", n}, {"avg_psnr_db", v}});
    }
    j["per_n_fixed"] = nlohmann::json::array();
    for (const auto& [n, v] : rep.per_n_fixed) {
        j["per_n_fixed"].push_back({{"n", n}, {"avg_psnr_db", v}});
    }
    j["deltas"] = nlohmann::json::array();
    for (const auto& d : rep.deltas) {
        j["deltas"].push_back(
            {{"n", d.n}, {"snr_db", d.snr_db}, {"cr", d.cr}, {"delta_db", d.delta_db}});
    }
    j["grand_average"] = {{"dynamic", rep.grand_dynamic}, {"fixed", rep.grand_fixed}};
    j["epoch_ledger"] = {{"dynamic_epochs", rep.dynamic_epochs},
                         {"fixed_epochs_total", rep.fixed_epochs_total},
                         {"ratio", rep.epoch_ratio}};
    j["checks"] = {{"per_n_monotone_slack_db", kMonotoneNSlackDb},
                   {"outperform_slack_db", kOutperformSlackDb},
                   {"per_n_monotone", rep.checks.per_n_monotone},
                   {"outperforms_fixed", rep.checks.outperforms_fixed},
                   {"snr_monotone", rep.checks.snr_monotone}};
    return j;
}

namespace detail {

inline std::string fmt17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace detail

// sweep.csv: RFC-4180 (CRLF line ends, header row), 17 significant digits so
// a re-import reproduces the in-memory values exactly.
inline void write_sweep_csv(const std::string& path, const std::vector<SweepResult>& results) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("export: cannot write '" + path + "'");
    os << "model,n,snr_db,cr,mean_psnr_db,stderr_db,samples\r\n";
    for (const auto& res : results) {
        for (const auto& c : res.cells) {
            os << c.model << ',' << c.n << ',' << detail::fmt17(c.snr_db) << ','
               << detail::fmt17(c.cr) << ',' << detail::fmt17(c.mean_psnr_db) << ','
               << detail::fmt17(c.stderr_db) << ',' << c.samples << "\r\n";
        }
    }
    if (!os) throw IoError("export: write failed for '" + path + "'");
}

inline std::vector<SweepCell> read_sweep_csv(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("import: cannot open '" + path + "'");
    std::string line;
    if (!std::getline(is, line)) throw ParseError(path + ": empty CSV");
    auto strip_cr = [](std::string& s) {
        if (!s.empty() && s.back() == '\r') s.pop_back();
    };
    strip_cr(line);
    if (line != "model,n,snr_db,cr,mean_psnr_db,stderr_db,samples") {
        throw ParseError(path + ": unexpected CSV header '" + line + "'");
    }
    std::vector<SweepCell> cells;
    while (std::getline(is, line)) {
        strip_cr(line);
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::size_t start = 0;
        for (std::size_t i = 0; i <= line.size(); ++i) {
            if (i == line.size() || line[i] == ',') {
                fields.push_back(line.substr(start, i - start));
                start = i + 1;
            }
        }
        if (fields.size() != 7) throw ParseError(path + ": malformed CSV row '" + line + "'");
        SweepCell c;
        c.model = fields[0];
        c.n = std::stoul(fields[1]);
        c.snr_db = std::strtod(fields[2].c_str(), nullptr);
        c.cr = std::strtod(fields[3].c_str(), nullptr);
        c.mean_psnr_db = std::strtod(fields[4].c_str(), nullptr);
        c.stderr_db = std::strtod(fields[5].c_str(), nullptr);
        c.samples = std::stoul(fields[6]);
        cells.push_back(std::move(c));
    }
    return cells;
}

// Writes sweep.csv plus report.json into `dir`.
inline void export_results(const std::vector<SweepResult>& results, const ComparisonReport* rep,
                           const std::string& dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    write_sweep_csv((fs::path(dir) / "sweep.csv").string(), results);
    nlohmann::json j;
    j["models"] = nlohmann::json::array();
    for (const auto& r : results) {
        j["models"].push_back({{"model", r.model},
                               {"checkpoint", r.checkpoint},
                               {"seed", r.seed},
                               {"epochs", r.epochs}});
    }
    if (rep) j["comparison"] = report_to_json(*rep);
    std::ofstream os(fs::path(dir) / "report.json");
    if (!os) throw IoError("export: cannot write report.json in '" + dir + "'");
    os << j.dump(2) << '\n';
}

}  // namespace ddjscc
