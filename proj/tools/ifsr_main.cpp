// Command-line driver: data generation, the pretrain/finetune/merge
// lifecycle, evaluation, oracle checks, ablation sweeps and reports.
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "ifsr/checks.hpp"
#include "ifsr/evaluator.hpp"
#include "ifsr/kernels.hpp"
#include "ifsr/protocol.hpp"
#include "ifsr/report.hpp"

namespace fs = std::filesystem;
using namespace ifsr;
using nlohmann::json;

namespace {

constexpr const char* kUsage = R"(usage: ifsr <command> [options] [--<config.key> <value> ...]

commands:
  gen-data   --out DIR                      write dataset.json for the config
  pretrain   --data FILE --out FILE         train the base model checkpoint
  finetune   --base FILE --data FILE --out FILE
                                            few-shot fine-tune on the shot set
  merge      --base FILE --new FILE --out FILE
                                            concatenate base and new heads
  eval       --ckpt FILE --data FILE --out DIR
                                            detections + AP metrics on the test split
  check      [--out DIR]                    numerical oracle suites (exit 3 on failure)
  sweep      --out DIR [--variants a,b,...] [--K 1,5] [--seeds N]
                                            full lifecycle per (variant, K, seed) cell
  report     --in FILE --out DIR            aggregate a metrics.csv into a report

common options:
  --config FILE       load a key=value config file over the defaults
  --kernels NAME      force the kernel variant (scalar | avx2 | auto)
  --<key> <value>     override any config key, e.g. --train.lr_pretrain 0.01
environment:
  IFSR_WORKERS        worker threads for eval/sweep (default: hardware)
  IFSR_KERNELS        kernel variant, same values as --kernels

exit codes: 0 ok, 1 config/usage error, 2 missing artifact, 3 check failure,
4 numerical abort
)";

struct Cli {
    std::string command;
    std::map<std::string, std::string> flags;
    cfg::Config config;
};

std::size_t worker_count() {
    if (const char* env = std::getenv("IFSR_WORKERS")) {
        const long n = std::atol(env);
        if (n >= 1) return static_cast<std::size_t>(n);
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 2 : hw;
}

Cli parse_cli(int argc, char** argv) {
    Cli cli;
    if (argc < 2) throw std::invalid_argument("missing command\n" + std::string(kUsage));
    cli.command = argv[1];

    const std::vector<std::string> cli_flags = {"config", "out",      "data", "base", "new",
                                                "ckpt",   "variants", "K",    "seeds", "in",
                                                "kernels"};
    std::vector<std::pair<std::string, std::string>> overrides;
    for (int i = 2; i < argc; i += 2) {
        std::string key = argv[i];
        if (key.rfind("--", 0) != 0)
            throw std::invalid_argument("expected --flag, got '" + key + "'");
        key = key.substr(2);
        if (i + 1 >= argc) throw std::invalid_argument("flag --" + key + " needs a value");
        const std::string value = argv[i + 1];
        if (std::find(cli_flags.begin(), cli_flags.end(), key) != cli_flags.end())
            cli.flags[key] = value;
        else
            overrides.emplace_back(key, value);  // config key
    }

    if (auto it = cli.flags.find("config"); it != cli.flags.end())
        cli.config.load_file(it->second);
    for (const auto& [k, v] : overrides) cli.config.set(k, v);
    cli.config.validate();
    if (auto it = cli.flags.find("kernels"); it != cli.flags.end()) kern::select(it->second);
    return cli;
}

const std::string& need_flag(const Cli& cli, const std::string& name) {
    auto it = cli.flags.find(name);
    if (it == cli.flags.end())
        throw std::invalid_argument("command '" + cli.command + "' requires --" + name);
    return it->second;
}

std::string file_hash_hex(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifact("cannot hash missing file " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::ostringstream os;
    os << std::hex << fnv1a64(bytes.data(), bytes.size());
    return os.str();
}

// run manifest: config snapshot plus content hashes of every emitted file
void write_manifest(const fs::path& dir, const cfg::Config& config,
                    const std::vector<fs::path>& outputs, const json& extra = {}) {
    json m;
    m["kind"] = "ifsr_manifest";
    m["version"] = 1;
    m["config"] = config.entries();
    m["config_fingerprint"] = config.fingerprint();
    m["created_unix"] = static_cast<long>(std::time(nullptr));
    if (!extra.is_null() && !extra.empty()) m["run"] = extra;
    json outs = json::array();
    for (const auto& p : outputs)
        outs.push_back({{"path", fs::relative(p, dir).string()}, {"fnv1a64", file_hash_hex(p)}});
    m["outputs"] = outs;
    std::ofstream out(dir / "manifest.json");
    out << m.dump(1) << "\n";
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (!tok.empty()) out.push_back(tok);
    }
    return out;
}

json detections_to_json(const std::vector<std::vector<world::Detection>>& dets,
                        const std::vector<world::Scene>& scenes) {
    json out = json::array();
    for (std::size_t si = 0; si < scenes.size(); ++si) {
        json js;
        js["scene"] = si;
        js["scene_seed"] = scenes[si].seed;
        json arr = json::array();
        for (const auto& d : dets[si]) {
            json jd;
            jd["class"] = d.class_id;
            jd["score"] = d.score;
            jd["box"] = {d.bbox.l, d.bbox.t, d.bbox.r, d.bbox.b};
            if (d.mask.size() > 0) jd["mask_rle"] = mask::rle_encode(d.mask);
            arr.push_back(jd);
        }
        js["detections"] = arr;
        out.push_back(js);
    }
    return out;
}

// ---- commands -------------------------------------------------------------

int cmd_gen_data(const Cli& cli) {
    const fs::path dir = need_flag(cli, "out");
    fs::create_directories(dir);
    const auto ds = world::generate_dataset(cli.config.world_config());
    const fs::path file = dir / "dataset.json";
    proto::save_dataset(ds, cli.config, file.string());
    write_manifest(dir, cli.config, {file});
    std::cout << "wrote " << file.string() << " (base " << ds.base.size() << ", shots "
              << ds.shots.size() << ", test " << ds.test.size() << " scenes)\n";
    return 0;
}

int cmd_pretrain(const Cli& cli) {
    const auto ds = proto::load_dataset(need_flag(cli, "data"), cli.config);
    const auto model = proto::pretrain_base(ds.base, cli.config);
    proto::save_checkpoint(model, need_flag(cli, "out"));
    std::cout << "wrote " << need_flag(cli, "out") << " (" << model.registry.size()
              << " base classes, trunk " << std::hex << model.trunk->fingerprint() << std::dec
              << ")\n";
    return 0;
}

int cmd_finetune(const Cli& cli) {
    const auto base = proto::load_checkpoint(need_flag(cli, "base"));
    const auto ds = proto::load_dataset(need_flag(cli, "data"), cli.config);
    const auto fresh = proto::finetune_new(base, ds.shots, cli.config);
    proto::save_checkpoint(fresh, need_flag(cli, "out"));
    std::cout << "wrote " << need_flag(cli, "out") << " (" << fresh.registry.size()
              << " new classes)\n";
    return 0;
}

int cmd_merge(const Cli& cli) {
    const auto base = proto::load_checkpoint(need_flag(cli, "base"));
    const auto fresh = proto::load_checkpoint(need_flag(cli, "new"));
    const auto merged = proto::merge_checkpoints(base, fresh);
    proto::save_checkpoint(merged, need_flag(cli, "out"));
    std::cout << "wrote " << need_flag(cli, "out") << " (" << merged.registry.size()
              << " classes)\n";
    return 0;
}

int cmd_eval(const Cli& cli) {
    const fs::path dir = need_flag(cli, "out");
    fs::create_directories(dir);
    const auto model = proto::load_checkpoint(need_flag(cli, "ckpt"));
    const auto ds = proto::load_dataset(need_flag(cli, "data"), model.config);

    const auto dets = proto::detect_scenes(model, ds.test, worker_count());
    const fs::path results = dir / "results.json";
    {
        json root;
        root["kind"] = "ifsr_results";
        root["version"] = 1;
        root["scenes"] = detections_to_json(dets, ds.test);
        std::ofstream out(results);
        out << root.dump(1) << "\n";
    }

    auto rows = proto::evaluate_model(model, dets, ds.test);
    rep::sort_rows(rows);
    const fs::path metrics = dir / "metrics.csv";
    rep::write_metrics_csv(rows, metrics.string());
    write_manifest(dir, model.config, {results, metrics});

    for (const auto& r : rows)
        std::cout << r.variant << " K=" << r.k << " " << r.split << " " << r.metric << " = "
                  << r.value << "\n";
    return 0;
}

int cmd_check(const Cli& cli) {
    fs::path dir = ".";
    if (auto it = cli.flags.find("out"); it != cli.flags.end()) {
        dir = it->second;
        fs::create_directories(dir);
    }
    const auto results = checks::run_all((dir / "probit_check.csv").string());
    bool all_ok = true;
    for (const auto& r : results) {
        all_ok = all_ok && r.passed;
        std::printf("[%s] %-24s observed %.3e bound %.3e  %s\n", r.passed ? "PASS" : "FAIL",
                    r.name.c_str(), r.observed, r.bound, r.detail.c_str());
    }
    return all_ok ? 0 : 3;
}

int cmd_sweep(const Cli& cli) {
    const fs::path dir = need_flag(cli, "out");
    fs::create_directories(dir / "cells");

    std::vector<std::string> variants;
    if (auto it = cli.flags.find("variants"); it != cli.flags.end()) {
        variants = split_list(it->second);
    } else {
        for (const auto& v : proto::all_variants()) variants.push_back(v.name);
    }
    for (const auto& v : variants) proto::variant_spec(v);  // validate early

    std::vector<long> ks = {1, 5, 10};
    if (auto it = cli.flags.find("K"); it != cli.flags.end()) {
        ks.clear();
        for (const auto& tok : split_list(it->second)) ks.push_back(std::stol(tok));
    }
    long n_seeds = 10;
    if (auto it = cli.flags.find("seeds"); it != cli.flags.end()) n_seeds = std::stol(it->second);
    require(n_seeds >= 1, "sweep: --seeds must be >= 1");

    struct Cell {
        std::string variant;
        long k;
        long seed;
    };
    std::vector<Cell> cells;
    for (const auto& v : variants)
        for (long k : ks)
            for (long s = 1; s <= n_seeds; ++s) cells.push_back({v, k, s});

    std::vector<std::vector<proto::MetricRow>> cell_rows(cells.size());
    std::vector<fs::path> cell_files(cells.size());
    std::atomic<std::size_t> next{0};
    std::mutex io_mu;
    std::exception_ptr first_error;

    auto run_cell = [&](std::size_t ci) {
        const auto& cell = cells[ci];
        cfg::Config c = cli.config;
        c.set("seed", std::to_string(cell.seed));
        c.set("world.k_shots", std::to_string(cell.k));
        auto rows = proto::run_variant(cell.variant, c, 1);
        rep::sort_rows(rows);
        const fs::path f = dir / "cells" /
                           (cell.variant + "_K" + std::to_string(cell.k) + "_s" +
                            std::to_string(cell.seed) + ".csv");
        rep::write_metrics_csv(rows, f.string());
        cell_rows[ci] = std::move(rows);
        cell_files[ci] = f;
        std::scoped_lock lock(io_mu);
        std::cout << "cell " << cell.variant << " K=" << cell.k << " seed=" << cell.seed
                  << " done\n";
    };

    const std::size_t workers = std::min<std::size_t>(worker_count(), cells.size());
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (;;) {
                const std::size_t ci = next.fetch_add(1);
                if (ci >= cells.size()) return;
                try {
                    run_cell(ci);
                } catch (...) {
                    std::scoped_lock lock(io_mu);
                    if (!first_error) first_error = std::current_exception();
                    return;
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);

    std::vector<proto::MetricRow> all;
    for (auto& rows : cell_rows) all.insert(all.end(), rows.begin(), rows.end());
    rep::sort_rows(all);
    const fs::path metrics = dir / "metrics.csv";
    rep::write_metrics_csv(all, metrics.string());

    std::vector<fs::path> outputs = {metrics};
    outputs.insert(outputs.end(), cell_files.begin(), cell_files.end());
    json extra;
    extra["variants"] = variants;
    extra["K"] = ks;
    extra["seeds"] = n_seeds;
    write_manifest(dir, cli.config, outputs, extra);
    std::cout << "wrote " << metrics.string() << " (" << all.size() << " rows)\n";
    return 0;
}

int cmd_report(const Cli& cli) {
    const fs::path dir = need_flag(cli, "out");
    fs::create_directories(dir);
    auto rows = rep::read_metrics_csv(need_flag(cli, "in"));
    const auto aggs = rep::aggregate(rows);
    rep::write_report(aggs, (dir / "report.md").string(), (dir / "summary.csv").string());
    std::cout << "wrote " << (dir / "report.md").string() << " (" << aggs.size() << " groups)\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        const Cli cli = parse_cli(argc, argv);
        if (cli.command == "gen-data") return cmd_gen_data(cli);
        if (cli.command == "pretrain") return cmd_pretrain(cli);
        if (cli.command == "finetune") return cmd_finetune(cli);
        if (cli.command == "merge") return cmd_merge(cli);
        if (cli.command == "eval") return cmd_eval(cli);
        if (cli.command == "check") return cmd_check(cli);
        if (cli.command == "sweep") return cmd_sweep(cli);
        if (cli.command == "report") return cmd_report(cli);
        if (cli.command == "--help" || cli.command == "help") {
            std::cout << kUsage;
            return 0;
        }
        throw std::invalid_argument("unknown command '" + cli.command + "'\n" + kUsage);
    } catch (const MissingArtifact& e) {
        std::cerr << "error (missing artifact): " << e.what() << "\n";
        return 2;
    } catch (const NumericalError& e) {
        std::cerr << "error (numerical abort): " << e.what() << "\n";
        return 4;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
