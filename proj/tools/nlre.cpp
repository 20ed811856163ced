// nlre: reproducible experiment front end.
//
//   nlre gen      synthesize a noisy dataset and write it to disk
//   nlre train    train the model on a generated or loaded dataset
//   nlre selftest run the numerical oracle suites
//   nlre sweep    grid of (noise rate x seed) training runs + aggregate
//
// Exit codes: 0 ok, 2 invalid arguments, 3 I/O failure, 4 training failure,
// 5 selftest failure, 6 sweep finished with failed cells.

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "nlre/datagen.hpp"
#include "nlre/emtrain.hpp"
#include "nlre/selftest.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace nlre;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitArgs = 2;
constexpr int kExitIo = 3;
constexpr int kExitTraining = 4;
constexpr int kExitSelftest = 5;
constexpr int kExitSweepPartial = 6;

// ---------------------------------------------------------------------------
// Shared option bundles

struct DataOpts {
    std::string kind = "idn";
    double rate = 0.3;
    std::size_t n = 4000;
    std::size_t c = 4;
    std::size_t d = 2;
    double sep = 8.0;
    double idn_std = 0.1;
    double test_fraction = 0.2;
    std::uint64_t seed = 0;
    std::string data_file;  // non-empty: load instead of generate
};

NoiseKind parse_kind(const std::string& kind) {
    if (kind == "symmetric") return NoiseKind::symmetric;
    if (kind == "pairflip") return NoiseKind::pairflip;
    if (kind == "idn") return NoiseKind::idn;
    throw CLI::ValidationError("kind", "must be one of symmetric|pairflip|idn");
}

// Flat key=value config support. The file is expanded into ordinary flags
// inserted before the user's own flags; every option takes its last value,
// so command-line flags always win over the file.
std::vector<std::string> expand_config(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    std::string config_path;
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) {
            config_path = args[i + 1];
            args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i) + 2);
            break;
        }
        if (args[i].rfind("--config=", 0) == 0) {
            config_path = args[i].substr(9);
            args.erase(args.begin() + static_cast<std::ptrdiff_t>(i));
            break;
        }
    }
    if (config_path.empty()) return args;
    std::ifstream in(config_path);
    if (!in) throw std::ios_base::failure("config file not readable: " + config_path);
    std::vector<std::string> expanded;
    if (!args.empty()) expanded.push_back(args[0]);  // subcommand name
    std::string line;
    while (std::getline(in, line)) {
        std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        std::size_t eq = line.find('=');
        auto trim = [](std::string s) {
            std::size_t a = s.find_first_not_of(" \t\r");
            std::size_t b = s.find_last_not_of(" \t\r");
            return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
        };
        if (eq == std::string::npos) {
            if (!trim(line).empty())
                throw std::invalid_argument("config: expected key=value, got '" + trim(line) + "'");
            continue;
        }
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw std::invalid_argument("config: empty key");
        if (value == "true") {
            expanded.push_back("--" + key);
        } else if (value == "false") {
            // omitted: flags default to off
        } else {
            expanded.push_back("--" + key);
            expanded.push_back(value);
        }
    }
    expanded.insert(expanded.end(), args.begin() + (args.empty() ? 0 : 1), args.end());
    return expanded;
}

void take_last_everywhere(CLI::App& app) {
    for (CLI::Option* o : app.get_options())
        if (o->get_positional() == false && o->get_name() != "--help")
            o->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    for (CLI::App* sub : app.get_subcommands(nullptr)) take_last_everywhere(*sub);
}

void add_generator_options(CLI::App& app, DataOpts& opts) {
    app.add_option("--kind", opts.kind, "noise kind: symmetric|pairflip|idn")
        ->check(CLI::IsMember({"symmetric", "pairflip", "idn"}));
    app.add_option("--rate", opts.rate, "nominal noise rate in [0,1)");
    app.add_option("--n", opts.n, "number of samples")->check(CLI::PositiveNumber);
    app.add_option("--c", opts.c, "number of classes")->check(CLI::Range(std::size_t{2}, std::size_t{65535}));
    app.add_option("--d", opts.d, "feature dimension")->check(CLI::PositiveNumber);
    app.add_option("--sep", opts.sep, "cluster separation")->check(CLI::PositiveNumber);
    app.add_option("--idn-std", opts.idn_std, "per-sample rate std (idn only)");
}

NoisyDataset build_dataset(const DataOpts& opts) {
    if (!opts.data_file.empty()) return load_dataset(opts.data_file);
    if (opts.rate < 0.0 || opts.rate >= 1.0)
        throw CLI::ValidationError("rate", "must be in [0,1)");
    Rng rng(opts.seed);
    CleanDataset clean = gen_gaussian_blobs(opts.n, opts.c, opts.d, opts.sep, rng);
    if (opts.rate == 0.0) return NoisyDataset::from_clean(clean);
    NoiseSpec spec{parse_kind(opts.kind), opts.rate, opts.idn_std};
    return inject_noise(clean, spec, rng);
}

void add_train_options(CLI::App& app, TrainConfig& cfg) {
    app.add_option("--epochs", cfg.epochs, "EM epochs T");
    app.add_option("--warmup", cfg.warmup_epochs, "warm-up epochs");
    app.add_option("--warmup-batch", cfg.warmup_batch_size, "warm-up batch size (0: full batch)");
    app.add_option("--warmup-lr", cfg.warmup_lr, "warm-up learning rate (0: lr-theta)");
    app.add_option("--posterior-warmup", cfg.posterior_warmup_epochs,
                   "posterior-only epochs before EM");
    app.add_option("--batch", cfg.batch_size, "EM batch size");
    app.add_option("--lr-theta", cfg.lr_theta, "clean-classifier learning rate");
    app.add_option("--lr-noisy", cfg.lr_noisy, "noisy-head learning rate (0: lr-theta)");
    app.add_option("--lr-posterior", cfg.lr_posterior, "posterior learning rate (0: lr-theta)");
    app.add_option("--lr-eps", cfg.lr_eps, "noise-rate logit learning rate");
    app.add_option("--momentum", cfg.momentum, "SGD momentum in [0,1)");
    app.add_option("--lambda", cfg.lambda, "constraint weight");
    app.add_option("--e-steps", cfg.e_steps_per_batch, "E steps per batch");
    app.add_option("--m-steps", cfg.m_steps_per_batch, "M steps per batch");
    app.add_option("--hidden", cfg.hidden_width, "hidden layer width");
    app.add_option("--knn-k", cfg.knn_k, "k for the knn criterion");
    app.add_option("--eps-init", cfg.eps_init,
                   "initial noise rate (<0: estimate from warm-up disagreement)");
    app.add_option_function<std::string>(
           "--criterion",
           [&cfg](const std::string& v) {
               cfg.criterion = v == "knn" ? CriterionKind::knn : CriterionKind::small_loss;
           },
           "selection criterion: small_loss|knn")
        ->check(CLI::IsMember({"small_loss", "knn"}));
    app.add_option_function<std::string>(
           "--scope",
           [&cfg](const std::string& v) {
               cfg.selection_scope =
                   v == "per_batch" ? SelectionScope::per_batch : SelectionScope::per_epoch;
           },
           "selection scope: per_epoch|per_batch")
        ->check(CLI::IsMember({"per_epoch", "per_batch"}));
    app.add_flag("--no-epsilon", cfg.no_selection,
                 "ablation: disable selection (every sample treated clean)");
    app.add_option("--fixed-eps", cfg.fixed_rate,
                   "ablation: use this fixed rate for selection instead of the estimate");
    app.add_flag("--assert-ascent", cfg.assert_ascent,
                 "fail if any E/M block decreases its objective (full-batch mode)");
    app.add_option("--checkpoint-every", cfg.checkpoint_every,
                   "write a model checkpoint every k epochs (0: off)");
}

std::string criterion_name(CriterionKind k) {
    return k == CriterionKind::knn ? "knn" : "small_loss";
}

std::string scope_name(SelectionScope s) {
    return s == SelectionScope::per_batch ? "per_batch" : "per_epoch";
}

json config_echo(const DataOpts& data, const TrainConfig& cfg) {
    json e;
    if (data.data_file.empty()) {
        e["data"] = {{"kind", data.kind},       {"rate", data.rate}, {"n", data.n},
                     {"c", data.c},             {"d", data.d},       {"sep", data.sep},
                     {"idn_std", data.idn_std}, {"test_fraction", data.test_fraction},
                     {"seed", data.seed}};
    } else {
        e["data"] = {{"file", data.data_file}, {"test_fraction", data.test_fraction},
                     {"seed", data.seed}};
    }
    e["train"] = {{"epochs", cfg.epochs},
                  {"warmup_epochs", cfg.warmup_epochs},
                  {"warmup_batch_size", cfg.warmup_batch_size},
                  {"warmup_lr", cfg.warmup_lr},
                  {"posterior_warmup_epochs", cfg.posterior_warmup_epochs},
                  {"batch_size", cfg.batch_size},
                  {"lr_theta", cfg.lr_theta},
                  {"lr_noisy", cfg.lr_noisy},
                  {"lr_posterior", cfg.lr_posterior},
                  {"lr_eps", cfg.lr_eps},
                  {"momentum", cfg.momentum},
                  {"lambda", cfg.lambda},
                  {"e_steps_per_batch", cfg.e_steps_per_batch},
                  {"m_steps_per_batch", cfg.m_steps_per_batch},
                  {"criterion", criterion_name(cfg.criterion)},
                  {"selection_scope", scope_name(cfg.selection_scope)},
                  {"hidden_width", cfg.hidden_width},
                  {"knn_k", cfg.knn_k},
                  {"eps_init", cfg.eps_init},
                  {"no_epsilon", cfg.no_selection},
                  {"fixed_eps", cfg.fixed_rate},
                  {"seed", cfg.seed}};
    return e;
}

// Run one training cell and write records.csv + summary.json into out_dir.
void run_and_write(const DataOpts& data, TrainConfig cfg, const fs::path& out_dir) {
    NoisyDataset full = build_dataset(data);
    Rng split_rng = Rng(data.seed).split(100);
    auto [train_ds, test_ds] = split_train_test(full, data.test_fraction, split_rng);

    cfg.seed = cfg.seed == 0 ? data.seed + 1 : cfg.seed;
    if (cfg.checkpoint_every > 0) cfg.checkpoint_dir = out_dir.string();
    TrainResult result = train(cfg, train_ds, test_ds);

    fs::create_directories(out_dir);
    write_records(result.records, (out_dir / "records.csv").string());

    double best = 0.0;
    for (const EpochRecord& r : result.records) best = std::max(best, r.test_accuracy);
    json summary;
    summary["final_eps_hat"] = result.records.back().eps_hat;
    summary["realized_rate"] = train_ds.true_rate;
    summary["final_test_acc"] = result.records.back().test_accuracy;
    summary["best_test_acc"] = best;
    summary["config_echo"] = config_echo(data, cfg);
    summary["seed"] = cfg.seed;
    summary["wall_time_s"] = result.wall_time_s;
    std::ofstream out(out_dir / "summary.json", std::ios::trunc);
    if (!out) throw std::ios_base::failure("cannot open " + (out_dir / "summary.json").string());
    out << summary.dump(2) << "\n";
    if (!out) throw std::ios_base::failure("write failed for summary.json");
    save_model(result.model, (out_dir / "model.nlgm").string());
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_gen(const DataOpts& data, const std::string& out_path) {
    NoisyDataset ds = build_dataset(data);
    try {
        save_dataset(ds, out_path);
    } catch (const std::exception& e) {
        std::cerr << "gen: " << e.what() << "\n";
        return kExitIo;
    }
    std::cout << "wrote " << out_path << " (n=" << ds.n << ", c=" << ds.c << ", d=" << ds.d
              << ")\nrealized_rate " << format_g17(ds.true_rate) << "\n";
    return kExitOk;
}

int cmd_train(const DataOpts& data, const TrainConfig& cfg, const std::string& out_dir) {
    try {
        run_and_write(data, cfg, out_dir);
    } catch (const CLI::ValidationError& e) {
        std::cerr << "train: " << e.what() << "\n";
        return kExitArgs;
    } catch (const std::ios_base::failure& e) {
        std::cerr << "train: " << e.what() << "\n";
        return kExitIo;
    } catch (const std::invalid_argument& e) {
        std::cerr << "train: " << e.what() << "\n";
        return kExitArgs;
    } catch (const std::exception& e) {
        std::cerr << "train: " << e.what() << "\n";
        return kExitTraining;
    }
    std::cout << "artifacts in " << out_dir << "\n";
    return kExitOk;
}

int cmd_selftest(std::uint64_t seed, const std::string& only, bool inject_bug) {
    std::vector<SuiteResult> results = run_selftests(seed, only, inject_bug);
    if (results.empty()) {
        std::cerr << "selftest: unknown suite '" << only
                  << "' (grad|elbo|generative|selection)\n";
        return kExitArgs;
    }
    const SuiteResult* first_fail = nullptr;
    for (const SuiteResult& r : results) {
        std::cout << r.name << ": " << (r.passed ? "PASS" : "FAIL") << " (" << r.detail << ")\n";
        if (!r.passed && !first_fail) first_fail = &r;
    }
    if (first_fail) {
        std::cerr << "selftest: suite '" << first_fail->name << "' failed\n";
        return kExitSelftest;
    }
    return kExitOk;
}

struct SweepCell {
    double rate = 0.0;
    std::uint64_t seed = 0;
    bool done = false;
    bool failed = false;
    std::string error;
    double final_eps_hat = 0.0;
    double realized_rate = 0.0;
    double final_test_acc = 0.0;
};

int cmd_sweep(const DataOpts& base_data, const TrainConfig& base_cfg,
              const std::vector<double>& rates, const std::vector<std::uint64_t>& seeds,
              const std::string& out_dir) {
    std::vector<SweepCell> cells;
    for (double r : rates)
        for (std::uint64_t s : seeds) cells.push_back({r, s});

    std::size_t threads = 1;
    if (const char* env = std::getenv("NLRE_THREADS")) {
        threads = static_cast<std::size_t>(std::max(1L, std::atol(env)));
        threads = std::min(threads, cells.size());
    }

    auto run_cell = [&](SweepCell& cell) {
        DataOpts data = base_data;
        data.rate = cell.rate;
        data.seed = cell.seed;
        TrainConfig cfg = base_cfg;
        cfg.seed = cell.seed + 1;
        std::ostringstream name;
        name << "rate" << cell.rate << "_seed" << cell.seed;
        fs::path dir = fs::path(out_dir) / name.str();
        try {
            run_and_write(data, cfg, dir);
            std::ifstream in(dir / "summary.json");
            json summary = json::parse(in);
            cell.final_eps_hat = summary["final_eps_hat"];
            cell.realized_rate = summary["realized_rate"];
            cell.final_test_acc = summary["final_test_acc"];
        } catch (const std::exception& e) {
            cell.failed = true;
            cell.error = e.what();
        }
        cell.done = true;
    };

    if (threads <= 1) {
        for (SweepCell& cell : cells) {
            run_cell(cell);
            std::cout << "rate " << cell.rate << " seed " << cell.seed << ": "
                      << (cell.failed ? "FAILED " + cell.error
                                      : "eps_hat " + format_g17(cell.final_eps_hat)) << "\n";
        }
    } else {
        std::vector<std::thread> pool;
        std::size_t next = 0;
        std::mutex mu;
        for (std::size_t t = 0; t < threads; ++t)
            pool.emplace_back([&] {
                for (;;) {
                    std::size_t i;
                    {
                        std::lock_guard<std::mutex> lock(mu);
                        if (next >= cells.size()) return;
                        i = next++;
                    }
                    run_cell(cells[i]);
                }
            });
        for (std::thread& t : pool) t.join();
        for (const SweepCell& cell : cells)
            std::cout << "rate " << cell.rate << " seed " << cell.seed << ": "
                      << (cell.failed ? "FAILED " + cell.error
                                      : "eps_hat " + format_g17(cell.final_eps_hat)) << "\n";
    }

    // Aggregate: mean/std per rate over the seeds that completed.
    std::ostringstream agg;
    agg << "rate,n_runs,mean_eps_hat,std_eps_hat,mean_realized,mean_eps_err,"
           "mean_test_acc,std_test_acc,failed\n";
    for (double r : rates) {
        std::vector<const SweepCell*> ok;
        std::size_t failed = 0;
        for (const SweepCell& c : cells) {
            if (c.rate != r) continue;
            if (c.failed)
                ++failed;
            else
                ok.push_back(&c);
        }
        auto mean = [&](auto get) {
            double s = 0.0;
            for (const SweepCell* c : ok) s += get(*c);
            return ok.empty() ? 0.0 : s / static_cast<double>(ok.size());
        };
        auto stdev = [&](auto get, double m) {
            if (ok.size() < 2) return 0.0;
            double s = 0.0;
            for (const SweepCell* c : ok) s += (get(*c) - m) * (get(*c) - m);
            return std::sqrt(s / static_cast<double>(ok.size() - 1));
        };
        double m_eps = mean([](const SweepCell& c) { return c.final_eps_hat; });
        double m_acc = mean([](const SweepCell& c) { return c.final_test_acc; });
        agg << format_g17(r) << ',' << ok.size() << ',' << format_g17(m_eps) << ','
            << format_g17(stdev([](const SweepCell& c) { return c.final_eps_hat; }, m_eps)) << ','
            << format_g17(mean([](const SweepCell& c) { return c.realized_rate; })) << ','
            << format_g17(mean([](const SweepCell& c) {
                   return std::abs(c.final_eps_hat - c.realized_rate);
               })) << ','
            << format_g17(m_acc) << ','
            << format_g17(stdev([](const SweepCell& c) { return c.final_test_acc; }, m_acc)) << ','
            << failed << "\n";
    }
    try {
        fs::create_directories(out_dir);
        std::ofstream out(fs::path(out_dir) / "sweep.csv", std::ios::trunc);
        if (!out) throw std::ios_base::failure("cannot open sweep.csv");
        out << agg.str();
        if (!out) throw std::ios_base::failure("write failed for sweep.csv");
    } catch (const std::exception& e) {
        std::cerr << "sweep: " << e.what() << "\n";
        return kExitIo;
    }
    for (const SweepCell& c : cells)
        if (c.failed) return kExitSweepPartial;
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"noisy-label EM training with a noise-rate selection curriculum"};
    app.require_subcommand(1);

    DataOpts data;
    TrainConfig cfg;
    std::string gen_out = "dataset.nlds";
    std::string train_out = "run";
    std::string sweep_out = "sweep";
    std::uint64_t selftest_seed = 0;
    std::string selftest_only;
    bool inject_bug = false;
    std::vector<double> sweep_rates{0.2, 0.3, 0.4, 0.5};
    std::vector<std::uint64_t> sweep_seeds{7, 11, 23, 41, 97};

    CLI::App* gen = app.add_subcommand("gen", "generate a noisy dataset file");
    add_generator_options(*gen, data);
    gen->add_option("--seed", data.seed, "generator seed");
    gen->add_option("--out", gen_out, "output file path");

    CLI::App* tr = app.add_subcommand("train", "train on a generated or loaded dataset");
    add_generator_options(*tr, data);
    tr->add_option("--data", data.data_file, "load a dataset file instead of generating");
    tr->add_option("--test-frac", data.test_fraction, "held-out clean test fraction");
    tr->add_option("--seed", data.seed, "data seed (training seed defaults to seed+1)");
    tr->add_option("--train-seed", cfg.seed, "training seed override");
    add_train_options(*tr, cfg);
    tr->add_option("--out", train_out, "output directory");

    CLI::App* st = app.add_subcommand("selftest", "run the numerical oracle suites");
    st->add_option("--seed", selftest_seed, "suite seed");
    st->add_option("--suite", selftest_only, "run one suite: grad|elbo|generative|selection");
    st->add_flag("--inject-gradient-bug", inject_bug)->group("");  // hidden negative control

    CLI::App* sw = app.add_subcommand("sweep", "grid of (rate x seed) training runs");
    add_generator_options(*sw, data);
    sw->add_option("--test-frac", data.test_fraction, "held-out clean test fraction");
    sw->add_option("--rates", sweep_rates, "noise rates to sweep")->delimiter(',');
    sw->add_option("--seeds", sweep_seeds, "data seeds to sweep")->delimiter(',');
    add_train_options(*sw, cfg);
    sw->add_option("--out", sweep_out, "output directory");

    std::string config_sink;
    for (CLI::App* sub : {gen, tr, st, sw})
        sub->add_option("--config", config_sink,
                        "flat key=value config file; command-line flags win");
    take_last_everywhere(app);

    std::vector<std::string> args;
    try {
        args = expand_config(argc, argv);
    } catch (const std::ios_base::failure& e) {
        std::cerr << e.what() << "\n";
        return kExitIo;
    } catch (const std::exception& e) {
        std::cerr << e.what() << "\n";
        return kExitArgs;
    }
    try {
        std::vector<std::string> rev(args.rbegin(), args.rend());
        app.parse(rev);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitArgs;
    }

    try {
        if (gen->parsed()) {
            if (data.rate < 0.0 || data.rate >= 1.0) {
                std::cerr << "gen: rate must be in [0,1)\n";
                return kExitArgs;
            }
            return cmd_gen(data, gen_out);
        }
        if (tr->parsed()) return cmd_train(data, cfg, train_out);
        if (st->parsed()) return cmd_selftest(selftest_seed, selftest_only, inject_bug);
        if (sw->parsed()) return cmd_sweep(data, cfg, sweep_rates, sweep_seeds, sweep_out);
    } catch (const CLI::ValidationError& e) {
        std::cerr << e.what() << "\n";
        return kExitArgs;
    } catch (const std::invalid_argument& e) {
        std::cerr << e.what() << "\n";
        return kExitArgs;
    } catch (const std::ios_base::failure& e) {
        std::cerr << e.what() << "\n";
        return kExitIo;
    } catch (const std::exception& e) {
        std::cerr << e.what() << "\n";
        return 1;
    }
    return kExitOk;
}
