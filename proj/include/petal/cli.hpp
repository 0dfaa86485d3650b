#pragma once

// Command-line surface. run() is the whole program; the binary's main() just
// forwards to it so tests can drive every subcommand in-process.
//
// Exit codes: 0 success, 2 usage or configuration, 3 invariant breach,
// 4 file I/O, format, or corruption.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "petal/budget.hpp"
#include "petal/checkpoint.hpp"
#include "petal/grad_suite.hpp"
#include "petal/run_config.hpp"
#include "petal/trainer.hpp"

namespace petal::cli {

namespace detail {

inline int guarded(const std::function<int()>& body) {
    try {
        return body();
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const CorruptionError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out.good()) throw IoError("cannot write " + path);
    out << text;
    if (!out.good()) throw IoError("short write to " + path);
}

struct Overrides {
    std::size_t seed = 0;
    std::string method, ablation;
    std::size_t experts = 0, rank = 0, few_shot = 0;
    CLI::App* cmd = nullptr;

    void bind(CLI::App* c, bool with_ablation = true) {
        cmd = c;
        cmd->add_option("--seed", seed, "override the run seed");
        cmd->add_option("--method", method, "override the tuning method");
        if (with_ablation) cmd->add_option("--ablation", ablation, "override the ablation id");
        cmd->add_option("--experts", experts, "override the expert count");
        cmd->add_option("--rank", rank, "override the factor rank");
        cmd->add_option("--few-shot", few_shot, "restrict training to 50 or 150 items");
    }

    void apply(RunConfig& rc) const {
        try {
            if (cmd->count("--seed")) rc.train.seed = seed;
            if (cmd->count("--method")) rc.train.method = parse_method(method);
            if (!ablation.empty()) rc.train.ablation = parse_ablation(ablation);
        } catch (const LookupError& e) {
            throw UsageError(e.what());
        }
        if (cmd->count("--experts")) rc.train.experts = experts;
        if (cmd->count("--rank")) rc.train.rank = rank;
        if (cmd->count("--few-shot")) rc.task.few_shot = few_shot;
        rc.train.validate();
        rc.task.validate();
    }
};

inline void ensure_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory " + dir + ": " + ec.message());
}

inline int run_training(RunConfig rc, const std::string& out_dir) {
    ensure_dir(out_dir);
    const auto ckpt = out_dir + "/adapter.ckpt";
    auto rep = train<double>(rc.train, rc.task, ckpt);
    write_text(out_dir + "/metrics.csv", rep.metrics_csv());
    write_text(out_dir + "/config_echo.txt", rep.config_echo);
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "method=%s ablation=%s trainable=%zu train_examples=%zu ib_calls=%zu\n",
                  to_string(rc.train.method).c_str(), to_string(rc.train.ablation).c_str(),
                  rep.trainable_count, rep.train_examples_used, rep.ib_calls);
    std::cout << buf;
    std::snprintf(buf, sizeof(buf), "val_loss=%.17g val_accuracy=%.17g wall_time_sec=%.3f\n",
                  rep.final_val_loss(), rep.final_val_accuracy(), rep.wall_time_sec);
    std::cout << buf;
    std::cout << "wrote " << out_dir << "/metrics.csv and " << out_dir << "/config_echo.txt\n";
    if (rc.train.method == Method::petal || rc.train.method == Method::lora) {
        std::cout << "wrote " << ckpt << "\n";
    }
    return 0;
}

}  // namespace detail

inline int run(int argc, const char* const* argv) {
    CLI::App app{"Factorized adapter tuning harness for a frozen two-stream transformer"};
    app.require_subcommand(1);

    std::string config_path, out_dir = ".", checkpoint_path, ablation_id, ks_csv = "1,2,3,4,5,6";
    std::size_t gc_seed = 1, gc_batch = 3, example_index = 0;
    double gc_h = 1e-4, gc_tol = 1e-4;
    bool paper_dims = false, budget_csv = false;
    BudgetDims dims;
    detail::Overrides ov_train, ov_eval, ov_sweep, ov_ablate;

    auto* t = app.add_subcommand("train", "train one configuration and emit metrics");
    t->add_option("--config", config_path, "run configuration file")->required();
    t->add_option("--out", out_dir, "output directory");
    ov_train.bind(t);

    auto* e = app.add_subcommand("eval", "evaluate a model on the validation split");
    e->add_option("--config", config_path, "run configuration file")->required();
    e->add_option("--checkpoint", checkpoint_path, "adapter checkpoint to restore");
    ov_eval.bind(e);

    auto* g = app.add_subcommand("grad-check", "finite-difference audit of every trainable gradient");
    g->add_option("--seed", gc_seed, "model/data seed");
    g->add_option("--batch", gc_batch, "loss batch size");
    g->add_option("--step", gc_h, "finite-difference step");
    g->add_option("--tol", gc_tol, "max allowed relative error");

    auto* b = app.add_subcommand("param-budget", "print the trainable-parameter budget report");
    b->add_flag("--paper-dims", paper_dims, "use the reference dims (H_v=1408 H_t=768 R=64 M=64 K=3)");
    b->add_flag("--csv", budget_csv, "emit CSV instead of aligned text");
    b->add_option("--hv", dims.h_v, "vision width");
    b->add_option("--ht", dims.h_t, "text width");
    b->add_option("--rank", dims.rank, "factor rank");
    b->add_option("--dp", dims.d_p, "projection-selector depth (0 means rank^2)");
    b->add_option("--moe-m", dims.moe_m, "expert bottleneck width");
    b->add_option("--moe-k", dims.moe_k, "expert count");

    auto* s = app.add_subcommand("sweep-experts", "re-train across expert counts");
    s->add_option("--config", config_path, "run configuration file")->required();
    s->add_option("--ks", ks_csv, "comma-separated expert counts");
    s->add_option("--out", out_dir, "output directory");
    ov_sweep.bind(s);

    auto* d = app.add_subcommand("dump-attention", "write cross-attention maps for one example");
    d->add_option("--config", config_path, "run configuration file")->required();
    d->add_option("--checkpoint", checkpoint_path, "adapter checkpoint to restore");
    d->add_option("--out", out_dir, "output directory");
    d->add_option("--index", example_index, "validation example index");

    auto* a = app.add_subcommand("ablate", "train with one component removed");
    a->add_option("--config", config_path, "run configuration file")->required();
    a->add_option("--ablation", ablation_id, "ablation id (V1..V4, random_instruction)")->required();
    a->add_option("--out", out_dir, "output directory");
    ov_ablate.bind(a, /*with_ablation=*/false);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& pe) {
        const int rc = app.exit(pe);
        return rc == 0 ? 0 : 2;
    }

    if (*t) {
        return detail::guarded([&] {
            auto rc = load_run_config(config_path);
            ov_train.apply(rc);
            return detail::run_training(rc, out_dir);
        });
    }
    if (*e) {
        return detail::guarded([&] {
            auto rc = load_run_config(config_path);
            ov_eval.apply(rc);
            auto model = assemble<double>(rc.train, rc.task);
            if (!checkpoint_path.empty()) {
                auto named = adapter_named_tensors(model);
                load_adapter(named, checkpoint_path);
            }
            auto data = gen_dataset<double>(rc.task, rc.train.model.h_v, rc.train.model.vocab);
            auto stats = evaluate(model, data.val);
            char buf[128];
            std::snprintf(buf, sizeof(buf), "val_loss=%.17g val_accuracy=%.17g n=%zu\n",
                          stats.loss, stats.accuracy, data.val.size());
            std::cout << buf;
            return 0;
        });
    }
    if (*g) {
        return detail::guarded([&] {
            TrainConfig cfg;
            cfg.seed = gc_seed;
            SyntheticTaskSpec spec;
            spec.kind = TaskKind::vqa_like;
            spec.teacher_seed = gc_seed;
            spec.n_train = 16;
            spec.n_val = 4;
            auto res = model_grad_check<double>(cfg, spec, gc_batch, gc_h);
            char buf[256];
            std::snprintf(buf, sizeof(buf), "checked %zu coordinates across %zu tensors\n",
                          res.report.checked, res.names.size());
            std::cout << buf;
            std::snprintf(buf, sizeof(buf), "max_rel_err=%.3e worst=%s[%zu]\n",
                          res.report.max_rel_err, res.worst_name().c_str(),
                          res.report.worst_coord);
            std::cout << buf;
            if (!res.report.ok(gc_tol)) {
                std::cout << "FAIL (tol " << gc_tol << ")\n";
                return 3;
            }
            std::cout << "PASS (tol " << gc_tol << ")\n";
            return 0;
        });
    }
    if (*b) {
        return detail::guarded([&] {
            if (paper_dims) dims = BudgetDims::paper();
            auto report = petal_budget(dims.h_v, dims.h_t, dims.rank, dims.moe_m, dims.moe_k, 2, 4,
                                       dims.d_p);
            auto table = compare_budgets(dims);
            if (budget_csv) {
                std::cout << report.to_csv() << "\n" << table.to_csv();
            } else {
                std::cout << report.to_text() << "\n" << table.to_text();
            }
            return 0;
        });
    }
    if (*s) {
        return detail::guarded([&] {
            auto rc = load_run_config(config_path);
            std::vector<std::size_t> ks;
            std::size_t pos = 0;
            while (pos <= ks_csv.size()) {
                auto comma = ks_csv.find(',', pos);
                if (comma == std::string::npos) comma = ks_csv.size();
                const auto item = ks_csv.substr(pos, comma - pos);
                if (item.empty()) throw UsageError("bad --ks list: " + ks_csv);
                ks.push_back(petal::detail::parse_count("ks", item));
                pos = comma + 1;
            }
            ov_sweep.apply(rc);
            auto table = sweep_experts<double>(rc.train, rc.task, ks);
            detail::ensure_dir(out_dir);
            detail::write_text(out_dir + "/sweep.csv", table.to_csv());
            std::cout << table.to_csv();
            std::cout << "wrote " << out_dir << "/sweep.csv\n";
            return 0;
        });
    }
    if (*d) {
        return detail::guarded([&] {
            auto rc = load_run_config(config_path);
            auto model = assemble<double>(rc.train, rc.task);
            if (!checkpoint_path.empty()) {
                auto named = adapter_named_tensors(model);
                load_adapter(named, checkpoint_path);
            }
            auto data = gen_dataset<double>(rc.task, rc.train.model.h_v, rc.train.model.vocab);
            if (example_index >= data.val.size()) {
                throw UsageError("--index " + std::to_string(example_index) +
                                 " out of range for " + std::to_string(data.val.size()) +
                                 " validation examples");
            }
            const auto& ex = data.val[example_index];
            auto fwd = former_forward(model.backbone, ex.vision, instruction_for(model, ex.qid),
                                      model.adapters);
            detail::ensure_dir(out_dir);
            const auto path = out_dir + "/attention.csv";
            dump_attention(fwd.trace, path);
            std::cout << "wrote " << path << " (" << fwd.trace.cross_attn.size() << " layers x "
                      << (fwd.trace.cross_attn.empty() ? 0 : fwd.trace.cross_attn[0].size())
                      << " heads x " << fwd.trace.tq << " rows)\n";
            return 0;
        });
    }
    // ablate
    return detail::guarded([&] {
        auto rc = load_run_config(config_path);
        try {
            rc.train = ablate(rc.train, ablation_id);
        } catch (const LookupError& e) {
            throw UsageError(e.what());
        }
        ov_ablate.apply(rc);
        return detail::run_training(rc, out_dir);
    });
}

}  // namespace petal::cli
