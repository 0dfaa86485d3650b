#pragma once

#include <cstddef>
#include <cstdio>
#include <string>
#include <vector>

#include "petal/errors.hpp"
#include "petal/former.hpp"

// Closed-form trainable-parameter accounting. The headline subtotal counts
// only the factor cores and expert bottlenecks; coefficient vectors, scales,
// and the gate are itemized separately so the full trainable count stays
// visible next to the round number.

namespace petal {

struct BudgetLine {
    std::string name;
    std::size_t count = 0;
    bool in_subtotal = false;
};

struct BudgetReport {
    std::vector<BudgetLine> lines;
    std::size_t qformer_part = 0;   // cross core + self core
    std::size_t moe_part = 0;       // expert bottlenecks
    std::size_t paper_mode_subtotal = 0;
    std::size_t full_itemized_total = 0;
    std::size_t backbone_reference = 188000000;
    double ratio = 0.0;
    std::vector<std::string> warnings;

    std::string to_text() const {
        std::string out;
        char buf[160];
        for (const auto& ln : lines) {
            std::snprintf(buf, sizeof(buf), "%-28s %12zu%s\n", ln.name.c_str(), ln.count,
                          ln.in_subtotal ? "" : "  (itemized only)");
            out += buf;
        }
        std::snprintf(buf, sizeof(buf), "%-28s %12zu\n", "former part", qformer_part);
        out += buf;
        std::snprintf(buf, sizeof(buf), "%-28s %12zu\n", "expert part", moe_part);
        out += buf;
        std::snprintf(buf, sizeof(buf), "%-28s %12zu\n", "subtotal", paper_mode_subtotal);
        out += buf;
        std::snprintf(buf, sizeof(buf), "%-28s %12zu\n", "full itemized total",
                      full_itemized_total);
        out += buf;
        std::snprintf(buf, sizeof(buf), "%-28s %12zu\n", "backbone reference",
                      backbone_reference);
        out += buf;
        std::snprintf(buf, sizeof(buf), "%-28s %12.6f\n", "ratio", ratio);
        out += buf;
        for (const auto& w : warnings) out += "warning: " + w + "\n";
        return out;
    }

    std::string to_csv() const {
        std::string out = "component,count,in_subtotal\n";
        char buf[160];
        for (const auto& ln : lines) {
            std::snprintf(buf, sizeof(buf), "%s,%zu,%d\n", ln.name.c_str(), ln.count,
                          ln.in_subtotal ? 1 : 0);
            out += buf;
        }
        std::snprintf(buf, sizeof(buf), "former_part,%zu,1\n", qformer_part);
        out += buf;
        std::snprintf(buf, sizeof(buf), "expert_part,%zu,1\n", moe_part);
        out += buf;
        std::snprintf(buf, sizeof(buf), "subtotal,%zu,1\n", paper_mode_subtotal);
        out += buf;
        std::snprintf(buf, sizeof(buf), "full_itemized_total,%zu,0\n", full_itemized_total);
        out += buf;
        return out;
    }
};

inline BudgetReport petal_budget(std::size_t h_v, std::size_t h_t, std::size_t rank,
                                 std::size_t moe_m, std::size_t moe_k,
                                 std::size_t modalities = 2, std::size_t slots = 4,
                                 std::size_t d_p = 0) {
    if (h_v == 0 || h_t == 0 || rank == 0 || moe_m == 0 || moe_k == 0 || modalities == 0 ||
        slots == 0) {
        throw ConfigError("budget dimensions must be positive");
    }
    if (d_p == 0) d_p = rank * rank;

    BudgetReport rep;
    const std::size_t cross_core = h_v * rank + h_t * rank + rank * d_p;
    const std::size_t self_core = 2 * h_t * rank + rank * d_p;
    const std::size_t moe = h_t * moe_m * 2 * moe_k;
    rep.qformer_part = cross_core + self_core;
    rep.moe_part = moe;
    rep.paper_mode_subtotal = rep.qformer_part + moe;

    rep.lines.push_back({"cross bank core (U,V,P)", cross_core, true});
    rep.lines.push_back({"self bank core (U,V,P)", self_core, true});
    rep.lines.push_back({"expert bottlenecks", moe, true});
    rep.lines.push_back({"lambda coefficients", 2 * modalities * rank, false});
    rep.lines.push_back({"gamma scales", 2, false});
    rep.lines.push_back({"moe gate", 2 * h_t + 1, false});
    rep.lines.push_back({"classifier head (frozen)", 0, false});

    rep.full_itemized_total = 0;
    for (const auto& ln : rep.lines) rep.full_itemized_total += ln.count;

    if (d_p != rank * rank) {
        rep.warnings.push_back("d_p=" + std::to_string(d_p) + " differs from rank^2=" +
                               std::to_string(rank * rank) +
                               "; subtotal will not match the published count");
    }
    rep.ratio = static_cast<double>(rep.paper_mode_subtotal) /
                static_cast<double>(rep.backbone_reference);
    return rep;
}

// Every trainable parameter the petal method ever hands to the optimizer:
// both bank cores plus lambda/gamma plus experts plus the gate.
inline std::size_t petal_method_count(std::size_t h_v, std::size_t h_t, std::size_t rank,
                                      std::size_t moe_m, std::size_t moe_k,
                                      std::size_t modalities = 2, std::size_t d_p = 0) {
    auto rep = petal_budget(h_v, h_t, rank, moe_m, moe_k, modalities, 4, d_p);
    return rep.full_itemized_total;
}

// MOE-module trainables (experts plus gate); V1/V3 remove exactly this much.
inline std::size_t moe_method_count(std::size_t h_t, std::size_t moe_m, std::size_t moe_k) {
    return h_t * moe_m * 2 * moe_k + 2 * h_t + 1;
}

inline std::size_t lora_method_count(const MiniFormerConfig& cfg, std::size_t rank) {
    return cfg.layers *
           (6 * rank * (cfg.h_t + cfg.h_t) + 2 * rank * (cfg.h_t + cfg.h_v));
}

inline std::size_t head_method_count(const MiniFormerConfig& cfg) {
    return cfg.vocab * cfg.h_t + 2 * cfg.h_t;
}

inline std::size_t full_method_count(const MiniFormerConfig& cfg) {
    return backbone_count_formula(cfg) + head_method_count(cfg);
}

struct MethodRow {
    std::string method;
    std::size_t count = 0;
    std::string note;
};

struct BudgetTable {
    std::vector<MethodRow> rows;

    std::string to_text() const {
        std::string out;
        char buf[256];
        for (const auto& r : rows) {
            std::snprintf(buf, sizeof(buf), "%-8s %12zu  %s\n", r.method.c_str(), r.count,
                          r.note.c_str());
            out += buf;
        }
        return out;
    }

    std::string to_csv() const {
        std::string out = "method,count,note\n";
        char buf[256];
        for (const auto& r : rows) {
            std::snprintf(buf, sizeof(buf), "%s,%zu,%s\n", r.method.c_str(), r.count,
                          r.note.c_str());
            out += buf;
        }
        return out;
    }

    std::size_t row(const std::string& method) const {
        for (const auto& r : rows) {
            if (r.method == method) return r.count;
        }
        throw LookupError("no budget row for method " + method);
    }
};

struct BudgetDims {
    std::size_t h_v = 56;
    std::size_t h_t = 32;
    std::size_t rank = 4;
    std::size_t d_p = 0;  // 0 := rank^2
    std::size_t moe_m = 4;
    std::size_t moe_k = 3;
    std::size_t layers = 2;
    std::size_t vocab = 8;
    std::size_t ffn_mult = 4;
    std::size_t query_tokens = 8;
    // At reference scale the full row is the published backbone size and the
    // low-rank row follows the documented all-square-matrices assumption.
    bool paper_scale = false;

    static BudgetDims paper() {
        BudgetDims d;
        d.h_v = 1408;
        d.h_t = 768;
        d.rank = 64;
        d.moe_m = 64;
        d.moe_k = 3;
        d.layers = 12;
        d.paper_scale = true;
        return d;
    }

    MiniFormerConfig former() const {
        MiniFormerConfig cfg;
        cfg.layers = layers;
        cfg.h_t = h_t;
        cfg.h_v = h_v;
        cfg.vocab = vocab;
        cfg.ffn_mult = ffn_mult;
        cfg.query_tokens = query_tokens;
        return cfg;
    }
};

inline BudgetTable compare_budgets(const BudgetDims& dims) {
    BudgetTable table;
    auto rep = petal_budget(dims.h_v, dims.h_t, dims.rank, dims.moe_m, dims.moe_k, 2, 4,
                            dims.d_p);
    if (dims.paper_scale) {
        table.rows.push_back({"petal", rep.paper_mode_subtotal, "core subtotal"});
        const std::size_t lora = dims.layers * 8 * dims.rank * (dims.h_t + dims.h_t);
        table.rows.push_back(
            {"lora", lora,
             "assumes 8 square adapted matrices per layer; published comparison row "
             "(5.0M) uses an unstated slot set and does not match"});
        const auto cfg = dims.former();
        table.rows.push_back({"head", head_method_count(cfg), "output head group"});
        table.rows.push_back({"full", rep.backbone_reference, "published backbone size"});
    } else {
        table.rows.push_back({"petal", rep.full_itemized_total, "all adapter trainables"});
        const auto cfg = dims.former();
        table.rows.push_back({"lora", lora_method_count(cfg, dims.rank), "unshared per layer"});
        table.rows.push_back({"head", head_method_count(cfg), "output head group"});
        table.rows.push_back({"full", full_method_count(cfg), "backbone plus head group"});
    }
    return table;
}

}  // namespace petal
