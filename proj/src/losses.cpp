#include "mvmatch/losses.hpp"

#include <algorithm>
#include <cmath>

#include "mvmatch/error.hpp"

namespace mvmatch {

std::string_view to_string(LabelMode m) { return m == LabelMode::hard ? "hard" : "soft"; }

LabelMode label_mode_from_string(std::string_view s) {
    if (s == "hard") return LabelMode::hard;
    if (s == "soft") return LabelMode::soft;
    throw ConfigError("unknown label mode '" + std::string(s) + "'");
}

std::string_view to_string(SourceViewSupervision s) {
    return s == SourceViewSupervision::pseudo_label ? "pseudo_label" : "ground_truth";
}

SourceViewSupervision source_view_supervision_from_string(std::string_view s) {
    if (s == "pseudo_label") return SourceViewSupervision::pseudo_label;
    if (s == "ground_truth") return SourceViewSupervision::ground_truth;
    throw ConfigError("unknown source view supervision '" + std::string(s) + "'");
}

std::string_view to_string(Term t) {
    switch (t) {
        case Term::s_gt: return "s_gt";
        case Term::s_sa2: return "s_sa2";
        case Term::t_sa2: return "t_sa2";
        case Term::t_sa1: return "t_sa1";
        case Term::s_wa2: return "s_wa2";
        case Term::t_wa2: return "t_wa2";
    }
    return "?";
}

bool LossConfig::enabled(Term t) const {
    switch (t) {
        case Term::s_gt: return true;
        case Term::s_sa2: return s_sa2;
        case Term::t_sa2: return t_sa2;
        case Term::t_sa1: return t_sa1;
        case Term::s_wa2: return s_wa2;
        case Term::t_wa2: return t_wa2;
    }
    return false;
}

void LossConfig::validate() const {
    if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("tau must be in [0, 1]");
    if (s_sa2 && s_wa2) throw ConfigError("s_sa2 and s_wa2 are mutually exclusive");
    if (t_sa2 && t_wa2) throw ConfigError("t_sa2 and t_wa2 are mutually exclusive");
    if ((s_sa2 || t_sa2) && view_aug != AugKind::strong)
        throw ConfigError("sa2 terms need view_aug = strong");
    if ((s_wa2 || t_wa2) && view_aug != AugKind::weak)
        throw ConfigError("wa2 terms need view_aug = weak");
}

LossConfig LossConfig::source_only() {
    LossConfig c;
    c.s_sa2 = c.t_sa2 = c.t_sa1 = false;
    return c;
}

LossConfig LossConfig::fixmatch() {
    LossConfig c = source_only();
    c.t_sa1 = true;
    return c;
}

LossConfig LossConfig::mv_match_hard() { return LossConfig{}; }

LossConfig LossConfig::mv_match_soft() {
    LossConfig c;
    c.label_mode = LabelMode::soft;
    c.tau = 0.0;
    return c;
}

LossConfig LossConfig::wa2_only() {
    LossConfig c = source_only();
    c.s_wa2 = c.t_wa2 = true;
    c.view_aug = AugKind::weak;
    return c;
}

LossConfig LossConfig::preset(std::string_view name) {
    if (name == "source-only") return source_only();
    if (name == "fixmatch") return fixmatch();
    if (name == "mv-match-hard") return mv_match_hard();
    if (name == "mv-match-soft") return mv_match_soft();
    if (name == "wa2-only") return wa2_only();
    throw ConfigError("unknown loss preset '" + std::string(name) + "'");
}

double cross_entropy(std::size_t target_class, const Prediction& probs) {
    return -std::log(std::max(probs.probs.at(target_class), kProbabilityFloor));
}

double cross_entropy(const std::vector<double>& target, const Prediction& probs) {
    if (target.size() != probs.probs.size()) throw ConfigError("cross_entropy: class count mismatch");
    double sum = 0.0;
    for (std::size_t c = 0; c < target.size(); ++c)
        if (target[c] != 0.0) sum -= target[c] * std::log(std::max(probs.probs[c], kProbabilityFloor));
    return sum;
}

double cross_entropy(const PseudoLabel& target, const Prediction& probs) {
    return target.mode == LabelMode::hard ? cross_entropy(target.hard, probs)
                                          : cross_entropy(target.soft, probs);
}

double supervised_loss(const Prediction& probs_wa, int label) {
    if (label < 0 || static_cast<std::size_t>(label) >= probs_wa.probs.size())
        throw ConfigError("label " + std::to_string(label) + " out of range");
    return cross_entropy(static_cast<std::size_t>(label), probs_wa);
}

PseudoLabel make_pseudo_label(const Prediction& reference, LabelMode mode) {
    PseudoLabel p;
    p.mode = mode;
    p.confidence = reference.confidence();
    if (mode == LabelMode::hard)
        p.hard = reference.argmax();
    else
        p.soft = reference.probs;
    return p;
}

ConsistencyValue consistency_loss(const PseudoLabel& ref, const Prediction& pred, double tau) {
    if (ref.confidence < tau) return {0.0, true};
    return {cross_entropy(ref, pred), false};
}

namespace {

// d CE(q, softmax(z)) / dz = p - q, scaled by 1/batch.
std::vector<double> ce_logit_grad(const Prediction& pred, const PseudoLabel& target, double scale) {
    std::vector<double> g = pred.probs;
    if (target.mode == LabelMode::hard)
        g[target.hard] -= 1.0;
    else
        for (std::size_t c = 0; c < g.size(); ++c) g[c] -= target.soft[c];
    for (double& v : g) v *= scale;
    return g;
}

PseudoLabel ground_truth_label(int label) {
    PseudoLabel p;
    p.mode = LabelMode::hard;
    p.hard = static_cast<std::size_t>(label);
    p.confidence = 1.0;
    return p;
}

void add_into(std::vector<double>& acc, const std::vector<double>& g) {
    for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
}

void require(bool ok, std::string_view what) {
    if (!ok) throw ConfigError("total_loss: missing required predictions for " + std::string(what));
}

}  // namespace

LossResult total_loss(const RolePredictions& preds, const std::vector<int>& source_labels,
                      const LossConfig& config) {
    config.validate();
    const std::size_t ns = preds.src_query_wa.size();
    const std::size_t nt = preds.tgt_query_wa.size();
    require(ns > 0 && source_labels.size() == ns, "s_gt");
    if (config.uses_source_view()) require(preds.src_view.size() == ns, "source view term");
    if (config.uses_target()) require(nt > 0, "target terms");
    if (config.uses_target_view()) require(preds.tgt_view.size() == nt, "target view term");
    if (config.t_sa1) require(preds.tgt_query_sa.size() == nt, "t_sa1");

    const std::size_t classes = preds.src_query_wa.front().probs.size();
    auto zero_rows = [&](std::size_t n) { return std::vector<std::vector<double>>(n, std::vector<double>(classes, 0.0)); };

    LossResult r;
    r.grads.src_query_wa = zero_rows(ns);
    r.grads.src_view = zero_rows(preds.src_view.size());
    r.grads.tgt_query_wa = zero_rows(nt);
    r.grads.tgt_query_sa = zero_rows(preds.tgt_query_sa.size());
    r.grads.tgt_view = zero_rows(preds.tgt_view.size());
    LossBreakdown& b = r.breakdown;
    for (std::size_t t = 0; t < kTermCount; ++t) b.enabled[t] = config.enabled(static_cast<Term>(t));

    auto accumulate = [&](Term term, const PseudoLabel& ref, const Prediction& pred, std::vector<double>& grad_row,
                          std::size_t batch, bool maskable) {
        const auto idx = static_cast<std::size_t>(term);
        ++b.items[idx];
        const auto cv = maskable ? consistency_loss(ref, pred, config.tau)
                                 : ConsistencyValue{cross_entropy(ref, pred), false};
        if (cv.masked) {
            ++b.masked[idx];
            return;
        }
        const double scale = 1.0 / static_cast<double>(batch);
        b.values[idx] += cv.value * scale;
        add_into(grad_row, ce_logit_grad(pred, ref, scale));
    };

    const auto& src_refs = preds.src_reference.empty() ? preds.src_query_wa : preds.src_reference;
    require(src_refs.size() == ns, "source references");
    const Term source_view_term = config.s_sa2 ? Term::s_sa2 : Term::s_wa2;
    for (std::size_t i = 0; i < ns; ++i) {
        const int label = source_labels[i];
        if (label < 0 || static_cast<std::size_t>(label) >= classes)
            throw ConfigError("source label out of range");
        accumulate(Term::s_gt, ground_truth_label(label), preds.src_query_wa[i], r.grads.src_query_wa[i], ns, false);
        if (config.uses_source_view()) {
            if (config.source_view_supervision == SourceViewSupervision::ground_truth) {
                accumulate(source_view_term, ground_truth_label(label), preds.src_view[i], r.grads.src_view[i], ns,
                           false);
            } else {
                const PseudoLabel ref = make_pseudo_label(src_refs[i], config.label_mode);
                accumulate(source_view_term, ref, preds.src_view[i], r.grads.src_view[i], ns, true);
            }
        }
    }

    const Term target_view_term = config.t_sa2 ? Term::t_sa2 : Term::t_wa2;
    if (config.uses_target()) {
        for (std::size_t i = 0; i < nt; ++i) {
            const PseudoLabel ref = make_pseudo_label(preds.tgt_query_wa[i], config.label_mode);
            if (config.uses_target_view())
                accumulate(target_view_term, ref, preds.tgt_view[i], r.grads.tgt_view[i], nt, true);
            if (config.t_sa1) accumulate(Term::t_sa1, ref, preds.tgt_query_sa[i], r.grads.tgt_query_sa[i], nt, true);
        }
    }

    b.total = 0.0;
    for (std::size_t t = 0; t < kTermCount; ++t)
        if (b.enabled[t]) b.total += b.values[t];
    return r;
}

}  // namespace mvmatch
