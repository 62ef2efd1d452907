#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "mvmatch/imaging.hpp"
#include "mvmatch/model.hpp"

namespace mvmatch {

inline constexpr double kProbabilityFloor = 1e-12;

enum class LabelMode { hard, soft };
std::string_view to_string(LabelMode m);
LabelMode label_mode_from_string(std::string_view s);

enum class SourceViewSupervision { pseudo_label, ground_truth };
std::string_view to_string(SourceViewSupervision s);
SourceViewSupervision source_view_supervision_from_string(std::string_view s);

struct PseudoLabel {
    LabelMode mode = LabelMode::hard;
    std::size_t hard = 0;      // valid in hard mode
    std::vector<double> soft;  // valid in soft mode
    double confidence = 0.0;   // max probability of the reference prediction
};

// Loss terms. sa2 terms compare a query with a strongly augmented second view,
// wa2 terms with a weakly augmented one; t_sa1 compares the weak and strong
// versions of the target query itself.
enum class Term : std::size_t { s_gt, s_sa2, t_sa2, t_sa1, s_wa2, t_wa2 };
inline constexpr std::size_t kTermCount = 6;
std::string_view to_string(Term t);

struct LossConfig {
    double tau = 0.8;
    LabelMode label_mode = LabelMode::hard;
    bool s_sa2 = true;
    bool t_sa2 = true;
    bool t_sa1 = true;
    bool s_wa2 = false;
    bool t_wa2 = false;
    SourceViewSupervision source_view_supervision = SourceViewSupervision::pseudo_label;
    AugKind view_aug = AugKind::strong;

    bool enabled(Term t) const;
    bool uses_source_view() const { return s_sa2 || s_wa2; }
    bool uses_target_view() const { return t_sa2 || t_wa2; }
    bool uses_target() const { return uses_target_view() || t_sa1; }
    // Throws ConfigError when sa2 and wa2 terms are mixed, when the view
    // augmentation disagrees with the enabled view terms, or tau is outside [0, 1].
    void validate() const;

    static LossConfig source_only();
    static LossConfig fixmatch();
    static LossConfig mv_match_hard();
    static LossConfig mv_match_soft();
    static LossConfig wa2_only();
    // source-only | fixmatch | mv-match-hard | mv-match-soft | wa2-only
    static LossConfig preset(std::string_view name);
};

struct LossBreakdown {
    std::array<double, kTermCount> values{};
    std::array<std::size_t, kTermCount> masked{};
    std::array<std::size_t, kTermCount> items{};
    std::array<bool, kTermCount> enabled{};
    double total = 0.0;

    double value(Term t) const { return values[static_cast<std::size_t>(t)]; }
    std::size_t masked_count(Term t) const { return masked[static_cast<std::size_t>(t)]; }
};

double cross_entropy(std::size_t target_class, const Prediction& probs);
double cross_entropy(const std::vector<double>& target, const Prediction& probs);
double cross_entropy(const PseudoLabel& target, const Prediction& probs);

double supervised_loss(const Prediction& probs_wa, int label);

PseudoLabel make_pseudo_label(const Prediction& reference, LabelMode mode);

struct ConsistencyValue {
    double value = 0.0;
    bool masked = false;
};
// Zero and masked when the reference confidence is below tau; cross-entropy
// against the pseudo-label otherwise. The mask applies in both label modes.
ConsistencyValue consistency_loss(const PseudoLabel& ref, const Prediction& pred, double tau);

// Predictions of one step grouped by role. Reference predictions
// (src_query_wa for pseudo-labels, tgt_query_wa) are treated as constants.
struct RolePredictions {
    std::vector<Prediction> src_query_wa;
    // Optional stand-in for src_query_wa when deriving source pseudo-labels;
    // s_gt always uses src_query_wa.
    std::vector<Prediction> src_reference;
    std::vector<Prediction> src_view;
    std::vector<Prediction> tgt_query_wa;
    std::vector<Prediction> tgt_query_sa;
    std::vector<Prediction> tgt_view;
};

// dLoss/dlogits for each role, one row per prediction.
struct RoleLogitGrads {
    std::vector<std::vector<double>> src_query_wa;
    std::vector<std::vector<double>> src_view;
    std::vector<std::vector<double>> tgt_query_wa;
    std::vector<std::vector<double>> tgt_query_sa;
    std::vector<std::vector<double>> tgt_view;
};

struct LossResult {
    LossBreakdown breakdown;
    RoleLogitGrads grads;
};

// Each term is averaged over its domain's batch; masked items add 0 but stay in
// the denominator. total is the unweighted sum of the enabled terms.
LossResult total_loss(const RolePredictions& preds, const std::vector<int>& source_labels,
                      const LossConfig& config);

}  // namespace mvmatch
