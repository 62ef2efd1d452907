#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace mvmatch {

// Dense row-major array of doubles.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> values;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> dims, double fill = 0.0);

    std::size_t numel() const { return values.size(); }
    std::size_t dim(std::size_t i) const { return shape.at(i); }
    double* data() { return values.data(); }
    const double* data() const { return values.data(); }

    bool operator==(const Tensor&) const = default;
};

struct Prediction {
    std::vector<double> probs;

    std::size_t argmax() const;  // lowest index wins ties
    double confidence() const;   // max probability
};

enum class ParamIndex : std::size_t { conv1_w, conv1_b, conv2_w, conv2_b, dense_w, dense_b };
inline constexpr std::size_t kParamTensorCount = 6;

// conv(3->8, 3x3, same) -> ReLU -> 2x2 mean-pool -> conv(8->16, 3x3, same)
// -> ReLU -> 2x2 mean-pool -> flatten -> dense(-> C).
struct ModelParams {
    int input_side = 0;
    int classes = 0;
    std::uint64_t seed = 0;
    std::array<Tensor, kParamTensorCount> tensors;

    Tensor& operator[](ParamIndex i) { return tensors[static_cast<std::size_t>(i)]; }
    const Tensor& operator[](ParamIndex i) const { return tensors[static_cast<std::size_t>(i)]; }
    std::size_t parameter_count() const;

    bool operator==(const ModelParams&) const = default;
};

// Same tensor layout as ModelParams.
struct Gradients {
    std::array<Tensor, kParamTensorCount> tensors;

    Tensor& operator[](ParamIndex i) { return tensors[static_cast<std::size_t>(i)]; }
    const Tensor& operator[](ParamIndex i) const { return tensors[static_cast<std::size_t>(i)]; }

    static Gradients zeros_like(const ModelParams& params);
    bool all_finite() const;
};

inline constexpr int kConv1Out = 8;
inline constexpr int kConv2Out = 16;

// He-style uniform weights U(-sqrt(6/fan_in), sqrt(6/fan_in)), zero biases.
ModelParams init_params(int input_side, int classes, std::uint64_t seed);

// Activations kept for backward.
struct ForwardCache {
    Tensor input;      // [N, 3, S, S]
    Tensor conv1_pre;  // [N, 8, S, S]
    Tensor pool1;      // [N, 8, S/2, S/2]
    Tensor conv2_pre;  // [N, 16, S/2, S/2]
    Tensor features;   // [N, 16 * S/4 * S/4]
};

struct ForwardResult {
    Tensor logits;  // [N, C]
    ForwardCache cache;
};

ForwardResult forward(const ModelParams& params, const Tensor& batch);
// Logits only; same arithmetic as forward().
Tensor predict_logits(const ModelParams& params, const Tensor& batch);

Prediction softmax(std::span<const double> logits);
std::vector<Prediction> softmax_rows(const Tensor& logits);

// Exact gradients given dLoss/dlogits [N, C].
Gradients backward(const ModelParams& params, const ForwardCache& cache, const Tensor& logit_grads);

// Scalar objective with analytic gradient, used by grad_check.
struct ObjectiveValue {
    double loss = 0.0;
    Gradients grads;
};
using Objective = std::function<ObjectiveValue(const ModelParams&)>;

// Which ReLU units are active (pre-activation > 0), conv1 then conv2.
std::vector<bool> relu_pattern(const ForwardCache& cache);

struct GradCheckOptions {
    double eps = 1e-5;
    std::size_t coordinates = 128;
    std::uint64_t seed = 0;
    // When set, a coordinate whose +eps and -eps probes give different
    // patterns straddles a ReLU kink, where central differences are not a
    // derivative estimate; it is replaced by a fresh draw.
    std::function<std::vector<bool>(const ModelParams&)> activation_pattern;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::size_t skipped_kinks = 0;
};

// Compares the analytic gradient against central differences of the objective
// on randomly sampled coordinates. Relative error is
// |ga - gn| / max(1e-8, |ga| + |gn|).
GradCheckReport grad_check_report(const ModelParams& params, const Objective& objective,
                                  const GradCheckOptions& options = {});
double grad_check(const ModelParams& params, const Objective& objective, const GradCheckOptions& options = {});

// Binary checkpoint: magic, version, input side, classes, seed, shape table,
// little-endian float64 values, then a length-prefixed JSON provenance blob.
void save_checkpoint(const ModelParams& params, const std::string& provenance_json,
                     const std::filesystem::path& path);
std::string serialize_checkpoint(const ModelParams& params, const std::string& provenance_json);
ModelParams load_checkpoint(const std::filesystem::path& path, std::string* provenance_json = nullptr);

}  // namespace mvmatch
