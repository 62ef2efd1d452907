#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mvmatch/image_store.hpp"
#include "mvmatch/imaging.hpp"
#include "mvmatch/manifest.hpp"
#include "mvmatch/model.hpp"

namespace mvmatch {

// Rows are true classes, columns predicted classes.
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(std::size_t classes = 0) : classes_(classes), cells_(classes * classes, 0) {}

    std::size_t classes() const { return classes_; }
    std::size_t at(std::size_t truth, std::size_t predicted) const { return cells_.at(truth * classes_ + predicted); }
    void add(std::size_t truth, std::size_t predicted, std::size_t count = 1);

    std::size_t total() const;
    std::size_t trace() const;
    std::size_t row_sum(std::size_t truth) const;

    bool operator==(const ConfusionMatrix&) const = default;

private:
    std::size_t classes_;
    std::vector<std::size_t> cells_;
};

struct EvalReport {
    double top1 = 0.0;
    std::vector<std::optional<double>> per_class;  // nullopt for classes without test records
    double macro_avg = 0.0;                        // mean over classes with support
    double micro_avg = 0.0;                        // equals top1
    ConfusionMatrix confusion;
    std::size_t n = 0;
};

// Throws DataError when the inputs are empty or a label is out of range.
EvalReport evaluate_predictions(const std::vector<int>& truth, const std::vector<int>& predicted, int classes);

// Resize and normalize only, argmax with lowest-index tie-break.
EvalReport evaluate(const ModelParams& params, const DatasetManifest& test, const ImageStore& images,
                    const Normalization& norm, std::size_t batch_size = 64);

std::string eval_json(const EvalReport& report, const std::vector<std::string>& class_names);
std::string confusion_csv(const ConfusionMatrix& m, const std::vector<std::string>& class_names);
ConfusionMatrix parse_confusion_csv(std::string_view text, std::vector<std::string>* class_names = nullptr);
// Shaded C x C grid, true class on the y axis and predicted class on the x axis.
std::string confusion_svg(const ConfusionMatrix& m, const std::vector<std::string>& class_names);

// Writes eval.json, confusion.csv and confusion.svg into out_dir.
void write_report(const EvalReport& report, const std::vector<std::string>& class_names,
                  const std::filesystem::path& out_dir);

}  // namespace mvmatch
