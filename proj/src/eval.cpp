#include "mvmatch/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "mvmatch/error.hpp"
#include "mvmatch/trainer.hpp"

namespace mvmatch {

namespace {

std::string xml_escape(std::string_view s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

void write_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out << text;
    if (!out) throw DataError("failed writing " + path.string());
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

}  // namespace

void ConfusionMatrix::add(std::size_t truth, std::size_t predicted, std::size_t count) {
    if (truth >= classes_ || predicted >= classes_) throw DataError("confusion matrix index out of range");
    cells_[truth * classes_ + predicted] += count;
}

std::size_t ConfusionMatrix::total() const {
    std::size_t t = 0;
    for (auto v : cells_) t += v;
    return t;
}

std::size_t ConfusionMatrix::trace() const {
    std::size_t t = 0;
    for (std::size_t c = 0; c < classes_; ++c) t += at(c, c);
    return t;
}

std::size_t ConfusionMatrix::row_sum(std::size_t truth) const {
    std::size_t t = 0;
    for (std::size_t c = 0; c < classes_; ++c) t += at(truth, c);
    return t;
}

EvalReport evaluate_predictions(const std::vector<int>& truth, const std::vector<int>& predicted, int classes) {
    if (truth.empty()) throw DataError("empty evaluation split");
    if (truth.size() != predicted.size()) throw DataError("prediction count does not match label count");
    if (classes < 1) throw DataError("class count must be positive");
    const auto c = static_cast<std::size_t>(classes);

    EvalReport r;
    r.confusion = ConfusionMatrix(c);
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] < 0 || predicted[i] < 0 || truth[i] >= classes || predicted[i] >= classes)
            throw DataError("label out of range in evaluation");
        r.confusion.add(static_cast<std::size_t>(truth[i]), static_cast<std::size_t>(predicted[i]));
    }
    r.n = truth.size();
    r.top1 = static_cast<double>(r.confusion.trace()) / static_cast<double>(r.confusion.total());
    r.micro_avg = r.top1;

    double sum = 0.0;
    std::size_t supported = 0;
    for (std::size_t k = 0; k < c; ++k) {
        const std::size_t support = r.confusion.row_sum(k);
        if (support == 0) {
            r.per_class.push_back(std::nullopt);
            continue;
        }
        const double acc = static_cast<double>(r.confusion.at(k, k)) / static_cast<double>(support);
        r.per_class.push_back(acc);
        sum += acc;
        ++supported;
    }
    r.macro_avg = sum / static_cast<double>(supported);
    return r;
}

EvalReport evaluate(const ModelParams& params, const DatasetManifest& test, const ImageStore& images,
                    const Normalization& norm, std::size_t batch_size) {
    if (test.records.empty()) throw DataError("empty test split");
    if (test.class_count() != params.classes)
        throw DataError("checkpoint has " + std::to_string(params.classes) + " classes, manifest has " +
                        std::to_string(test.class_count()));
    batch_size = std::max<std::size_t>(batch_size, 1);

    std::vector<int> truth, predicted;
    truth.reserve(test.records.size());
    predicted.reserve(test.records.size());
    for (std::size_t start = 0; start < test.records.size(); start += batch_size) {
        const std::size_t end = std::min(test.records.size(), start + batch_size);
        std::vector<NormalizedImage> batch;
        for (std::size_t i = start; i < end; ++i) {
            const auto& r = test.records[i];
            if (!r.label) throw DataError("unlabeled record '" + r.id + "' in evaluation split");
            truth.push_back(*r.label);
            batch.push_back(resize_normalize(images.get(r.id, r.path), params.input_side, norm));
        }
        for (const auto& p : softmax_rows(predict_logits(params, stack_images(batch))))
            predicted.push_back(static_cast<int>(p.argmax()));
    }
    return evaluate_predictions(truth, predicted, params.classes);
}

std::string eval_json(const EvalReport& report, const std::vector<std::string>& class_names) {
    if (class_names.size() != report.per_class.size()) throw DataError("class name count does not match report");
    nlohmann::ordered_json j;
    j["top1"] = report.top1;
    j["macro_avg"] = report.macro_avg;
    j["micro_avg"] = report.micro_avg;
    nlohmann::ordered_json per = nlohmann::ordered_json::object();
    for (std::size_t c = 0; c < class_names.size(); ++c)
        per[class_names[c]] = report.per_class[c] ? nlohmann::ordered_json(*report.per_class[c]) : nlohmann::ordered_json(nullptr);
    j["per_class"] = std::move(per);
    j["n"] = report.n;
    return j.dump(2) + "\n";
}

std::string confusion_csv(const ConfusionMatrix& m, const std::vector<std::string>& class_names) {
    if (class_names.size() != m.classes()) throw DataError("class name count does not match confusion matrix");
    std::string out;
    for (std::size_t c = 0; c < class_names.size(); ++c) out += (c ? "," : "") + class_names[c];
    out += "\n";
    for (std::size_t t = 0; t < m.classes(); ++t) {
        for (std::size_t p = 0; p < m.classes(); ++p) out += (p ? "," : "") + std::to_string(m.at(t, p));
        out += "\n";
    }
    return out;
}

ConfusionMatrix parse_confusion_csv(std::string_view text, std::vector<std::string>* class_names) {
    std::istringstream in{std::string(text)};
    std::string line;
    if (!std::getline(in, line)) throw DataError("empty confusion csv");
    const auto names = split_csv_line(line);
    ConfusionMatrix m(names.size());
    for (std::size_t t = 0; t < names.size(); ++t) {
        if (!std::getline(in, line)) throw DataError("confusion csv has too few rows");
        const auto cells = split_csv_line(line);
        if (cells.size() != names.size()) throw DataError("confusion csv row " + std::to_string(t + 1) + " has wrong width");
        for (std::size_t p = 0; p < cells.size(); ++p) {
            std::size_t used = 0;
            unsigned long long v = 0;
            try {
                v = std::stoull(cells[p], &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used != cells[p].size() || cells[p].empty()) throw DataError("bad confusion count '" + cells[p] + "'");
            m.add(t, p, static_cast<std::size_t>(v));
        }
    }
    if (class_names) *class_names = names;
    return m;
}

std::string confusion_svg(const ConfusionMatrix& m, const std::vector<std::string>& class_names) {
    if (class_names.size() != m.classes()) throw DataError("class name count does not match confusion matrix");
    const int cell = 48;
    const int margin = 90;
    const int n = static_cast<int>(m.classes());
    const int size = margin + n * cell + 20;

    std::string s;
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%d\" height=\"%d\" font-family=\"sans-serif\" "
                  "font-size=\"12\">\n",
                  size, size);
    s += buf;
    for (int t = 0; t < n; ++t) {
        const std::size_t row = m.row_sum(static_cast<std::size_t>(t));
        for (int p = 0; p < n; ++p) {
            const std::size_t v = m.at(static_cast<std::size_t>(t), static_cast<std::size_t>(p));
            const double frac = row ? static_cast<double>(v) / static_cast<double>(row) : 0.0;
            const int shade = static_cast<int>(255.0 - 200.0 * frac);
            std::snprintf(buf, sizeof(buf),
                          "<rect class=\"cell\" x=\"%d\" y=\"%d\" width=\"%d\" height=\"%d\" fill=\"rgb(%d,%d,255)\" "
                          "stroke=\"#888\"/>\n",
                          margin + p * cell, margin + t * cell, cell, cell, shade, shade);
            s += buf;
            std::snprintf(buf, sizeof(buf), "<text x=\"%d\" y=\"%d\" text-anchor=\"middle\">%zu</text>\n",
                          margin + p * cell + cell / 2, margin + t * cell + cell / 2 + 4, v);
            s += buf;
        }
    }
    for (int k = 0; k < n; ++k) {
        const std::string name = xml_escape(class_names[static_cast<std::size_t>(k)]);
        std::snprintf(buf, sizeof(buf), "<text x=\"%d\" y=\"%d\" text-anchor=\"middle\">", margin + k * cell + cell / 2,
                      margin - 8);
        s += buf + name + "</text>\n";
        std::snprintf(buf, sizeof(buf), "<text x=\"%d\" y=\"%d\" text-anchor=\"end\">", margin - 8,
                      margin + k * cell + cell / 2 + 4);
        s += buf + name + "</text>\n";
    }
    std::snprintf(buf, sizeof(buf), "<text x=\"%d\" y=\"%d\" text-anchor=\"middle\">predicted</text>\n",
                  margin + n * cell / 2, margin - 30);
    s += buf;
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%d\" y=\"%d\" text-anchor=\"middle\" transform=\"rotate(-90 %d %d)\">true</text>\n", 20,
                  margin + n * cell / 2, 20, margin + n * cell / 2);
    s += buf;
    s += "</svg>\n";
    return s;
}

void write_report(const EvalReport& report, const std::vector<std::string>& class_names,
                  const std::filesystem::path& out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw DataError("cannot create " + out_dir.string() + ": " + ec.message());
    write_file(out_dir / "eval.json", eval_json(report, class_names));
    write_file(out_dir / "confusion.csv", confusion_csv(report.confusion, class_names));
    write_file(out_dir / "confusion.svg", confusion_svg(report.confusion, class_names));
}

}  // namespace mvmatch
