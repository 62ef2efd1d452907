#include "mvmatch/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <numeric>
#include <sstream>

#include "mvmatch/error.hpp"

namespace mvmatch {

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(std::string_view s) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= s.size()) {
        const auto comma = s.find(',', start);
        const auto piece = trim(s.substr(start, comma == std::string_view::npos ? s.npos : comma - start));
        if (!piece.empty()) out.push_back(piece);
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return out;
}

double parse_double(std::string_view key, std::string_view value) {
    const std::string v(value);
    char* end = nullptr;
    const double d = std::strtod(v.c_str(), &end);
    if (v.empty() || end != v.c_str() + v.size() || !std::isfinite(d))
        throw ConfigError("invalid number for " + std::string(key) + ": '" + v + "'");
    return d;
}

long long parse_int(std::string_view key, std::string_view value) {
    const std::string v(value);
    char* end = nullptr;
    const long long i = std::strtoll(v.c_str(), &end, 10);
    if (v.empty() || end != v.c_str() + v.size())
        throw ConfigError("invalid integer for " + std::string(key) + ": '" + v + "'");
    return i;
}

bool parse_bool(std::string_view key, std::string_view value) {
    if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
    if (value == "false" || value == "0" || value == "no" || value == "off") return false;
    throw ConfigError("invalid boolean for " + std::string(key) + ": '" + std::string(value) + "'");
}

std::array<double, 3> parse_triple(std::string_view key, std::string_view value) {
    const auto parts = split_list(value);
    if (parts.size() != 3) throw ConfigError(std::string(key) + " needs three comma-separated values");
    return {parse_double(key, parts[0]), parse_double(key, parts[1]), parse_double(key, parts[2])};
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string fmt_triple(const std::array<double, 3>& t) { return fmt(t[0]) + "," + fmt(t[1]) + "," + fmt(t[2]); }

std::vector<Prediction> slice(const std::vector<Prediction>& all, std::size_t begin, std::size_t count) {
    return {all.begin() + static_cast<std::ptrdiff_t>(begin), all.begin() + static_cast<std::ptrdiff_t>(begin + count)};
}

void put_rows(Tensor& dlogits, std::size_t begin, const std::vector<std::vector<double>>& rows) {
    const std::size_t c = dlogits.dim(1);
    for (std::size_t i = 0; i < rows.size(); ++i)
        std::copy(rows[i].begin(), rows[i].end(), dlogits.values.begin() + static_cast<std::ptrdiff_t>((begin + i) * c));
}

const UnlabeledRecord& find_unlabeled(const std::vector<UnlabeledRecord>& records, const std::string& id) {
    auto it = std::lower_bound(records.begin(), records.end(), id,
                               [](const UnlabeledRecord& r, const std::string& v) { return r.id < v; });
    if (it == records.end() || it->id != id) throw DataError("view '" + id + "' is not in the target training split");
    return *it;
}

const ImageRecord& find_source(const DatasetManifest& m, const std::string& id) {
    const ImageRecord* r = m.find(id);
    if (!r) throw DataError("view '" + id + "' is not in the source training split");
    return *r;
}

void shuffle(std::vector<std::size_t>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

const ViewSet* find_view_set(const TrainData& data, const std::string& id) {
    auto it = data.view_sets->find(id);
    return it == data.view_sets->end() ? nullptr : &it->second;
}

}  // namespace

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (source_batch < 1 || target_batch < 1) throw ConfigError("batch sizes must be >= 1");
    if (!(lr0 > 0.0)) throw ConfigError("lr0 must be > 0");
    if (momentum < 0.0 || weight_decay < 0.0) throw ConfigError("momentum and weight_decay must be >= 0");
    if (n_views < 1) throw ConfigError("n_views must be >= 1");
    if (input_side < 8 || input_side % 4 != 0) throw ConfigError("input_side must be a multiple of 4 and >= 8");
    loss.validate();
    strong.validate();
}

bool TrainConfig::set(std::string_view key, std::string_view value) {
    const std::string v = trim(value);
    if (key == "epochs") epochs = static_cast<int>(parse_int(key, v));
    else if (key == "source_batch") source_batch = static_cast<int>(parse_int(key, v));
    else if (key == "target_batch") target_batch = static_cast<int>(parse_int(key, v));
    else if (key == "lr0") lr0 = parse_double(key, v);
    else if (key == "momentum") momentum = parse_double(key, v);
    else if (key == "weight_decay") weight_decay = parse_double(key, v);
    else if (key == "alpha") alpha = parse_double(key, v);
    else if (key == "beta") beta = parse_double(key, v);
    else if (key == "n_views") n_views = static_cast<int>(parse_int(key, v));
    else if (key == "mining") mining = mining_method_from_string(v);
    else if (key == "loss_preset") loss = LossConfig::preset(v);
    else if (key == "tau") loss.tau = parse_double(key, v);
    else if (key == "label_mode") loss.label_mode = label_mode_from_string(v);
    else if (key == "s_sa2") loss.s_sa2 = parse_bool(key, v);
    else if (key == "t_sa2") loss.t_sa2 = parse_bool(key, v);
    else if (key == "t_sa1") loss.t_sa1 = parse_bool(key, v);
    else if (key == "s_wa2") loss.s_wa2 = parse_bool(key, v);
    else if (key == "t_wa2") loss.t_wa2 = parse_bool(key, v);
    else if (key == "source_view_supervision") loss.source_view_supervision = source_view_supervision_from_string(v);
    else if (key == "view_aug") {
        if (v == "strong") loss.view_aug = AugKind::strong;
        else if (v == "weak") loss.view_aug = AugKind::weak;
        else throw ConfigError("view_aug must be strong or weak");
    } else if (key == "strong_n") strong.strong_n = static_cast<int>(parse_int(key, v));
    else if (key == "strong_magnitude") strong.strong_magnitude = static_cast<int>(parse_int(key, v));
    else if (key == "strong_ops") {
        strong.strong_ops.clear();
        for (const auto& name : split_list(v)) strong.strong_ops.push_back(AugOp::with_default_range(aug_op_from_string(name)));
    } else if (key == "norm_mean") norm.mean = parse_triple(key, v);
    else if (key == "norm_std") norm.std = parse_triple(key, v);
    else if (key == "input_side") input_side = static_cast<int>(parse_int(key, v));
    else if (key == "nmi_bins") nmi_bins = static_cast<int>(parse_int(key, v));
    else if (key == "nmi_side") nmi_side = static_cast<int>(parse_int(key, v));
    else if (key == "seed") seed = static_cast<std::uint64_t>(parse_int(key, v));
    else return false;
    return true;
}

std::vector<std::pair<std::string, std::string>> TrainConfig::to_key_values() const {
    std::string ops;
    for (const auto& op : strong.strong_ops) ops += (ops.empty() ? "" : ",") + std::string(to_string(op.kind));
    auto b = [](bool x) { return std::string(x ? "true" : "false"); };
    return {
        {"epochs", std::to_string(epochs)},
        {"source_batch", std::to_string(source_batch)},
        {"target_batch", std::to_string(target_batch)},
        {"lr0", fmt(lr0)},
        {"momentum", fmt(momentum)},
        {"weight_decay", fmt(weight_decay)},
        {"alpha", fmt(alpha)},
        {"beta", fmt(beta)},
        {"n_views", std::to_string(n_views)},
        {"mining", std::string(to_string(mining))},
        {"tau", fmt(loss.tau)},
        {"label_mode", std::string(to_string(loss.label_mode))},
        {"s_sa2", b(loss.s_sa2)},
        {"t_sa2", b(loss.t_sa2)},
        {"t_sa1", b(loss.t_sa1)},
        {"s_wa2", b(loss.s_wa2)},
        {"t_wa2", b(loss.t_wa2)},
        {"source_view_supervision", std::string(to_string(loss.source_view_supervision))},
        {"view_aug", loss.view_aug == AugKind::strong ? "strong" : "weak"},
        {"strong_n", std::to_string(strong.strong_n)},
        {"strong_magnitude", std::to_string(strong.strong_magnitude)},
        {"strong_ops", ops},
        {"norm_mean", fmt_triple(norm.mean)},
        {"norm_std", fmt_triple(norm.std)},
        {"input_side", std::to_string(input_side)},
        {"nmi_bins", std::to_string(nmi_bins)},
        {"nmi_side", std::to_string(nmi_side)},
        {"seed", std::to_string(seed)},
    };
}

std::vector<std::pair<std::string, std::string>> parse_key_values(std::string_view text) {
    std::vector<std::pair<std::string, std::string>> out;
    std::istringstream in{std::string(text)};
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        if (trim(line).empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
        auto key = trim(std::string_view(line).substr(0, eq));
        if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
        out.emplace_back(std::move(key), trim(std::string_view(line).substr(eq + 1)));
    }
    return out;
}

double lr_schedule(double progress, double lr0, double alpha, double beta) {
    return lr0 / std::pow(1.0 + alpha * progress, beta);
}

void sgd_step(ModelParams& params, Gradients& momentum_buffer, const Gradients& grads, double lr,
              double momentum, double weight_decay) {
    if (!grads.all_finite()) throw NumericError("non-finite gradient in sgd_step");
    for (std::size_t t = 0; t < kParamTensorCount; ++t) {
        auto& p = params.tensors[t].values;
        auto& buf = momentum_buffer.tensors[t].values;
        const auto& g = grads.tensors[t].values;
        if (p.size() != g.size() || p.size() != buf.size())
            throw NumericError("sgd_step: gradient shape does not match parameters");
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double d = g[i] + weight_decay * p[i];
            buf[i] = momentum * buf[i] + d;
            p[i] -= lr * buf[i];
        }
    }
}

RoleLayout RoleLayout::for_config(const LossConfig& config, std::size_t source, std::size_t target) {
    RoleLayout l;
    l.source = source;
    l.target = config.uses_target() ? target : 0;
    l.source_view = config.uses_source_view();
    l.target_query_sa = config.t_sa1;
    l.target_view = config.uses_target_view();
    return l;
}

TrainState TrainState::initial(const TrainConfig& config, int classes, std::size_t total_steps) {
    TrainState s;
    s.params = init_params(config.input_side, classes, config.seed);
    s.momentum = Gradients::zeros_like(s.params);
    s.total_steps = total_steps;
    s.batch_rng = Rng(derive_seed(config.seed, "batch"));
    s.aug_rng = Rng(derive_seed(config.seed, "augment"));
    s.view_rng = Rng(derive_seed(config.seed, "views"));
    return s;
}

void begin_epoch(TrainState& state, std::size_t source_count) {
    state.source_order.resize(source_count);
    std::iota(state.source_order.begin(), state.source_order.end(), 0);
    shuffle(state.source_order, state.batch_rng);
    state.source_cursor = 0;
}

Tensor stack_images(const std::vector<NormalizedImage>& images) {
    if (images.empty()) return Tensor({0, 3, 0, 0});
    const std::size_t s = static_cast<std::size_t>(images.front().height());
    Tensor t({images.size(), 3, s, s});
    for (std::size_t n = 0; n < images.size(); ++n) {
        const auto& img = images[n];
        if (static_cast<std::size_t>(img.height()) != s || static_cast<std::size_t>(img.width()) != s)
            throw NumericError("stack_images: inconsistent image sizes");
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t y = 0; y < s; ++y)
                for (std::size_t x = 0; x < s; ++x)
                    t.values[((n * 3 + c) * s + y) * s + x] = img.at(static_cast<int>(y), static_cast<int>(x), static_cast<int>(c));
    }
    return t;
}

TrainBatch make_train_batch(TrainState& state, const TrainData& data, const TrainConfig& config) {
    const auto& src = data.source_train->records;
    const auto& tgt = *data.target_train;
    if (src.empty()) throw ConfigError("empty source training split");
    const auto& loss = config.loss;
    const RoleLayout layout = RoleLayout::for_config(loss, config.source_batch, config.target_batch);
    if (layout.target > 0 && tgt.empty()) throw ConfigError("empty target training split");

    TrainBatch batch;
    batch.layout = layout;
    std::vector<Image> src_wa, src_view, tgt_wa, tgt_sa, tgt_view;

    auto draw_view = [&](const std::string& query_id, const Image& query_wa, auto&& lookup) -> Image {
        const ViewSet* vs = find_view_set(data, query_id);
        if (!vs || vs->members.empty()) {
            ++batch.self_view_fallbacks;
            return query_wa;
        }
        const auto& member = vs->members[state.view_rng.below(vs->members.size())];
        const Image& raw = lookup(member.id);
        return loss.view_aug == AugKind::strong ? strong_augment(raw, config.strong, state.aug_rng)
                                                : weak_augment(raw, state.aug_rng);
    };

    for (std::size_t i = 0; i < layout.source; ++i) {
        if (state.source_cursor >= state.source_order.size()) begin_epoch(state, src.size());
        const ImageRecord& q = src[state.source_order[state.source_cursor++]];
        batch.source_ids.push_back(q.id);
        batch.source_labels.push_back(*q.label);
        src_wa.push_back(weak_augment(data.images->get(q.id, q.path), state.aug_rng));
        if (layout.source_view)
            src_view.push_back(draw_view(q.id, src_wa.back(), [&](const std::string& id) -> const Image& {
                const auto& r = find_source(*data.source_train, id);
                return data.images->get(r.id, r.path);
            }));
    }

    for (std::size_t i = 0; i < layout.target; ++i) {
        if (state.target_cursor >= state.target_order.size()) {
            state.target_order.resize(tgt.size());
            std::iota(state.target_order.begin(), state.target_order.end(), 0);
            shuffle(state.target_order, state.batch_rng);
            state.target_cursor = 0;
        }
        const UnlabeledRecord& q = tgt[state.target_order[state.target_cursor++]];
        batch.target_ids.push_back(q.id);
        const Image& raw = data.images->get(q.id, q.path);
        tgt_wa.push_back(weak_augment(raw, state.aug_rng));
        if (layout.target_query_sa) tgt_sa.push_back(strong_augment(raw, config.strong, state.aug_rng));
        if (layout.target_view)
            tgt_view.push_back(draw_view(q.id, tgt_wa.back(), [&](const std::string& id) -> const Image& {
                const auto& r = find_unlabeled(tgt, id);
                return data.images->get(r.id, r.path);
            }));
    }

    std::vector<NormalizedImage> all;
    all.reserve(layout.rows());
    for (const auto* group : {&src_wa, &src_view, &tgt_wa, &tgt_sa, &tgt_view})
        for (const auto& img : *group) all.push_back(resize_normalize(img, config.input_side, config.norm));
    batch.images = stack_images(all);
    return batch;
}

StepOutcome composite_step(const ModelParams& params, const Tensor& images, const RoleLayout& layout,
                           const std::vector<int>& source_labels, const LossConfig& config,
                           const RolePredictions* frozen_references) {
    if (images.dim(0) != layout.rows()) throw NumericError("batch rows do not match role layout");
    // Every role goes through the same parameters in a single forward pass.
    ForwardResult fwd = forward(params, images);
    const auto probs = softmax_rows(fwd.logits);

    RolePredictions rp;
    rp.src_query_wa = slice(probs, layout.src_query_wa_begin(), layout.source);
    if (layout.source_view) rp.src_view = slice(probs, layout.src_view_begin(), layout.source);
    rp.tgt_query_wa = slice(probs, layout.tgt_query_wa_begin(), layout.target);
    if (layout.target_query_sa) rp.tgt_query_sa = slice(probs, layout.tgt_query_sa_begin(), layout.target);
    if (layout.target_view) rp.tgt_view = slice(probs, layout.tgt_view_begin(), layout.target);
    if (frozen_references) {
        rp.src_reference = frozen_references->src_query_wa;
        rp.tgt_query_wa = frozen_references->tgt_query_wa;
    }

    const LossResult lr = total_loss(rp, source_labels, config);
    if (!std::isfinite(lr.breakdown.total)) throw NumericError("non-finite loss");

    Tensor dlogits({layout.rows(), static_cast<std::size_t>(params.classes)});
    put_rows(dlogits, layout.src_query_wa_begin(), lr.grads.src_query_wa);
    if (layout.source_view) put_rows(dlogits, layout.src_view_begin(), lr.grads.src_view);
    // tgt_query_wa rows only serve as references and receive no gradient.
    if (layout.target_query_sa) put_rows(dlogits, layout.tgt_query_sa_begin(), lr.grads.tgt_query_sa);
    if (layout.target_view) put_rows(dlogits, layout.tgt_view_begin(), lr.grads.tgt_view);

    return {lr.breakdown, backward(params, fwd.cache, dlogits)};
}

Objective composite_objective(Tensor images, RoleLayout layout, std::vector<int> source_labels, LossConfig config,
                              std::optional<ModelParams> reference_params) {
    std::optional<RolePredictions> frozen;
    if (reference_params) {
        const auto probs = softmax_rows(predict_logits(*reference_params, images));
        RolePredictions rp;
        rp.src_query_wa = slice(probs, layout.src_query_wa_begin(), layout.source);
        rp.tgt_query_wa = slice(probs, layout.tgt_query_wa_begin(), layout.target);
        frozen = std::move(rp);
    }
    return [images = std::move(images), layout, labels = std::move(source_labels), config,
            frozen = std::move(frozen)](const ModelParams& p) {
        StepOutcome out = composite_step(p, images, layout, labels, config, frozen ? &*frozen : nullptr);
        return ObjectiveValue{out.breakdown.total, std::move(out.grads)};
    };
}

TrainResult train(const TrainConfig& config, const TrainData& data, const EpochHook& on_epoch) {
    config.validate();
    if (!data.source_train || !data.target_train || !data.view_sets || !data.images)
        throw ConfigError("train: incomplete TrainData");
    const DatasetManifest& src = *data.source_train;
    if (src.records.empty()) throw ConfigError("empty source training split");
    for (const auto& r : src.records) {
        if (r.domain != Domain::source) throw DataError("source training split contains target record '" + r.id + "'");
        if (!r.label) throw DataError("unlabeled source record '" + r.id + "'");
    }
    if (!std::is_sorted(data.target_train->begin(), data.target_train->end(),
                        [](const UnlabeledRecord& a, const UnlabeledRecord& b) { return a.id < b.id; }))
        throw ConfigError("target training records must be sorted by id");
    if (config.loss.uses_target() && data.target_train->empty()) throw ConfigError("empty target training split");

    const std::size_t steps_per_epoch = src.records.size() / static_cast<std::size_t>(config.source_batch);
    if (steps_per_epoch == 0) throw ConfigError("source training split smaller than one batch");
    const std::size_t total = steps_per_epoch * static_cast<std::size_t>(config.epochs);

    TrainState state = TrainState::initial(config, src.class_count(), total);
    RunReport report;
    report.total_steps = total;

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        begin_epoch(state, src.records.size());
        EpochMetrics em;
        em.epoch = epoch + 1;
        std::array<std::size_t, kTermCount> items{};
        for (std::size_t s = 0; s < steps_per_epoch; ++s) {
            const double lr = lr_schedule(static_cast<double>(state.step) / static_cast<double>(total), config.lr0,
                                          config.alpha, config.beta);
            const TrainBatch batch = make_train_batch(state, data, config);
            StepOutcome out = composite_step(state.params, batch.images, batch.layout, batch.source_labels, config.loss);
            sgd_step(state.params, state.momentum, out.grads, lr, config.momentum, config.weight_decay);

            report.steps.push_back({state.step, em.epoch, lr, out.breakdown});
            for (std::size_t t = 0; t < kTermCount; ++t) {
                em.mean_terms[t] += out.breakdown.values[t];
                em.masked_fraction[t] += static_cast<double>(out.breakdown.masked[t]);
                items[t] += out.breakdown.items[t];
            }
            em.mean_total += out.breakdown.total;
            em.self_view_fallbacks += batch.self_view_fallbacks;
            em.lr_last = lr;
            ++em.steps;
            ++state.step;
        }
        for (std::size_t t = 0; t < kTermCount; ++t) {
            em.mean_terms[t] /= static_cast<double>(em.steps);
            em.masked_fraction[t] = items[t] ? em.masked_fraction[t] / static_cast<double>(items[t]) : 0.0;
        }
        em.mean_total /= static_cast<double>(em.steps);
        report.self_view_fallbacks += em.self_view_fallbacks;
        if (on_epoch) on_epoch(state.params, em);
        report.epochs.push_back(em);
    }
    return {std::move(state.params), std::move(report)};
}

std::string metrics_csv(const RunReport& report) {
    std::string out = "epoch,steps,lr";
    for (std::size_t t = 0; t < kTermCount; ++t) out += "," + std::string(to_string(static_cast<Term>(t)));
    for (std::size_t t = 0; t < kTermCount; ++t) out += ",masked_" + std::string(to_string(static_cast<Term>(t)));
    out += ",total,self_view_fallbacks,target_top1\n";
    for (const auto& e : report.epochs) {
        out += std::to_string(e.epoch) + "," + std::to_string(e.steps) + "," + fmt(e.lr_last);
        for (double v : e.mean_terms) out += "," + fmt(v);
        for (double v : e.masked_fraction) out += "," + fmt(v);
        out += "," + fmt(e.mean_total) + "," + std::to_string(e.self_view_fallbacks) + ",";
        if (e.target_top1) out += fmt(*e.target_top1);
        out += "\n";
    }
    return out;
}

std::string steps_csv(const RunReport& report) {
    std::string out = "step,epoch,lr";
    for (std::size_t t = 0; t < kTermCount; ++t) out += "," + std::string(to_string(static_cast<Term>(t)));
    for (std::size_t t = 0; t < kTermCount; ++t) out += ",masked_" + std::string(to_string(static_cast<Term>(t)));
    out += ",total\n";
    for (const auto& s : report.steps) {
        out += std::to_string(s.step) + "," + std::to_string(s.epoch) + "," + fmt(s.lr);
        for (double v : s.breakdown.values) out += "," + fmt(v);
        for (auto m : s.breakdown.masked) out += "," + std::to_string(m);
        out += "," + fmt(s.breakdown.total) + "\n";
    }
    return out;
}

}  // namespace mvmatch
