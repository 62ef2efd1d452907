#include "mvmatch/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "mvmatch/error.hpp"
#include "mvmatch/rng.hpp"

namespace mvmatch {

namespace {

std::size_t product(const std::vector<std::size_t>& dims) {
    return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

// 3x3 convolution, stride 1, zero "same" padding. in [N, Ci, S, S].
Tensor conv3x3(const Tensor& in, const Tensor& w, const Tensor& b) {
    const std::size_t n_batch = in.dim(0), ci = in.dim(1), s = in.dim(2), co = w.dim(0);
    Tensor out({n_batch, co, s, s});
    const std::size_t plane = s * s;
    for (std::size_t n = 0; n < n_batch; ++n) {
        for (std::size_t o = 0; o < co; ++o) {
            double* dst = out.data() + (n * co + o) * plane;
            std::fill(dst, dst + plane, b.values[o]);
            for (std::size_t i = 0; i < ci; ++i) {
                const double* src = in.data() + (n * ci + i) * plane;
                const double* k = w.data() + (o * ci + i) * 9;
                for (int ky = 0; ky < 3; ++ky) {
                    const int y_lo = std::max(0, 1 - ky);
                    const int y_hi = std::min<int>(static_cast<int>(s), static_cast<int>(s) + 1 - ky);
                    for (int kx = 0; kx < 3; ++kx) {
                        const double kv = k[ky * 3 + kx];
                        const int x_lo = std::max(0, 1 - kx);
                        const int x_hi = std::min<int>(static_cast<int>(s), static_cast<int>(s) + 1 - kx);
                        for (int y = y_lo; y < y_hi; ++y) {
                            double* drow = dst + y * s;
                            const double* srow = src + (y + ky - 1) * s + (kx - 1);
                            for (int x = x_lo; x < x_hi; ++x) drow[x] += kv * srow[x];
                        }
                    }
                }
            }
        }
    }
    return out;
}

// Accumulates dW, db and (optionally) din for conv3x3.
void conv3x3_backward(const Tensor& in, const Tensor& w, const Tensor& dout, Tensor& dw, Tensor& db,
                      Tensor* din) {
    const std::size_t n_batch = in.dim(0), ci = in.dim(1), s = in.dim(2), co = w.dim(0);
    const std::size_t plane = s * s;
    for (std::size_t n = 0; n < n_batch; ++n) {
        for (std::size_t o = 0; o < co; ++o) {
            const double* g = dout.data() + (n * co + o) * plane;
            double bias_sum = 0.0;
            for (std::size_t p = 0; p < plane; ++p) bias_sum += g[p];
            db.values[o] += bias_sum;
            for (std::size_t i = 0; i < ci; ++i) {
                const double* src = in.data() + (n * ci + i) * plane;
                double* dsrc = din ? din->data() + (n * ci + i) * plane : nullptr;
                const double* k = w.data() + (o * ci + i) * 9;
                double* dk = dw.data() + (o * ci + i) * 9;
                for (int ky = 0; ky < 3; ++ky) {
                    const int y_lo = std::max(0, 1 - ky);
                    const int y_hi = std::min<int>(static_cast<int>(s), static_cast<int>(s) + 1 - ky);
                    for (int kx = 0; kx < 3; ++kx) {
                        const int x_lo = std::max(0, 1 - kx);
                        const int x_hi = std::min<int>(static_cast<int>(s), static_cast<int>(s) + 1 - kx);
                        const double kv = k[ky * 3 + kx];
                        double acc = 0.0;
                        for (int y = y_lo; y < y_hi; ++y) {
                            const double* grow = g + y * s;
                            const std::size_t off = (y + ky - 1) * s + (kx - 1);
                            const double* srow = src + off;
                            for (int x = x_lo; x < x_hi; ++x) acc += grow[x] * srow[x];
                            if (dsrc) {
                                double* drow = dsrc + off;
                                for (int x = x_lo; x < x_hi; ++x) drow[x] += kv * grow[x];
                            }
                        }
                        dk[ky * 3 + kx] += acc;
                    }
                }
            }
        }
    }
}

// ReLU followed by 2x2 mean pooling. in [N, C, S, S] -> [N, C, S/2, S/2].
Tensor relu_pool(const Tensor& pre) {
    const std::size_t n_batch = pre.dim(0), c = pre.dim(1), s = pre.dim(2), h = s / 2;
    Tensor out({n_batch, c, h, h});
    for (std::size_t nc = 0; nc < n_batch * c; ++nc) {
        const double* src = pre.data() + nc * s * s;
        double* dst = out.data() + nc * h * h;
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < h; ++x) {
                const double a = std::max(0.0, src[(2 * y) * s + 2 * x]);
                const double b = std::max(0.0, src[(2 * y) * s + 2 * x + 1]);
                const double c0 = std::max(0.0, src[(2 * y + 1) * s + 2 * x]);
                const double d = std::max(0.0, src[(2 * y + 1) * s + 2 * x + 1]);
                dst[y * h + x] = 0.25 * (a + b + c0 + d);
            }
        }
    }
    return out;
}

// Gradient through mean pooling and ReLU back onto the pre-activation.
Tensor relu_pool_backward(const Tensor& pre, const double* dpooled) {
    const std::size_t n_batch = pre.dim(0), c = pre.dim(1), s = pre.dim(2), h = s / 2;
    Tensor dpre({n_batch, c, s, s});
    for (std::size_t nc = 0; nc < n_batch * c; ++nc) {
        const double* src = pre.data() + nc * s * s;
        double* dst = dpre.data() + nc * s * s;
        const double* g = dpooled + nc * h * h;
        for (std::size_t y = 0; y < s; ++y)
            for (std::size_t x = 0; x < s; ++x)
                dst[y * s + x] = src[y * s + x] > 0.0 ? 0.25 * g[(y / 2) * h + x / 2] : 0.0;
    }
    return dpre;
}

void check_batch(const ModelParams& params, const Tensor& batch) {
    if (batch.shape.size() != 4 || batch.dim(1) != 3 ||
        batch.dim(2) != static_cast<std::size_t>(params.input_side) ||
        batch.dim(3) != static_cast<std::size_t>(params.input_side))
        throw NumericError("batch shape does not match model input [N, 3, " +
                           std::to_string(params.input_side) + ", " + std::to_string(params.input_side) + "]");
}

Tensor dense_forward(const ModelParams& params, const Tensor& features) {
    const Tensor& w = params[ParamIndex::dense_w];
    const Tensor& b = params[ParamIndex::dense_b];
    const std::size_t n_batch = features.dim(0), f = features.dim(1), c = w.dim(0);
    Tensor logits({n_batch, c});
    for (std::size_t n = 0; n < n_batch; ++n) {
        const double* x = features.data() + n * f;
        for (std::size_t k = 0; k < c; ++k) {
            const double* row = w.data() + k * f;
            double acc = 0.0;
            for (std::size_t j = 0; j < f; ++j) acc += row[j] * x[j];
            logits.values[n * c + k] = acc + b.values[k];
        }
    }
    return logits;
}

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class ByteReader {
public:
    explicit ByteReader(std::string data) : data_(std::move(data)) {}

    std::uint64_t get(int bytes) {
        if (pos_ + bytes > data_.size()) throw DataError("checkpoint truncated");
        std::uint64_t v = 0;
        for (int i = 0; i < bytes; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        pos_ += bytes;
        return v;
    }
    std::string take(std::size_t n) {
        if (pos_ + n > data_.size()) throw DataError("checkpoint truncated");
        std::string s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == data_.size(); }

private:
    std::string data_;
    std::size_t pos_ = 0;
};

constexpr char kMagic[8] = {'M', 'V', 'M', 'A', 'T', 'C', 'H', '\0'};
constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace

Tensor::Tensor(std::vector<std::size_t> dims, double fill)
    : shape(std::move(dims)), values(product(shape), fill) {}

std::size_t Prediction::argmax() const {
    return static_cast<std::size_t>(std::max_element(probs.begin(), probs.end()) - probs.begin());
}

double Prediction::confidence() const { return *std::max_element(probs.begin(), probs.end()); }

std::size_t ModelParams::parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.numel();
    return n;
}

Gradients Gradients::zeros_like(const ModelParams& params) {
    Gradients g;
    for (std::size_t i = 0; i < kParamTensorCount; ++i) g.tensors[i] = Tensor(params.tensors[i].shape);
    return g;
}

bool Gradients::all_finite() const {
    for (const auto& t : tensors)
        for (double v : t.values)
            if (!std::isfinite(v)) return false;
    return true;
}

ModelParams init_params(int input_side, int classes, std::uint64_t seed) {
    if (input_side < 4 || input_side % 4 != 0) throw ConfigError("input side must be a positive multiple of 4");
    if (classes < 2) throw ConfigError("class count must be >= 2");
    ModelParams p;
    p.input_side = input_side;
    p.classes = classes;
    p.seed = seed;
    const std::size_t q = static_cast<std::size_t>(input_side / 4);
    const std::size_t features = kConv2Out * q * q;
    p[ParamIndex::conv1_w] = Tensor({kConv1Out, 3, 3, 3});
    p[ParamIndex::conv1_b] = Tensor({kConv1Out});
    p[ParamIndex::conv2_w] = Tensor({kConv2Out, kConv1Out, 3, 3});
    p[ParamIndex::conv2_b] = Tensor({kConv2Out});
    p[ParamIndex::dense_w] = Tensor({static_cast<std::size_t>(classes), features});
    p[ParamIndex::dense_b] = Tensor({static_cast<std::size_t>(classes)});

    Rng rng(derive_seed(seed, "init"));
    auto fill = [&](Tensor& t, double fan_in) {
        const double limit = std::sqrt(6.0 / fan_in);
        for (double& v : t.values) v = rng.uniform(-limit, limit);
    };
    fill(p[ParamIndex::conv1_w], 3.0 * 9.0);
    fill(p[ParamIndex::conv2_w], kConv1Out * 9.0);
    fill(p[ParamIndex::dense_w], static_cast<double>(features));
    return p;
}

ForwardResult forward(const ModelParams& params, const Tensor& batch) {
    check_batch(params, batch);
    ForwardResult r;
    r.cache.input = batch;
    r.cache.conv1_pre = conv3x3(batch, params[ParamIndex::conv1_w], params[ParamIndex::conv1_b]);
    r.cache.pool1 = relu_pool(r.cache.conv1_pre);
    r.cache.conv2_pre = conv3x3(r.cache.pool1, params[ParamIndex::conv2_w], params[ParamIndex::conv2_b]);
    Tensor pooled = relu_pool(r.cache.conv2_pre);
    const std::size_t n = batch.dim(0);
    r.cache.features = Tensor{};
    r.cache.features.shape = {n, pooled.numel() / std::max<std::size_t>(n, 1)};
    r.cache.features.values = std::move(pooled.values);
    r.logits = dense_forward(params, r.cache.features);
    return r;
}

Tensor predict_logits(const ModelParams& params, const Tensor& batch) {
    return forward(params, batch).logits;
}

Prediction softmax(std::span<const double> logits) {
    Prediction p;
    p.probs.resize(logits.size());
    const double m = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p.probs[i] = std::exp(logits[i] - m);
        sum += p.probs[i];
    }
    for (double& v : p.probs) v /= sum;
    return p;
}

std::vector<Prediction> softmax_rows(const Tensor& logits) {
    const std::size_t n = logits.dim(0), c = logits.dim(1);
    std::vector<Prediction> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(softmax({logits.data() + i * c, c}));
    return out;
}

Gradients backward(const ModelParams& params, const ForwardCache& cache, const Tensor& logit_grads) {
    const std::size_t n = cache.input.shape.empty() ? 0 : cache.input.dim(0);
    const std::size_t c = static_cast<std::size_t>(params.classes);
    const Tensor& w3 = params[ParamIndex::dense_w];
    if (logit_grads.shape != std::vector<std::size_t>{n, c} || cache.features.shape.size() != 2 ||
        cache.features.dim(1) != w3.dim(1) || cache.conv1_pre.shape.empty() ||
        cache.conv1_pre.dim(1) != params[ParamIndex::conv1_w].dim(0))
        throw NumericError("stale forward cache: shapes do not match parameters or logit gradients");

    Gradients g = Gradients::zeros_like(params);
    const std::size_t f = w3.dim(1);

    Tensor dfeatures({n, f});
    for (std::size_t i = 0; i < n; ++i) {
        const double* x = cache.features.data() + i * f;
        double* dx = dfeatures.data() + i * f;
        for (std::size_t k = 0; k < c; ++k) {
            const double gk = logit_grads.values[i * c + k];
            if (gk == 0.0) continue;
            g[ParamIndex::dense_b].values[k] += gk;
            double* dw = g[ParamIndex::dense_w].data() + k * f;
            const double* w = w3.data() + k * f;
            for (std::size_t j = 0; j < f; ++j) {
                dw[j] += gk * x[j];
                dx[j] += gk * w[j];
            }
        }
    }

    const Tensor dconv2 = relu_pool_backward(cache.conv2_pre, dfeatures.data());
    Tensor dpool1(cache.pool1.shape);
    conv3x3_backward(cache.pool1, params[ParamIndex::conv2_w], dconv2, g[ParamIndex::conv2_w],
                     g[ParamIndex::conv2_b], &dpool1);
    const Tensor dconv1 = relu_pool_backward(cache.conv1_pre, dpool1.data());
    conv3x3_backward(cache.input, params[ParamIndex::conv1_w], dconv1, g[ParamIndex::conv1_w],
                     g[ParamIndex::conv1_b], nullptr);
    return g;
}

std::vector<bool> relu_pattern(const ForwardCache& cache) {
    std::vector<bool> out;
    out.reserve(cache.conv1_pre.numel() + cache.conv2_pre.numel());
    for (double v : cache.conv1_pre.values) out.push_back(v > 0.0);
    for (double v : cache.conv2_pre.values) out.push_back(v > 0.0);
    return out;
}

GradCheckReport grad_check_report(const ModelParams& params, const Objective& objective,
                                  const GradCheckOptions& options) {
    const ObjectiveValue base = objective(params);
    if (!std::isfinite(base.loss)) throw NumericError("grad_check: non-finite loss");
    Rng rng(derive_seed(options.seed, "grad_check"));
    ModelParams probe = params;
    GradCheckReport report;
    const std::size_t max_draws = 50 * options.coordinates + 100;
    for (std::size_t draw = 0; report.checked < options.coordinates; ++draw) {
        if (draw == max_draws) throw NumericError("grad_check: too many coordinates straddle ReLU kinks");
        const std::size_t t = rng.below(kParamTensorCount);
        const std::size_t j = rng.below(params.tensors[t].numel());
        double& slot = probe.tensors[t].values[j];
        const double original = slot;
        slot = original + options.eps;
        const double plus = objective(probe).loss;
        const auto pattern_plus = options.activation_pattern ? options.activation_pattern(probe) : std::vector<bool>{};
        slot = original - options.eps;
        const double minus = objective(probe).loss;
        const bool kink = options.activation_pattern && options.activation_pattern(probe) != pattern_plus;
        slot = original;
        if (!std::isfinite(plus) || !std::isfinite(minus)) throw NumericError("grad_check: non-finite loss");
        if (kink) {
            ++report.skipped_kinks;
            continue;
        }
        const double numeric = (plus - minus) / (2.0 * options.eps);
        const double analytic = base.grads.tensors[t].values[j];
        const double rel = std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
        report.max_rel_error = std::max(report.max_rel_error, rel);
        ++report.checked;
    }
    return report;
}

double grad_check(const ModelParams& params, const Objective& objective, const GradCheckOptions& options) {
    return grad_check_report(params, objective, options).max_rel_error;
}

std::string serialize_checkpoint(const ModelParams& params, const std::string& provenance_json) {
    std::string out(kMagic, sizeof(kMagic));
    put_u32(out, kCheckpointVersion);
    put_u32(out, static_cast<std::uint32_t>(params.input_side));
    put_u32(out, static_cast<std::uint32_t>(params.classes));
    put_u64(out, params.seed);
    put_u32(out, static_cast<std::uint32_t>(kParamTensorCount));
    for (const auto& t : params.tensors) {
        put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
        for (auto d : t.shape) put_u64(out, d);
    }
    for (const auto& t : params.tensors)
        for (double v : t.values) put_u64(out, std::bit_cast<std::uint64_t>(v));
    put_u64(out, provenance_json.size());
    out += provenance_json;
    return out;
}

void save_checkpoint(const ModelParams& params, const std::string& provenance_json,
                     const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint " + path.string());
    const std::string bytes = serialize_checkpoint(params, provenance_json);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("failed writing checkpoint " + path.string());
}

ModelParams load_checkpoint(const std::filesystem::path& path, std::string* provenance_json) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    ByteReader r(ss.str());
    if (r.take(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic)))
        throw DataError("not a checkpoint file: " + path.string());
    if (r.get(4) != kCheckpointVersion) throw DataError("unsupported checkpoint version");
    ModelParams p;
    p.input_side = static_cast<int>(r.get(4));
    p.classes = static_cast<int>(r.get(4));
    p.seed = r.get(8);
    if (r.get(4) != kParamTensorCount) throw DataError("checkpoint tensor count mismatch");
    for (auto& t : p.tensors) {
        const auto rank = r.get(4);
        if (rank > 8) throw DataError("checkpoint tensor rank too large");
        std::vector<std::size_t> dims;
        for (std::uint64_t i = 0; i < rank; ++i) dims.push_back(r.get(8));
        t = Tensor(dims);
    }
    for (auto& t : p.tensors)
        for (double& v : t.values) v = std::bit_cast<double>(r.get(8));
    const ModelParams expected = init_params(p.input_side, p.classes, 0);
    for (std::size_t i = 0; i < kParamTensorCount; ++i)
        if (p.tensors[i].shape != expected.tensors[i].shape) throw DataError("checkpoint shape table inconsistent");
    const auto json_len = r.get(8);
    std::string json = r.take(json_len);
    if (provenance_json) *provenance_json = std::move(json);
    return p;
}

}  // namespace mvmatch
