#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "ehrseq/rng.hpp"
#include "ehrseq/seqpipe.hpp"
#include "json.hpp"

namespace ehrseq::model {

struct ModelConfig {
    int n_layers = 2;
    int n_heads = 4;
    int d_model = 64;
    int d_ff = 128;
    int seq_len = 128;
    int vocab_size = 4;
    double dropout = 0.0;

    void validate() const {
        if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_ff < 1) {
            throw std::invalid_argument("model config: dimensions must be positive");
        }
        if (d_model % n_heads != 0) {
            throw std::invalid_argument("model config: d_model must be divisible by n_heads");
        }
        if (seq_len < 1) throw std::invalid_argument("model config: seq_len must be >= 1");
        if (vocab_size < 4) throw std::invalid_argument("model config: vocab_size must be >= 4");
        if (dropout < 0.0 || dropout >= 1.0) {
            throw std::invalid_argument("model config: dropout in [0,1)");
        }
    }

    nlohmann::json to_json() const {
        return nlohmann::json{{"n_layers", n_layers}, {"n_heads", n_heads},
                              {"d_model", d_model},   {"d_ff", d_ff},
                              {"seq_len", seq_len},   {"vocab_size", vocab_size},
                              {"dropout", dropout}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.n_layers = j.at("n_layers").get<int>();
        c.n_heads = j.at("n_heads").get<int>();
        c.d_model = j.at("d_model").get<int>();
        c.d_ff = j.at("d_ff").get<int>();
        c.seq_len = j.at("seq_len").get<int>();
        c.vocab_size = j.at("vocab_size").get<int>();
        c.dropout = j.value("dropout", 0.0);
        c.validate();
        return c;
    }

    bool operator==(const ModelConfig&) const = default;
};

template <class T>
struct Mat {
    int rows = 0, cols = 0;
    std::vector<T> a;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), a(static_cast<size_t>(r) * c, T(0)) {}

    T* row(int i) { return a.data() + static_cast<size_t>(i) * cols; }
    const T* row(int i) const { return a.data() + static_cast<size_t>(i) * cols; }
};

template <class T>
struct LayerParams {
    Mat<T> wq, wk, wv, wo;            // [d_model x d_model], y = x * W
    std::vector<T> bq, bk, bv, bo;    // [d_model]
    Mat<T> w1;                        // [d_model x d_ff]
    std::vector<T> b1;                // [d_ff]
    Mat<T> w2;                        // [d_ff x d_model]
    std::vector<T> b2;                // [d_model]
    std::vector<T> ln1_g, ln1_b;      // [d_model]
    std::vector<T> ln2_g, ln2_b;      // [d_model]
};

template <class T>
struct ArrayRef {
    std::string name;
    std::vector<int> shape;
    std::vector<T>* data;
};

/// All learnable state. The MLM output projection is tied to tok_emb, so the
/// only MLM-head parameter here is its bias.
template <class T>
struct Params {
    Mat<T> tok_emb;                    // [vocab x d_model]
    Mat<T> pos_emb;                    // [seq_len x d_model]
    std::vector<LayerParams<T>> layers;
    std::vector<T> mlm_bias;           // [vocab]
    std::vector<T> cls_w;              // [d_model]
    std::vector<T> cls_b;              // [1]

    Params() = default;

    explicit Params(const ModelConfig& cfg) {
        cfg.validate();
        tok_emb = Mat<T>(cfg.vocab_size, cfg.d_model);
        pos_emb = Mat<T>(cfg.seq_len, cfg.d_model);
        layers.resize(cfg.n_layers);
        for (auto& l : layers) {
            l.wq = l.wk = l.wv = l.wo = Mat<T>(cfg.d_model, cfg.d_model);
            l.bq.assign(cfg.d_model, T(0));
            l.bk.assign(cfg.d_model, T(0));
            l.bv.assign(cfg.d_model, T(0));
            l.bo.assign(cfg.d_model, T(0));
            l.w1 = Mat<T>(cfg.d_model, cfg.d_ff);
            l.b1.assign(cfg.d_ff, T(0));
            l.w2 = Mat<T>(cfg.d_ff, cfg.d_model);
            l.b2.assign(cfg.d_model, T(0));
            l.ln1_g.assign(cfg.d_model, T(1));
            l.ln1_b.assign(cfg.d_model, T(0));
            l.ln2_g.assign(cfg.d_model, T(1));
            l.ln2_b.assign(cfg.d_model, T(0));
        }
        mlm_bias.assign(cfg.vocab_size, T(0));
        cls_w.assign(cfg.d_model, T(0));
        cls_b.assign(1, T(0));
    }

    /// Stable canonical enumeration of every learnable array; checkpoint
    /// layout, Adam, and the gradient check all walk this order.
    std::vector<ArrayRef<T>> array_refs() {
        std::vector<ArrayRef<T>> out;
        out.push_back({"tok_emb", {tok_emb.rows, tok_emb.cols}, &tok_emb.a});
        out.push_back({"pos_emb", {pos_emb.rows, pos_emb.cols}, &pos_emb.a});
        for (size_t i = 0; i < layers.size(); ++i) {
            auto& l = layers[i];
            const std::string p = "layers." + std::to_string(i) + ".";
            out.push_back({p + "wq", {l.wq.rows, l.wq.cols}, &l.wq.a});
            out.push_back({p + "bq", {static_cast<int>(l.bq.size())}, &l.bq});
            out.push_back({p + "wk", {l.wk.rows, l.wk.cols}, &l.wk.a});
            out.push_back({p + "bk", {static_cast<int>(l.bk.size())}, &l.bk});
            out.push_back({p + "wv", {l.wv.rows, l.wv.cols}, &l.wv.a});
            out.push_back({p + "bv", {static_cast<int>(l.bv.size())}, &l.bv});
            out.push_back({p + "wo", {l.wo.rows, l.wo.cols}, &l.wo.a});
            out.push_back({p + "bo", {static_cast<int>(l.bo.size())}, &l.bo});
            out.push_back({p + "w1", {l.w1.rows, l.w1.cols}, &l.w1.a});
            out.push_back({p + "b1", {static_cast<int>(l.b1.size())}, &l.b1});
            out.push_back({p + "w2", {l.w2.rows, l.w2.cols}, &l.w2.a});
            out.push_back({p + "b2", {static_cast<int>(l.b2.size())}, &l.b2});
            out.push_back({p + "ln1_g", {static_cast<int>(l.ln1_g.size())}, &l.ln1_g});
            out.push_back({p + "ln1_b", {static_cast<int>(l.ln1_b.size())}, &l.ln1_b});
            out.push_back({p + "ln2_g", {static_cast<int>(l.ln2_g.size())}, &l.ln2_g});
            out.push_back({p + "ln2_b", {static_cast<int>(l.ln2_b.size())}, &l.ln2_b});
        }
        out.push_back({"mlm_bias", {static_cast<int>(mlm_bias.size())}, &mlm_bias});
        out.push_back({"cls_w", {static_cast<int>(cls_w.size())}, &cls_w});
        out.push_back({"cls_b", {1}, &cls_b});
        return out;
    }

    void zero() {
        for (auto& ref : array_refs()) std::fill(ref.data->begin(), ref.data->end(), T(0));
    }

    void add_scaled(Params& other, T scale) {
        auto mine = array_refs();
        auto theirs = other.array_refs();
        for (size_t i = 0; i < mine.size(); ++i) {
            auto& dst = *mine[i].data;
            const auto& src = *theirs[i].data;
            for (size_t k = 0; k < dst.size(); ++k) dst[k] += scale * src[k];
        }
    }

    size_t scalar_count() {
        size_t n = 0;
        for (auto& ref : array_refs()) n += ref.data->size();
        return n;
    }
};

/// BERT-style init: N(0, 0.02) for embeddings and weight matrices, zeros for
/// biases, identity layer norms.
template <class T>
Params<T> init_params(const ModelConfig& cfg, uint64_t seed) {
    Params<T> p(cfg);
    Rng rng(seed);
    auto fill_normal = [&](std::vector<T>& v) {
        for (auto& x : v) x = static_cast<T>(rng.gaussian() * 0.02);
    };
    fill_normal(p.tok_emb.a);
    fill_normal(p.pos_emb.a);
    for (auto& l : p.layers) {
        fill_normal(l.wq.a);
        fill_normal(l.wk.a);
        fill_normal(l.wv.a);
        fill_normal(l.wo.a);
        fill_normal(l.w1.a);
        fill_normal(l.w2.a);
    }
    fill_normal(p.cls_w);
    return p;
}

template <class T>
struct LayerCache {
    std::vector<T> ln1_mean, ln1_rstd;  // [L]
    std::vector<T> ln1_out;             // [L x d]
    std::vector<T> q, k, v;             // [L x d]
    std::vector<T> attn;                // [H x L x L], pre-dropout probabilities
    std::vector<uint8_t> attn_keep;     // dropout keep mask (train only)
    std::vector<T> ctx;                 // [L x d]
    std::vector<uint8_t> out_keep;      // [L x d]
    std::vector<T> x1;                  // [L x d], after attention residual
    std::vector<T> ln2_mean, ln2_rstd;
    std::vector<T> ln2_out;             // [L x d]
    std::vector<T> ff_pre;              // [L x d_ff]
    std::vector<T> ff_act;              // [L x d_ff]
    std::vector<uint8_t> ff_keep;       // [L x d]
    std::vector<T> x2;                  // [L x d], layer output
};

template <class T>
struct ForwardCache {
    int L = 0;  // effective window length used for this pass
    int real_len = 0;
    std::vector<int32_t> ids;
    std::vector<uint8_t> attn_mask;
    std::vector<uint8_t> emb_keep;
    std::vector<T> emb;  // [L x d], embeddings after dropout
    std::vector<LayerCache<T>> layers;
    bool train = false;

    const std::vector<T>& hidden() const { return layers.empty() ? emb : layers.back().x2; }
};

namespace detail {

constexpr double kMaskBias = -1e30;
constexpr double kLnEps = 1e-5;

template <class T>
inline T dot(const T* a, const T* b, int n) {
    T s = 0;
    for (int i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

template <class T>
inline void axpy(T* y, T alpha, const T* x, int n) {
    for (int i = 0; i < n; ++i) y[i] += alpha * x[i];
}

/// y [L x cols] = x [L x rows(W)] * W [rows x cols] + b
template <class T>
void linear_forward(const std::vector<T>& x, const Mat<T>& w, const std::vector<T>& b,
                    int L, std::vector<T>& y) {
    y.assign(static_cast<size_t>(L) * w.cols, T(0));
    for (int l = 0; l < L; ++l) {
        const T* xr = x.data() + static_cast<size_t>(l) * w.rows;
        T* yr = y.data() + static_cast<size_t>(l) * w.cols;
        for (int c = 0; c < w.cols; ++c) yr[c] = b[c];
        for (int r = 0; r < w.rows; ++r) axpy(yr, xr[r], w.row(r), w.cols);
    }
}

/// Accumulates dW += x^T * dy, db += column sums of dy, dx += dy * W^T.
template <class T>
void linear_backward(const std::vector<T>& x, const Mat<T>& w, const std::vector<T>& dy,
                     int L, Mat<T>& dw, std::vector<T>& db, std::vector<T>* dx) {
    for (int l = 0; l < L; ++l) {
        const T* xr = x.data() + static_cast<size_t>(l) * w.rows;
        const T* dyr = dy.data() + static_cast<size_t>(l) * w.cols;
        for (int r = 0; r < w.rows; ++r) axpy(dw.row(r), xr[r], dyr, w.cols);
        for (int c = 0; c < w.cols; ++c) db[c] += dyr[c];
        if (dx) {
            T* dxr = dx->data() + static_cast<size_t>(l) * w.rows;
            for (int r = 0; r < w.rows; ++r) dxr[r] += dot(dyr, w.row(r), w.cols);
        }
    }
}

template <class T>
void layer_norm_forward(const std::vector<T>& x, const std::vector<T>& g,
                        const std::vector<T>& b, int L, int d, std::vector<T>& y,
                        std::vector<T>& mean, std::vector<T>& rstd) {
    y.resize(static_cast<size_t>(L) * d);
    mean.resize(L);
    rstd.resize(L);
    for (int l = 0; l < L; ++l) {
        const T* xr = x.data() + static_cast<size_t>(l) * d;
        T* yr = y.data() + static_cast<size_t>(l) * d;
        T mu = 0;
        for (int i = 0; i < d; ++i) mu += xr[i];
        mu /= d;
        T var = 0;
        for (int i = 0; i < d; ++i) {
            const T c = xr[i] - mu;
            var += c * c;
        }
        var /= d;
        const T rs = T(1) / std::sqrt(var + T(kLnEps));
        mean[l] = mu;
        rstd[l] = rs;
        for (int i = 0; i < d; ++i) yr[i] = (xr[i] - mu) * rs * g[i] + b[i];
    }
}

template <class T>
void layer_norm_backward(const std::vector<T>& x, const std::vector<T>& g,
                         const std::vector<T>& mean, const std::vector<T>& rstd,
                         const std::vector<T>& dy, int L, int d, std::vector<T>& dx,
                         std::vector<T>& dg, std::vector<T>& db) {
    for (int l = 0; l < L; ++l) {
        const T* xr = x.data() + static_cast<size_t>(l) * d;
        const T* dyr = dy.data() + static_cast<size_t>(l) * d;
        T* dxr = dx.data() + static_cast<size_t>(l) * d;
        const T mu = mean[l], rs = rstd[l];
        T sum_dxhat = 0, sum_dxhat_xhat = 0;
        for (int i = 0; i < d; ++i) {
            const T xhat = (xr[i] - mu) * rs;
            const T dxhat = dyr[i] * g[i];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            dg[i] += dyr[i] * xhat;
            db[i] += dyr[i];
        }
        const T inv_d = T(1) / d;
        for (int i = 0; i < d; ++i) {
            const T xhat = (xr[i] - mu) * rs;
            const T dxhat = dyr[i] * g[i];
            dxr[i] += rs * (dxhat - sum_dxhat * inv_d - xhat * sum_dxhat_xhat * inv_d);
        }
    }
}

template <class T>
inline T gelu(T x) {
    return x * T(0.5) * std::erfc(-x * T(0.7071067811865476));
}

template <class T>
inline T gelu_grad(T x) {
    const T cdf = T(0.5) * std::erfc(-x * T(0.7071067811865476));
    const T pdf = std::exp(-x * x * T(0.5)) * T(0.3989422804014327);
    return cdf + x * pdf;
}

/// Inverted dropout: keeps with probability 1-p and scales by 1/(1-p).
template <class T>
void dropout_forward(std::vector<T>& x, std::vector<uint8_t>& keep, double p, Rng& rng) {
    keep.resize(x.size());
    const T scale = T(1.0 / (1.0 - p));
    for (size_t i = 0; i < x.size(); ++i) {
        keep[i] = rng.unit() >= p ? 1 : 0;
        x[i] = keep[i] ? x[i] * scale : T(0);
    }
}

template <class T>
void dropout_backward(std::vector<T>& dx, const std::vector<uint8_t>& keep, double p) {
    const T scale = T(1.0 / (1.0 - p));
    for (size_t i = 0; i < dx.size(); ++i) dx[i] = keep[i] ? dx[i] * scale : T(0);
}

}  // namespace detail

/// Single-example encoder pass. `crop_len` (0 = full window) trims the window
/// to at least real_len positions; trailing all-pad positions carry no
/// gradient or loss, so cropping them is exact and just saves work.
template <class T>
ForwardCache<T> forward_example(const pipe::TokenSeq& tokens, const Params<T>& params,
                                const ModelConfig& cfg, bool train = false,
                                uint64_t dropout_seed = 0, int crop_len = 0) {
    using namespace detail;
    const int window = static_cast<int>(tokens.ids.size());
    if (window != cfg.seq_len) {
        throw std::invalid_argument("forward_encoder: window length != config seq_len");
    }
    int L = crop_len > 0 ? crop_len : window;
    if (L < tokens.real_len) L = tokens.real_len;
    if (L > window) L = window;
    if (L < 1) L = 1;
    const int d = cfg.d_model;
    const int H = cfg.n_heads;
    const int dh = d / H;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));

    ForwardCache<T> fc;
    fc.L = L;
    fc.real_len = tokens.real_len;
    fc.ids.assign(tokens.ids.begin(), tokens.ids.begin() + L);
    fc.attn_mask.assign(tokens.attn_mask.begin(), tokens.attn_mask.begin() + L);
    fc.train = train && cfg.dropout > 0.0;

    for (int l = 0; l < L; ++l) {
        if (fc.ids[l] < 0 || fc.ids[l] >= cfg.vocab_size) {
            throw std::invalid_argument("forward_encoder: token id out of range");
        }
    }

    Rng drop_rng(dropout_seed);

    fc.emb.resize(static_cast<size_t>(L) * d);
    for (int l = 0; l < L; ++l) {
        const T* te = params.tok_emb.row(fc.ids[l]);
        const T* pe = params.pos_emb.row(l);
        T* e = fc.emb.data() + static_cast<size_t>(l) * d;
        for (int i = 0; i < d; ++i) e[i] = te[i] + pe[i];
    }
    if (fc.train) dropout_forward(fc.emb, fc.emb_keep, cfg.dropout, drop_rng);

    fc.layers.resize(cfg.n_layers);
    const std::vector<T>* x = &fc.emb;
    for (int li = 0; li < cfg.n_layers; ++li) {
        auto& lc = fc.layers[li];
        const auto& lp = params.layers[li];

        layer_norm_forward(*x, lp.ln1_g, lp.ln1_b, L, d, lc.ln1_out, lc.ln1_mean, lc.ln1_rstd);
        linear_forward(lc.ln1_out, lp.wq, lp.bq, L, lc.q);
        linear_forward(lc.ln1_out, lp.wk, lp.bk, L, lc.k);
        linear_forward(lc.ln1_out, lp.wv, lp.bv, L, lc.v);

        lc.attn.assign(static_cast<size_t>(H) * L * L, T(0));
        for (int h = 0; h < H; ++h) {
            const int off = h * dh;
            for (int i = 0; i < L; ++i) {
                T* row = lc.attn.data() + (static_cast<size_t>(h) * L + i) * L;
                const T* qi = lc.q.data() + static_cast<size_t>(i) * d + off;
                T mx = -std::numeric_limits<T>::infinity();
                for (int j = 0; j < L; ++j) {
                    T s = dot(qi, lc.k.data() + static_cast<size_t>(j) * d + off, dh) * scale;
                    if (!fc.attn_mask[j]) s += T(kMaskBias);
                    row[j] = s;
                    if (s > mx) mx = s;
                }
                T denom = 0;
                for (int j = 0; j < L; ++j) {
                    row[j] = std::exp(row[j] - mx);
                    denom += row[j];
                }
                const T inv = T(1) / denom;
                for (int j = 0; j < L; ++j) row[j] *= inv;
            }
        }

        // ctx = dropout(attn) * V, concatenated over heads
        std::vector<T> attn_eff;
        const T* attn_probs = lc.attn.data();
        if (fc.train) {
            attn_eff = lc.attn;
            dropout_forward(attn_eff, lc.attn_keep, cfg.dropout, drop_rng);
            attn_probs = attn_eff.data();
        }
        lc.ctx.assign(static_cast<size_t>(L) * d, T(0));
        for (int h = 0; h < H; ++h) {
            const int off = h * dh;
            for (int i = 0; i < L; ++i) {
                const T* arow = attn_probs + (static_cast<size_t>(h) * L + i) * L;
                T* crow = lc.ctx.data() + static_cast<size_t>(i) * d + off;
                for (int j = 0; j < L; ++j) {
                    if (arow[j] != T(0)) {
                        axpy(crow, arow[j], lc.v.data() + static_cast<size_t>(j) * d + off, dh);
                    }
                }
            }
        }

        std::vector<T> attn_out;
        linear_forward(lc.ctx, lp.wo, lp.bo, L, attn_out);
        if (fc.train) dropout_forward(attn_out, lc.out_keep, cfg.dropout, drop_rng);
        lc.x1.resize(static_cast<size_t>(L) * d);
        for (size_t i = 0; i < lc.x1.size(); ++i) lc.x1[i] = (*x)[i] + attn_out[i];

        layer_norm_forward(lc.x1, lp.ln2_g, lp.ln2_b, L, d, lc.ln2_out, lc.ln2_mean,
                           lc.ln2_rstd);
        linear_forward(lc.ln2_out, lp.w1, lp.b1, L, lc.ff_pre);
        lc.ff_act.resize(lc.ff_pre.size());
        for (size_t i = 0; i < lc.ff_pre.size(); ++i) lc.ff_act[i] = gelu(lc.ff_pre[i]);
        std::vector<T> ff_out;
        linear_forward(lc.ff_act, lp.w2, lp.b2, L, ff_out);
        if (fc.train) dropout_forward(ff_out, lc.ff_keep, cfg.dropout, drop_rng);
        lc.x2.resize(static_cast<size_t>(L) * d);
        for (size_t i = 0; i < lc.x2.size(); ++i) lc.x2[i] = lc.x1[i] + ff_out[i];

        x = &lc.x2;
    }
    return fc;
}

/// Batch wrapper over forward_example; per-example dropout streams derive
/// from (dropout_seed, example index) so results are schedule-independent.
template <class T>
std::vector<ForwardCache<T>> forward_encoder(const std::vector<pipe::TokenSeq>& batch,
                                             const Params<T>& params, const ModelConfig& cfg,
                                             bool train = false, uint64_t dropout_seed = 0) {
    std::vector<ForwardCache<T>> out;
    out.reserve(batch.size());
    for (size_t i = 0; i < batch.size(); ++i) {
        out.push_back(forward_example(batch[i], params, cfg, train,
                                      mix_seed(dropout_seed, i)));
    }
    return out;
}

/// Mean cross-entropy over positions whose target is not kIgnoreTarget.
template <class T>
T mlm_loss(const ForwardCache<T>& fc, const std::vector<int32_t>& targets,
           const Params<T>& params, const ModelConfig& cfg) {
    using namespace detail;
    const int d = cfg.d_model;
    const int V = cfg.vocab_size;
    std::vector<T> logits(V);
    T sum = 0;
    int count = 0;
    const auto& hidden = fc.hidden();
    for (int p = 0; p < fc.L; ++p) {
        const int32_t tgt = p < static_cast<int>(targets.size()) ? targets[p] : pipe::kIgnoreTarget;
        if (tgt == pipe::kIgnoreTarget) continue;
        if (tgt < 0 || tgt >= V) throw std::invalid_argument("mlm_loss: target id out of range");
        const T* h = hidden.data() + static_cast<size_t>(p) * d;
        T mx = -std::numeric_limits<T>::infinity();
        for (int v = 0; v < V; ++v) {
            logits[v] = dot(params.tok_emb.row(v), h, d) + params.mlm_bias[v];
            if (logits[v] > mx) mx = logits[v];
        }
        T lse = 0;
        for (int v = 0; v < V; ++v) lse += std::exp(logits[v] - mx);
        lse = mx + std::log(lse);
        sum += lse - logits[tgt];
        ++count;
    }
    if (count == 0) throw std::invalid_argument("mlm_loss: no unmasked targets");
    return sum / static_cast<T>(count);
}

/// Mean-pools non-pad hidden states and applies the sigmoid head.
template <class T>
T pool_and_classify(const ForwardCache<T>& fc, const Params<T>& params,
                    const ModelConfig& cfg) {
    using namespace detail;
    const int d = cfg.d_model;
    if (fc.real_len == 0) throw std::invalid_argument("pool_and_classify: all-pad sequence");
    std::vector<T> pooled(d, T(0));
    const auto& hidden = fc.hidden();
    int n = 0;
    for (int p = 0; p < fc.L; ++p) {
        if (!fc.attn_mask[p]) continue;
        axpy(pooled.data(), T(1), hidden.data() + static_cast<size_t>(p) * d, d);
        ++n;
    }
    const T inv = T(1) / static_cast<T>(n);
    for (auto& x : pooled) x *= inv;
    const T z = dot(params.cls_w.data(), pooled.data(), d) + params.cls_b[0];
    return T(1) / (T(1) + std::exp(-z));
}

enum class Objective { Mlm, Bce };

/// One training example; `targets` drives the MLM objective, `label` the
/// binary head. `weight` rescales a BCE example's share of the batch mean
/// (class-imbalance weighting); MLM ignores it.
struct Example {
    pipe::TokenSeq tokens;
    std::vector<int32_t> targets;
    float label = 0.0f;
    float weight = 1.0f;
};

namespace detail {

/// Backward through the encoder given d(hidden); accumulates into `grads`.
template <class T>
void backward_example(const ForwardCache<T>& fc, const Params<T>& params,
                      const ModelConfig& cfg, std::vector<T>& d_hidden, Params<T>& grads) {
    const int L = fc.L;
    const int d = cfg.d_model;
    const int H = cfg.n_heads;
    const int dh = d / H;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));

    std::vector<T> dx = std::move(d_hidden);
    for (int li = cfg.n_layers - 1; li >= 0; --li) {
        const auto& lc = fc.layers[li];
        const auto& lp = params.layers[li];
        auto& lg = grads.layers[li];
        const std::vector<T>& x_in = li == 0 ? fc.emb : fc.layers[li - 1].x2;

        // x2 = x1 + dropout(ff_act * w2 + b2)
        std::vector<T> dt2 = dx;
        if (fc.train) dropout_backward(dt2, lc.ff_keep, cfg.dropout);
        std::vector<T> dff_act(static_cast<size_t>(L) * cfg.d_ff, T(0));
        linear_backward(lc.ff_act, lp.w2, dt2, L, lg.w2, lg.b2, &dff_act);
        for (size_t i = 0; i < dff_act.size(); ++i) dff_act[i] *= gelu_grad(lc.ff_pre[i]);
        std::vector<T> dln2(static_cast<size_t>(L) * d, T(0));
        linear_backward(lc.ln2_out, lp.w1, dff_act, L, lg.w1, lg.b1, &dln2);
        // dx currently also carries the residual path into x1
        layer_norm_backward(lc.x1, lp.ln2_g, lc.ln2_mean, lc.ln2_rstd, dln2, L, d, dx,
                            lg.ln2_g, lg.ln2_b);

        // x1 = x_in + dropout(ctx * wo + bo)
        std::vector<T> dt = dx;
        if (fc.train) dropout_backward(dt, lc.out_keep, cfg.dropout);
        std::vector<T> dctx(static_cast<size_t>(L) * d, T(0));
        linear_backward(lc.ctx, lp.wo, dt, L, lg.wo, lg.bo, &dctx);

        std::vector<T> dq(static_cast<size_t>(L) * d, T(0));
        std::vector<T> dk(static_cast<size_t>(L) * d, T(0));
        std::vector<T> dv(static_cast<size_t>(L) * d, T(0));
        const T drop_scale = fc.train ? T(1.0 / (1.0 - cfg.dropout)) : T(1);
        std::vector<T> dattn(L);
        for (int h = 0; h < H; ++h) {
            const int off = h * dh;
            for (int i = 0; i < L; ++i) {
                const T* arow = lc.attn.data() + (static_cast<size_t>(h) * L + i) * L;
                const T* dctx_row = dctx.data() + static_cast<size_t>(i) * d + off;
                // through dropout(attn) * V
                for (int j = 0; j < L; ++j) {
                    T keep = T(1);
                    if (fc.train) {
                        keep = lc.attn_keep[(static_cast<size_t>(h) * L + i) * L + j]
                                   ? drop_scale
                                   : T(0);
                    }
                    dattn[j] =
                        keep == T(0)
                            ? T(0)
                            : dot(dctx_row, lc.v.data() + static_cast<size_t>(j) * d + off, dh) *
                                  keep;
                    const T a_eff = fc.train ? arow[j] * keep : arow[j];
                    if (a_eff != T(0)) {
                        axpy(dv.data() + static_cast<size_t>(j) * d + off, a_eff, dctx_row, dh);
                    }
                }
                // softmax backward on pre-dropout probabilities
                T sum = 0;
                for (int j = 0; j < L; ++j) sum += dattn[j] * arow[j];
                const T* qi = lc.q.data() + static_cast<size_t>(i) * d + off;
                T* dqi = dq.data() + static_cast<size_t>(i) * d + off;
                for (int j = 0; j < L; ++j) {
                    const T ds = arow[j] * (dattn[j] - sum) * scale;
                    if (ds == T(0)) continue;
                    axpy(dqi, ds, lc.k.data() + static_cast<size_t>(j) * d + off, dh);
                    axpy(dk.data() + static_cast<size_t>(j) * d + off, ds, qi, dh);
                }
            }
        }

        std::vector<T> dln1(static_cast<size_t>(L) * d, T(0));
        linear_backward(lc.ln1_out, lp.wq, dq, L, lg.wq, lg.bq, &dln1);
        linear_backward(lc.ln1_out, lp.wk, dk, L, lg.wk, lg.bk, &dln1);
        linear_backward(lc.ln1_out, lp.wv, dv, L, lg.wv, lg.bv, &dln1);
        layer_norm_backward(x_in, lp.ln1_g, lc.ln1_mean, lc.ln1_rstd, dln1, L, d, dx,
                            lg.ln1_g, lg.ln1_b);
    }

    if (fc.train) dropout_backward(dx, fc.emb_keep, cfg.dropout);
    for (int p = 0; p < L; ++p) {
        const T* dp = dx.data() + static_cast<size_t>(p) * d;
        axpy(grads.tok_emb.row(fc.ids[p]), T(1), dp, d);
        axpy(grads.pos_emb.row(p), T(1), dp, d);
    }
}

/// Loss sum and gradient of the un-normalized objective for one example.
/// MLM: sum of CE over targets, weight = target count. BCE: single term,
/// weight = 1. Gradients accumulate into `grads` if non-null.
template <class T>
std::pair<T, int> example_loss_grads(const Example& ex, const Params<T>& params,
                                     const ModelConfig& cfg, Objective obj, bool train,
                                     uint64_t dropout_seed, int crop_len, Params<T>* grads) {
    const int d = cfg.d_model;
    const int V = cfg.vocab_size;
    ForwardCache<T> fc =
        forward_example(ex.tokens, params, cfg, train, dropout_seed, crop_len);
    const auto& hidden = fc.hidden();
    std::vector<T> d_hidden(static_cast<size_t>(fc.L) * d, T(0));
    T loss_sum = 0;
    int weight = 0;

    if (obj == Objective::Mlm) {
        std::vector<T> logits(V), probs(V);
        for (int p = 0; p < fc.L; ++p) {
            const int32_t tgt =
                p < static_cast<int>(ex.targets.size()) ? ex.targets[p] : pipe::kIgnoreTarget;
            if (tgt == pipe::kIgnoreTarget) continue;
            const T* h = hidden.data() + static_cast<size_t>(p) * d;
            T mx = -std::numeric_limits<T>::infinity();
            for (int v = 0; v < V; ++v) {
                logits[v] = dot(params.tok_emb.row(v), h, d) + params.mlm_bias[v];
                if (logits[v] > mx) mx = logits[v];
            }
            T denom = 0;
            for (int v = 0; v < V; ++v) {
                probs[v] = std::exp(logits[v] - mx);
                denom += probs[v];
            }
            const T inv = T(1) / denom;
            for (int v = 0; v < V; ++v) probs[v] *= inv;
            loss_sum += mx + std::log(denom) - logits[tgt];
            ++weight;
            if (grads) {
                T* dh = d_hidden.data() + static_cast<size_t>(p) * d;
                for (int v = 0; v < V; ++v) {
                    const T dl = probs[v] - (v == tgt ? T(1) : T(0));
                    grads->mlm_bias[v] += dl;
                    axpy(dh, dl, params.tok_emb.row(v), d);
                    axpy(grads->tok_emb.row(v), dl, h, d);
                }
            }
        }
        if (weight == 0) throw std::invalid_argument("loss_and_grads: example has no MLM targets");
    } else {
        if (fc.real_len == 0) throw std::invalid_argument("loss_and_grads: all-pad example");
        std::vector<T> pooled(d, T(0));
        int n = 0;
        for (int p = 0; p < fc.L; ++p) {
            if (!fc.attn_mask[p]) continue;
            axpy(pooled.data(), T(1), hidden.data() + static_cast<size_t>(p) * d, d);
            ++n;
        }
        const T inv = T(1) / static_cast<T>(n);
        for (auto& v : pooled) v *= inv;
        const T z = dot(params.cls_w.data(), pooled.data(), d) + params.cls_b[0];
        const T y = static_cast<T>(ex.label);
        // numerically stable BCE on the logit
        loss_sum = std::max(z, T(0)) - z * y + std::log1p(std::exp(-std::abs(z)));
        weight = 1;
        if (grads) {
            const T p_hat = T(1) / (T(1) + std::exp(-z));
            const T dz = p_hat - y;
            grads->cls_b[0] += dz;
            axpy(grads->cls_w.data(), dz, pooled.data(), d);
            for (int p = 0; p < fc.L; ++p) {
                if (!fc.attn_mask[p]) continue;
                axpy(d_hidden.data() + static_cast<size_t>(p) * d, dz * inv,
                     params.cls_w.data(), d);
            }
        }
    }

    if (grads) backward_example(fc, params, cfg, d_hidden, *grads);
    return {loss_sum, weight};
}

}  // namespace detail

/// Batch loss and analytic gradients. Per-example gradients are reduced in
/// example order whatever `n_threads` is, so thread count never changes the
/// result. MLM loss is the mean over all target positions in the batch; BCE
/// is the mean over examples.
template <class T>
T loss_and_grads(const std::vector<Example>& batch, const Params<T>& params,
                 const ModelConfig& cfg, Objective obj, Params<T>* grads,
                 bool train = false, uint64_t dropout_seed = 0, int n_threads = 1) {
    if (batch.empty()) throw std::invalid_argument("loss_and_grads: empty batch");
    cfg.validate();

    int crop_len = 1;
    for (const auto& ex : batch) {
        if (static_cast<int>(ex.tokens.ids.size()) != cfg.seq_len) {
            throw std::invalid_argument("loss_and_grads: window length != config seq_len");
        }
        crop_len = std::max(crop_len, ex.tokens.real_len);
    }

    const size_t n = batch.size();
    std::vector<T> losses(n, T(0));
    std::vector<int> weights(n, 0);

    if (grads) grads->zero();

    // One worker body for any thread count so the machine code (and with it
    // any floating-point contraction choices) is identical; per-example
    // buffers reduce in example order afterwards.
    std::vector<Params<T>> bufs;
    if (grads) {
        bufs.reserve(n);
        for (size_t i = 0; i < n; ++i) {
            bufs.emplace_back(cfg);
            bufs.back().zero();  // Params(cfg) carries identity layer norms
        }
    }
    std::atomic<size_t> cursor{0};
    std::vector<std::exception_ptr> errors(n);
    auto worker = [&]() {
        while (true) {
            const size_t i = cursor.fetch_add(1);
            if (i >= n) return;
            try {
                auto [ls, w] = detail::example_loss_grads(batch[i], params, cfg, obj, train,
                                                          mix_seed(dropout_seed, i), crop_len,
                                                          grads ? &bufs[i] : nullptr);
                losses[i] = ls;
                weights[i] = w;
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const int nt = static_cast<int>(std::min<size_t>(std::max(n_threads, 1), n));
    if (nt <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < nt; ++t) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }

    // MLM averages over all target positions in the batch; BCE is a weighted
    // mean over examples (weights default to 1).
    T total_weight = 0;
    for (size_t i = 0; i < n; ++i) {
        total_weight += obj == Objective::Mlm ? static_cast<T>(weights[i])
                                              : static_cast<T>(batch[i].weight);
    }
    T loss = 0;
    for (size_t i = 0; i < n; ++i) {
        loss += obj == Objective::Mlm ? losses[i]
                                      : losses[i] * static_cast<T>(batch[i].weight);
    }
    loss /= total_weight;
    if (grads) {
        const T inv = T(1) / total_weight;
        for (size_t i = 0; i < n; ++i) {
            grads->add_scaled(bufs[i], obj == Objective::Mlm
                                           ? T(1)
                                           : static_cast<T>(batch[i].weight));
        }
        for (auto& ref : grads->array_refs()) {
            for (auto& g : *ref.data) g *= inv;
        }
    }
    if (!std::isfinite(static_cast<double>(loss))) {
        throw std::runtime_error("loss_and_grads: non-finite loss " +
                                 std::to_string(static_cast<double>(loss)));
    }
    return loss;
}

struct AdamHyper {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <class T>
struct AdamState {
    Params<T> m, v;
    int64_t t = 0;

    explicit AdamState(const ModelConfig& cfg) : m(cfg), v(cfg) {
        m.zero();  // Params(cfg) carries identity layer norms
        v.zero();
    }
};

/// Standard bias-corrected Adam update.
template <class T>
void adam_step(Params<T>& params, Params<T>& grads, AdamState<T>& st, const AdamHyper& h) {
    st.t += 1;
    const T c1 = T(1.0 - std::pow(h.beta1, static_cast<double>(st.t)));
    const T c2 = T(1.0 - std::pow(h.beta2, static_cast<double>(st.t)));
    auto pr = params.array_refs();
    auto gr = grads.array_refs();
    auto mr = st.m.array_refs();
    auto vr = st.v.array_refs();
    const T b1 = T(h.beta1), b2 = T(h.beta2), lr = T(h.lr), eps = T(h.eps);
    for (size_t a = 0; a < pr.size(); ++a) {
        auto& p = *pr[a].data;
        const auto& g = *gr[a].data;
        auto& m = *mr[a].data;
        auto& v = *vr[a].data;
        for (size_t i = 0; i < p.size(); ++i) {
            m[i] = b1 * m[i] + (T(1) - b1) * g[i];
            v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
            const T mhat = m[i] / c1;
            const T vhat = v[i] / c2;
            p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

/// Serialized model state: manifest JSON (config, vocab, arrays) followed by
/// raw little-endian float32 arrays in manifest order.
struct Checkpoint {
    ModelConfig config;
    uint64_t seed = 0;
    int64_t step = 0;
    pipe::Vocabulary vocab;
    Params<float> params;
};

void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace ehrseq::model
