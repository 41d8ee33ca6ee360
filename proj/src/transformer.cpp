#include "periloom/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "kernels.hpp"
#include "periloom/error.hpp"
#include "periloom/random.hpp"

namespace periloom::transformer {

using kernels::add_colsum;
using kernels::fill_bias;
using kernels::gemm_nn;
using kernels::gemm_tn;
using kernels::transpose;

const char* to_string(Variant v) { return v == Variant::Encoder ? "encoder" : "decoder"; }

Variant variant_from_string(const std::string& s) {
    if (s == "encoder") return Variant::Encoder;
    if (s == "decoder") return Variant::Decoder;
    throw ValidationError("variant", "expected 'encoder' or 'decoder', got '" + s + "'");
}

// ---------------------------------------------------------------------------
// Config

void ArchConfig::validate() const {
    if (layers < 1) throw ValidationError("arch.layers", "must be >= 1");
    if (d_model < 1) throw ValidationError("arch.d_model", "must be >= 1");
    if (heads < 1) throw ValidationError("arch.heads", "must be >= 1");
    if (d_model % heads != 0)
        throw ValidationError("arch.heads", "d_model " + std::to_string(d_model) + " is not divisible by " +
                                                std::to_string(heads) + " heads");
    if (d_ff < 1) throw ValidationError("arch.d_ff", "must be >= 1");
    if (max_len < 3) throw ValidationError("arch.max_len", "must be >= 3");
    if (vocab_size <= text::kNumSpecials) throw ValidationError("arch.vocab_size", "must exceed the special tokens");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("arch.dropout", "must be in [0,1)");
    if (!(init_std > 0.0)) throw ValidationError("arch.init_std", "must be > 0");
    if (nsp && variant != Variant::Encoder) throw ValidationError("arch.nsp", "next-sentence head is encoder-only");
}

std::size_t ArchConfig::param_count() const {
    const std::size_t d = d_model, V = vocab_size, L = max_len, ff = d_ff;
    const std::size_t per_layer = 2 * d + 4 * (d * d + d) + 2 * d + (d * ff + ff) + (ff * d + d);
    std::size_t n = V * d + L * d + layers * per_layer + 2 * d + V;
    if (!tie_embeddings) n += V * d;
    if (nsp) n += 2 * d + 2;
    return n;
}

nlohmann::ordered_json ArchConfig::to_json() const {
    nlohmann::ordered_json j;
    j["variant"] = to_string(variant);
    j["layers"] = layers;
    j["d_model"] = d_model;
    j["heads"] = heads;
    j["d_ff"] = d_ff;
    j["max_len"] = max_len;
    j["vocab_size"] = vocab_size;
    j["dropout"] = dropout;
    j["init_std"] = init_std;
    j["nsp"] = nsp;
    j["tie_embeddings"] = tie_embeddings;
    j["seed"] = seed;
    return j;
}

ArchConfig ArchConfig::from_json(const nlohmann::json& j) {
    ArchConfig a;
    try {
        if (j.contains("variant")) a.variant = variant_from_string(j["variant"].get<std::string>());
        a.layers = j.value("layers", a.layers);
        a.d_model = j.value("d_model", a.d_model);
        a.heads = j.value("heads", a.heads);
        a.d_ff = j.value("d_ff", a.d_ff);
        a.max_len = j.value("max_len", a.max_len);
        a.vocab_size = j.value("vocab_size", a.vocab_size);
        a.dropout = j.value("dropout", a.dropout);
        a.init_std = j.value("init_std", a.init_std);
        a.nsp = j.value("nsp", a.nsp);
        a.tie_embeddings = j.value("tie_embeddings", a.tie_embeddings);
        a.seed = j.value("seed", a.seed);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("arch", e.what());
    }
    return a;
}

nn::ParamSet<double> make_layout(const ArchConfig& a) {
    a.validate();
    const int d = a.d_model, V = a.vocab_size;
    nn::ParamSet<double> p;
    p.add("tok_emb", {V, d}, true);
    p.add("pos_emb", {a.max_len, d}, true);
    for (int l = 0; l < a.layers; ++l) {
        const std::string pre = "layer" + std::to_string(l) + ".";
        p.add(pre + "ln1_g", {d}, false);
        p.add(pre + "ln1_b", {d}, false);
        for (const char* w : {"q", "k", "v", "o"}) {
            p.add(pre + "w" + w, {d, d}, true);
            p.add(pre + "b" + w, {d}, false);
        }
        p.add(pre + "ln2_g", {d}, false);
        p.add(pre + "ln2_b", {d}, false);
        p.add(pre + "w1", {d, a.d_ff}, true);
        p.add(pre + "b1", {a.d_ff}, false);
        p.add(pre + "w2", {a.d_ff, d}, true);
        p.add(pre + "b2", {d}, false);
    }
    p.add("lnf_g", {d}, false);
    p.add("lnf_b", {d}, false);
    p.add("lm_bias", {V}, false);
    if (!a.tie_embeddings) p.add("lm_out", {V, d}, true);
    if (a.nsp) {
        p.add("nsp_w", {d, 2}, true);
        p.add("nsp_b", {2}, false);
    }
    return p;
}

template <class T>
Model<T> init_params(const ArchConfig& arch) {
    auto layout = make_layout(arch);
    Model<T> m{arch, layout.template cast<T>()};
    Rng rng(mix_seed(arch.seed, {0x1417}));
    for (std::size_t i = 0; i < m.params.specs.size(); ++i) {
        const auto& s = m.params.specs[i];
        auto v = m.params.view(i);
        const bool is_gain = s.name.ends_with("_g");
        if (is_gain)
            std::fill(v.begin(), v.end(), T(1));
        else if (s.decay)
            for (auto& x : v) x = static_cast<T>(rng.normal(0.0, arch.init_std));
    }
    return m;
}

// ---------------------------------------------------------------------------
// Batches

std::size_t Batch::total_tokens() const {
    std::size_t n = 0;
    for (const auto& s : ids) n += s.size();
    return n;
}

Batch make_batch(std::span<const text::TokenSeq> seqs) {
    Batch b;
    for (const auto& s : seqs) b.ids.push_back(s.active());
    return b;
}

Batch make_mlm_batch(std::span<const text::MaskedSeq> seqs) {
    Batch b;
    for (const auto& s : seqs) {
        b.ids.push_back(s.input.active());
        b.targets.emplace_back(s.targets.begin(), s.targets.begin() + s.input.length);
    }
    return b;
}

Batch make_lm_batch(std::span<const text::TokenSeq> seqs) {
    Batch b;
    for (const auto& s : seqs) {
        auto ids = s.active();
        std::vector<int> tg(ids.size(), -1);
        for (std::size_t i = 0; i + 1 < ids.size(); ++i) tg[i] = ids[i + 1];
        b.ids.push_back(std::move(ids));
        b.targets.push_back(std::move(tg));
    }
    return b;
}

// ---------------------------------------------------------------------------
// Building blocks

namespace {

// Tiny epsilon keeps normalized outputs at unit variance even for the
// near-zero activations of a freshly initialized model.
constexpr double kLnEps = 1e-12;

template <class T>
void layer_norm(std::size_t rows, std::size_t d, const T* x, const T* g, const T* b, T* xhat, T* rstd, T* y) {
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x + r * d;
        T mean = 0;
        for (std::size_t j = 0; j < d; ++j) mean += xr[j];
        mean /= static_cast<T>(d);
        T var = 0;
        for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
        var /= static_cast<T>(d);
        const T rs = T(1) / std::sqrt(var + static_cast<T>(kLnEps));
        rstd[r] = rs;
        for (std::size_t j = 0; j < d; ++j) {
            const T xh = (xr[j] - mean) * rs;
            xhat[r * d + j] = xh;
            y[r * d + j] = g[j] * xh + b[j];
        }
    }
}

/// dx += LN backward; dg/db accumulate.
template <class T>
void layer_norm_backward(std::size_t rows, std::size_t d, const T* dy, const T* xhat, const T* rstd, const T* g,
                         T* dx, T* dg, T* db) {
    std::vector<T> dxh(d);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* dyr = dy + r * d;
        const T* xh = xhat + r * d;
        T mean_dxh = 0, mean_dxh_xh = 0;
        for (std::size_t j = 0; j < d; ++j) {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            dxh[j] = dyr[j] * g[j];
            mean_dxh += dxh[j];
            mean_dxh_xh += dxh[j] * xh[j];
        }
        mean_dxh /= static_cast<T>(d);
        mean_dxh_xh /= static_cast<T>(d);
        for (std::size_t j = 0; j < d; ++j) dx[r * d + j] += rstd[r] * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
    }
}

template <class T>
T gelu(T u) {
    const T c = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
    return T(0.5) * u * (T(1) + std::tanh(c * (u + T(0.044715) * u * u * u)));
}

template <class T>
T gelu_grad(T u) {
    const T c = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
    const T t = std::tanh(c * (u + T(0.044715) * u * u * u));
    return T(0.5) * (T(1) + t) + T(0.5) * u * (T(1) - t * t) * c * (T(1) + T(3) * T(0.044715) * u * u);
}

/// Fills `mask` with 0 or 1/keep per element, one RNG stream per sequence.
template <class T>
void draw_dropout(std::vector<Rng>& rngs, const std::vector<std::size_t>& offsets, std::size_t width, double p,
                  std::vector<T>& mask) {
    mask.assign(offsets.back() * width, T(0));
    const T scale = static_cast<T>(1.0 / (1.0 - p));
    for (std::size_t s = 0; s + 1 < offsets.size(); ++s)
        for (std::size_t i = offsets[s] * width; i < offsets[s + 1] * width; ++i)
            mask[i] = rngs[s].uniform() < p ? T(0) : scale;
}

template <class T>
const T* lm_weight(const Model<T>& m) {
    return m.arch.tie_embeddings ? m.params.ptr("tok_emb") : m.params.ptr("lm_out");
}

template <class T>
T* lm_weight_grad(const Model<T>& m, nn::ParamSet<T>& g) {
    return m.arch.tie_embeddings ? g.ptr("tok_emb") : g.ptr("lm_out");
}

/// logits[n x V] = bias + H[n x d] * W^T where W is [V x d].
template <class T>
std::vector<T> project_vocab(const Model<T>& m, const T* H, std::size_t n) {
    const std::size_t d = m.arch.d_model, V = m.arch.vocab_size;
    const auto WT = transpose(lm_weight(m), V, d);
    std::vector<T> logits(n * V);
    fill_bias(n, V, m.params.ptr("lm_bias"), logits.data());
    gemm_nn(n, d, V, H, WT.data(), logits.data());
    return logits;
}

}  // namespace

// ---------------------------------------------------------------------------
// Forward

template <class T>
ForwardResult<T> forward(const Model<T>& model, const Batch& batch, RunMode mode) {
    const auto& a = model.arch;
    const auto& P = model.params;
    const std::size_t d = a.d_model, H = a.heads, dh = d / H, ff = a.d_ff;
    const bool causal = a.variant == Variant::Decoder;
    const bool dropout = mode.train && a.dropout > 0.0;

    ForwardResult<T> f;
    f.offsets.assign(1, 0);
    f.attn_offsets.assign(1, 0);
    for (const auto& s : batch.ids) {
        if (s.empty()) throw DataError("forward: empty sequence");
        if (s.size() > static_cast<std::size_t>(a.max_len))
            throw DataError("forward: sequence length " + std::to_string(s.size()) + " exceeds max_len " +
                            std::to_string(a.max_len));
        for (int id : s)
            if (id < 0 || id >= a.vocab_size) throw DataError("forward: token id out of range");
        f.offsets.push_back(f.offsets.back() + s.size());
        f.attn_offsets.push_back(f.attn_offsets.back() + H * s.size() * s.size());
    }
    const std::size_t R = f.rows();

    std::vector<Rng> rngs;
    if (dropout)
        for (std::size_t s = 0; s < batch.size(); ++s) rngs.emplace_back(mix_seed(mode.dropout_seed, {s}));

    std::vector<T> x(R * d);
    {
        const T* E = P.ptr("tok_emb");
        const T* Pos = P.ptr("pos_emb");
        for (std::size_t s = 0; s < batch.size(); ++s)
            for (std::size_t p = 0; p < batch.ids[s].size(); ++p) {
                const std::size_t r = f.offsets[s] + p;
                const T* e = E + static_cast<std::size_t>(batch.ids[s][p]) * d;
                const T* pe = Pos + p * d;
                for (std::size_t j = 0; j < d; ++j) x[r * d + j] = e[j] + pe[j];
            }
        if (dropout) {
            draw_dropout(rngs, f.offsets, d, a.dropout, f.drop0);
            for (std::size_t i = 0; i < x.size(); ++i) x[i] *= f.drop0[i];
        }
    }

    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    f.layers.resize(static_cast<std::size_t>(a.layers));
    for (int l = 0; l < a.layers; ++l) {
        const std::string pre = "layer" + std::to_string(l) + ".";
        auto& c = f.layers[static_cast<std::size_t>(l)];
        c.x_in = x;
        c.xhat1.resize(R * d);
        c.rstd1.resize(R);
        c.a1.resize(R * d);
        layer_norm(R, d, x.data(), P.ptr(pre + "ln1_g"), P.ptr(pre + "ln1_b"), c.xhat1.data(), c.rstd1.data(),
                   c.a1.data());

        auto project = [&](const char* w, const char* b, std::vector<T>& out) {
            out.resize(R * d);
            fill_bias(R, d, P.ptr(pre + b), out.data());
            gemm_nn(R, d, d, c.a1.data(), P.ptr(pre + w), out.data());
        };
        project("wq", "bq", c.q);
        project("wk", "bk", c.k);
        project("wv", "bv", c.v);

        c.probs.assign(f.attn_offsets.back(), T(0));
        c.ctx.assign(R * d, T(0));
        std::vector<T> row;
        for (std::size_t s = 0; s < batch.size(); ++s) {
            const std::size_t n = batch.ids[s].size(), r0 = f.offsets[s];
            for (std::size_t h = 0; h < H; ++h) {
                T* Pm = c.probs.data() + f.attn_offsets[s] + h * n * n;
                for (std::size_t i = 0; i < n; ++i) {
                    const std::size_t jend = causal ? i + 1 : n;
                    const T* qi = c.q.data() + (r0 + i) * d + h * dh;
                    row.assign(jend, T(0));
                    T mx = -std::numeric_limits<T>::infinity();
                    for (std::size_t j = 0; j < jend; ++j) {
                        const T* kj = c.k.data() + (r0 + j) * d + h * dh;
                        T dot = 0;
                        for (std::size_t e = 0; e < dh; ++e) dot += qi[e] * kj[e];
                        row[j] = dot * scale;
                        mx = std::max(mx, row[j]);
                    }
                    T sum = 0;
                    for (std::size_t j = 0; j < jend; ++j) {
                        row[j] = std::exp(row[j] - mx);
                        sum += row[j];
                    }
                    T* ci = c.ctx.data() + (r0 + i) * d + h * dh;
                    for (std::size_t j = 0; j < jend; ++j) {
                        const T pij = row[j] / sum;
                        Pm[i * n + j] = pij;
                        const T* vj = c.v.data() + (r0 + j) * d + h * dh;
                        for (std::size_t e = 0; e < dh; ++e) ci[e] += pij * vj[e];
                    }
                }
            }
        }

        std::vector<T> o(R * d);
        fill_bias(R, d, P.ptr(pre + "bo"), o.data());
        gemm_nn(R, d, d, c.ctx.data(), P.ptr(pre + "wo"), o.data());
        if (dropout) {
            draw_dropout(rngs, f.offsets, d, a.dropout, c.drop1);
            for (std::size_t i = 0; i < o.size(); ++i) o[i] *= c.drop1[i];
        }
        c.x_mid.resize(R * d);
        for (std::size_t i = 0; i < R * d; ++i) c.x_mid[i] = c.x_in[i] + o[i];

        c.xhat2.resize(R * d);
        c.rstd2.resize(R);
        c.a2.resize(R * d);
        layer_norm(R, d, c.x_mid.data(), P.ptr(pre + "ln2_g"), P.ptr(pre + "ln2_b"), c.xhat2.data(),
                   c.rstd2.data(), c.a2.data());
        c.u.resize(R * ff);
        fill_bias(R, ff, P.ptr(pre + "b1"), c.u.data());
        gemm_nn(R, d, ff, c.a2.data(), P.ptr(pre + "w1"), c.u.data());
        c.g.resize(R * ff);
        for (std::size_t i = 0; i < R * ff; ++i) c.g[i] = gelu(c.u[i]);
        std::vector<T> fo(R * d);
        fill_bias(R, d, P.ptr(pre + "b2"), fo.data());
        gemm_nn(R, ff, d, c.g.data(), P.ptr(pre + "w2"), fo.data());
        if (dropout) {
            draw_dropout(rngs, f.offsets, d, a.dropout, c.drop2);
            for (std::size_t i = 0; i < fo.size(); ++i) fo[i] *= c.drop2[i];
        }
        for (std::size_t i = 0; i < R * d; ++i) x[i] = c.x_mid[i] + fo[i];
    }

    f.x_final = std::move(x);
    f.xhatf.resize(R * d);
    f.rstdf.resize(R);
    f.hidden.resize(R * d);
    layer_norm(R, d, f.x_final.data(), P.ptr("lnf_g"), P.ptr("lnf_b"), f.xhatf.data(), f.rstdf.data(),
               f.hidden.data());

    f.pooled.assign(batch.size() * d, T(0));
    for (std::size_t s = 0; s < batch.size(); ++s) {
        T* out = f.pooled.data() + s * d;
        if (causal) {
            const T* h = f.hidden.data() + (f.offsets[s + 1] - 1) * d;
            std::copy(h, h + d, out);
        } else {
            const std::size_t n = f.offsets[s + 1] - f.offsets[s];
            for (std::size_t r = f.offsets[s]; r < f.offsets[s + 1]; ++r)
                for (std::size_t j = 0; j < d; ++j) out[j] += f.hidden[r * d + j];
            for (std::size_t j = 0; j < d; ++j) out[j] /= static_cast<T>(n);
        }
    }
    return f;
}

template <class T>
std::vector<T> full_logits(const Model<T>& model, const ForwardResult<T>& fwd) {
    return project_vocab(model, fwd.hidden.data(), fwd.rows());
}

// ---------------------------------------------------------------------------
// Self-supervised loss

template <class T>
SelfLoss<T> self_loss(const Model<T>& model, const ForwardResult<T>& fwd, const Batch& batch) {
    const std::size_t d = model.arch.d_model, V = model.arch.vocab_size;
    SelfLoss<T> out;
    std::vector<int> tgt;
    for (std::size_t s = 0; s < batch.targets.size(); ++s)
        for (std::size_t p = 0; p < batch.targets[s].size(); ++p)
            if (batch.targets[s][p] >= 0) {
                out.rows.push_back(fwd.offsets[s] + p);
                tgt.push_back(batch.targets[s][p]);
            }
    if (model.arch.nsp)
        for (std::size_t s = 0; s < batch.nsp_labels.size(); ++s)
            if (batch.nsp_labels[s] >= 0) out.nsp_seqs.push_back(s);
    if (out.rows.empty() && out.nsp_seqs.empty()) throw DataError("self_loss: batch has no target positions");

    if (!out.rows.empty()) {
        const std::size_t n = out.rows.size();
        std::vector<T> Hs(n * d);
        for (std::size_t i = 0; i < n; ++i)
            std::copy_n(fwd.hidden.data() + out.rows[i] * d, d, Hs.data() + i * d);
        out.dlogits = project_vocab(model, Hs.data(), n);
        const T inv_n = T(1) / static_cast<T>(n);
        T total = 0;
        for (std::size_t i = 0; i < n; ++i) {
            T* z = out.dlogits.data() + i * V;
            const T mx = *std::max_element(z, z + V);
            T sum = 0;
            for (std::size_t j = 0; j < V; ++j) sum += std::exp(z[j] - mx);
            const T lse = mx + std::log(sum);
            total += lse - z[static_cast<std::size_t>(tgt[i])];
            for (std::size_t j = 0; j < V; ++j) z[j] = std::exp(z[j] - lse) * inv_n;
            z[static_cast<std::size_t>(tgt[i])] -= inv_n;
        }
        out.lm_value = total * inv_n;
    }

    if (!out.nsp_seqs.empty()) {
        const T* W = model.params.ptr("nsp_w");
        const T* b = model.params.ptr("nsp_b");
        const T inv_n = T(1) / static_cast<T>(out.nsp_seqs.size());
        T total = 0;
        out.dnsp.resize(out.nsp_seqs.size() * 2);
        for (std::size_t i = 0; i < out.nsp_seqs.size(); ++i) {
            const std::size_t s = out.nsp_seqs[i];
            const T* h = fwd.hidden.data() + fwd.offsets[s] * d;  // CLS row
            T z[2] = {b[0], b[1]};
            for (std::size_t j = 0; j < d; ++j) {
                z[0] += h[j] * W[j * 2];
                z[1] += h[j] * W[j * 2 + 1];
            }
            const T mx = std::max(z[0], z[1]);
            const T lse = mx + std::log(std::exp(z[0] - mx) + std::exp(z[1] - mx));
            const int y = batch.nsp_labels[s];
            total += lse - z[y];
            for (int c = 0; c < 2; ++c) out.dnsp[i * 2 + c] = (std::exp(z[c] - lse) - (c == y ? T(1) : T(0))) * inv_n;
        }
        out.nsp_value = total * inv_n;
    }
    out.value = out.lm_value + out.nsp_value;
    return out;
}

// ---------------------------------------------------------------------------
// Backward

template <class T>
void backward(const Model<T>& model, const ForwardResult<T>& f, const Batch& batch, const SelfLoss<T>* self,
              std::span<const T> dpooled, nn::ParamSet<T>& G) {
    const auto& a = model.arch;
    const auto& P = model.params;
    const std::size_t d = a.d_model, H = a.heads, dh = d / H, ff = a.d_ff, V = a.vocab_size;
    const std::size_t R = f.rows();
    const bool causal = a.variant == Variant::Decoder;

    std::vector<T> dh_final(R * d, T(0));

    if (self && !self->rows.empty()) {
        const std::size_t n = self->rows.size();
        std::vector<T> dHs(n * d, T(0));
        gemm_nn(n, V, d, self->dlogits.data(), lm_weight(model), dHs.data());
        std::vector<T> Hs(n * d);
        for (std::size_t i = 0; i < n; ++i) std::copy_n(f.hidden.data() + self->rows[i] * d, d, Hs.data() + i * d);
        gemm_tn(n, V, d, self->dlogits.data(), Hs.data(), lm_weight_grad(model, G));
        add_colsum(n, V, self->dlogits.data(), G.ptr("lm_bias"));
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) dh_final[self->rows[i] * d + j] += dHs[i * d + j];
    }
    if (self && !self->nsp_seqs.empty()) {
        const T* W = P.ptr("nsp_w");
        T* dW = G.ptr("nsp_w");
        T* db = G.ptr("nsp_b");
        for (std::size_t i = 0; i < self->nsp_seqs.size(); ++i) {
            const std::size_t r = f.offsets[self->nsp_seqs[i]];
            const T* h = f.hidden.data() + r * d;
            const T* dz = self->dnsp.data() + i * 2;
            for (std::size_t j = 0; j < d; ++j) {
                dW[j * 2] += h[j] * dz[0];
                dW[j * 2 + 1] += h[j] * dz[1];
                dh_final[r * d + j] += dz[0] * W[j * 2] + dz[1] * W[j * 2 + 1];
            }
            db[0] += dz[0];
            db[1] += dz[1];
        }
    }
    if (!dpooled.empty()) {
        if (dpooled.size() != f.seqs() * d) throw InvariantError("backward: dpooled has the wrong size");
        for (std::size_t s = 0; s < f.seqs(); ++s) {
            const T* dp = dpooled.data() + s * d;
            if (causal) {
                T* dst = dh_final.data() + (f.offsets[s + 1] - 1) * d;
                for (std::size_t j = 0; j < d; ++j) dst[j] += dp[j];
            } else {
                const T n = static_cast<T>(f.offsets[s + 1] - f.offsets[s]);
                for (std::size_t r = f.offsets[s]; r < f.offsets[s + 1]; ++r)
                    for (std::size_t j = 0; j < d; ++j) dh_final[r * d + j] += dp[j] / n;
            }
        }
    }

    std::vector<T> dx(R * d, T(0));
    layer_norm_backward(R, d, dh_final.data(), f.xhatf.data(), f.rstdf.data(), P.ptr("lnf_g"), dx.data(),
                        G.ptr("lnf_g"), G.ptr("lnf_b"));

    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    for (int l = a.layers - 1; l >= 0; --l) {
        const std::string pre = "layer" + std::to_string(l) + ".";
        const auto& c = f.layers[static_cast<std::size_t>(l)];

        // FFN sublayer: x_out = x_mid + drop(gelu(a2 W1 + b1) W2 + b2)
        std::vector<T> dfo = dx;
        if (!c.drop2.empty())
            for (std::size_t i = 0; i < dfo.size(); ++i) dfo[i] *= c.drop2[i];
        gemm_tn(R, ff, d, c.g.data(), dfo.data(), G.ptr(pre + "w2"));
        add_colsum(R, d, dfo.data(), G.ptr(pre + "b2"));
        std::vector<T> du(R * ff, T(0));
        {
            const auto W2T = transpose(P.ptr(pre + "w2"), ff, d);
            gemm_nn(R, d, ff, dfo.data(), W2T.data(), du.data());
        }
        for (std::size_t i = 0; i < R * ff; ++i) du[i] *= gelu_grad(c.u[i]);
        gemm_tn(R, d, ff, c.a2.data(), du.data(), G.ptr(pre + "w1"));
        add_colsum(R, ff, du.data(), G.ptr(pre + "b1"));
        std::vector<T> da2(R * d, T(0));
        {
            const auto W1T = transpose(P.ptr(pre + "w1"), d, ff);
            gemm_nn(R, ff, d, du.data(), W1T.data(), da2.data());
        }
        std::vector<T> dx_mid = dx;
        layer_norm_backward(R, d, da2.data(), c.xhat2.data(), c.rstd2.data(), P.ptr(pre + "ln2_g"), dx_mid.data(),
                            G.ptr(pre + "ln2_g"), G.ptr(pre + "ln2_b"));

        // Attention sublayer: x_mid = x_in + drop(attn(a1) Wo + bo)
        std::vector<T> dO = dx_mid;
        if (!c.drop1.empty())
            for (std::size_t i = 0; i < dO.size(); ++i) dO[i] *= c.drop1[i];
        gemm_tn(R, d, d, c.ctx.data(), dO.data(), G.ptr(pre + "wo"));
        add_colsum(R, d, dO.data(), G.ptr(pre + "bo"));
        std::vector<T> dctx(R * d, T(0));
        {
            const auto WoT = transpose(P.ptr(pre + "wo"), d, d);
            gemm_nn(R, d, d, dO.data(), WoT.data(), dctx.data());
        }

        std::vector<T> dq(R * d, T(0)), dk(R * d, T(0)), dv(R * d, T(0));
        std::vector<T> dP, dS;
        for (std::size_t s = 0; s < batch.size(); ++s) {
            const std::size_t n = batch.ids[s].size(), r0 = f.offsets[s];
            for (std::size_t h = 0; h < H; ++h) {
                const T* Pm = c.probs.data() + f.attn_offsets[s] + h * n * n;
                dP.assign(n * n, T(0));
                dS.assign(n * n, T(0));
                for (std::size_t i = 0; i < n; ++i) {
                    const std::size_t jend = causal ? i + 1 : n;
                    const T* dci = dctx.data() + (r0 + i) * d + h * dh;
                    T rowdot = 0;
                    for (std::size_t j = 0; j < jend; ++j) {
                        const T* vj = c.v.data() + (r0 + j) * d + h * dh;
                        T* dvj = dv.data() + (r0 + j) * d + h * dh;
                        const T pij = Pm[i * n + j];
                        T acc = 0;
                        for (std::size_t e = 0; e < dh; ++e) {
                            acc += dci[e] * vj[e];
                            dvj[e] += pij * dci[e];
                        }
                        dP[i * n + j] = acc;
                        rowdot += pij * acc;
                    }
                    for (std::size_t j = 0; j < jend; ++j) dS[i * n + j] = Pm[i * n + j] * (dP[i * n + j] - rowdot) * scale;
                    const T* qi = c.q.data() + (r0 + i) * d + h * dh;
                    T* dqi = dq.data() + (r0 + i) * d + h * dh;
                    for (std::size_t j = 0; j < jend; ++j) {
                        const T ds = dS[i * n + j];
                        const T* kj = c.k.data() + (r0 + j) * d + h * dh;
                        T* dkj = dk.data() + (r0 + j) * d + h * dh;
                        for (std::size_t e = 0; e < dh; ++e) {
                            dqi[e] += ds * kj[e];
                            dkj[e] += ds * qi[e];
                        }
                    }
                }
            }
        }

        std::vector<T> da1(R * d, T(0));
        auto back_proj = [&](const char* w, const char* b, const std::vector<T>& dy) {
            gemm_tn(R, d, d, c.a1.data(), dy.data(), G.ptr(pre + w));
            add_colsum(R, d, dy.data(), G.ptr(pre + b));
            const auto WT = transpose(P.ptr(pre + w), d, d);
            gemm_nn(R, d, d, dy.data(), WT.data(), da1.data());
        };
        back_proj("wq", "bq", dq);
        back_proj("wk", "bk", dk);
        back_proj("wv", "bv", dv);

        dx = std::move(dx_mid);
        layer_norm_backward(R, d, da1.data(), c.xhat1.data(), c.rstd1.data(), P.ptr(pre + "ln1_g"), dx.data(),
                            G.ptr(pre + "ln1_g"), G.ptr(pre + "ln1_b"));
    }

    if (!f.drop0.empty())
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= f.drop0[i];
    T* dE = G.ptr("tok_emb");
    T* dPos = G.ptr("pos_emb");
    for (std::size_t s = 0; s < batch.size(); ++s)
        for (std::size_t p = 0; p < batch.ids[s].size(); ++p) {
            const std::size_t r = f.offsets[s] + p;
            T* e = dE + static_cast<std::size_t>(batch.ids[s][p]) * d;
            T* pe = dPos + p * d;
            for (std::size_t j = 0; j < d; ++j) {
                e[j] += dx[r * d + j];
                pe[j] += dx[r * d + j];
            }
        }
}

// ---------------------------------------------------------------------------
// Embedding extraction

template <class T>
std::vector<T> extract_embeddings(const Model<T>& model, const text::Vocabulary& vocab,
                                  const std::vector<std::string>& texts, std::size_t batch_size) {
    const std::size_t d = model.arch.d_model;
    std::vector<T> out(texts.size() * d);
    for (std::size_t start = 0; start < texts.size(); start += batch_size) {
        const std::size_t end = std::min(texts.size(), start + batch_size);
        std::vector<text::TokenSeq> seqs;
        for (std::size_t i = start; i < end; ++i)
            seqs.push_back(text::encode(texts[i], vocab, model.arch.max_len, model.arch.style()));
        const auto fwd = forward(model, make_batch(seqs));
        std::copy(fwd.pooled.begin(), fwd.pooled.end(), out.begin() + static_cast<std::ptrdiff_t>(start * d));
    }
    return out;
}

template <class T>
std::vector<T> extract_embedding(const Model<T>& model, const text::Vocabulary& vocab, const std::string& text) {
    return extract_embeddings(model, vocab, {text}, 1);
}

#define PERILOOM_INSTANTIATE(T)                                                                                  \
    template Model<T> init_params<T>(const ArchConfig&);                                                         \
    template ForwardResult<T> forward<T>(const Model<T>&, const Batch&, RunMode);                                \
    template std::vector<T> full_logits<T>(const Model<T>&, const ForwardResult<T>&);                            \
    template SelfLoss<T> self_loss<T>(const Model<T>&, const ForwardResult<T>&, const Batch&);                   \
    template void backward<T>(const Model<T>&, const ForwardResult<T>&, const Batch&, const SelfLoss<T>*,        \
                              std::span<const T>, nn::ParamSet<T>&);                                             \
    template std::vector<T> extract_embedding<T>(const Model<T>&, const text::Vocabulary&, const std::string&); \
    template std::vector<T> extract_embeddings<T>(const Model<T>&, const text::Vocabulary&,                     \
                                                  const std::vector<std::string>&, std::size_t);

PERILOOM_INSTANTIATE(float)
PERILOOM_INSTANTIATE(double)

#undef PERILOOM_INSTANTIATE

}  // namespace periloom::transformer
