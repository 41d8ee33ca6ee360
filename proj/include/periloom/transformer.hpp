#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "periloom/nn.hpp"
#include "periloom/text.hpp"

namespace periloom::transformer {

enum class Variant { Encoder, Decoder };

const char* to_string(Variant v);
Variant variant_from_string(const std::string& s);

struct ArchConfig {
    Variant variant = Variant::Encoder;
    int layers = 2;
    int d_model = 64;
    int heads = 4;
    int d_ff = 256;
    int max_len = 32;
    int vocab_size = 0;
    double dropout = 0.1;
    double init_std = 0.02;
    bool nsp = false;             // next-sentence head on the CLS state (encoder only)
    bool tie_embeddings = true;   // LM projection shares the token embedding
    std::uint64_t seed = 0;

    void validate() const;
    /// Closed-form parameter count for this shape.
    std::size_t param_count() const;
    text::Style style() const { return variant == Variant::Encoder ? text::Style::Encoder : text::Style::Decoder; }

    nlohmann::ordered_json to_json() const;
    static ArchConfig from_json(const nlohmann::json& j);
    bool operator==(const ArchConfig&) const = default;
};

/// Pre-layer-norm transformer parameters. Tensor names:
///   tok_emb [V,d], pos_emb [L,d], layer{i}.{ln1_g,ln1_b,wq,bq,wk,bk,wv,bv,wo,bo,ln2_g,ln2_b,w1,b1,w2,b2},
///   lnf_g, lnf_b, lm_bias [V], lm_out [V,d] (untied only), nsp_w [d,2], nsp_b [2] (nsp only).
template <class T>
struct Model {
    ArchConfig arch;
    nn::ParamSet<T> params;

    template <class U>
    Model<U> cast() const {
        return Model<U>{arch, params.template cast<U>()};
    }
};

nn::ParamSet<double> make_layout(const ArchConfig& arch);

/// Gaussian(0, init_std) weights, zero biases, unit layer-norm scales.
template <class T>
Model<T> init_params(const ArchConfig& arch);

/// Sequences at their true length (no PAD) plus optional per-position targets.
struct Batch {
    std::vector<std::vector<int>> ids;
    std::vector<std::vector<int>> targets;  // per position, -1 = none; empty = no self targets
    std::vector<int> nsp_labels;            // per sequence, -1 = none; empty = none

    std::size_t size() const { return ids.size(); }
    std::size_t total_tokens() const;
};

Batch make_batch(std::span<const text::TokenSeq> seqs);
/// Targets at flagged positions.
Batch make_mlm_batch(std::span<const text::MaskedSeq> seqs);
/// Targets are the next token at every position but the last.
Batch make_lm_batch(std::span<const text::TokenSeq> seqs);

struct RunMode {
    bool train = false;          // enables dropout
    std::uint64_t dropout_seed = 0;
};

template <class T>
struct LayerCache {
    std::vector<T> x_in, xhat1, rstd1, a1, q, k, v, probs, ctx, drop1, x_mid, xhat2, rstd2, a2, u, g, drop2;
};

/// Everything backward() needs, plus the final hidden states.
template <class T>
struct ForwardResult {
    std::vector<std::size_t> offsets;       // row offset of each sequence (size n_seq + 1)
    std::vector<std::size_t> attn_offsets;  // offset of each sequence's attention block
    std::vector<T> drop0;                   // embedding dropout scale (empty in eval mode)
    std::vector<LayerCache<T>> layers;
    std::vector<T> x_final, xhatf, rstdf;
    std::vector<T> hidden;                  // rows x d, final layer-norm output
    std::vector<T> pooled;                  // n_seq x d

    std::size_t rows() const { return offsets.back(); }
    std::size_t seqs() const { return offsets.size() - 1; }
};

/// Encoder attends over all non-PAD positions; decoder applies a strict causal mask.
/// Pooling: mean over positions (encoder) or the last position (decoder).
template <class T>
ForwardResult<T> forward(const Model<T>& model, const Batch& batch, RunMode mode = {});

/// Logits over the vocabulary for every packed row (rows x V).
template <class T>
std::vector<T> full_logits(const Model<T>& model, const ForwardResult<T>& fwd);

template <class T>
struct SelfLoss {
    T value = 0;        // mean LM cross-entropy (+ mean NSP cross-entropy when present)
    T lm_value = 0;
    T nsp_value = 0;
    std::vector<std::size_t> rows;  // packed rows carrying an LM target
    std::vector<T> dlogits;         // rows.size() x V, gradient of `value`
    std::vector<std::size_t> nsp_seqs;
    std::vector<T> dnsp;            // nsp_seqs.size() x 2
};

/// Encoder: mean CE over flagged positions; decoder: mean next-token CE.
/// Throws DataError when the batch carries no targets.
template <class T>
SelfLoss<T> self_loss(const Model<T>& model, const ForwardResult<T>& fwd, const Batch& batch);

/// Accumulates into `grads` the gradient of
///   [self->value if self] + sum_s dpooled[s] . pooled[s]
/// (`dpooled` empty or n_seq x d).
template <class T>
void backward(const Model<T>& model, const ForwardResult<T>& fwd, const Batch& batch, const SelfLoss<T>* self,
              std::span<const T> dpooled, nn::ParamSet<T>& grads);

/// Pooled final-layer representation with dropout off.
template <class T>
std::vector<T> extract_embedding(const Model<T>& model, const text::Vocabulary& vocab, const std::string& text);

/// Row-major n x d embeddings for many texts, processed in batches.
template <class T>
std::vector<T> extract_embeddings(const Model<T>& model, const text::Vocabulary& vocab,
                                  const std::vector<std::string>& texts, std::size_t batch_size = 64);

}  // namespace periloom::transformer
