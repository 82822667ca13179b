#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "pmtrans/errors.hpp"
#include "pmtrans/numerics/ops.hpp"
#include "pmtrans/random.hpp"

namespace pmtrans {

struct ModelConfig {
    std::size_t image_size = 32;
    std::size_t channels = 1;
    std::size_t patch_size = 8;
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t embed_dim = 32;
    std::size_t mlp_ratio = 2;
    std::size_t n_classes = 4;
    bool use_cls_token = true;

    std::size_t grid() const { return image_size / patch_size; }
    std::size_t n_patches() const { return grid() * grid(); }
    std::size_t patch_dim() const { return channels * patch_size * patch_size; }
    std::size_t seq_len() const { return n_patches() + (use_cls_token ? 1 : 0); }
    std::size_t image_numel() const { return channels * image_size * image_size; }

    void validate() const {
        if (image_size == 0 || patch_size == 0 || image_size % patch_size != 0)
            throw ConfigError("image_size must be a positive multiple of patch_size");
        if (n_heads == 0 || embed_dim == 0 || embed_dim % n_heads != 0)
            throw ConfigError("embed_dim must be a positive multiple of n_heads");
        if (channels == 0 || n_layers == 0 || mlp_ratio == 0) throw ConfigError("channels, n_layers and mlp_ratio must be positive");
        if (n_classes < 2) throw ConfigError("n_classes must be at least 2");
    }
};

struct BlockParams {
    Tensor ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b;
    Tensor ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;
};

/// Feature extractor F: patch embedding, position table, optional CLS token,
/// pre-norm transformer blocks and a final layer norm.
struct EncoderParams {
    Tensor patch_w, patch_b, pos, cls;
    std::vector<BlockParams> blocks;
    Tensor norm_g, norm_b;

    template <typename F>
    void for_each(F&& f) {
        f("encoder.patch_w", patch_w);
        f("encoder.patch_b", patch_b);
        f("encoder.pos", pos);
        if (cls.size() > 0) f("encoder.cls", cls);
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            auto& b = blocks[i];
            const std::string p = "encoder.blocks." + std::to_string(i) + ".";
            f(p + "ln1_g", b.ln1_g);
            f(p + "ln1_b", b.ln1_b);
            f(p + "qkv_w", b.qkv_w);
            f(p + "qkv_b", b.qkv_b);
            f(p + "proj_w", b.proj_w);
            f(p + "proj_b", b.proj_b);
            f(p + "ln2_g", b.ln2_g);
            f(p + "ln2_b", b.ln2_b);
            f(p + "fc1_w", b.fc1_w);
            f(p + "fc1_b", b.fc1_b);
            f(p + "fc2_w", b.fc2_w);
            f(p + "fc2_b", b.fc2_b);
        }
        f("encoder.norm_g", norm_g);
        f("encoder.norm_b", norm_b);
    }
};

/// Classifier C: logits = h·Wᵀ + b with W of shape [n_classes, embed_dim].
struct ClassifierParams {
    Tensor weight, bias;

    template <typename F>
    void for_each(F&& f) {
        f("classifier.weight", weight);
        f("classifier.bias", bias);
    }
};

/// Patch embeddings of a batch before position embeddings, [B*n, D].
struct PatchSequence {
    Var tokens;
    std::size_t batch = 0;
};

struct ForwardRecord {
    PatchSequence input;
    std::vector<Tensor> attention;  // per layer, [B, H, T, T] post-softmax
    Var features;                   // final patch features f_k, [B*n, D]
    Var pooled;                     // h, [B, D]
    Var logits;                     // [B, n_classes]
    bool has_cls = false;
};

class Model {
public:
    Model() = default;

    Model(const ModelConfig& cfg, Rng& rng) : config_(cfg) {
        cfg.validate();
        const std::size_t d = cfg.embed_dim, hidden = d * cfg.mlp_ratio;
        auto weight = [&rng](Shape s) {
            Tensor t(std::move(s));
            for (auto& v : t.data) v = truncated_normal(rng, 0.02f);
            return t;
        };
        encoder_.patch_w = weight({cfg.patch_dim(), d});
        encoder_.patch_b = Tensor({d});
        encoder_.pos = weight({cfg.seq_len(), d});
        if (cfg.use_cls_token) encoder_.cls = weight({1, d});
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            BlockParams b;
            b.ln1_g = Tensor({d}, 1.0f);
            b.ln1_b = Tensor({d});
            b.qkv_w = weight({d, 3 * d});
            b.qkv_b = Tensor({3 * d});
            b.proj_w = weight({d, d});
            b.proj_b = Tensor({d});
            b.ln2_g = Tensor({d}, 1.0f);
            b.ln2_b = Tensor({d});
            b.fc1_w = weight({d, hidden});
            b.fc1_b = Tensor({hidden});
            b.fc2_w = weight({hidden, d});
            b.fc2_b = Tensor({d});
            encoder_.blocks.push_back(std::move(b));
        }
        encoder_.norm_g = Tensor({d}, 1.0f);
        encoder_.norm_b = Tensor({d});
        classifier_.weight = weight({cfg.n_classes, d});
        classifier_.bias = Tensor({cfg.n_classes});
        set_requires_grad(true);
    }

    const ModelConfig& config() const { return config_; }
    EncoderParams& encoder() { return encoder_; }
    const EncoderParams& encoder() const { return encoder_; }
    ClassifierParams& classifier() { return classifier_; }
    const ClassifierParams& classifier() const { return classifier_; }

    void set_requires_grad(bool on) {
        auto f = [on](const std::string&, Tensor& t) { t.requires_grad = on; };
        encoder_.for_each(f);
        classifier_.for_each(f);
    }

    void zero_grad() {
        auto f = [](const std::string&, Tensor& t) { t.zero_grad(); };
        encoder_.for_each(f);
        classifier_.for_each(f);
    }

    template <typename F>
    void for_each_parameter(F&& f) {
        encoder_.for_each(f);
        classifier_.for_each(f);
    }

private:
    ModelConfig config_;
    EncoderParams encoder_;
    ClassifierParams classifier_;
};

/// Cut images [B, C*H*W] into flattened patches [B*n, C*p*p], patches in
/// row-major grid order, pixels channel-major within a patch.
inline Tensor extract_patches(const ModelConfig& cfg, const Tensor& images) {
    const std::size_t per = cfg.image_numel();
    const bool layout_ok =
        (images.rank() == 2 && images.dim(1) == per) ||
        (images.rank() == 4 && images.dim(1) == cfg.channels && images.dim(2) == cfg.image_size &&
         images.dim(3) == cfg.image_size);
    if (images.size() == 0 || !layout_ok) {
        throw DimensionError("images of shape " + shape_str(images.shape) + " do not match a " +
                             std::to_string(cfg.channels) + "x" + std::to_string(cfg.image_size) + "x" +
                             std::to_string(cfg.image_size) + " configuration");
    }
    const std::size_t batch = images.size() / per, g = cfg.grid(), p = cfg.patch_size, s = cfg.image_size;
    const std::size_t n = cfg.n_patches(), pd = cfg.patch_dim();
    Tensor out(Shape{batch * n, pd});
    for (std::size_t b = 0; b < batch; ++b) {
        const float* img = images.data.data() + b * per;
        for (std::size_t gy = 0; gy < g; ++gy)
            for (std::size_t gx = 0; gx < g; ++gx) {
                float* dst = out.data.data() + (b * n + gy * g + gx) * pd;
                for (std::size_t c = 0; c < cfg.channels; ++c)
                    for (std::size_t y = 0; y < p; ++y)
                        for (std::size_t x = 0; x < p; ++x)
                            *dst++ = img[c * s * s + (gy * p + y) * s + gx * p + x];
            }
    }
    return out;
}

/// Model parameters bound onto one tape. Construct once per step; every
/// forward pass in the step shares the same leaves so gradients accumulate.
class BoundModel {
public:
    BoundModel(Model& model, Tape& tape) : cfg_(model.config()), tape_(&tape) {
        auto& e = model.encoder();
        patch_w_ = tape.bind(e.patch_w);
        patch_b_ = tape.bind(e.patch_b);
        pos_ = tape.bind(e.pos);
        if (cfg_.use_cls_token) cls_ = tape.bind(e.cls);
        for (auto& b : e.blocks) {
            blocks_.push_back(Block{tape.bind(b.ln1_g), tape.bind(b.ln1_b), tape.bind(b.qkv_w), tape.bind(b.qkv_b),
                                    tape.bind(b.proj_w), tape.bind(b.proj_b), tape.bind(b.ln2_g), tape.bind(b.ln2_b),
                                    tape.bind(b.fc1_w), tape.bind(b.fc1_b), tape.bind(b.fc2_w), tape.bind(b.fc2_b)});
        }
        norm_g_ = tape.bind(e.norm_g);
        norm_b_ = tape.bind(e.norm_b);
        cls_w_ = tape.bind(model.classifier().weight);
        cls_b_ = tape.bind(model.classifier().bias);
    }

    const ModelConfig& config() const { return cfg_; }
    Tape& tape() const { return *tape_; }
    Var classifier_weight() const { return cls_w_; }

    /// One affine map per flattened patch. Position embeddings are applied in
    /// encode(), so sequences can be mixed in between.
    PatchSequence patch_embed(const Tensor& images) const {
        Tensor patches = extract_patches(cfg_, images);
        const std::size_t batch = patches.dim(0) / cfg_.n_patches();
        Var x = tape_->constant(std::move(patches));
        return PatchSequence{ops::add_bias(ops::matmul(x, patch_w_), patch_b_), batch};
    }

    ForwardRecord encode(const PatchSequence& seq) const {
        const std::size_t n = cfg_.n_patches(), T = cfg_.seq_len(), B = seq.batch;
        if (seq.tokens.shape() != Shape{B * n, cfg_.embed_dim}) {
            throw DimensionError("encode: sequence shape " + shape_str(seq.tokens.shape()) + " does not match config");
        }
        ForwardRecord rec;
        rec.input = seq;
        rec.has_cls = cfg_.use_cls_token;
        Var x = seq.tokens;
        if (cfg_.use_cls_token) x = ops::prepend_token(x, cls_, B);
        x = ops::add_tiled(x, pos_);
        for (const auto& b : blocks_) {
            Var h = ops::layer_norm(x, b.ln1_g, b.ln1_b);
            Var qkv = ops::add_bias(ops::matmul(h, b.qkv_w), b.qkv_b);
            Tensor probs;
            Var att = ops::self_attention(qkv, B, T, cfg_.n_heads, &probs);
            rec.attention.push_back(std::move(probs));
            x = ops::add(x, ops::add_bias(ops::matmul(att, b.proj_w), b.proj_b));
            Var h2 = ops::layer_norm(x, b.ln2_g, b.ln2_b);
            Var mid = ops::gelu(ops::add_bias(ops::matmul(h2, b.fc1_w), b.fc1_b));
            x = ops::add(x, ops::add_bias(ops::matmul(mid, b.fc2_w), b.fc2_b));
        }
        Var out = ops::layer_norm(x, norm_g_, norm_b_);
        if (cfg_.use_cls_token) {
            rec.pooled = ops::take_rows(out, T, 0);
            rec.features = ops::drop_rows(out, T, 1);
        } else {
            rec.features = out;
            rec.pooled = ops::mean_rows(out, T);
        }
        rec.logits = classify(rec.pooled);
        return rec;
    }

    Var classify(Var pooled) const {
        if (pooled.value().rank() != 2 || pooled.shape()[1] != cfg_.embed_dim) {
            throw DimensionError("classify: pooled features of shape " + shape_str(pooled.shape()));
        }
        return ops::add_bias(ops::matmul(pooled, ops::transpose(cls_w_)), cls_b_);
    }

    ForwardRecord forward(const Tensor& images) const { return encode(patch_embed(images)); }

private:
    struct Block {
        Var ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b, ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;
    };

    ModelConfig cfg_;
    Tape* tape_;
    Var patch_w_, patch_b_, pos_, cls_;
    std::vector<Block> blocks_;
    Var norm_g_, norm_b_, cls_w_, cls_b_;
};

}  // namespace pmtrans
