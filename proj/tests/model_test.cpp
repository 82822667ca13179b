#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "pmtrans/checkpoint.hpp"
#include "pmtrans/model.hpp"
#include "pmtrans/numerics/finite_diff.hpp"
#include "test_support.hpp"

using namespace pmtrans;

namespace {

ModelConfig small_config(bool cls) {
    ModelConfig cfg;
    cfg.image_size = 16;
    cfg.patch_size = 8;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.embed_dim = 8;
    cfg.n_classes = 3;
    cfg.use_cls_token = cls;
    return cfg;
}

Tensor random_images(const ModelConfig& cfg, std::size_t batch, std::uint64_t seed) {
    Rng rng = make_rng(seed, 5);
    Tensor t(Shape{batch, cfg.image_numel()});
    for (auto& v : t.data) v = static_cast<float>(uniform01(rng));
    return t;
}

void randomize(Model& m, std::uint64_t seed, float scale) {
    Rng rng = make_rng(seed, 6);
    m.for_each_parameter([&](const std::string&, Tensor& t) {
        for (auto& v : t.data) v += scale * static_cast<float>(standard_normal(rng));
    });
}

}  // namespace

TEST(PatchEmbed, ZeroImageZeroWeightsGivesZeroSequence) {
    ModelConfig cfg = small_config(false);
    Rng rng = make_rng(0, 1);
    Model m(cfg, rng);
    for (auto& v : m.encoder().patch_w.data) v = 0.0f;
    Tape tape;
    BoundModel bm(m, tape);
    PatchSequence seq = bm.patch_embed(Tensor(Shape{2, cfg.image_numel()}));
    EXPECT_EQ(seq.batch, 2u);
    for (float v : seq.tokens.value().data) EXPECT_EQ(v, 0.0f);
}

TEST(PatchEmbed, SequenceLengthWithAndWithoutClsToken) {
    for (bool cls : {false, true}) {
        ModelConfig cfg = small_config(cls);
        Rng rng = make_rng(0, 1);
        Model m(cfg, rng);
        Tape tape;
        BoundModel bm(m, tape);
        ForwardRecord rec = bm.forward(random_images(cfg, 3, 1));
        EXPECT_EQ(rec.input.tokens.shape(), (Shape{3 * 4, 8}));
        EXPECT_EQ(rec.features.shape(), (Shape{3 * 4, 8}));
        EXPECT_EQ(rec.pooled.shape(), (Shape{3, 8}));
        EXPECT_EQ(rec.logits.shape(), (Shape{3, 3}));
        const std::size_t T = cls ? 5 : 4;
        EXPECT_EQ(rec.attention.size(), 2u);
        EXPECT_EQ(rec.attention[0].shape, (Shape{3, 2, T, T}));
    }
}

TEST(PatchEmbed, AffineMapCommutesWithConvexMixing) {
    ModelConfig cfg = small_config(false);
    Rng rng = make_rng(3, 1);
    Model m(cfg, rng);
    randomize(m, 3, 0.5f);
    Tensor x = random_images(cfg, 2, 10), y = random_images(cfg, 2, 11);
    Rng lr = make_rng(3, 2);
    for (float lam : {0.0f, 1.0f, 0.3f, static_cast<float>(uniform01(lr)), static_cast<float>(uniform01(lr))}) {
        Tensor mixed(x.shape);
        for (std::size_t i = 0; i < x.size(); ++i) mixed[i] = lam * x[i] + (1.0f - lam) * y[i];
        Tape tape;
        BoundModel bm(m, tape);
        const Tensor& em = bm.patch_embed(mixed).tokens.value();
        const Tensor& ex = bm.patch_embed(x).tokens.value();
        const Tensor& ey = bm.patch_embed(y).tokens.value();
        for (std::size_t i = 0; i < em.size(); ++i) EXPECT_NEAR(em[i], lam * ex[i] + (1.0f - lam) * ey[i], 1e-5);
    }
}

TEST(PatchEmbed, WrongImageSizeIsDimensionError) {
    ModelConfig cfg = small_config(false);
    Rng rng = make_rng(0, 1);
    Model m(cfg, rng);
    Tape tape;
    BoundModel bm(m, tape);
    EXPECT_THROW(bm.patch_embed(Tensor(Shape{2, 100})), DimensionError);
    EXPECT_THROW(bm.patch_embed(Tensor(Shape{0, cfg.image_numel()})), DimensionError);
}

TEST(Encode, AttentionRowsSumToOne) {
    for (bool cls : {false, true}) {
        ModelConfig cfg = small_config(cls);
        Rng rng = make_rng(1, 1);
        Model m(cfg, rng);
        randomize(m, 1, 0.3f);
        Tape tape;
        BoundModel bm(m, tape);
        ForwardRecord rec = bm.forward(random_images(cfg, 4, 2));
        for (const Tensor& att : rec.attention) {
            const std::size_t T = att.shape[3];
            for (std::size_t r = 0; r < att.size() / T; ++r) {
                double s = 0.0;
                for (std::size_t j = 0; j < T; ++j) {
                    EXPECT_GE(att[r * T + j], 0.0f);
                    s += att[r * T + j];
                }
                EXPECT_NEAR(s, 1.0, 1e-5);
            }
        }
    }
}

TEST(Encode, IdenticalSeedAndInputGiveIdenticalRecords) {
    auto run = [] {
        ModelConfig cfg = small_config(true);
        Rng rng = make_rng(9, 1);
        Model m(cfg, rng);
        Tape tape;
        BoundModel bm(m, tape);
        ForwardRecord rec = bm.forward(random_images(cfg, 2, 3));
        return std::make_pair(rec.logits.value().data, rec.attention.back().data);
    };
    EXPECT_EQ(run(), run());
}

TEST(Encode, SequenceLengthMismatchIsDimensionError) {
    ModelConfig cfg = small_config(false);
    Rng rng = make_rng(0, 1);
    Model m(cfg, rng);
    Tape tape;
    BoundModel bm(m, tape);
    PatchSequence bad{tape.constant(Tensor(Shape{5, 8})), 1};
    EXPECT_THROW(bm.encode(bad), DimensionError);
}

TEST(Encode, DefaultConfigHasRoomForClassGeometry) {
    ModelConfig cfg;
    EXPECT_EQ(cfg.image_size, 32u);
    EXPECT_EQ(cfg.n_patches(), 16u);
    EXPECT_EQ(cfg.n_classes, 4u);
    EXPECT_EQ(cfg.embed_dim, 32u);
    EXPECT_GE(cfg.embed_dim + 1, cfg.n_classes);
}

TEST(Encode, MeanPoolingIsArithmeticMeanOfPatchFeatures) {
    ModelConfig cfg = small_config(false);
    Rng rng = make_rng(2, 1);
    Model m(cfg, rng);
    randomize(m, 2, 0.3f);
    Tape tape;
    BoundModel bm(m, tape);
    ForwardRecord rec = bm.forward(random_images(cfg, 3, 4));
    const Tensor& f = rec.features.value();
    const Tensor& h = rec.pooled.value();
    const std::size_t n = cfg.n_patches(), d = cfg.embed_dim;
    for (std::size_t b = 0; b < 3; ++b)
        for (std::size_t j = 0; j < d; ++j) {
            float s = 0.0f;
            for (std::size_t k = 0; k < n; ++k) s += f.at(b * n + k, j);
            EXPECT_FLOAT_EQ(h.at(b, j), s / static_cast<float>(n));
        }
}

TEST(Encode, ClsPoolingTakesTokenZero) {
    ModelConfig cfg = small_config(true);
    Rng rng = make_rng(2, 1);
    Model m(cfg, rng);
    randomize(m, 2, 0.3f);
    Tape tape;
    BoundModel bm(m, tape);
    ForwardRecord rec = bm.forward(random_images(cfg, 2, 4));
    const Tensor& h = rec.pooled.value();
    const Tensor& f = rec.features.value();
    // Pooled vector differs from the patch mean, since it is its own token.
    double diff = 0.0;
    for (std::size_t j = 0; j < cfg.embed_dim; ++j) {
        float s = 0.0f;
        for (std::size_t k = 0; k < cfg.n_patches(); ++k) s += f.at(k, j);
        diff += std::abs(h.at(0, j) - s / static_cast<float>(cfg.n_patches()));
    }
    EXPECT_GT(diff, 1e-3);
}

TEST(Classify, ZeroWeightsGiveUniformSoftmax) {
    ModelConfig cfg = small_config(false);
    Rng rng = make_rng(0, 1);
    Model m(cfg, rng);
    for (auto& v : m.classifier().weight.data) v = 0.0f;
    Tape tape;
    BoundModel bm(m, tape);
    ForwardRecord rec = bm.forward(random_images(cfg, 2, 5));
    EXPECT_EQ(rec.logits.shape(), (Shape{2, 3}));
    for (float v : rec.logits.value().data) EXPECT_EQ(v, 0.0f);
    Var p = ops::softmax(rec.logits, 1);
    for (float v : p.value().data) EXPECT_NEAR(v, 1.0f / 3.0f, 1e-7);
}

TEST(Classify, WrongWidthIsDimensionError) {
    ModelConfig cfg = small_config(false);
    Rng rng = make_rng(0, 1);
    Model m(cfg, rng);
    Tape tape;
    BoundModel bm(m, tape);
    EXPECT_THROW(bm.classify(tape.constant(Tensor(Shape{2, 5}))), DimensionError);
}

TEST(Classify, ScoreDecomposesOverPatchActivations) {
    ModelConfig cfg = small_config(false);
    Rng rng = make_rng(4, 1);
    Model m(cfg, rng);
    randomize(m, 4, 0.3f);
    Tape tape;
    BoundModel bm(m, tape);
    ForwardRecord rec = bm.forward(random_images(cfg, 2, 6));
    const Tensor& f = rec.features.value();
    const Tensor& w = m.classifier().weight;
    const Tensor& bias = m.classifier().bias;
    const std::size_t n = cfg.n_patches(), d = cfg.embed_dim;
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t c = 0; c < cfg.n_classes; ++c) {
            double s = 0.0;
            for (std::size_t k = 0; k < n; ++k)
                for (std::size_t j = 0; j < d; ++j) s += static_cast<double>(w.at(c, j)) * f.at(b * n + k, j);
            EXPECT_NEAR(rec.logits.value().at(b, c), s / static_cast<double>(n) + bias[c], 1e-5);
        }
}

class LogitGradient : public ::testing::TestWithParam<bool> {};

TEST_P(LogitGradient, MatchesFiniteDifferences) {
    ModelConfig cfg = small_config(GetParam());
    cfg.n_layers = 1;
    Rng rng = make_rng(5, 1);
    Model m(cfg, rng);
    randomize(m, 5, 0.3f);
    Tensor images = random_images(cfg, 2, 7);
    Rng pr = make_rng(5, 3);
    Tensor probe = random_tensor({2, cfg.n_classes}, pr);

    std::vector<Tensor*> params;
    m.for_each_parameter([&](const std::string&, Tensor& t) { params.push_back(&t); });
    m.zero_grad();
    Tape tape;
    BoundModel bm(m, tape);
    ForwardRecord rec = bm.forward(images);
    tape.backward(ops::sum(ops::mul(rec.logits, tape.constant(probe))));
    std::vector<float> analytic, theta;
    for (Tensor* p : params) {
        ASSERT_TRUE(p->grad.has_value());
        analytic.insert(analytic.end(), p->grad->begin(), p->grad->end());
        theta.insert(theta.end(), p->data.begin(), p->data.end());
    }
    auto f = [&](std::span<const float> t) {
        std::size_t off = 0;
        for (Tensor* p : params) {
            std::copy_n(t.begin() + static_cast<std::ptrdiff_t>(off), p->size(), p->data.begin());
            off += p->size();
        }
        Tape eval(false);
        BoundModel em(m, eval);
        const Tensor& lg = em.forward(images).logits.value();
        double s = 0.0;
        for (std::size_t i = 0; i < lg.size(); ++i) s += static_cast<double>(lg[i]) * probe[i];
        return s;
    };
    auto numeric = finite_diff_grad(f, theta, 3e-3f);
    f(theta);
    EXPECT_LE(relative_error(analytic, numeric), 1e-3);
}

INSTANTIATE_TEST_SUITE_P(Pooling, LogitGradient, ::testing::Values(false, true));

TEST(Checkpoint, RoundTripRestoresEveryParameter) {
    ModelConfig cfg = small_config(true);
    Rng r1 = make_rng(1, 1), r2 = make_rng(2, 1);
    Model a(cfg, r1), b(cfg, r2);
    const auto path = std::filesystem::temp_directory_path() / "pmtrans_model_test.pmtc";
    save_checkpoint(path.string(), model_blocks(a));
    restore_model(b, load_checkpoint(path.string()));
    std::vector<std::vector<float>> pa, pb;
    a.for_each_parameter([&](const std::string&, Tensor& t) { pa.push_back(t.data); });
    b.for_each_parameter([&](const std::string&, Tensor& t) { pb.push_back(t.data); });
    EXPECT_EQ(pa, pb);
    std::filesystem::remove(path);
}

TEST(Checkpoint, ByteLayoutStartsWithMagicAndVersion) {
    std::vector<NamedTensor> blocks{{"w", Tensor(Shape{2}, std::vector<float>{1.0f, -2.0f})}};
    auto bytes = encode_checkpoint(blocks);
    const unsigned char expected[] = {'P', 'M', 'T', 'C', 1, 0, 0, 0, 1, 0, 0, 0, 'w', 1, 0, 0, 0, 2, 0, 0, 0,
                                      0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0xc0};
    ASSERT_EQ(bytes.size(), sizeof expected);
    for (std::size_t i = 0; i < bytes.size(); ++i) EXPECT_EQ(bytes[i], expected[i]) << i;
}

TEST(Checkpoint, ShapeMismatchAndMissingBlocksAreDimensionErrors) {
    Rng r1 = make_rng(1, 1), r2 = make_rng(2, 1);
    Model a(small_config(false), r1);
    ModelConfig wide = small_config(false);
    wide.embed_dim = 16;
    Model b(wide, r2);
    EXPECT_THROW(restore_model(b, model_blocks(a)), DimensionError);
    auto blocks = model_blocks(a);
    blocks.pop_back();
    EXPECT_THROW(restore_model(a, blocks), DimensionError);
}

TEST(Checkpoint, TruncatedAndForeignFilesAreFormatErrors) {
    Rng r1 = make_rng(1, 1);
    Model a(small_config(false), r1);
    auto bytes = encode_checkpoint(model_blocks(a));
    bytes.resize(bytes.size() - 3);
    io::Reader r(bytes);
    EXPECT_THROW(decode_checkpoint(r), FormatError);
    std::vector<unsigned char> foreign{'P', 'M', 'D', 'S', 1, 0, 0, 0};
    io::Reader r2(foreign);
    EXPECT_THROW(decode_checkpoint(r2), FormatError);
}
