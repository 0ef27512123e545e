#include "tame/io/checkpoint.hpp"
#include "tame/vlm/dataset.hpp"
#include "tame/vlm/toy_vlm.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cstring>
#include <numeric>

using namespace tame;
using ad::Matrix;
using tame::testing::random_matrix;

namespace {

const vlm::ToyDualEncoder& model() {
    static const vlm::ToyDualEncoder m = vlm::ToyDualEncoder::initialize(vlm::ModelSpec{}, 17);
    return m;
}

vlm::Image random_image(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    vlm::Image img(16, 16);
    for (ad::Index i = 0; i < img.size(); ++i) img.data()[i] = u(rng);
    return img;
}

}  // namespace

TEST(ToyVlm, SequenceLengthFollowsPromptTokens) {
    std::mt19937_64 rng(1);
    const auto img = random_image(rng);
    const auto plain = model().encode_image(img);
    ASSERT_EQ(plain.hooks.size(), 4u);
    EXPECT_EQ(plain.hooks[0].rows(), 17);
    const auto prompted = model().encode_image(img, random_matrix(rng, 2, 32));
    for (const auto& h : prompted.hooks) EXPECT_EQ(h.rows(), 19);
}

TEST(ToyVlm, TextPromptChangesTextEmbedding) {
    std::mt19937_64 rng(2);
    const Matrix a = model().encode_text(4);
    const Matrix b = model().encode_text(4, random_matrix(rng, 3, 32));
    ASSERT_EQ(a.rows(), 1);
    ASSERT_EQ(b.rows(), 1);
    EXPECT_GT((a - b).norm(), 0.0);
}

TEST(ToyVlm, EncodingIsDeterministic) {
    std::mt19937_64 rng(3);
    const auto img = random_image(rng);
    const Matrix p = random_matrix(rng, 2, 32);
    const auto a = model().encode_image(img, p);
    const auto b = model().encode_image(img, p);
    EXPECT_EQ(std::memcmp(a.embedding.data(), b.embedding.data(), sizeof(double) * 32), 0);
    EXPECT_TRUE((model().encode_text(3) == model().encode_text(3)));
}

TEST(ToyVlm, EmbeddingsAreUnitNorm) {
    for (int seed = 0; seed < 100; ++seed) {
        std::mt19937_64 rng(static_cast<std::uint64_t>(seed));
        const auto img = random_image(rng);
        const Matrix p = seed % 2 ? random_matrix(rng, 2, 32) : Matrix();
        EXPECT_NEAR(model().encode_image(img, p).embedding.norm(), 1.0, 1e-9);
        EXPECT_NEAR(model().encode_text(seed % 16, p).norm(), 1.0, 1e-9);
    }
}

TEST(ToyVlm, HookCountEqualsDepth) {
    std::mt19937_64 rng(4);
    for (int c : {0, 1, 4}) {
        const Matrix p = c ? random_matrix(rng, c, 32) : Matrix();
        EXPECT_EQ(model().encode_image(random_image(rng), p).hooks.size(), 4u);
    }
}

TEST(ToyVlm, RejectsPromptWidthMismatch) {
    std::mt19937_64 rng(5);
    EXPECT_THROW(model().encode_image(random_image(rng), random_matrix(rng, 2, 31)), ad::ShapeError);
    EXPECT_THROW(model().encode_text(1, random_matrix(rng, 2, 33)), ad::ShapeError);
}

TEST(ToyVlm, RejectsOutOfRangeClass) {
    EXPECT_THROW(model().encode_text(16), std::out_of_range);
    EXPECT_THROW(model().encode_text(-1), std::out_of_range);
}

TEST(ToyVlm, DistinctClassesHaveDistinctEmbeddings) {
    const Matrix t = model().class_embeddings({0, 1, 2, 3, 4, 5, 6, 7});
    for (int i = 0; i < 8; ++i)
        for (int j = i + 1; j < 8; ++j) EXPECT_LT(t.row(i).dot(t.row(j)), 1.0 - 1e-6);
}

TEST(Classify, ZeroTemperatureIsUniform) {
    std::mt19937_64 rng(6);
    Matrix text = random_matrix(rng, 8, 32);
    text.rowwise().normalize();
    Matrix img = random_matrix(rng, 1, 32);
    img.rowwise().normalize();
    const Matrix p = vlm::classify(img, text, 0.0);
    for (ad::Index k = 0; k < 8; ++k) EXPECT_DOUBLE_EQ(p(0, k), 1.0 / 8.0);
}

TEST(Classify, LargeTemperatureConcentratesOnMatchingClass) {
    std::mt19937_64 rng(7);
    Matrix text = random_matrix(rng, 5, 32);
    text.rowwise().normalize();
    const Matrix p = vlm::classify(text.row(3), text, 1e4);
    EXPECT_GT(p(0, 3), 1.0 - 1e-9);
}

TEST(Classify, SumsToOneAndIsPermutationInvariant) {
    for (int seed = 0; seed < 100; ++seed) {
        std::mt19937_64 rng(static_cast<std::uint64_t>(seed) + 100);
        const int k = 2 + seed % 9;
        Matrix text = random_matrix(rng, k, 16);
        text.rowwise().normalize();
        Matrix img = random_matrix(rng, 1, 16);
        img.rowwise().normalize();
        const Matrix p = vlm::classify(img, text, 10.0);
        EXPECT_NEAR(p.sum(), 1.0, 1e-12);

        std::vector<int> perm(static_cast<std::size_t>(k));
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        Matrix shuffled(k, 16);
        for (int i = 0; i < k; ++i) shuffled.row(i) = text.row(perm[static_cast<std::size_t>(i)]);
        const Matrix q = vlm::classify(img, shuffled, 10.0);
        for (int i = 0; i < k; ++i) EXPECT_NEAR(q(0, i), p(0, perm[static_cast<std::size_t>(i)]), 1e-15);
    }
}

TEST(ToyVlm, CheckpointRoundTripReproducesLogits) {
    const std::string bytes = io::serialize(model().to_checkpoint());
    const auto reloaded = vlm::ToyDualEncoder::from_checkpoint(io::deserialize(bytes));
    EXPECT_EQ(reloaded.parameters().digest(), model().parameters().digest());
    std::mt19937_64 rng(8);
    const auto img = random_image(rng);
    const Matrix t = model().class_embeddings({0, 2, 4});
    const Matrix a = vlm::classify(model().encode_image(img).embedding, t, 10.0);
    const Matrix b = vlm::classify(reloaded.encode_image(img).embedding, reloaded.class_embeddings({0, 2, 4}), 10.0);
    EXPECT_TRUE((a == b));
}

TEST(ToyVlm, BatchedForwardMatchesSingle) {
    std::mt19937_64 rng(9);
    std::vector<vlm::Image> imgs{random_image(rng), random_image(rng), random_image(rng)};
    const Matrix p = random_matrix(rng, 2, 32);
    ad::NoGradGuard guard;
    vlm::FixedPrompt prompt({ad::constant(p)}, {});
    const auto enc = model().encode_images(ad::constant(vlm::stack_images(imgs)), &prompt);
    for (std::size_t i = 0; i < imgs.size(); ++i) {
        const Matrix single = model().encode_image(imgs[i], p).embedding;
        EXPECT_LT((enc.embeddings.value().row(static_cast<ad::Index>(i)) - single).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(Dataset, GenerationIsSeededAndBalanced) {
    const auto a = vlm::generate_dataset(vlm::downstream_classes(), 3, 42);
    const auto b = vlm::generate_dataset(vlm::downstream_classes(), 3, 42);
    ASSERT_EQ(a.size(), 24u);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE((a.images[i] == b.images[i]));
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_GE(a.images[i].minCoeff(), 0.0);
        EXPECT_LE(a.images[i].maxCoeff(), 1.0);
    }
    std::vector<int> count(16, 0);
    for (int l : a.labels) ++count[static_cast<std::size_t>(l)];
    for (int c : vlm::downstream_classes()) EXPECT_EQ(count[static_cast<std::size_t>(c)], 3);
}

TEST(Dataset, PublicAndDownstreamAreDisjoint) {
    for (int c : vlm::public_classes()) {
        const auto& d = vlm::downstream_classes();
        EXPECT_EQ(std::find(d.begin(), d.end(), c), d.end());
    }
}

TEST(Dataset, ShapesAreMirrorSymmetric) {
    vlm::ShapeStyle s;
    s.center_jitter = 0.0;
    s.noise_sigma = 0.0;
    for (int c = 0; c < vlm::kShapeClassCount; ++c) {
        std::mt19937_64 rng(static_cast<std::uint64_t>(c));
        const auto img = vlm::render_shape(c, rng, s);
        EXPECT_LT((img - vlm::hflip(img)).cwiseAbs().maxCoeff(), 1e-12) << vlm::shape_class_names()[static_cast<std::size_t>(c)];
    }
}
