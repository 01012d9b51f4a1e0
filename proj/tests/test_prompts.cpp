#include <catch_amalgamated.hpp>

#include "offcurate/backend.hpp"
#include "offcurate/prompts.hpp"
#include "support.hpp"

using namespace offcurate;
using namespace testing_support;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

PromptSet axis_prompts(double temperature = 100.0) {
    PromptSet p;
    p.space = {2, "test"};
    p.temperature = temperature;
    p.classes = {{"NonOffensive", {{1.0, 0.0}}}, {"Offensive", {{0.0, 1.0}}}};
    return p;
}

ErrorCode code_of(auto&& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("expected an offcurate::Error");
    return ErrorCode::InvalidArgument;
}

}  // namespace

TEST_CASE("fill_template", "[prompts]") {
    CHECK(fill_template(kDefaultTemplate, "negative") == "This image is about something negative.");
    CHECK(fill_template("{label}", "x") == "x");
    CHECK(code_of([] { fill_template("no placeholder", "x"); }) == ErrorCode::BadTemplate);
    CHECK(code_of([] { fill_template("{label} and {label}", "x"); }) == ErrorCode::BadTemplate);
}

TEST_CASE("build_zero_shot encodes one anchor per class", "[prompts]") {
    MockBackend backend(MockOptions{.dimension = 32, .seed = 9});
    const auto& words = label_presets().at("positive-negative");
    const auto set = build_zero_shot(backend, kDefaultTemplate, {words.first, words.second});
    REQUIRE(set.classes.size() == 2);
    CHECK(set.classes[0].name == "NonOffensive");
    CHECK(set.classes[1].name == "Offensive");
    CHECK(set.temperature == 100.0);
    CHECK(set.space == backend.space());
    CHECK(set.provenance.kind == "zero_shot");
    CHECK(set.provenance.labels == std::vector<std::string>{"positive", "negative"});

    const auto expected = encode_text(backend, "This image is about something negative.").vector;
    CHECK(set.classes[1].anchors[0] == expected);
    CHECK_THAT(l2_norm(set.classes[0].anchors[0]), WithinAbs(1.0, 1e-12));

    CHECK(label_presets().size() == 4);
    CHECK(label_presets().count("moral-immoral") == 1);
    CHECK(code_of([&] { build_zero_shot(backend, "bad", {"a", "b"}); }) == ErrorCode::BadTemplate);
    CHECK(code_of([&] { build_zero_shot(backend, kDefaultTemplate, {"a"}); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("classify on hand-built geometry", "[prompts]") {
    const auto p = axis_prompts();

    const auto on_offensive = classify(p, {"a", {0.0, 1.0}});
    CHECK(on_offensive.predicted == 1);
    CHECK_THAT(on_offensive.offensive_score, WithinAbs(1.0, 1e-40));
    CHECK_THAT(on_offensive.probabilities[0], WithinRel(std::exp(-100.0), 1e-12));

    const auto equidistant = classify(p, {"b", {1.0, 1.0}});
    CHECK_THAT(equidistant.offensive_score, WithinAbs(0.5, 1e-15));
    CHECK(equidistant.predicted == 0);  // tie goes to the earlier class

    // p_off = 1 / (1 + exp(tau * (s_non - s_off)))
    const double angle = 0.3;
    const auto tilted = classify(p, {"c", {std::cos(angle), std::sin(angle)}});
    const double expected = 1.0 / (1.0 + std::exp(100.0 * (std::cos(angle) - std::sin(angle))));
    CHECK_THAT(tilted.offensive_score, WithinRel(expected, 1e-12));

    CHECK(code_of([&] { classify(p, {"d", {1.0, 0.0, 0.0}}); }) == ErrorCode::DimensionMismatch);
    CHECK(code_of([&] { classify(p, {"e", {0.0, 0.0}}); }) == ErrorCode::ZeroNorm);
}

TEST_CASE("classify properties", "[prompts][property]") {
    Rng rng(12);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t dim = 2 + rng.below(64);
        const double tau = trial % 2 ? 1.0 : 100.0;
        const auto p = random_prompts(rng, dim, tau, 1 + rng.below(3));
        const auto x = random_vector(rng, dim);
        const auto base = classify(p, {"x", x});

        double sum = 0.0;
        for (double v : base.probabilities) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
            sum += v;
        }
        CHECK_THAT(sum, WithinAbs(1.0, 1e-12));

        auto scaled = x;
        for (double& v : scaled) v *= 7.5;
        CHECK_THAT(classify(p, {"x", scaled}).offensive_score, WithinAbs(base.offensive_score, 1e-12));

        auto swapped = p;
        std::swap(swapped.classes[0], swapped.classes[1]);
        const auto s = classify(swapped, {"x", x});
        CHECK_THAT(s.offensive_score, WithinAbs(base.offensive_score, 1e-12));
        CHECK_THAT(s.probabilities[1], WithinAbs(base.probabilities[0], 1e-12));

        // the max-aggregated logit matches a brute-force scan over anchors
        const auto unit = normalized(x);
        std::vector<double> logits;
        for (const auto& c : p.classes) {
            double best = -2.0;
            for (const auto& a : c.anchors) best = std::max(best, dot(unit, a));
            logits.push_back(tau * best);
        }
        const double oracle = 1.0 / (1.0 + std::exp(logits[0] - logits[1]));
        CHECK_THAT(base.offensive_score, WithinAbs(oracle, 1e-12));
    }
}

TEST_CASE("softmax and log_sum_exp are stable", "[prompts]") {
    const std::vector<double> big{1000.0, 1000.0};
    CHECK_THAT(softmax(big)[0], WithinAbs(0.5, 1e-15));
    CHECK_THAT(log_sum_exp(big), WithinAbs(1000.0 + std::log(2.0), 1e-12));
    const std::vector<double> apart{-800.0, 0.0};
    CHECK(std::isfinite(log_sum_exp(apart)));
    CHECK(softmax(apart)[1] == 1.0);
}

TEST_CASE("prompt set JSON round trip", "[prompts]") {
    Rng rng(3);
    auto p = random_prompts(rng, 24, 50.0, 2);
    p.provenance.kind = "tuned";
    p.provenance.run_id = "tune-abc";
    p.provenance.labels = {"x", "y"};

    TempDir dir;
    save_prompt_set(dir / "p.json", p);
    const auto back = load_prompt_set(dir / "p.json");
    CHECK(back.space == p.space);
    CHECK(back.temperature == 50.0);
    CHECK(back.provenance.run_id == "tune-abc");
    CHECK(back.provenance.labels == p.provenance.labels);
    REQUIRE(back.classes.size() == 2);
    for (std::size_t c = 0; c < 2; ++c) {
        REQUIRE(back.classes[c].anchors.size() == 2);
        for (std::size_t a = 0; a < 2; ++a) {
            for (std::size_t i = 0; i < 24; ++i) {
                CHECK_THAT(back.classes[c].anchors[a][i], WithinAbs(p.classes[c].anchors[a][i], 1e-6));
            }
        }
    }
    const auto x = random_vector(rng, 24);
    CHECK_THAT(classify(back, {"x", x}).offensive_score, WithinAbs(classify(p, {"x", x}).offensive_score, 1e-3));

    auto j = to_json(p);
    j["version"] = 99;
    CHECK(code_of([&] { prompt_set_from_json(j); }) == ErrorCode::VersionUnsupported);
    j = to_json(p);
    j["classes"][0]["anchors"][0][0] = 5.0;
    CHECK(code_of([&] { prompt_set_from_json(j); }) == ErrorCode::InvalidArgument);
    j = to_json(p);
    j.erase("temperature");
    CHECK(code_of([&] { prompt_set_from_json(j); }) == ErrorCode::ParseFailure);
}
