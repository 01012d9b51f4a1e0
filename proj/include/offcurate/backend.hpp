#pragma once

#include <nlohmann/json.hpp>
#include <opencv2/dnn.hpp>

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "offcurate/embedding.hpp"
#include "offcurate/hash.hpp"
#include "offcurate/image.hpp"
#include "offcurate/random.hpp"
#include "offcurate/tokenizer.hpp"

namespace offcurate {

/// A frozen encoder. Implementations must return identical vectors for
/// identical inputs and be callable from several threads at once.
class EncoderBackend {
public:
    virtual ~EncoderBackend() = default;

    virtual EmbeddingSpace space() const = 0;
    virtual bool supports_images() const = 0;
    virtual bool supports_text() const = 0;

    /// Unit-norm image embedding.
    virtual std::vector<double> encode_image(const Raster& image) const = 0;
    /// Unit-norm text embedding.
    virtual std::vector<double> encode_text(const std::string& prompt) const = 0;

    std::string backend_id() const { return space().backend_id; }
    std::size_t dimension() const { return space().dimension; }
};

inline Embedding encode_image(const EncoderBackend& backend, const Raster& image, std::string id = {}) {
    if (!backend.supports_images()) fail(ErrorCode::BackendFailure, "backend has no image encoder");
    if (image.empty()) fail(ErrorCode::DecodeFailure, "empty raster");
    auto v = backend.encode_image(image);
    if (v.size() != backend.dimension()) {
        fail(ErrorCode::DimensionMismatch, "image encoder returned " + std::to_string(v.size()) +
                                               " values, expected " +
                                               std::to_string(backend.dimension()));
    }
    return {std::move(id), normalized(v)};
}

inline std::string trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(first, last - first + 1));
}

inline Embedding encode_text(const EncoderBackend& backend, const std::string& prompt) {
    if (!backend.supports_text()) fail(ErrorCode::BackendFailure, "backend has no text encoder");
    if (trim(prompt).empty()) fail(ErrorCode::TokenizeFailure, "prompt is empty");
    auto v = backend.encode_text(prompt);
    if (v.size() != backend.dimension()) {
        fail(ErrorCode::DimensionMismatch, "text encoder returned " + std::to_string(v.size()) +
                                               " values, expected " +
                                               std::to_string(backend.dimension()));
    }
    return {prompt, normalized(v)};
}

enum class MockImageMode {
    /// Unit Gaussian vector seeded by a hash of the decoded pixels.
    Hash,
    /// Fixed seeded random projection of pooled, standardized pixels; visually
    /// similar images land close together.
    Projection,
};

struct MockOptions {
    std::size_t dimension = 512;
    std::uint64_t seed = 0;
    MockImageMode image_mode = MockImageMode::Hash;
    int grid = 8;
    ImagePreprocessSpec preprocess{};
};

class MockBackend final : public EncoderBackend {
public:
    explicit MockBackend(MockOptions options) : options_(std::move(options)) {
        if (options_.dimension == 0) fail(ErrorCode::InvalidArgument, "dimension must be positive");
        if (options_.grid <= 0) fail(ErrorCode::InvalidArgument, "grid must be positive");
        options_.preprocess.validate();
        if (options_.image_mode == MockImageMode::Projection) {
            const std::size_t features = 3 * static_cast<std::size_t>(options_.grid) * options_.grid;
            Rng rng(mix_seed(options_.seed, 0x70726f6aULL));
            projection_.resize(options_.dimension * features);
            for (double& w : projection_) w = rng.gaussian();
        }
    }

    EmbeddingSpace space() const override {
        const char* mode = options_.image_mode == MockImageMode::Hash ? "hash" : "projection";
        return {options_.dimension, "mock-" + std::string(mode) + "-d" +
                                        std::to_string(options_.dimension) + "-s" +
                                        std::to_string(options_.seed)};
    }
    bool supports_images() const override { return true; }
    bool supports_text() const override { return true; }

    std::vector<double> encode_image(const Raster& image) const override {
        if (options_.image_mode == MockImageMode::Hash) {
            const cv::Mat continuous = image.pixels.isContinuous() ? image.pixels : image.pixels.clone();
            std::string content = std::to_string(continuous.cols) + "x" + std::to_string(continuous.rows) + ":";
            content.append(reinterpret_cast<const char*>(continuous.data),
                           continuous.total() * continuous.elemSize());
            return seeded_unit_vector(mix_seed(options_.seed, digest_seed(content)));
        }
        return project(image);
    }

    std::vector<double> encode_text(const std::string& prompt) const override {
        const auto text = trim(prompt);
        if (text.empty()) fail(ErrorCode::TokenizeFailure, "prompt is empty");
        return seeded_unit_vector(mix_seed(options_.seed ^ 0x74657874ULL, digest_seed(text)));
    }

private:
    static std::uint64_t digest_seed(std::string_view content) {
        const auto hex = sha256_hex(content);
        return std::stoull(hex.substr(0, 16), nullptr, 16);
    }

    std::vector<double> seeded_unit_vector(std::uint64_t seed) const {
        Rng rng(seed);
        std::vector<double> v(options_.dimension);
        for (double& x : v) x = rng.gaussian();
        return normalized(v);
    }

    std::vector<double> project(const Raster& image) const {
        const auto tensor = preprocess(image, options_.preprocess);
        const int g = options_.grid;
        std::vector<double> pooled(3 * static_cast<std::size_t>(g) * g, 0.0);
        std::vector<int> counts(pooled.size(), 0);
        const std::size_t plane = static_cast<std::size_t>(tensor.height) * tensor.width;
        for (int c = 0; c < 3; ++c) {
            for (int y = 0; y < tensor.height; ++y) {
                const int gy = y * g / tensor.height;
                for (int x = 0; x < tensor.width; ++x) {
                    const int gx = x * g / tensor.width;
                    const auto cell = static_cast<std::size_t>((c * g + gy) * g + gx);
                    pooled[cell] += tensor.chw[c * plane + static_cast<std::size_t>(y) * tensor.width + x];
                    ++counts[cell];
                }
            }
        }
        for (std::size_t i = 0; i < pooled.size(); ++i) pooled[i] /= std::max(1, counts[i]);
        std::vector<double> out(options_.dimension, 0.0);
        for (std::size_t r = 0; r < out.size(); ++r) {
            const double* row = projection_.data() + r * pooled.size();
            double sum = 0.0;
            for (std::size_t k = 0; k < pooled.size(); ++k) sum += row[k] * pooled[k];
            out[r] = sum;
        }
        return normalized(out);
    }

    MockOptions options_;
    std::vector<double> projection_;
};

struct OnnxOptions {
    std::filesystem::path image_model;
    std::filesystem::path text_model;
    std::filesystem::path bpe_vocab;
    std::size_t context_length = 77;
    std::size_t dimension = 512;
    ImagePreprocessSpec preprocess{};
};

/// Frozen ONNX encoders run through OpenCV's DNN module. The image model
/// takes a 1x3xSxS float tensor; the text model takes 1xL token ids (fed as
/// float, the only input type the module accepts). Both return 1xD.
class OnnxBackend final : public EncoderBackend {
public:
    explicit OnnxBackend(OnnxOptions options) : options_(std::move(options)) {
        options_.preprocess.validate();
        std::string id = "onnx";
        if (!options_.image_model.empty()) {
            image_net_ = load(options_.image_model);
            id += ":image=" + sha256_file(options_.image_model);
        }
        if (!options_.text_model.empty()) {
            if (options_.bpe_vocab.empty()) {
                fail(ErrorCode::BackendFailure, "text model configured without a BPE vocabulary");
            }
            text_net_ = load(options_.text_model);
            tokenizer_.emplace(BpeTokenizer::from_file(options_.bpe_vocab, options_.context_length));
            id += ":text=" + sha256_file(options_.text_model);
        }
        if (!image_net_ && !text_net_) fail(ErrorCode::BackendFailure, "no model configured");
        backend_id_ = std::move(id);
    }

    EmbeddingSpace space() const override { return {options_.dimension, backend_id_}; }
    bool supports_images() const override { return image_net_.has_value(); }
    bool supports_text() const override { return text_net_.has_value(); }

    std::vector<double> encode_image(const Raster& image) const override {
        if (!image_net_) fail(ErrorCode::BackendFailure, "no image model configured");
        auto tensor = preprocess(image, options_.preprocess);
        const int shape[] = {1, 3, tensor.height, tensor.width};
        cv::Mat blob(4, shape, CV_32F, tensor.chw.data());
        return run(*image_net_, blob);
    }

    std::vector<double> encode_text(const std::string& prompt) const override {
        if (!text_net_) fail(ErrorCode::BackendFailure, "no text model configured");
        const auto tokens = tokenizer_->encode_padded(prompt);
        const int shape[] = {1, static_cast<int>(tokens.size())};
        cv::Mat blob(2, shape, CV_32F);
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            blob.ptr<float>()[i] = static_cast<float>(tokens[i]);
        }
        return run(*text_net_, blob);
    }

private:
    static cv::dnn::Net load(const std::filesystem::path& path) {
        if (!std::filesystem::exists(path)) fail(ErrorCode::BackendFailure, "model not found: " + path.string());
        try {
            auto net = cv::dnn::readNetFromONNX(path.string());
            if (net.empty()) fail(ErrorCode::BackendFailure, "empty network in " + path.string());
            return net;
        } catch (const cv::Exception& e) {
            fail(ErrorCode::BackendFailure, "cannot load " + path.string() + ": " + e.what());
        }
    }

    std::vector<double> run(cv::dnn::Net& net, const cv::Mat& blob) const {
        // cv::dnn::Net is not reentrant
        std::lock_guard lock(mutex_);
        cv::Mat out;
        try {
            net.setInput(blob);
            out = net.forward();
        } catch (const cv::Exception& e) {
            fail(ErrorCode::BackendFailure, e.what());
        }
        if (out.total() != options_.dimension) {
            fail(ErrorCode::DimensionMismatch, "model produced " + std::to_string(out.total()) +
                                                   " values, config says " +
                                                   std::to_string(options_.dimension));
        }
        const float* data = out.ptr<float>();
        std::vector<double> v(data, data + out.total());
        return normalized(v);
    }

    OnnxOptions options_;
    std::string backend_id_;
    mutable std::optional<cv::dnn::Net> image_net_;
    mutable std::optional<cv::dnn::Net> text_net_;
    std::optional<BpeTokenizer> tokenizer_;
    mutable std::mutex mutex_;
};

/// Backend configuration document (JSON). Relative model paths resolve
/// against `base_dir`.
///
///   {"backend": "mock" | "onnx", "dimension": 512,
///    "mock": {"seed": 0, "image_mode": "hash" | "projection", "grid": 8},
///    "onnx": {"image_model": "...", "text_model": "...", "bpe_vocab": "...",
///             "context_length": 77},
///    "preprocess": {"target_side": 224, "center_crop": true,
///                   "channel_means": [..3], "channel_stds": [..3],
///                   "resize_filter": "bicubic"}}
struct BackendConfig {
    nlohmann::json document = nlohmann::json::object();
    std::filesystem::path base_dir;

    static BackendConfig from_file(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) fail(ErrorCode::IoFailure, "cannot open backend config " + path.string());
        BackendConfig config;
        try {
            config.document = nlohmann::json::parse(in);
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorCode::ParseFailure, "backend config " + path.string() + ": " + e.what());
        }
        config.base_dir = path.parent_path();
        return config;
    }
};

inline ImagePreprocessSpec parse_preprocess(const nlohmann::json& j) {
    ImagePreprocessSpec spec;
    if (j.is_null()) return spec;
    spec.target_side = j.value("target_side", spec.target_side);
    spec.center_crop = j.value("center_crop", spec.center_crop);
    if (j.contains("channel_means")) spec.channel_means = j.at("channel_means").get<std::array<double, 3>>();
    if (j.contains("channel_stds")) spec.channel_stds = j.at("channel_stds").get<std::array<double, 3>>();
    spec.resize_filter = j.value("resize_filter", spec.resize_filter);
    spec.validate();
    return spec;
}

inline std::unique_ptr<EncoderBackend> make_backend(const BackendConfig& config) {
    const auto& doc = config.document;
    try {
        const auto kind = doc.value("backend", std::string("mock"));
        const auto dimension = doc.value("dimension", std::size_t{512});
        const auto preprocess_spec = parse_preprocess(doc.value("preprocess", nlohmann::json()));
        if (kind == "mock") {
            const auto mock = doc.value("mock", nlohmann::json::object());
            MockOptions options;
            options.dimension = dimension;
            options.seed = mock.value("seed", std::uint64_t{0});
            const auto mode = mock.value("image_mode", std::string("hash"));
            if (mode == "hash") {
                options.image_mode = MockImageMode::Hash;
            } else if (mode == "projection") {
                options.image_mode = MockImageMode::Projection;
            } else {
                fail(ErrorCode::InvalidArgument, "unknown mock image_mode '" + mode + "'");
            }
            options.grid = mock.value("grid", 8);
            options.preprocess = preprocess_spec;
            return std::make_unique<MockBackend>(options);
        }
        if (kind == "onnx") {
            const auto onnx = doc.value("onnx", nlohmann::json::object());
            auto resolve = [&](const char* key) -> std::filesystem::path {
                const auto value = onnx.value(key, std::string());
                if (value.empty()) return {};
                std::filesystem::path p(value);
                return p.is_absolute() ? p : config.base_dir / p;
            };
            OnnxOptions options;
            options.image_model = resolve("image_model");
            options.text_model = resolve("text_model");
            options.bpe_vocab = resolve("bpe_vocab");
            options.context_length = onnx.value("context_length", std::size_t{77});
            options.dimension = dimension;
            options.preprocess = preprocess_spec;
            return std::make_unique<OnnxBackend>(options);
        }
        fail(ErrorCode::InvalidArgument, "unknown backend '" + kind + "'");
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::ParseFailure, std::string("backend config: ") + e.what());
    }
}

}  // namespace offcurate
