#pragma once

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "offcurate/error.hpp"

namespace offcurate {

/// Decoded 8-bit RGB image (CV_8UC3, RGB channel order).
struct Raster {
    cv::Mat pixels;

    int width() const noexcept { return pixels.cols; }
    int height() const noexcept { return pixels.rows; }
    bool empty() const noexcept { return pixels.empty(); }
};

struct ImagePreprocessSpec {
    int target_side = 224;
    bool center_crop = true;
    std::array<double, 3> channel_means{0.48145466, 0.4578275, 0.40821073};
    std::array<double, 3> channel_stds{0.26862954, 0.26130258, 0.27577711};
    std::string resize_filter = "bicubic";

    void validate() const {
        if (target_side <= 0) fail(ErrorCode::InvalidArgument, "target_side must be positive");
        for (double s : channel_stds) {
            if (!(s > 0.0)) fail(ErrorCode::InvalidArgument, "channel stds must be positive");
        }
        (void)interpolation();
    }

    int interpolation() const {
        if (resize_filter == "bicubic") return cv::INTER_CUBIC;
        if (resize_filter == "bilinear") return cv::INTER_LINEAR;
        if (resize_filter == "nearest") return cv::INTER_NEAREST;
        if (resize_filter == "area") return cv::INTER_AREA;
        fail(ErrorCode::InvalidArgument, "unknown resize filter '" + resize_filter + "'");
    }
};

inline Raster decode_image(std::span<const std::uint8_t> bytes) {
    if (bytes.empty()) fail(ErrorCode::DecodeFailure, "empty image buffer");
    const cv::Mat buffer(1, static_cast<int>(bytes.size()), CV_8UC1,
                         const_cast<std::uint8_t*>(bytes.data()));
    cv::Mat bgr;
    try {
        bgr = cv::imdecode(buffer, cv::IMREAD_COLOR);
    } catch (const cv::Exception& e) {
        fail(ErrorCode::DecodeFailure, e.what());
    }
    if (bgr.empty()) fail(ErrorCode::DecodeFailure, "unrecognized or corrupt image data");
    Raster out;
    cv::cvtColor(bgr, out.pixels, cv::COLOR_BGR2RGB);
    return out;
}

/// Shorter-side resize, optional center crop, per-channel standardization.
/// Returns a CHW float tensor of 3 x side x side (or the resized shape when
/// cropping is off) together with its height and width.
struct PreprocessedImage {
    int height = 0;
    int width = 0;
    std::vector<float> chw;
};

inline PreprocessedImage preprocess(const Raster& image, const ImagePreprocessSpec& spec) {
    spec.validate();
    if (image.empty()) fail(ErrorCode::DecodeFailure, "empty raster");
    const int side = spec.target_side;
    const double scale = static_cast<double>(side) / std::min(image.width(), image.height());
    const int new_w = std::max(side, static_cast<int>(std::lround(image.width() * scale)));
    const int new_h = std::max(side, static_cast<int>(std::lround(image.height() * scale)));
    cv::Mat resized;
    cv::resize(image.pixels, resized, cv::Size(new_w, new_h), 0, 0, spec.interpolation());
    if (spec.center_crop) {
        const int x = (new_w - side) / 2;
        const int y = (new_h - side) / 2;
        resized = resized(cv::Rect(x, y, side, side)).clone();
    }
    PreprocessedImage out;
    out.height = resized.rows;
    out.width = resized.cols;
    out.chw.resize(static_cast<std::size_t>(3) * out.height * out.width);
    const std::size_t plane = static_cast<std::size_t>(out.height) * out.width;
    for (int y = 0; y < out.height; ++y) {
        const auto* row = resized.ptr<cv::Vec3b>(y);
        for (int x = 0; x < out.width; ++x) {
            for (int c = 0; c < 3; ++c) {
                const double v = row[x][c] / 255.0;
                out.chw[c * plane + static_cast<std::size_t>(y) * out.width + x] =
                    static_cast<float>((v - spec.channel_means[c]) / spec.channel_stds[c]);
            }
        }
    }
    return out;
}

/// Heavy blur for safe review: downsample to 1/16 resolution with area
/// averaging, box-filter, and upsample back to the original size. Re-encoded
/// in the format named by `extension` (".png", ".jpg", ...).
inline std::vector<std::uint8_t> blur_for_review(std::span<const std::uint8_t> bytes,
                                                 const std::string& extension) {
    const Raster image = decode_image(bytes);
    const int small_w = std::max(1, image.width() / 16);
    const int small_h = std::max(1, image.height() / 16);
    cv::Mat small;
    cv::resize(image.pixels, small, cv::Size(small_w, small_h), 0, 0, cv::INTER_AREA);
    cv::blur(small, small, cv::Size(3, 3));
    cv::Mat restored;
    cv::resize(small, restored, image.pixels.size(), 0, 0, cv::INTER_LINEAR);
    cv::Mat bgr;
    cv::cvtColor(restored, bgr, cv::COLOR_RGB2BGR);
    std::vector<std::uint8_t> out;
    const std::string ext = extension.empty() ? ".png" : extension;
    try {
        if (!cv::imencode(ext, bgr, out)) fail(ErrorCode::DecodeFailure, "cannot encode " + ext);
    } catch (const cv::Exception& e) {
        fail(ErrorCode::DecodeFailure, e.what());
    }
    return out;
}

}  // namespace offcurate
