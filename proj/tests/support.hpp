#pragma once

// Shared fixtures for the test suites: random geometry, planted clusters and
// on-disk image datasets.

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <sys/wait.h>
#include <string>
#include <unistd.h>
#include <vector>

#include "offcurate/embedding.hpp"
#include "offcurate/prompts.hpp"
#include "offcurate/random.hpp"
#include "offcurate/smid.hpp"
#include "offcurate/tuning.hpp"

namespace testing_support {

using namespace offcurate;

inline std::vector<double> random_vector(Rng& rng, std::size_t dim) {
    std::vector<double> v(dim);
    for (double& x : v) x = rng.gaussian();
    return v;
}

inline std::vector<double> random_unit(Rng& rng, std::size_t dim) { return normalized(random_vector(rng, dim)); }

inline std::string pad_id(std::size_t i, std::string prefix = "img") {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%05zu", i);
    return prefix + buf;
}

/// Two antipodal clusters +mu / -mu on the sphere with isotropic Gaussian
/// noise of standard deviation `sigma` per component, renormalized.
struct ClusterData {
    std::vector<double> center;
    std::vector<LabeledExample> train;
    std::vector<LabeledExample> test;
};

inline std::vector<LabeledExample> sample_clusters(Rng& rng, const std::vector<double>& center, std::size_t n,
                                                   double sigma, const std::string& prefix) {
    std::vector<LabeledExample> out;
    for (std::size_t i = 0; i < n; ++i) {
        const bool offensive = i % 2 == 0;
        std::vector<double> v(center.size());
        for (std::size_t d = 0; d < v.size(); ++d) {
            v[d] = (offensive ? center[d] : -center[d]) + sigma * rng.gaussian();
        }
        out.push_back({{pad_id(i, prefix), normalized(v)}, offensive ? Label::Offensive : Label::NonOffensive});
    }
    return out;
}

inline ClusterData planted_clusters(std::uint64_t seed, std::size_t dim, std::size_t n_train, std::size_t n_test,
                                    double sigma) {
    Rng rng(seed);
    ClusterData data;
    data.center = random_unit(rng, dim);
    data.train = sample_clusters(rng, data.center, n_train, sigma, "train");
    data.test = sample_clusters(rng, data.center, n_test, sigma, "test");
    return data;
}

inline PromptSet random_prompts(Rng& rng, std::size_t dim, double temperature, std::size_t anchors_per_class = 1) {
    PromptSet p;
    p.space = {dim, "test"};
    p.temperature = temperature;
    for (const char* name : {"NonOffensive", "Offensive"}) {
        PromptClass c{name, {}};
        for (std::size_t a = 0; a < anchors_per_class; ++a) c.anchors.push_back(random_unit(rng, dim));
        p.classes.push_back(std::move(c));
    }
    return p;
}

/// Central-difference gradient of tuning_loss, one anchor component at a
/// time, without renormalizing the perturbed anchor.
inline AnchorGradients finite_difference_gradient(const PromptSet& prompts, const std::vector<LabeledExample>& batch,
                                                  double h = 1e-5) {
    AnchorGradients g(prompts.classes.size());
    PromptSet probe = prompts;
    for (std::size_t c = 0; c < prompts.classes.size(); ++c) {
        for (std::size_t a = 0; a < prompts.classes[c].anchors.size(); ++a) {
            std::vector<double> column(prompts.space.dimension);
            for (std::size_t i = 0; i < column.size(); ++i) {
                double& z = probe.classes[c].anchors[a][i];
                const double saved = z;
                z = saved + h;
                const double up = tuning_loss(probe, batch);
                z = saved - h;
                const double down = tuning_loss(probe, batch);
                z = saved;
                column[i] = (up - down) / (2.0 * h);
            }
            g[c].push_back(std::move(column));
        }
    }
    return g;
}

/// |a - b| / max(|a|, |b|) over all anchor components at once; 0 when both vanish.
inline double gradient_relative_error(const AnchorGradients& a, const AnchorGradients& b) {
    double diff = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t c = 0; c < a.size(); ++c) {
        for (std::size_t k = 0; k < a[c].size(); ++k) {
            for (std::size_t i = 0; i < a[c][k].size(); ++i) {
                diff += (a[c][k][i] - b[c][k][i]) * (a[c][k][i] - b[c][k][i]);
                na += a[c][k][i] * a[c][k][i];
                nb += b[c][k][i] * b[c][k][i];
            }
        }
    }
    const double scale = std::sqrt(std::max(na, nb));
    return scale == 0.0 ? 0.0 : std::sqrt(diff) / scale;
}

/// Random labelled batch of unit vectors.
inline std::vector<LabeledExample> random_batch(Rng& rng, std::size_t dim, std::size_t n) {
    std::vector<LabeledExample> out;
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back({{pad_id(i), random_unit(rng, dim)}, rng.below(2) ? Label::Offensive : Label::NonOffensive});
    }
    return out;
}

/// Unique scratch directory removed on destruction.
class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("offcurate-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const noexcept { return path_; }
    std::filesystem::path operator/(const std::string& child) const { return path_ / child; }

private:
    std::filesystem::path path_;
};

/// Writes a small noisy PNG whose dominant colour (BGR) is `base`.
inline void write_png(const std::filesystem::path& path, cv::Scalar base, std::uint64_t seed, int side = 32) {
    std::filesystem::create_directories(path.parent_path());
    cv::Mat img(side, side, CV_8UC3);
    Rng rng(seed);
    for (int y = 0; y < side; ++y) {
        for (int x = 0; x < side; ++x) {
            auto& px = img.at<cv::Vec3b>(y, x);
            for (int c = 0; c < 3; ++c) {
                const double v = base[c] + 20.0 * rng.gaussian();
                px[c] = static_cast<unsigned char>(std::clamp(v, 0.0, 255.0));
            }
        }
    }
    cv::imwrite(path.string(), img);
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::filesystem::create_directories(path.parent_path());
    std::ofstream(path, std::ios::binary) << text;
}

/// Image tree for end-to-end runs: 4 class folders of `per_class` PNGs. The
/// planted offensive images are red, the rest blue or green, so a projection
/// mock encoder separates them. Ratings put planted images at 1-2 and the
/// rest at 4-5, except every 10th benign image which sits in the neutral band.
struct MockDataset {
    std::filesystem::path images;
    std::filesystem::path ratings;
    std::filesystem::path backend;
    std::vector<std::string> planted;  // cache ids, sorted
    std::map<std::string, std::size_t> planted_per_class;
    std::size_t total = 0;
};

inline MockDataset write_mock_dataset(const std::filesystem::path& root, std::size_t per_class = 30,
                                      std::uint64_t seed = 11) {
    const std::vector<std::pair<std::string, std::size_t>> classes{
        {"animals", 5}, {"people", 10}, {"scenes", 0}, {"weapons", 15}};
    MockDataset out;
    out.images = root / "images";
    out.ratings = root / "ratings.csv";
    out.backend = root / "backend.json";
    Rng rng(seed);
    std::ofstream csv(out.ratings);
    csv << "img_name,moral_mean\n";
    std::size_t benign = 0;
    for (const auto& [dir, planted] : classes) {
        for (std::size_t i = 0; i < per_class; ++i) {
            const std::string stem = dir + "/" + pad_id(i);
            const bool offensive = i < planted;
            const double jitter = rng.uniform() * 40.0;
            const cv::Scalar colour = offensive ? cv::Scalar(30 + jitter, 40, 210)
                                      : (i % 2) ? cv::Scalar(200, 60 + jitter, 40)
                                                : cv::Scalar(60, 190, 50 + jitter);
            write_png(out.images / (stem + ".png"), colour, mix_seed(seed, out.total), 40);
            double rating = offensive ? 1.0 + rng.uniform() : 4.0 + rng.uniform();
            if (!offensive && benign++ % 10 == 0) rating = 3.0;
            csv << stem << ',' << rating << '\n';
            if (offensive) {
                out.planted.push_back(stem + ".png");
                ++out.planted_per_class[dir];
            }
            ++out.total;
        }
    }
    std::sort(out.planted.begin(), out.planted.end());
    std::ofstream(out.backend) << R"({"backend": "mock", "dimension": 64, "mock": {"seed": 3, "image_mode": "projection", "grid": 4}})";
    return out;
}

struct CommandResult {
    int exit_code = -1;
    std::string out;
    std::string err;
};

inline std::string shell_quote(const std::string& s) {
    std::string q = "'";
    for (char c : s) q += c == '\'' ? std::string("'\\''") : std::string(1, c);
    return q + "'";
}

inline std::string slurp(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Runs the CLI binary with `args`, capturing both streams.
inline CommandResult run_cli(const std::string& binary, const std::vector<std::string>& args) {
    static std::atomic<int> counter{0};
    const auto base = std::filesystem::temp_directory_path() /
                      ("offcurate-cli-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::string cmd = shell_quote(binary);
    for (const auto& a : args) cmd += " " + shell_quote(a);
    cmd += " >" + shell_quote(base.string() + ".out") + " 2>" + shell_quote(base.string() + ".err");
    const int status = std::system(cmd.c_str());
    CommandResult r;
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(base.string() + ".out");
    r.err = slurp(base.string() + ".err");
    std::filesystem::remove(base.string() + ".out");
    std::filesystem::remove(base.string() + ".err");
    return r;
}

}  // namespace testing_support
