#pragma once

#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "lvlmlens/toymodel.hpp"
#include "lvlmlens/trace.hpp"

namespace lvlmlens::testing {

inline std::filesystem::path source_dir() { return LVLMLENS_SOURCE_DIR; }
inline std::filesystem::path fixture(const std::string& name) { return source_dir() / "fixtures" / name; }

/// Directory removed on scope exit.
class TempDir {
public:
    TempDir() {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() /
                ("lvlmlens-test-" + std::to_string(rd()) + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& p) const { return path_ / p; }

private:
    std::filesystem::path path_;
};

/// The container `gen-toy --seed N` writes with default flags.
inline toy::ToyConfig default_toy_config(std::uint64_t seed) {
    toy::ToyConfig c;
    c.seed = seed;
    return c;
}
inline const std::vector<int>& default_prompt() {
    static const std::vector<int> p{3, 9, 17};
    return p;
}

inline trace::Trace default_toy_trace(std::uint64_t seed) {
    const auto config = default_toy_config(seed);
    const auto model = toy::ToyModel::init(config);
    return toy::toy_pipeline(model, default_prompt(), toy::SyntheticImage::generate(config, seed),
                             config.max_new_tokens);
}

/// Small trace: 2x3 grid, d=16, used where speed matters.
inline trace::Trace small_toy_trace(std::uint64_t seed, int max_new = 3) {
    toy::ToyConfig c;
    c.d_model = 16;
    c.patch_rows = 2;
    c.patch_cols = 3;
    c.seed = seed;
    const auto model = toy::ToyModel::init(c);
    const std::vector<int> prompt{3, 9};
    return toy::toy_pipeline(model, prompt, toy::SyntheticImage::generate(c, seed), max_new);
}

inline std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void spit(const std::filesystem::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << bytes;
}

}  // namespace lvlmlens::testing
