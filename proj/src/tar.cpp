#include "lvlmlens/tar.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>

#include "lvlmlens/error.hpp"

namespace fs = std::filesystem;

namespace lvlmlens::tar {

namespace {

constexpr std::size_t kBlock = 512;

void put_octal(std::uint8_t* field, std::size_t width, std::uint64_t value) {
    // width-1 zero-padded digits plus NUL
    std::snprintf(reinterpret_cast<char*>(field), width, "%0*llo", static_cast<int>(width - 1),
                  static_cast<unsigned long long>(value));
}

std::uint64_t get_octal(const std::uint8_t* field, std::size_t width) {
    std::uint64_t v = 0;
    std::size_t i = 0;
    while (i < width && (field[i] == ' ' || field[i] == 0)) ++i;
    for (; i < width && field[i] >= '0' && field[i] <= '7'; ++i) v = v * 8 + (field[i] - '0');
    return v;
}

std::string get_string(const std::uint8_t* field, std::size_t width) {
    const auto* end = static_cast<const std::uint8_t*>(std::memchr(field, 0, width));
    return std::string(reinterpret_cast<const char*>(field), end ? static_cast<std::size_t>(end - field) : width);
}

void append_entry(std::vector<std::uint8_t>& out, const std::string& name, const std::vector<char>& data) {
    if (name.size() > 255) throw Error(ErrorCode::IoError, "path too long for ustar: " + name);
    std::uint8_t h[kBlock] = {};
    if (name.size() <= 100) {
        std::memcpy(h, name.data(), name.size());
    } else {
        const auto cut = name.rfind('/', 155);
        if (cut == std::string::npos || name.size() - cut - 1 > 100)
            throw Error(ErrorCode::IoError, "path not splittable for ustar: " + name);
        std::memcpy(h, name.data() + cut + 1, name.size() - cut - 1);
        std::memcpy(h + 345, name.data(), cut);
    }
    put_octal(h + 100, 8, 0644);
    put_octal(h + 108, 8, 0);
    put_octal(h + 116, 8, 0);
    put_octal(h + 124, 12, data.size());
    put_octal(h + 136, 12, 0);
    h[156] = '0';
    std::memcpy(h + 257, "ustar", 6);
    std::memcpy(h + 263, "00", 2);
    std::memset(h + 148, ' ', 8);
    unsigned sum = 0;
    for (auto b : h) sum += b;
    std::snprintf(reinterpret_cast<char*>(h + 148), 8, "%06o", sum);
    h[155] = ' ';

    out.insert(out.end(), h, h + kBlock);
    out.insert(out.end(), data.begin(), data.end());
    out.resize(out.size() + (kBlock - data.size() % kBlock) % kBlock, 0);
}

fs::path safe_join(const fs::path& dest, const std::string& name) {
    fs::path rel = fs::path(name).lexically_normal();
    if (rel.is_absolute() || rel.empty() || *rel.begin() == "..")
        throw Error(ErrorCode::IoError, "archive entry escapes destination: " + name);
    return dest / rel;
}

}  // namespace

std::vector<std::uint8_t> pack_directory(const fs::path& dir) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());

    std::vector<std::uint8_t> out;
    for (const auto& f : files) {
        std::ifstream in(f, std::ios::binary);
        if (!in) throw Error(ErrorCode::IoError, "cannot read " + f.string());
        std::vector<char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        append_entry(out, fs::relative(f, dir).generic_string(), data);
    }
    out.resize(out.size() + 2 * kBlock, 0);
    return out;
}

void unpack(std::span<const std::uint8_t> archive, const fs::path& dest) {
    std::size_t pos = 0;
    std::string long_name;
    while (pos + kBlock <= archive.size()) {
        const std::uint8_t* h = archive.data() + pos;
        if (std::all_of(h, h + kBlock, [](std::uint8_t b) { return b == 0; })) return;

        unsigned sum = 0;
        for (std::size_t i = 0; i < kBlock; ++i) sum += (i >= 148 && i < 156) ? ' ' : h[i];
        if (sum != get_octal(h + 148, 8)) throw Error(ErrorCode::IoError, "tar header checksum mismatch");

        const std::uint64_t size = get_octal(h + 124, 12);
        const char type = static_cast<char>(h[156]);
        const std::size_t data_pos = pos + kBlock;
        if (data_pos + size > archive.size()) throw Error(ErrorCode::IoError, "truncated tar entry");
        const auto data = archive.subspan(data_pos, size);
        pos = data_pos + (size + kBlock - 1) / kBlock * kBlock;

        if (type == 'L') {
            long_name = get_string(data.data(), data.size());
            continue;
        }
        std::string name = long_name;
        long_name.clear();
        if (name.empty()) {
            name = get_string(h, 100);
            const std::string prefix = get_string(h + 345, 155);
            if (std::memcmp(h + 257, "ustar", 5) == 0 && !prefix.empty()) name = prefix + "/" + name;
        }

        if (type == 'x' || type == 'g') continue;
        if (type == '5') {
            fs::create_directories(safe_join(dest, name));
        } else if (type == '0' || type == '\0') {
            const fs::path target = safe_join(dest, name);
            fs::create_directories(target.parent_path());
            std::ofstream out(target, std::ios::binary | std::ios::trunc);
            out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
            if (!out) throw Error(ErrorCode::IoError, "cannot write " + target.string());
        }
        // links and devices are ignored
    }
    if (pos != archive.size()) throw Error(ErrorCode::IoError, "trailing bytes after last tar block");
}

fs::path find_container_root(const fs::path& root) {
    if (fs::exists(root / "manifest.json")) return root;
    std::vector<fs::path> subdirs;
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory()) subdirs.push_back(e.path());
    if (subdirs.size() == 1 && fs::exists(subdirs[0] / "manifest.json")) return subdirs[0];
    throw Error(ErrorCode::MissingFile, "archive contains no manifest.json");
}

}  // namespace lvlmlens::tar
