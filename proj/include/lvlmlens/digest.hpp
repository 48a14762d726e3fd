#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>

namespace lvlmlens {

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::string_view text);

/// Digest over every regular file under `dir` (relative path + contents, sorted by path).
std::string directory_digest(const std::filesystem::path& dir);

}  // namespace lvlmlens
