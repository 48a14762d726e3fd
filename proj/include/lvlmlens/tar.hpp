#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

// Minimal ustar archives, enough to move trace containers over HTTP.
namespace lvlmlens::tar {

/// Archive of every regular file under `dir`, paths relative to it, sorted.
std::vector<std::uint8_t> pack_directory(const std::filesystem::path& dir);

/// Extracts regular files and directories into `dest`. Handles GNU long names and skips pax headers.
/// Throws IoError on malformed archives or entries escaping `dest`.
void unpack(std::span<const std::uint8_t> archive, const std::filesystem::path& dest);

/// The directory under `root` that holds manifest.json: `root` itself or its only subdirectory.
/// Throws MissingFile when neither exists.
std::filesystem::path find_container_root(const std::filesystem::path& root);

}  // namespace lvlmlens::tar
