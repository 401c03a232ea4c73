#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace cerase::io {

namespace fs = std::filesystem;

/// FNV-1a 64-bit digest.
std::uint64_t digest(std::string_view bytes);
std::string hex_digest(std::string_view bytes);
std::string to_hex(std::uint64_t value);

/// Whole file as bytes. Throws std::runtime_error when unreadable.
std::string read_file(const fs::path& path);

/// Writes to a sibling temp file, then renames over `path`. Parent
/// directories are created as needed.
void atomic_write(const fs::path& path, std::string_view bytes);

}  // namespace cerase::io
