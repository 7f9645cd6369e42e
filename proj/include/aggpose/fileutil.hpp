#pragma once

#include <filesystem>
#include <functional>
#include <string>

namespace aggpose {

/// Calls `write` with a temporary sibling path, then renames it onto `path`.
/// The temporary is removed if `write` throws.
void atomic_write(const std::filesystem::path& path, const std::function<void(const std::filesystem::path&)>& write);

void atomic_write_text(const std::filesystem::path& path, const std::string& text);

std::string read_text(const std::filesystem::path& path);

}  // namespace aggpose
