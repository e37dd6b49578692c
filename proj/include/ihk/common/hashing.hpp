#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace ihk {

std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

std::string base64_encode(std::string_view bytes);
std::string base64_decode(std::string_view text);

}  // namespace ihk
