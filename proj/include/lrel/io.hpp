#pragma once

#include <string>

namespace lrel {

// Writes to "<path>.tmp" then renames, so a crash never leaves a partial
// file in the final location.
void write_file_atomic(const std::string& path, const std::string& bytes);

std::string read_file(const std::string& path);  // throws FormatError if unreadable

}  // namespace lrel
