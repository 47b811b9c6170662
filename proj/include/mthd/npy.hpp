// Minimal reader/writer for the NumPy .npy format (2-D float arrays).
#pragma once

#include "mthd/types.hpp"

#include <filesystem>

namespace mthd::npy {

/// Writes a little-endian float32 array with shape (rows, cols).
void write(const std::filesystem::path& path, const ImageF& image);

/// Reads a 2-D float32 or float64 C-order array. Throws SchemaMismatch on any
/// unsupported header and std::runtime_error when the file cannot be read.
ImageF read(const std::filesystem::path& path);

}  // namespace mthd::npy
