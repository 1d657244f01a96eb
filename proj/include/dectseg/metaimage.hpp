#pragma once

#include <filesystem>
#include <string>

#include "dectseg/volume.hpp"

namespace dectseg {

/// Parsed MetaImage (.mhd) header. Only uncompressed little-endian 3D
/// images with an external data file are supported.
struct MetaImageHeader {
  Dims dims;
  Spacing spacing;
  std::string element_type;        // MET_FLOAT or MET_UCHAR
  std::filesystem::path data_file;  // resolved against the header location
};

MetaImageHeader read_metaimage_header(const std::filesystem::path& header_path);

/// Reads a grid whose element type matches T (MET_FLOAT for Volume,
/// MET_UCHAR for LabelVolume / MaskVolume).
template <typename T>
Grid<T> read_metaimage(const std::filesystem::path& header_path);

/// Writes `<stem>.mhd` and its `<stem>.raw` payload next to it. The header
/// path must end in .mhd.
template <typename T>
void write_metaimage(const Grid<T>& grid, const std::filesystem::path& header_path);

inline Volume read_volume(const std::filesystem::path& p) { return read_metaimage<float>(p); }
inline LabelVolume read_labels(const std::filesystem::path& p) { return read_metaimage<Organ>(p); }
inline MaskVolume read_mask(const std::filesystem::path& p) { return read_metaimage<std::uint8_t>(p); }

}  // namespace dectseg
