#include "dectseg/metaimage.hpp"

#include <array>
#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace dectseg {
namespace {

std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::string shortest(double v) {
  std::array<char, 32> buf{};
  auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), end);
}

// Keys accepted on input besides the six we write. Values are checked where
// they would change the interpretation of the payload.
bool known_optional_key(const std::string& key) {
  static const std::array<const char*, 10> keys{
      "BinaryData",         "BinaryDataByteOrderMSB", "ElementByteOrderMSB", "CompressedData",
      "Offset",             "TransformMatrix",        "CenterOfRotation",    "AnatomicalOrientation",
      "ElementNumberOfChannels", "HeaderSize"};
  for (const char* k : keys) {
    if (key == k) return true;
  }
  return false;
}

bool is_false(const std::string& v) { return v == "False" || v == "false" || v == "0"; }

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& value, std::size_t n) {
  std::istringstream in(value);
  std::vector<T> out;
  T x{};
  while (in >> x) out.push_back(x);
  if (out.size() != n || !in.eof()) throw FormatError("MetaImage: malformed " + key + " '" + value + "'");
  return out;
}

}  // namespace

MetaImageHeader read_metaimage_header(const std::filesystem::path& header_path) {
  std::ifstream in(header_path);
  if (!in) throw IoError("cannot open MetaImage header " + header_path.string());

  std::map<std::string, std::string> fields;
  std::string line;
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("MetaImage: line without '=': " + line);
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    fields[key] = value;
    if (key == "ElementDataFile") break;
  }

  for (const auto& [key, value] : fields) {
    static const std::array<const char*, 6> required{"ObjectType", "NDims", "DimSize", "ElementSpacing",
                                                     "ElementType", "ElementDataFile"};
    bool ok = known_optional_key(key);
    for (const char* r : required) ok = ok || key == r;
    if (!ok) throw FormatError("MetaImage: unknown header key '" + key + "'");
  }
  for (const char* key : {"NDims", "DimSize", "ElementSpacing", "ElementType", "ElementDataFile"}) {
    if (!fields.contains(key)) throw FormatError(std::string("MetaImage: missing header key '") + key + "'");
  }
  if (fields["NDims"] != "3") throw FormatError("MetaImage: only NDims = 3 is supported");
  for (const char* key : {"BinaryDataByteOrderMSB", "ElementByteOrderMSB", "CompressedData"}) {
    if (fields.contains(key) && !is_false(fields[key])) {
      throw FormatError(std::string("MetaImage: unsupported ") + key + " = " + fields[key]);
    }
  }
  if (fields.contains("ElementNumberOfChannels") && fields["ElementNumberOfChannels"] != "1") {
    throw FormatError("MetaImage: multi-channel images are not supported");
  }
  if (fields.contains("HeaderSize") && fields["HeaderSize"] != "0") {
    throw FormatError("MetaImage: non-zero HeaderSize is not supported");
  }

  MetaImageHeader header;
  const auto dims = parse_list<Index>("DimSize", fields["DimSize"], 3);
  header.dims = Dims{dims[0], dims[1], dims[2]};
  const auto sp = parse_list<double>("ElementSpacing", fields["ElementSpacing"], 3);
  header.spacing = Spacing{sp[0], sp[1], sp[2]};
  header.element_type = fields["ElementType"];
  if (header.element_type != "MET_FLOAT" && header.element_type != "MET_UCHAR") {
    throw FormatError("MetaImage: unsupported ElementType " + header.element_type);
  }
  if (fields["ElementDataFile"] == "LOCAL") throw FormatError("MetaImage: LOCAL data is not supported");
  header.data_file = header_path.parent_path() / fields["ElementDataFile"];
  return header;
}

template <typename T>
Grid<T> read_metaimage(const std::filesystem::path& header_path) {
  const MetaImageHeader header = read_metaimage_header(header_path);
  if (header.element_type != GridTraits<T>::element_type) {
    throw FormatError("MetaImage: element type " + header.element_type + " does not match requested " +
                      std::string(GridTraits<T>::element_type));
  }
  if (header.dims.x <= 0 || header.dims.y <= 0 || header.dims.z <= 0) {
    throw FormatError("MetaImage: DimSize must be positive");
  }

  std::ifstream raw(header.data_file, std::ios::binary);
  if (!raw) throw IoError("cannot open MetaImage payload " + header.data_file.string());
  const auto n = static_cast<std::size_t>(header.dims.count());
  std::vector<char> bytes((std::istreambuf_iterator<char>(raw)), std::istreambuf_iterator<char>());
  if (bytes.size() != n * sizeof(T)) {
    throw FormatError("MetaImage: payload has " + std::to_string(bytes.size()) + " bytes, DimSize implies " +
                      std::to_string(n * sizeof(T)));
  }

  std::vector<T> values(n);
  if constexpr (std::is_same_v<T, float>) {
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t bits = 0;
      std::memcpy(&bits, bytes.data() + 4 * i, 4);
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
      values[i] = std::bit_cast<float>(bits);
    }
  } else {
    std::memcpy(values.data(), bytes.data(), n);
  }
  return Grid<T>(header.dims, header.spacing, std::move(values));
}

template <typename T>
void write_metaimage(const Grid<T>& grid, const std::filesystem::path& header_path) {
  if (header_path.extension() != ".mhd") throw IoError("MetaImage header path must end in .mhd");
  std::filesystem::path raw_path = header_path;
  raw_path.replace_extension(".raw");

  std::ostringstream header;
  header << "ObjectType = Image\n"
         << "NDims = 3\n"
         << "DimSize = " << grid.dims().x << ' ' << grid.dims().y << ' ' << grid.dims().z << '\n'
         << "ElementSpacing = " << shortest(grid.spacing().x) << ' ' << shortest(grid.spacing().y) << ' '
         << shortest(grid.spacing().z) << '\n'
         << "ElementType = " << GridTraits<T>::element_type << '\n'
         << "ElementDataFile = " << raw_path.filename().string() << '\n';

  std::ofstream hdr(header_path, std::ios::binary);
  if (!hdr) throw IoError("cannot write " + header_path.string());
  hdr << header.str();
  if (!hdr) throw IoError("write failed: " + header_path.string());

  std::ofstream raw(raw_path, std::ios::binary);
  if (!raw) throw IoError("cannot write " + raw_path.string());
  const auto values = grid.values();
  if constexpr (std::is_same_v<T, float>) {
    std::vector<char> bytes(values.size() * 4);
    for (std::size_t i = 0; i < values.size(); ++i) {
      auto bits = std::bit_cast<std::uint32_t>(values[i]);
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
      std::memcpy(bytes.data() + 4 * i, &bits, 4);
    }
    raw.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  } else {
    raw.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size()));
  }
  if (!raw) throw IoError("write failed: " + raw_path.string());
}

template Grid<float> read_metaimage<float>(const std::filesystem::path&);
template Grid<Organ> read_metaimage<Organ>(const std::filesystem::path&);
template Grid<std::uint8_t> read_metaimage<std::uint8_t>(const std::filesystem::path&);
template void write_metaimage<float>(const Grid<float>&, const std::filesystem::path&);
template void write_metaimage<Organ>(const Grid<Organ>&, const std::filesystem::path&);
template void write_metaimage<std::uint8_t>(const Grid<std::uint8_t>&, const std::filesystem::path&);

}  // namespace dectseg
