#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace p23d::ply {

enum class Format { Ascii, BinaryLittleEndian };

enum class Type { Int8, UInt8, Int16, UInt16, Int32, UInt32, Float32, Float64 };

struct Property {
  std::string name;
  Type type = Type::Float32;
  bool is_list = false;
  Type count_type = Type::UInt8;
};

/// One element block. Scalar properties are stored column-wise; list
/// properties keep one vector per row.
struct Element {
  std::string name;
  std::size_t count = 0;
  std::vector<Property> properties;
  std::vector<std::vector<double>> columns;
  std::vector<std::vector<std::vector<double>>> lists;

  /// Index of the named property or -1.
  int find(const std::string &prop) const;
};

struct File {
  Format format = Format::BinaryLittleEndian;
  std::vector<Element> elements;

  const Element *find(const std::string &element) const;
};

/// Parses an ASCII or binary little-endian PLY file. Errors are reported as
/// p23d::Error{"pointcloud", "load", ...} naming the offending element.
File read(const std::string &path);

bool is_float_type(Type t);
const char *type_name(Type t);

} // namespace p23d::ply
