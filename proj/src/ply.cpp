#include "p23d/ply.hpp"

#include "p23d/common.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace p23d::ply {

namespace {

[[noreturn]] void fail(const std::string &path, const std::string &what) {
  throw Error("pointcloud", "load", path + ": " + what);
}

bool parse_type(const std::string &s, Type &t) {
  static const struct {
    const char *name;
    Type type;
  } table[] = {{"char", Type::Int8},      {"int8", Type::Int8},       {"uchar", Type::UInt8},
               {"uint8", Type::UInt8},    {"short", Type::Int16},     {"int16", Type::Int16},
               {"ushort", Type::UInt16},  {"uint16", Type::UInt16},   {"int", Type::Int32},
               {"int32", Type::Int32},    {"uint", Type::UInt32},     {"uint32", Type::UInt32},
               {"float", Type::Float32},  {"float32", Type::Float32}, {"double", Type::Float64},
               {"float64", Type::Float64}};
  for (const auto &e : table) {
    if (s == e.name) {
      t = e.type;
      return true;
    }
  }
  return false;
}

std::size_t type_size(Type t) {
  switch (t) {
  case Type::Int8:
  case Type::UInt8:
    return 1;
  case Type::Int16:
  case Type::UInt16:
    return 2;
  case Type::Int32:
  case Type::UInt32:
  case Type::Float32:
    return 4;
  case Type::Float64:
    return 8;
  }
  return 0;
}

double decode(Type t, const unsigned char *p) {
  switch (t) {
  case Type::Int8: {
    std::int8_t v;
    std::memcpy(&v, p, 1);
    return v;
  }
  case Type::UInt8:
    return *p;
  case Type::Int16: {
    std::int16_t v;
    std::memcpy(&v, p, 2);
    return v;
  }
  case Type::UInt16: {
    std::uint16_t v;
    std::memcpy(&v, p, 2);
    return v;
  }
  case Type::Int32: {
    std::int32_t v;
    std::memcpy(&v, p, 4);
    return v;
  }
  case Type::UInt32: {
    std::uint32_t v;
    std::memcpy(&v, p, 4);
    return v;
  }
  case Type::Float32: {
    float v;
    std::memcpy(&v, p, 4);
    return v;
  }
  case Type::Float64: {
    double v;
    std::memcpy(&v, p, 8);
    return v;
  }
  }
  return 0.0;
}

double parse_ascii(Type t, const std::string &tok, bool &ok) {
  char *end = nullptr;
  const double v = std::strtod(tok.c_str(), &end);
  ok = end != tok.c_str() && *end == '\0';
  if (t == Type::Float32) {
    return static_cast<float>(v);
  }
  return v;
}

} // namespace

int Element::find(const std::string &prop) const {
  for (std::size_t i = 0; i < properties.size(); ++i) {
    if (properties[i].name == prop) {
      return static_cast<int>(i);
    }
  }
  return -1;
}

const Element *File::find(const std::string &element) const {
  for (const auto &e : elements) {
    if (e.name == element) {
      return &e;
    }
  }
  return nullptr;
}

bool is_float_type(Type t) { return t == Type::Float32 || t == Type::Float64; }

const char *type_name(Type t) {
  switch (t) {
  case Type::Int8:
    return "char";
  case Type::UInt8:
    return "uchar";
  case Type::Int16:
    return "short";
  case Type::UInt16:
    return "ushort";
  case Type::Int32:
    return "int";
  case Type::UInt32:
    return "uint";
  case Type::Float32:
    return "float";
  case Type::Float64:
    return "double";
  }
  return "?";
}

File read(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    fail(path, "cannot open file");
  }
  File file;
  std::string line;
  if (!std::getline(in, line) || line.substr(0, 3) != "ply") {
    fail(path, "header: missing 'ply' magic");
  }
  bool have_format = false;
  for (;;) {
    if (!std::getline(in, line)) {
      fail(path, "header: unexpected end of file before end_header");
    }
    if (!line.empty() && line.back() == '\r') {
      line.pop_back();
    }
    std::istringstream ls(line);
    std::string kw;
    ls >> kw;
    if (kw.empty() || kw == "comment" || kw == "obj_info") {
      continue;
    }
    if (kw == "end_header") {
      break;
    }
    if (kw == "format") {
      std::string fmt, ver;
      ls >> fmt >> ver;
      if (fmt == "ascii") {
        file.format = Format::Ascii;
      } else if (fmt == "binary_little_endian") {
        file.format = Format::BinaryLittleEndian;
      } else {
        fail(path, "header: unsupported format '" + fmt + "'");
      }
      have_format = true;
    } else if (kw == "element") {
      Element e;
      long long count = -1;
      ls >> e.name >> count;
      if (e.name.empty() || count < 0) {
        fail(path, "header: malformed element line '" + line + "'");
      }
      e.count = static_cast<std::size_t>(count);
      file.elements.push_back(std::move(e));
    } else if (kw == "property") {
      if (file.elements.empty()) {
        fail(path, "header: property before any element");
      }
      Element &e = file.elements.back();
      Property p;
      std::string t;
      ls >> t;
      if (t == "list") {
        std::string ct, vt;
        ls >> ct >> vt >> p.name;
        if (!parse_type(ct, p.count_type) || !parse_type(vt, p.type) || p.name.empty()) {
          fail(path, "header: element '" + e.name + "': malformed list property '" + line + "'");
        }
        p.is_list = true;
      } else {
        ls >> p.name;
        if (!parse_type(t, p.type) || p.name.empty()) {
          fail(path, "header: element '" + e.name + "': malformed property '" + line + "'");
        }
      }
      e.properties.push_back(p);
    } else {
      fail(path, "header: unknown keyword '" + kw + "'");
    }
  }
  if (!have_format) {
    fail(path, "header: missing format line");
  }

  for (Element &e : file.elements) {
    e.columns.assign(e.properties.size(), {});
    e.lists.assign(e.properties.size(), {});
    for (std::size_t p = 0; p < e.properties.size(); ++p) {
      if (e.properties[p].is_list) {
        e.lists[p].resize(e.count);
      } else {
        e.columns[p].resize(e.count);
      }
    }
    if (file.format == Format::Ascii) {
      for (std::size_t row = 0; row < e.count; ++row) {
        if (!std::getline(in, line)) {
          fail(path, "element '" + e.name + "': truncated at row " + std::to_string(row));
        }
        std::istringstream ls(line);
        for (std::size_t p = 0; p < e.properties.size(); ++p) {
          const Property &prop = e.properties[p];
          std::string tok;
          bool ok = false;
          if (prop.is_list) {
            ls >> tok;
            const double n = parse_ascii(prop.count_type, tok, ok);
            if (!ok || n < 0) {
              fail(path, "element '" + e.name + "': bad list count in row " + std::to_string(row));
            }
            auto &dst = e.lists[p][row];
            dst.resize(static_cast<std::size_t>(n));
            for (auto &v : dst) {
              ls >> tok;
              v = parse_ascii(prop.type, tok, ok);
              if (!ok) {
                fail(path, "element '" + e.name + "': bad value in row " + std::to_string(row));
              }
            }
          } else {
            ls >> tok;
            e.columns[p][row] = parse_ascii(prop.type, tok, ok);
            if (!ok) {
              fail(path, "element '" + e.name + "': bad value for '" + prop.name + "' in row " +
                             std::to_string(row));
            }
          }
        }
      }
    } else {
      // Fast path: all-scalar element read as one block.
      bool all_scalar = true;
      std::size_t stride = 0;
      for (const auto &prop : e.properties) {
        all_scalar = all_scalar && !prop.is_list;
        stride += type_size(prop.type);
      }
      if (all_scalar) {
        std::vector<unsigned char> buf(stride * e.count);
        in.read(reinterpret_cast<char *>(buf.data()), static_cast<std::streamsize>(buf.size()));
        if (static_cast<std::size_t>(in.gcount()) != buf.size()) {
          fail(path, "element '" + e.name + "': truncated binary data");
        }
        for (std::size_t row = 0; row < e.count; ++row) {
          const unsigned char *rp = buf.data() + row * stride;
          for (std::size_t p = 0; p < e.properties.size(); ++p) {
            e.columns[p][row] = decode(e.properties[p].type, rp);
            rp += type_size(e.properties[p].type);
          }
        }
        continue;
      }
      unsigned char tmp[8];
      auto read_one = [&](Type t) {
        const std::size_t sz = type_size(t);
        in.read(reinterpret_cast<char *>(tmp), static_cast<std::streamsize>(sz));
        if (static_cast<std::size_t>(in.gcount()) != sz) {
          fail(path, "element '" + e.name + "': truncated binary data");
        }
        return decode(t, tmp);
      };
      for (std::size_t row = 0; row < e.count; ++row) {
        for (std::size_t p = 0; p < e.properties.size(); ++p) {
          const Property &prop = e.properties[p];
          if (prop.is_list) {
            const double n = read_one(prop.count_type);
            if (n < 0) {
              fail(path, "element '" + e.name + "': negative list count");
            }
            auto &dst = e.lists[p][row];
            dst.resize(static_cast<std::size_t>(n));
            for (auto &v : dst) {
              v = read_one(prop.type);
            }
          } else {
            e.columns[p][row] = read_one(prop.type);
          }
        }
      }
    }
  }
  return file;
}

} // namespace p23d::ply
