#pragma once

// Minimal reader for numeric CSV: header row, comma separator, '.' decimal,
// optional double quotes around fields.

#include <charconv>
#include <fstream>
#include <istream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "ccrm/core.hpp"

namespace ccrm::csv {

struct Table {
  std::vector<std::string> header;
  /// Column-major: columns[j][i] is row i of header[j].
  std::vector<std::vector<double>> columns;

  std::size_t rows() const { return columns.empty() ? 0 : columns.front().size(); }

  std::size_t index(const std::string& name) const {
    for (std::size_t j = 0; j < header.size(); ++j)
      if (header[j] == name) return j;
    throw Error(ErrorCode::invalid_argument, "no column named '" + name + "'");
  }

  Vector column(const std::string& name) const {
    const auto& col = columns[index(name)];
    return Eigen::Map<const Vector>(col.data(), static_cast<Eigen::Index>(col.size()));
  }
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

inline std::vector<std::string> split(const std::string& line, std::size_t line_no) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  bool was_quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      if (!trim(cur).empty()) {
        throw Error(ErrorCode::parse, "line " + std::to_string(line_no) + ": stray quote inside a field");
      }
      cur.clear();
      quoted = was_quoted = true;
    } else if (c == ',') {
      fields.emplace_back(was_quoted ? cur : std::string(trim(cur)));
      cur.clear();
      was_quoted = false;
    } else {
      cur += c;
    }
  }
  if (quoted) throw Error(ErrorCode::parse, "line " + std::to_string(line_no) + ": unterminated quote");
  fields.emplace_back(was_quoted ? cur : std::string(trim(cur)));
  return fields;
}

}  // namespace detail

inline Table read(std::istream& in) {
  Table table;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1 && line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
    if (detail::trim(line).empty()) {
      if (table.header.empty()) throw Error(ErrorCode::parse, "line " + std::to_string(line_no) + ": missing header");
      continue;
    }
    auto fields = detail::split(line, line_no);
    if (table.header.empty()) {
      for (std::size_t j = 0; j < fields.size(); ++j) {
        if (fields[j].empty()) {
          throw Error(ErrorCode::parse, "line 1: column " + std::to_string(j + 1) + " has an empty name");
        }
        for (std::size_t k = 0; k < j; ++k) {
          if (fields[k] == fields[j]) throw Error(ErrorCode::parse, "line 1: duplicate column '" + fields[j] + "'");
        }
      }
      table.header = std::move(fields);
      table.columns.resize(table.header.size());
      continue;
    }
    if (fields.size() != table.header.size()) {
      throw Error(ErrorCode::parse, "line " + std::to_string(line_no) + ": expected " +
                                        std::to_string(table.header.size()) + " fields, found " +
                                        std::to_string(fields.size()));
    }
    for (std::size_t j = 0; j < fields.size(); ++j) {
      const auto& f = fields[j];
      double v = 0.0;
      const char* first = f.data();
      const char* last = f.data() + f.size();
      if (!f.empty() && *first == '+') ++first;
      const auto [ptr, ec] = std::from_chars(first, last, v);
      if (f.empty() || ec != std::errc() || ptr != last) {
        throw Error(ErrorCode::parse, "line " + std::to_string(line_no) + ", column '" + table.header[j] +
                                          "': '" + f + "' is not a number");
      }
      table.columns[j].push_back(v);
    }
  }
  if (table.header.empty()) throw Error(ErrorCode::parse, "empty input: a header row is required");
  return table;
}

inline Table read_string(const std::string& text) {
  std::istringstream in(text);
  return read(in);
}

inline Table read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::invalid_argument, "cannot open '" + path + "'");
  return read(in);
}

}  // namespace ccrm::csv
