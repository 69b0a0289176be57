#ifndef GPRX_CSV_HPP
#define GPRX_CSV_HPP

#include <charconv>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "gprx/error.hpp"

namespace gprx::csv {

using Row = std::vector<std::string>;

// RFC-4180 reader. Accepts LF or CRLF line endings; quoted fields may hold
// separators, doubled quotes and line breaks.
inline std::vector<Row> read(std::istream &in) {
  std::vector<Row> rows;
  Row row;
  std::string field;
  bool in_quotes = false;
  bool field_started = false;
  char c;
  auto end_field = [&] {
    row.push_back(std::move(field));
    field.clear();
    field_started = false;
  };
  auto end_row = [&] {
    end_field();
    if (!(row.size() == 1 && row[0].empty())) {
      rows.push_back(std::move(row));
    }
    row.clear();
  };
  while (in.get(c)) {
    if (in_quotes) {
      if (c == '"') {
        if (in.peek() == '"') {
          in.get(c);
          field.push_back('"');
        } else {
          in_quotes = false;
        }
      } else {
        field.push_back(c);
      }
      continue;
    }
    switch (c) {
    case '"':
      if (field_started && !field.empty()) {
        throw ParseError("unexpected quote inside unquoted CSV field");
      }
      in_quotes = true;
      field_started = true;
      break;
    case ',':
      end_field();
      break;
    case '\r':
      break;
    case '\n':
      end_row();
      break;
    default:
      field.push_back(c);
      field_started = true;
    }
  }
  if (in_quotes) {
    throw ParseError("unterminated quoted CSV field");
  }
  if (field_started || !row.empty()) {
    end_row();
  }
  if (!rows.empty() && !rows.front().empty()) {
    // Strip a UTF-8 byte order mark from the first header cell.
    std::string &first = rows.front().front();
    if (first.rfind("\xEF\xBB\xBF", 0) == 0) {
      first.erase(0, 3);
    }
  }
  return rows;
}

inline std::string quote(std::string_view field) {
  if (field.find_first_of(",\"\r\n") == std::string_view::npos) {
    return std::string(field);
  }
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') {
      out.push_back('"');
    }
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

inline void write_row(std::ostream &out, const Row &row) {
  for (std::size_t i = 0; i < row.size(); ++i) {
    if (i) {
      out << ',';
    }
    out << quote(row[i]);
  }
  out << '\n';
}

/// Shortest decimal representation that parses back to the same double.
inline std::string format_double(double value) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  if (ec != std::errc{}) {
    throw Error("failed to format floating point value");
  }
  return std::string(buf, ptr);
}

/// Parses the whole field as a double; surrounding blanks are ignored.
inline bool parse_double(std::string_view text, double &value) {
  while (!text.empty() && (text.front() == ' ' || text.front() == '\t')) {
    text.remove_prefix(1);
  }
  while (!text.empty() && (text.back() == ' ' || text.back() == '\t')) {
    text.remove_suffix(1);
  }
  if (!text.empty() && text.front() == '+') {
    text.remove_prefix(1);
  }
  if (text.empty()) {
    return false;
  }
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  return ec == std::errc{} && ptr == text.data() + text.size();
}

} // namespace gprx::csv

#endif // GPRX_CSV_HPP
