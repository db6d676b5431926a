#ifndef SPANER_REPORT_HPP
#define SPANER_REPORT_HPP

#include <charconv>
#include <cstdint>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "spaner/eval.hpp"
#include "spaner/model.hpp"

namespace spaner::csv {

// Records end in CRLF. A leading "# ..." line carries the config echo.
inline constexpr std::string_view kEol = "\r\n";

/// Quotes a field when it contains a comma, quote, CR or LF; inner quotes double.
inline std::string field(std::string_view s) {
  if (s.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

/// Shortest representation that round-trips.
inline std::string number(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc{}) throw NumericError("cannot format number");
  return std::string(buf, end);
}

inline std::string number(std::uint64_t v) { return std::to_string(v); }

class Writer {
 public:
  explicit Writer(std::string_view echo = {}) {
    if (!echo.empty()) {
      text_ += "# ";
      text_ += echo;
      text_ += kEol;
    }
  }

  Writer& row(const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) text_ += ',';
      text_ += field(fields[i]);
    }
    text_ += kEol;
    return *this;
  }

  const std::string& str() const { return text_; }

 private:
  std::string text_;
};

inline std::string history(const TrainHistory& h, std::string_view echo) {
  Writer w(echo);
  w.row({"step", "L", "L_align", "L_ca"});
  for (const auto& s : h.steps) w.row({number(std::uint64_t{s.step}), number(s.loss), number(s.loss_align), number(s.loss_ca)});
  return w.str();
}

inline std::string retrieval(const std::vector<RetrievalReport>& reports, std::uint64_t seed, std::string_view echo) {
  Writer w(echo);
  w.row({"direction", "k", "accuracy", "seed"});
  for (const auto& r : reports) w.row({r.direction, number(std::uint64_t{r.k}), number(r.accuracy), number(seed)});
  return w.str();
}

inline std::string confusion(const ConfusionMatrix& cm, std::string_view echo) {
  Writer w(echo);
  std::vector<std::string> header{"true\\retrieved"};
  header.insert(header.end(), cm.class_names.begin(), cm.class_names.end());
  w.row(header);
  for (std::size_t i = 0; i < cm.classes(); ++i) {
    std::vector<std::string> r{cm.class_names[i]};
    for (auto c : cm.counts[i]) r.push_back(number(c));
    w.row(r);
  }
  return w.str();
}

inline std::string top_confusions(const ConfusionMatrix& cm, const std::vector<ConfusedPair>& pairs,
                                  std::string_view echo) {
  Writer w(echo);
  w.row({"rank", "true_class", "retrieved_class", "count"});
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    w.row({number(std::uint64_t{i + 1}), cm.class_names[pairs[i].true_class],
           cm.class_names[pairs[i].retrieved_class], number(pairs[i].count)});
  }
  return w.str();
}

inline std::string frozen_report(const FrozenReport& r, std::string_view echo) {
  Writer w(echo);
  w.row({"changed_parameter"});
  for (const auto& name : r.changed) w.row({name});
  return w.str();
}

struct ProjectedRow {
  double x = 0.0, y = 0.0;
  std::uint32_t class_id = 0;
  std::string class_name;
  std::string modality;
};

inline std::string projection(const std::vector<ProjectedRow>& rows, std::string_view echo) {
  Writer w(echo);
  w.row({"x", "y", "class_id", "class_name", "modality"});
  for (const auto& r : rows) w.row({number(r.x), number(r.y), number(std::uint64_t{r.class_id}), r.class_name, r.modality});
  return w.str();
}

/// Splits RFC 4180 text into records, skipping "# " comment lines outside quotes.
inline std::vector<std::vector<std::string>> parse(std::string_view text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string cur;
  bool quoted = false, at_line_start = true, any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (at_line_start && !quoted && c == '#') {
      while (i < text.size() && text[i] != '\n') ++i;
      continue;
    }
    at_line_start = false;
    if (quoted) {
      if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
      any = true;
    } else if (c == ',') {
      row.push_back(std::move(cur));
      cur.clear();
      any = true;
    } else if (c == '\r' || c == '\n') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      if (any || !cur.empty()) {
        row.push_back(std::move(cur));
        rows.push_back(std::move(row));
      }
      row.clear();
      cur.clear();
      any = false;
      at_line_start = true;
    } else {
      cur += c;
      any = true;
    }
  }
  if (any || !cur.empty()) {
    row.push_back(std::move(cur));
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace spaner::csv

#endif  // SPANER_REPORT_HPP
