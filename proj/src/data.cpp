#include "nodetab/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>

namespace nodetab {

namespace {

std::string lowercase(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::string trimmed(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

bool is_missing_token(const std::string& cell) {
  std::string t = lowercase(trimmed(cell));
  return t.empty() || t == "na" || t == "n/a" || t == "nan" || t == "null";
}

bool parse_double(const std::string& cell, double& out) {
  std::string t = trimmed(cell);
  if (t.empty()) return false;
  const char* begin = t.c_str();
  char* end = nullptr;
  out = std::strtod(begin, &end);
  return end == begin + t.size() && std::isfinite(out);
}

// Splits one CSV record; handles double-quoted cells with "" escapes. A
// record may span multiple physical lines inside quotes, so the splitter
// consumes from the full document.
std::vector<std::string> next_record(const std::string& text, std::size_t& pos, char delimiter) {
  std::vector<std::string> cells;
  std::string cell;
  bool quoted = false;
  bool any = false;
  while (pos < text.size()) {
    char c = text[pos];
    if (quoted) {
      if (c == '"') {
        if (pos + 1 < text.size() && text[pos + 1] == '"') {
          cell += '"';
          ++pos;
        } else {
          quoted = false;
        }
      } else {
        cell += c;
      }
      ++pos;
      any = true;
      continue;
    }
    if (c == '"' && cell.empty()) {
      quoted = true;
      ++pos;
      any = true;
      continue;
    }
    if (c == delimiter) {
      cells.push_back(cell);
      cell.clear();
      ++pos;
      any = true;
      continue;
    }
    if (c == '\n' || c == '\r') {
      if (c == '\r' && pos + 1 < text.size() && text[pos + 1] == '\n') ++pos;
      ++pos;
      if (!any) continue;  // skip blank lines between records
      cells.push_back(cell);
      return cells;
    }
    cell += c;
    ++pos;
    any = true;
  }
  if (any) cells.push_back(cell);
  return cells;
}

}  // namespace

std::vector<std::size_t> Dataset::rows_with_tag(SplitTag tag) const {
  std::vector<std::size_t> rows;
  for (std::size_t r = 0; r < tags.size(); ++r) {
    if (tags[r] == tag) rows.push_back(r);
  }
  return rows;
}

Dataset parse_csv(const std::string& text, const CsvSchema& schema) {
  std::size_t pos = 0;
  std::vector<std::string> header = next_record(text, pos, schema.delimiter);
  if (header.empty()) throw std::runtime_error("csv: no data rows");
  for (std::string& h : header) h = trimmed(h);

  std::size_t target_col = header.size();
  if (!schema.target.empty()) {
    for (std::size_t c = 0; c < header.size(); ++c) {
      if (header[c] == schema.target) target_col = c;
    }
    if (target_col == header.size()) {
      throw std::runtime_error("csv: target column '" + schema.target + "' not found");
    }
  }

  std::vector<std::vector<std::string>> rows;
  while (pos < text.size()) {
    std::vector<std::string> record = next_record(text, pos, schema.delimiter);
    if (record.empty()) continue;
    if (record.size() != header.size()) {
      throw std::runtime_error("csv: row " + std::to_string(rows.size() + 1) + " has " +
                               std::to_string(record.size()) + " cells, expected " +
                               std::to_string(header.size()));
    }
    rows.push_back(std::move(record));
  }
  if (rows.empty()) throw std::runtime_error("csv: no data rows");

  Dataset ds;
  ds.row_count = rows.size();
  ds.tags.assign(rows.size(), SplitTag::train);

  // Column kinds: configured, else numeric iff all non-missing cells parse.
  std::vector<ColumnKind> kinds(header.size(), ColumnKind::numeric);
  for (std::size_t c = 0; c < header.size(); ++c) {
    auto it = schema.kinds.find(header[c]);
    if (it != schema.kinds.end()) {
      kinds[c] = it->second;
      continue;
    }
    for (const auto& row : rows) {
      double unused;
      if (!is_missing_token(row[c]) && !parse_double(row[c], unused)) {
        kinds[c] = ColumnKind::categorical;
        break;
      }
    }
  }

  for (std::size_t c = 0; c < header.size(); ++c) {
    if (c == target_col) continue;
    RawColumn col;
    col.meta = ColumnMeta{header[c], kinds[c]};
    if (kinds[c] == ColumnKind::numeric) {
      col.numeric.reserve(rows.size());
      for (std::size_t r = 0; r < rows.size(); ++r) {
        const std::string& cell = rows[r][c];
        if (is_missing_token(cell)) {
          col.numeric.push_back(std::numeric_limits<double>::quiet_NaN());
          continue;
        }
        double v;
        if (!parse_double(cell, v)) {
          throw std::runtime_error("csv: unparsable numeric cell at row " + std::to_string(r + 1) +
                                   ", column '" + header[c] + "'");
        }
        col.numeric.push_back(v);
      }
    } else {
      col.categorical.reserve(rows.size());
      for (const auto& row : rows) {
        col.categorical.push_back(is_missing_token(row[c]) ? kMissingCategory : trimmed(row[c]));
      }
    }
    ds.features.push_back(std::move(col));
  }

  if (target_col == header.size()) {
    ds.has_target = false;
    ds.task = schema.task.value_or(TaskKind::regression);
    return ds;
  }

  ds.has_target = true;
  bool target_numeric = true;
  for (const auto& row : rows) {
    double unused;
    if (is_missing_token(row[target_col])) {
      throw std::runtime_error("csv: missing target value at row " +
                               std::to_string(&row - rows.data() + 1));
    }
    if (!parse_double(row[target_col], unused)) target_numeric = false;
  }
  ds.task = schema.task.value_or(target_numeric ? TaskKind::regression : TaskKind::classification);

  if (ds.task == TaskKind::regression) {
    if (!target_numeric) {
      throw std::runtime_error("csv: regression target column '" + schema.target +
                               "' has non-numeric values");
    }
    ds.target_real.reserve(rows.size());
    for (const auto& row : rows) {
      double v;
      parse_double(row[target_col], v);
      ds.target_real.push_back(v);
    }
  } else {
    std::set<std::string> labels;
    for (const auto& row : rows) labels.insert(trimmed(row[target_col]));
    ds.class_labels.assign(labels.begin(), labels.end());
    std::map<std::string, int> index;
    for (std::size_t i = 0; i < ds.class_labels.size(); ++i) {
      index[ds.class_labels[i]] = static_cast<int>(i);
    }
    ds.target_class.reserve(rows.size());
    for (const auto& row : rows) ds.target_class.push_back(index[trimmed(row[target_col])]);
  }
  return ds;
}

Dataset load_csv(const std::string& path, const CsvSchema& schema) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("csv: cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_csv(buf.str(), schema);
}

void split_train_val(Dataset& dataset, double fraction, std::uint64_t seed, bool stratify,
                     std::vector<std::string>* warnings) {
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw std::invalid_argument("split: fraction must lie in (0, 1)");
  }
  std::vector<std::size_t> train_rows = dataset.rows_with_tag(SplitTag::train);
  if (train_rows.empty()) throw std::invalid_argument("split: no train rows");

  bool by_class = stratify && dataset.task == TaskKind::classification && dataset.has_target;
  std::vector<std::vector<std::size_t>> groups;
  if (by_class) {
    groups.resize(dataset.class_labels.size());
    for (std::size_t r : train_rows) {
      groups[static_cast<std::size_t>(dataset.target_class[r])].push_back(r);
    }
    for (std::size_t g = 0; g < groups.size(); ++g) {
      if (!groups[g].empty() && groups[g].size() < 2 && warnings != nullptr) {
        warnings->push_back("split: class '" + dataset.class_labels[g] +
                            "' has fewer than 2 train rows; not stratified");
      }
    }
  } else {
    groups.push_back(train_rows);
  }

  Rng rng(seed);
  for (auto& group : groups) {
    rng.shuffle(std::span<std::size_t>(group));
    auto val_count = static_cast<std::size_t>(
        std::llround(fraction * static_cast<double>(group.size())));
    for (std::size_t i = 0; i < val_count; ++i) dataset.tags[group[i]] = SplitTag::val;
  }
}

std::vector<std::vector<std::size_t>> batches(std::span<const std::size_t> rows,
                                              std::size_t batch_size, std::uint64_t seed,
                                              std::uint64_t epoch) {
  if (rows.empty()) throw std::invalid_argument("batches: empty partition");
  if (batch_size == 0) throw std::invalid_argument("batches: batch size must be >= 1");
  std::vector<std::size_t> order(rows.begin(), rows.end());
  Rng rng(seed, epoch);
  rng.shuffle(std::span<std::size_t>(order));
  std::vector<std::vector<std::size_t>> blocks;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    std::size_t end = std::min(order.size(), start + batch_size);
    blocks.emplace_back(order.begin() + static_cast<long>(start),
                        order.begin() + static_cast<long>(end));
  }
  return blocks;
}

}  // namespace nodetab
