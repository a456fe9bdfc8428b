#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nodetab/rng.hpp"
#include "nodetab/tensor.hpp"

namespace nodetab {

enum class TaskKind : std::uint8_t { classification = 0, regression = 1 };

enum class ColumnKind : std::uint8_t { numeric = 0, categorical = 1 };

enum class SplitTag : std::uint8_t { train = 0, val = 1, test = 2 };

struct ColumnMeta {
  std::string name;
  ColumnKind kind = ColumnKind::numeric;
};

// Category value substituted for missing cells in categorical columns.
inline constexpr const char* kMissingCategory = "__missing__";

// One raw feature column; exactly one of the two payloads is populated.
struct RawColumn {
  ColumnMeta meta;
  std::vector<double> numeric;            // NaN marks a missing cell
  std::vector<std::string> categorical;
};

struct Dataset {
  std::vector<RawColumn> features;
  TaskKind task = TaskKind::regression;
  bool has_target = false;
  std::vector<double> target_real;     // regression targets
  std::vector<int> target_class;       // classification targets (label indices)
  std::vector<std::string> class_labels;  // sorted unique label strings
  std::vector<SplitTag> tags;          // per-row partition assignment
  std::size_t row_count = 0;

  std::vector<std::size_t> rows_with_tag(SplitTag tag) const;
};

struct CsvSchema {
  char delimiter = ',';
  std::string target;                        // empty: no target column expected
  std::optional<TaskKind> task;              // overrides target-type inference
  std::map<std::string, ColumnKind> kinds;   // overrides per-column inference
};

// Reads a UTF-8 CSV with a header row. Column kinds follow schema.kinds,
// otherwise a column is numeric iff every non-missing cell parses as a float.
// Missing tokens ("", "na", "n/a", "nan", "null"; case-insensitive) become
// NaN / the missing category. All rows start tagged train.
Dataset load_csv(const std::string& path, const CsvSchema& schema);

// Same parser over an in-memory document (used by tests and stdin paths).
Dataset parse_csv(const std::string& text, const CsvSchema& schema);

// Retags `fraction` of the train rows as validation, deterministically per
// seed; stratified per class for classification when `stratify` is set.
// Warnings (e.g. classes too small to stratify) are appended when a sink is
// given.
void split_train_val(Dataset& dataset, double fraction, std::uint64_t seed, bool stratify,
                     std::vector<std::string>* warnings = nullptr);

// Seeded mini-batch index blocks over `rows`: one permutation per
// (seed, epoch), chunked; the final short block is kept.
std::vector<std::vector<std::size_t>> batches(std::span<const std::size_t> rows,
                                              std::size_t batch_size, std::uint64_t seed,
                                              std::uint64_t epoch);

}  // namespace nodetab
