#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "crepair/errors.hpp"
#include "crepair/rng.hpp"

namespace crepair {

// One vulnerable/fixed pair. Offsets are character positions into
// vulnerable_code; [vuln_start, vuln_end) is the flawed region.
struct SampleRecord {
  std::string id;
  std::string vulnerable_code;
  std::string fixed_code;
  std::string cwe_id;
  int vuln_start = 0;
  int vuln_end = 0;
};

struct DatasetSplit {
  std::vector<SampleRecord> train;
  std::vector<SampleRecord> valid;
  std::vector<SampleRecord> test;
};

inline bool valid_cwe_id(const std::string& cwe) {
  if (cwe.size() < 5 || cwe.size() > 8) return false;
  if (cwe.compare(0, 4, "CWE-") != 0) return false;
  for (std::size_t i = 4; i < cwe.size(); ++i)
    if (!std::isdigit(static_cast<unsigned char>(cwe[i]))) return false;
  return true;
}

// Throws DataError naming the offending field.
inline void validate_record(const SampleRecord& rec) {
  if (rec.vulnerable_code.empty())
    throw DataError("field vulnerable_code: empty code");
  if (rec.fixed_code.empty()) throw DataError("field fixed_code: empty code");
  if (!valid_cwe_id(rec.cwe_id))
    throw DataError("field cwe_id: malformed CWE id '" + rec.cwe_id + "'");
  if (rec.vuln_start < 0 || rec.vuln_start > rec.vuln_end ||
      rec.vuln_end > static_cast<int>(rec.vulnerable_code.size()))
    throw DataError("field vuln_end: span out of bounds");
}

namespace detail {

inline SampleRecord parse_record_line(const std::string& line, int line_no) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("line " + std::to_string(line_no) +
                    ": malformed record: " + e.what());
  }
  SampleRecord rec;
  auto get_string = [&](const char* field) -> std::string {
    if (!j.contains(field) || !j[field].is_string())
      throw DataError("line " + std::to_string(line_no) + ": missing field " +
                      field);
    return j[field].get<std::string>();
  };
  auto get_int = [&](const char* field) -> int {
    if (!j.contains(field) || !j[field].is_number_integer())
      throw DataError("line " + std::to_string(line_no) + ": missing field " +
                      field);
    return j[field].get<int>();
  };
  rec.id = get_string("id");
  rec.vulnerable_code = get_string("vulnerable_code");
  rec.fixed_code = get_string("fixed_code");
  rec.cwe_id = get_string("cwe_id");
  rec.vuln_start = get_int("vuln_start");
  rec.vuln_end = get_int("vuln_end");
  try {
    validate_record(rec);
  } catch (const DataError& e) {
    throw DataError(std::string(e.what()) + ", line " + std::to_string(line_no));
  }
  return rec;
}

}  // namespace detail

// Line-delimited records (JSON object per line). Returns records in file
// order; any invalid line aborts with its line number.
inline std::vector<SampleRecord> load_dataset(const std::string& path,
                                              const std::string& split_tag) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + split_tag + " corpus: " + path);
  std::vector<SampleRecord> records;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    records.push_back(detail::parse_record_line(line, line_no));
  }
  return records;
}

inline void save_dataset(const std::vector<SampleRecord>& records,
                         const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write corpus file: " + path);
  for (const SampleRecord& rec : records) {
    nlohmann::json j{{"id", rec.id},
                     {"vulnerable_code", rec.vulnerable_code},
                     {"fixed_code", rec.fixed_code},
                     {"cwe_id", rec.cwe_id},
                     {"vuln_start", rec.vuln_start},
                     {"vuln_end", rec.vuln_end}};
    out << j.dump() << "\n";
  }
}

// Deterministic shuffle, then the tail floor(fraction * n) records become the
// validation slice.
inline DatasetSplit split_train_valid(const std::vector<SampleRecord>& records,
                                      double valid_fraction,
                                      std::uint64_t seed) {
  if (records.empty()) throw DataError("split: no records to split");
  if (valid_fraction < 0.0 || valid_fraction >= 1.0)
    throw DataError("split: valid fraction must be in [0, 1), got " +
                    std::to_string(valid_fraction));
  std::vector<SampleRecord> shuffled = records;
  Rng rng(seed, /*stream=*/0x59717);
  shuffle(shuffled, rng);
  std::size_t n_valid = static_cast<std::size_t>(
      std::floor(valid_fraction * static_cast<double>(shuffled.size())));
  DatasetSplit split;
  split.train.assign(shuffled.begin(),
                     shuffled.end() - static_cast<std::ptrdiff_t>(n_valid));
  split.valid.assign(shuffled.end() - static_cast<std::ptrdiff_t>(n_valid),
                     shuffled.end());
  return split;
}

// ---------------------------------------------------------------------------
// Corpus statistics report
// ---------------------------------------------------------------------------

struct CorpusStats {
  int count = 0;
  // Percentiles of the per-record length measure (nearest-rank).
  int p50 = 0, p90 = 0, p95 = 0, p99 = 0, max = 0;
  int over_limit = 0;
  int limit = 0;
  std::string measure;  // label, e.g. "chars" or "tokens"
};

inline CorpusStats compute_stats(
    const std::vector<SampleRecord>& records,
    const std::function<int(const SampleRecord&)>& length_of, int limit,
    const std::string& measure) {
  CorpusStats stats;
  stats.count = static_cast<int>(records.size());
  stats.limit = limit;
  stats.measure = measure;
  if (records.empty()) return stats;
  std::vector<int> lengths;
  lengths.reserve(records.size());
  for (const SampleRecord& rec : records) {
    int len = length_of(rec);
    lengths.push_back(len);
    if (len > limit) ++stats.over_limit;
  }
  std::sort(lengths.begin(), lengths.end());
  auto pct = [&](double p) {
    std::size_t rank = static_cast<std::size_t>(
        std::ceil(p / 100.0 * static_cast<double>(lengths.size())));
    return lengths[std::max<std::size_t>(rank, 1) - 1];
  };
  stats.p50 = pct(50);
  stats.p90 = pct(90);
  stats.p95 = pct(95);
  stats.p99 = pct(99);
  stats.max = lengths.back();
  return stats;
}

inline std::string format_stats(const CorpusStats& s) {
  std::ostringstream os;
  double frac = s.count ? static_cast<double>(s.over_limit) / s.count : 0.0;
  os << "records      " << s.count << "\n"
     << "length p50   " << s.p50 << " " << s.measure << "\n"
     << "length p90   " << s.p90 << " " << s.measure << "\n"
     << "length p95   " << s.p95 << " " << s.measure << "\n"
     << "length p99   " << s.p99 << " " << s.measure << "\n"
     << "length max   " << s.max << " " << s.measure << "\n"
     << "over limit   " << s.over_limit << " of " << s.count << " (limit "
     << s.limit << ", fraction " << std::fixed << std::setprecision(4) << frac
     << ")\n";
  return os.str();
}

}  // namespace crepair
