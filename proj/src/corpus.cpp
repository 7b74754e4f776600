#include "merl/corpus.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <unordered_set>

namespace merl {

namespace fs = std::filesystem;

namespace {

// Length in bytes of a Unicode whitespace code point starting at `p`, or 0.
std::size_t whitespace_length(std::string_view s, std::size_t p) {
  const auto c = static_cast<unsigned char>(s[p]);
  if (c == ' ' || (c >= 0x09 && c <= 0x0d)) return 1;
  auto byte = [&](std::size_t i) -> unsigned {
    return p + i < s.size() ? static_cast<unsigned char>(s[p + i]) : 0u;
  };
  if (c == 0xc2 && (byte(1) == 0x85 || byte(1) == 0xa0)) return 2;  // NEL, NBSP
  if (c == 0xe1 && byte(1) == 0x9a && byte(2) == 0x80) return 3;    // U+1680
  if (c == 0xe2 && byte(1) == 0x80) {
    const unsigned b = byte(2);
    if ((b >= 0x80 && b <= 0x8a) || b == 0xa8 || b == 0xa9 || b == 0xaf) return 3;
  }
  if (c == 0xe2 && byte(1) == 0x81 && byte(2) == 0x9f) return 3;  // U+205F
  if (c == 0xe3 && byte(1) == 0x80 && byte(2) == 0x80) return 3;  // U+3000
  return 0;
}

std::vector<std::string> split_pipe(const std::string& text) {
  std::vector<std::string> out;
  if (text.empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto pos = text.find('|', start);
    std::string item = text.substr(start, pos == std::string::npos ? pos : pos - start);
    if (!item.empty()) out.push_back(std::move(item));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

// RFC 4180 reader: quoted fields may contain separators, doubled quotes and
// newlines. Returns false at end of input.
bool read_csv_row(std::istream& in, std::vector<std::string>& fields,
                  std::size_t& line) {
  fields.clear();
  std::string field;
  bool in_quotes = false;
  bool any = false;
  char c;
  while (in.get(c)) {
    any = true;
    if (in_quotes) {
      if (c == '"') {
        if (in.peek() == '"') {
          in.get();
          field.push_back('"');
        } else {
          in_quotes = false;
        }
      } else {
        if (c == '\n') ++line;
        field.push_back(c);
      }
      continue;
    }
    if (c == '"') {
      in_quotes = true;
    } else if (c == ',') {
      fields.push_back(std::move(field));
      field.clear();
    } else if (c == '\r') {
      continue;
    } else if (c == '\n') {
      ++line;
      fields.push_back(std::move(field));
      return true;
    } else {
      field.push_back(c);
    }
  }
  if (in_quotes) {
    throw Error(ErrorCode::parse, "line " + std::to_string(line) + ": unterminated quoted field");
  }
  if (!any) return false;
  fields.push_back(std::move(field));
  return true;
}

std::string csv_escape(const std::string& field) {
  if (field.find_first_of(",\"\n\r") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

std::string join(const std::vector<std::string>& items, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += sep;
    out += items[i];
  }
  return out;
}

template <typename T>
void write_le(std::ostream& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(value);
    std::reverse(bytes.begin(), bytes.end());
    out.write(bytes.data(), bytes.size());
  } else {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
  }
}

template <typename T>
T read_le(std::istream& in) {
  std::array<char, sizeof(T)> bytes{};
  if (!in.read(bytes.data(), bytes.size())) {
    throw Error(ErrorCode::parse, "truncated signal file");
  }
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(bytes.begin(), bytes.end());
  }
  return std::bit_cast<T>(bytes);
}


}  // namespace

std::size_t count_words(std::string_view text) {
  std::size_t count = 0;
  bool in_word = false;
  std::size_t p = 0;
  while (p < text.size()) {
    const std::size_t ws = whitespace_length(text, p);
    if (ws) {
      in_word = false;
      p += ws;
    } else {
      if (!in_word) ++count;
      in_word = true;
      ++p;
    }
  }
  return count;
}

std::string_view to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
    case Split::unassigned: return "";
  }
  return "";
}

Split parse_split(std::string_view text) {
  if (text == "train") return Split::train;
  if (text == "valid") return Split::valid;
  if (text == "test") return Split::test;
  if (text.empty()) return Split::unassigned;
  throw Error(ErrorCode::parse, "unknown split '" + std::string(text) + "'");
}

std::string_view to_string(RejectReason reason) {
  switch (reason) {
    case RejectReason::empty_report: return "empty_report";
    case RejectReason::short_report: return "short_report";
    case RejectReason::unrecoverable_signal: return "unrecoverable_signal";
  }
  return "";
}

Split CorpusManifest::split_of(const std::string& record_id) const {
  const auto it = split_assignment.find(record_id);
  return it == split_assignment.end() ? Split::unassigned : it->second;
}

std::vector<const ManifestEntry*> CorpusManifest::entries_in(Split split) const {
  std::vector<const ManifestEntry*> out;
  for (const auto& e : entries) {
    if (split_of(e.record_id) == split) out.push_back(&e);
  }
  return out;
}

Matrix<double> CorpusManifest::label_matrix(
    const std::vector<const ManifestEntry*>& rows) const {
  std::map<std::string, Index> column;
  for (std::size_t c = 0; c < label_vocabulary.size(); ++c) {
    column[label_vocabulary[c]] = static_cast<Index>(c);
  }
  Matrix<double> y = Matrix<double>::Zero(static_cast<Index>(rows.size()),
                                          static_cast<Index>(label_vocabulary.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (const auto& label : rows[i]->labels) {
      const auto it = column.find(label);
      if (it == column.end()) {
        throw Error(ErrorCode::vocabulary, "label '" + label + "' of record '" +
                                               rows[i]->record_id + "' not in vocabulary");
      }
      y(static_cast<Index>(i), it->second) = 1.0;
    }
  }
  return y;
}

CurationResult curate_pairs(std::vector<ECGReportPair> pairs) {
  CurationResult result;
  for (auto& pair : pairs) {
    const std::size_t words = count_words(pair.report.text);
    pair.report.word_count = words;
    if (words == 0) {
      result.rejected.push_back({std::move(pair), RejectReason::empty_report, "report is empty"});
      continue;
    }
    if (words < 3) {
      result.rejected.push_back({std::move(pair), RejectReason::short_report,
                                 std::to_string(words) + " words"});
      continue;
    }
    try {
      pair.ecg.signal = repair_invalid(pair.ecg.signal, pair.ecg.record_id);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::unrecoverable_lead) throw;
      result.rejected.push_back({std::move(pair), RejectReason::unrecoverable_signal, e.what()});
      continue;
    }
    result.kept.push_back(std::move(pair));
  }
  return result;
}

ECGRecord read_signal(const fs::path& path, int default_sampling_rate_hz) {
  ECGRecord record;
  record.record_id = path.stem().string();
  if (path.extension() == ".csv") {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::io, "cannot open signal file " + path.string());
    std::vector<std::vector<float>> rows;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty() || line == "\r") continue;
      std::vector<float> values;
      std::stringstream ss(line);
      std::string cell;
      while (std::getline(ss, cell, ',')) {
        try {
          values.push_back(std::stof(cell));
        } catch (const std::exception&) {
          // stof rejects "nan"/"inf" spellings on some libcs; accept them here.
          std::string lower;
          for (char c : cell) {
            if (!std::isspace(static_cast<unsigned char>(c))) {
              lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
            }
          }
          if (lower == "nan") values.push_back(std::numeric_limits<float>::quiet_NaN());
          else if (lower == "inf" || lower == "+inf") values.push_back(std::numeric_limits<float>::infinity());
          else if (lower == "-inf") values.push_back(-std::numeric_limits<float>::infinity());
          else throw Error(ErrorCode::parse, path.string() + ":" + std::to_string(line_no) +
                                                 ": bad value '" + cell + "'");
        }
      }
      if (!rows.empty() && values.size() != rows.front().size()) {
        throw Error(ErrorCode::parse, path.string() + ":" + std::to_string(line_no) +
                                          ": lead length mismatch");
      }
      rows.push_back(std::move(values));
    }
    if (rows.empty()) throw Error(ErrorCode::parse, path.string() + ": no leads");
    record.signal.resize(static_cast<Index>(rows.size()), static_cast<Index>(rows.front().size()));
    for (std::size_t l = 0; l < rows.size(); ++l) {
      for (std::size_t t = 0; t < rows[l].size(); ++t) {
        record.signal(static_cast<Index>(l), static_cast<Index>(t)) = rows[l][t];
      }
    }
    record.sampling_rate_hz = default_sampling_rate_hz;
    return record;
  }

  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open signal file " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "ECG1", 4) != 0) {
    throw Error(ErrorCode::parse, path.string() + ": bad magic (expected ECG1)");
  }
  const auto leads = read_le<std::uint32_t>(in);
  const auto samples = read_le<std::uint32_t>(in);
  const auto rate = read_le<std::uint32_t>(in);
  if (leads == 0 || rate == 0) {
    throw Error(ErrorCode::parse, path.string() + ": zero leads or sampling rate");
  }
  record.signal.resize(leads, samples);
  for (std::uint32_t l = 0; l < leads; ++l) {
    for (std::uint32_t t = 0; t < samples; ++t) {
      record.signal(l, t) = read_le<float>(in);
    }
  }
  record.sampling_rate_hz = static_cast<int>(rate);
  // Optional trailing block: lead count then length-prefixed names.
  if (in.peek() != std::char_traits<char>::eof()) {
    const auto names = read_le<std::uint32_t>(in);
    if (names != leads) throw Error(ErrorCode::parse, path.string() + ": lead name count mismatch");
    for (std::uint32_t l = 0; l < leads; ++l) {
      const auto len = read_le<std::uint32_t>(in);
      std::string name(len, '\0');
      if (!in.read(name.data(), len)) throw Error(ErrorCode::parse, path.string() + ": truncated lead names");
      record.lead_names.push_back(std::move(name));
    }
  }
  return record;
}

void write_signal(const fs::path& path, const ECGRecord& record) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (path.extension() == ".csv") {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::io, "cannot write " + path.string());
    out.precision(9);
    for (Index l = 0; l < record.num_leads(); ++l) {
      for (Index t = 0; t < record.num_samples(); ++t) {
        if (t) out << ',';
        out << record.signal(l, t);
      }
      out << '\n';
    }
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::io, "cannot write " + path.string());
  out.write("ECG1", 4);
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(record.num_leads()));
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(record.num_samples()));
  write_le<std::uint32_t>(out, static_cast<std::uint32_t>(record.sampling_rate_hz));
  for (Index l = 0; l < record.num_leads(); ++l) {
    for (Index t = 0; t < record.num_samples(); ++t) {
      write_le<float>(out, record.signal(l, t));
    }
  }
  if (static_cast<Index>(record.lead_names.size()) == record.num_leads()) {
    write_le<std::uint32_t>(out, static_cast<std::uint32_t>(record.lead_names.size()));
    for (const auto& name : record.lead_names) {
      write_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
    }
  }
}

CorpusManifest load_manifest(const fs::path& path, const ManifestOptions& options) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, "cannot open manifest " + path.string());

  CorpusManifest manifest;
  manifest.base_dir = path.parent_path();
  std::vector<std::string> fields;
  std::size_t line = 1;
  if (!read_csv_row(in, fields, line)) {
    throw Error(ErrorCode::parse, path.string() + ": empty manifest file");
  }
  static const std::vector<std::string> kHeader = {"record_id", "signal_path", "report",
                                                   "labels", "split"};
  if (!fields.empty() && fields[0].rfind("\xEF\xBB\xBF", 0) == 0) fields[0].erase(0, 3);
  if (fields != kHeader) {
    throw Error(ErrorCode::parse, path.string() + ":1: header must be '" + join(kHeader, ",") + "'");
  }

  std::set<std::string> vocab_set;
  if (options.label_vocabulary) {
    manifest.label_vocabulary = *options.label_vocabulary;
    vocab_set.insert(manifest.label_vocabulary.begin(), manifest.label_vocabulary.end());
  }
  std::unordered_set<std::string> seen;
  while (true) {
    const std::size_t row_line = line;
    if (!read_csv_row(in, fields, line)) break;
    if (fields.size() == 1 && fields[0].empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(row_line);
    if (fields.size() != kHeader.size()) {
      throw Error(ErrorCode::parse, where + ": expected 5 fields, got " +
                                        std::to_string(fields.size()));
    }
    ManifestEntry entry;
    entry.record_id = fields[0];
    entry.signal_path = fields[1];
    entry.report = fields[2];
    entry.labels = split_pipe(fields[3]);
    if (entry.record_id.empty()) throw Error(ErrorCode::parse, where + ": empty record_id");
    if (!seen.insert(entry.record_id).second) {
      throw Error(ErrorCode::duplicate_id, where + ": duplicate record_id '" + entry.record_id + "'");
    }
    Split split;
    try {
      split = parse_split(fields[4]);
    } catch (const Error& e) {
      throw Error(ErrorCode::parse, where + ": " + e.what());
    }
    if (entry.report.rfind("file:", 0) == 0) {
      std::ifstream rin(manifest.base_dir / entry.report.substr(5));
      if (!rin) throw Error(ErrorCode::io, where + ": cannot read report " + entry.report);
      std::stringstream ss;
      ss << rin.rdbuf();
      entry.report = ss.str();
    }
    for (const auto& label : entry.labels) {
      if (options.label_vocabulary) {
        if (!vocab_set.count(label)) {
          throw Error(ErrorCode::vocabulary, where + ": unknown label '" + label + "'");
        }
      } else if (vocab_set.insert(label).second) {
        manifest.label_vocabulary.push_back(label);
      }
    }
    if (!options.lazy && !fs::exists(manifest.base_dir / entry.signal_path)) {
      throw Error(ErrorCode::io, where + ": signal file not found: " + entry.signal_path);
    }
    if (split != Split::unassigned) manifest.split_assignment[entry.record_id] = split;
    manifest.entries.push_back(std::move(entry));
  }
  // Inferred vocabularies are sorted so they do not depend on row order.
  if (!options.label_vocabulary) std::sort(manifest.label_vocabulary.begin(), manifest.label_vocabulary.end());
  return manifest;
}

void save_manifest(const fs::path& path, const CorpusManifest& manifest) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::io, "cannot write manifest " + path.string());
  out << "record_id,signal_path,report,labels,split\n";
  for (const auto& e : manifest.entries) {
    out << csv_escape(e.record_id) << ',' << csv_escape(e.signal_path) << ','
        << csv_escape(e.report) << ',' << csv_escape(join(e.labels, "|")) << ','
        << to_string(manifest.split_of(e.record_id)) << '\n';
  }
}

ECGRecord load_record(const CorpusManifest& manifest, const ManifestEntry& entry,
                      int default_sampling_rate_hz) {
  const fs::path p = fs::path(entry.signal_path).is_absolute()
                         ? fs::path(entry.signal_path)
                         : manifest.base_dir / entry.signal_path;
  ECGRecord record = read_signal(p, default_sampling_rate_hz);
  record.record_id = entry.record_id;
  return record;
}

// ---------------------------------------------------------------------------

void SyntheticCorpusSpec::validate() const {
  if (num_pairs <= 0) throw Error(ErrorCode::configuration, "num_pairs must be positive");
  if (num_classes < 2) throw Error(ErrorCode::configuration, "num_classes must be >= 2");
  if (num_leads < 1 || num_samples < 1 || sampling_rate_hz < 1) {
    throw Error(ErrorCode::configuration, "num_leads, num_samples and sampling_rate_hz must be positive");
  }
  if (!(noise_std >= 0)) throw Error(ErrorCode::configuration, "noise_std must be non-negative");
  if (!(amplitude_log_std >= 0) || !(rate_jitter >= 0 && rate_jitter < 1) || !(phase_jitter >= 0) ||
      !(wander_amplitude >= 0)) {
    throw Error(ErrorCode::configuration, "synthetic variation parameters must be non-negative");
  }
  if (!(multilabel_prob >= 0 && multilabel_prob <= 1)) {
    throw Error(ErrorCode::configuration, "multilabel_prob must be in [0,1]");
  }
}

SyntheticClassTokens synthetic_class_tokens(int k) {
  const std::string id = std::to_string(k);
  return {"cond" + id, "subtype" + id, "attr" + id};
}

Matrix<float> synthetic_waveform(const SyntheticCorpusSpec& spec,
                                 const std::vector<int>& classes,
                                 const SyntheticVariation& variation) {
  Matrix<float> signal = Matrix<float>::Zero(spec.num_leads, spec.num_samples);
  constexpr double two_pi = 2.0 * std::numbers::pi;
  for (int k : classes) {
    const double freq = (1.0 + 0.6 * k) * variation.rate_scale;  // Hz
    const double env_freq = 0.15 * (k % 3 + 1);   // Hz
    const double env_phase = 0.9 * k;
    for (int l = 0; l < spec.num_leads; ++l) {
      const double gain = 0.6 + 0.4 * std::cos(0.7 * l + 0.3 * k);
      const double phase = 0.35 * l + 0.5 * k + variation.phase_shift;
      for (int t = 0; t < spec.num_samples; ++t) {
        const double sec = static_cast<double>(t) / spec.sampling_rate_hz;
        const double envelope = 1.0 + 0.5 * std::sin(two_pi * env_freq * sec + env_phase);
        signal(l, t) += static_cast<float>(variation.amplitude * gain * envelope *
                                           std::sin(two_pi * freq * sec + phase));
      }
    }
  }
  return signal;
}

SyntheticCorpus generate_synthetic_corpus(const SyntheticCorpusSpec& spec) {
  spec.validate();
  SyntheticCorpus corpus;
  for (int k = 0; k < spec.num_classes; ++k) {
    corpus.manifest.label_vocabulary.push_back(synthetic_class_tokens(k).name);
  }

  static const std::array<std::string_view, 3> kOpeners = {
      "ecg shows", "tracing demonstrates", "recording consistent with"};

  std::mt19937_64 rng(spec.seed);
  std::uniform_int_distribution<int> pick_class(0, spec.num_classes - 1);
  std::uniform_int_distribution<int> pick_other(0, spec.num_classes - 2);
  std::bernoulli_distribution second_label(spec.multilabel_prob);

  corpus.pairs.reserve(spec.num_pairs);
  corpus.manifest.entries.reserve(spec.num_pairs);
  for (int i = 0; i < spec.num_pairs; ++i) {
    std::vector<int> classes{pick_class(rng)};
    if (second_label(rng)) {
      int other = pick_other(rng);
      if (other >= classes[0]) ++other;
      classes.push_back(other);
      std::sort(classes.begin(), classes.end());
    }
    const auto opener = kOpeners[static_cast<std::size_t>(classes[0]) % kOpeners.size()];

    char id_buf[32];
    std::snprintf(id_buf, sizeof(id_buf), "syn_%06d", i);
    ECGRecord record;
    record.record_id = id_buf;
    record.sampling_rate_hz = spec.sampling_rate_hz;
    std::mt19937_64 noise_rng(derive_seed(spec.seed, static_cast<std::uint64_t>(i) + 1));
    std::normal_distribution<double> unit_normal(0.0, 1.0);
    std::uniform_real_distribution<double> unit_uniform(0.0, 1.0);
    SyntheticVariation variation;
    variation.amplitude = std::exp(spec.amplitude_log_std * unit_normal(noise_rng));
    variation.rate_scale = 1.0 + spec.rate_jitter * (2.0 * unit_uniform(noise_rng) - 1.0);
    variation.phase_shift = spec.phase_jitter * (2.0 * unit_uniform(noise_rng) - 1.0);
    record.signal = synthetic_waveform(spec, classes, variation);
    if (spec.wander_amplitude > 0) {
      const double amplitude = spec.wander_amplitude * unit_uniform(noise_rng);
      const double freq = 0.05 + 0.25 * unit_uniform(noise_rng);
      const double phase = 2.0 * std::numbers::pi * unit_uniform(noise_rng);
      for (Index l = 0; l < record.signal.rows(); ++l) {
        const double lead_gain = 0.5 + 0.5 * unit_uniform(noise_rng);
        for (Index t = 0; t < record.signal.cols(); ++t) {
          const double sec = static_cast<double>(t) / spec.sampling_rate_hz;
          record.signal(l, t) += static_cast<float>(
              amplitude * lead_gain * std::sin(2.0 * std::numbers::pi * freq * sec + phase));
        }
      }
    }
    if (spec.noise_std > 0) {
      std::normal_distribution<double> noise(0.0, spec.noise_std);
      for (Index t = 0; t < record.signal.cols(); ++t) {
        for (Index l = 0; l < record.signal.rows(); ++l) {
          record.signal(l, t) += static_cast<float>(noise(noise_rng));
        }
      }
    }
    for (int l = 0; l < spec.num_leads; ++l) record.lead_names.push_back("L" + std::to_string(l + 1));

    std::string text(opener);
    std::vector<std::string> labels;
    for (std::size_t c = 0; c < classes.size(); ++c) {
      const auto tokens = synthetic_class_tokens(classes[c]);
      text += (c ? " and " : " ") + tokens.subtype + " with " + tokens.attribute;
      labels.push_back(tokens.name);
    }

    ManifestEntry entry;
    entry.record_id = record.record_id;
    entry.signal_path = "signals/" + record.record_id + ".ecg";
    entry.report = text;
    entry.labels = std::move(labels);
    corpus.manifest.entries.push_back(std::move(entry));
    corpus.pairs.push_back({std::move(record), ClinicalReport(text)});
  }
  return corpus;
}

void save_corpus(const fs::path& dir, SyntheticCorpus& corpus) {
  fs::create_directories(dir / "signals");
  corpus.manifest.base_dir = dir;
  for (std::size_t i = 0; i < corpus.pairs.size(); ++i) {
    write_signal(dir / corpus.manifest.entries[i].signal_path, corpus.pairs[i].ecg);
  }
  save_manifest(dir / "manifest.csv", corpus.manifest);
}

PlantedViolations plant_violations(std::vector<ECGReportPair>& pairs,
                                   int num_nonfinite_values, int num_bad_reports,
                                   std::uint64_t seed) {
  if (pairs.empty()) throw Error(ErrorCode::invalid_argument, "no pairs to plant into");
  if (num_bad_reports > static_cast<int>(pairs.size())) {
    throw Error(ErrorCode::invalid_argument, "more bad reports than pairs");
  }
  PlantedViolations planted;
  std::mt19937_64 rng(seed);

  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  std::set<std::size_t> bad_reports(order.begin(), order.begin() + num_bad_reports);
  static const std::array<std::string_view, 3> kBad = {"", "abnormal ecg", "normal"};
  int b = 0;
  for (std::size_t i : bad_reports) {
    pairs[i].report = ClinicalReport(std::string(kBad[b++ % kBad.size()]));
    planted.bad_report_records.push_back(pairs[i].ecg.record_id);
  }

  // Non-finite values go to distinct positions in pairs whose reports stay
  // valid, so each one must be repaired rather than rejected.
  std::vector<std::size_t> hosts;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (!bad_reports.count(i)) hosts.push_back(i);
  }
  if (hosts.empty() && num_nonfinite_values > 0) {
    throw Error(ErrorCode::invalid_argument, "no valid pairs left to host non-finite values");
  }
  std::uniform_int_distribution<std::size_t> pick_host(0, hosts.empty() ? 0 : hosts.size() - 1);
  std::set<std::tuple<std::size_t, Index, Index>> used;
  const std::array<float, 3> kValues = {std::numeric_limits<float>::quiet_NaN(),
                                        std::numeric_limits<float>::infinity(),
                                        -std::numeric_limits<float>::infinity()};
  for (int v = 0; v < num_nonfinite_values;) {
    const std::size_t host = hosts[pick_host(rng)];
    auto& signal = pairs[host].ecg.signal;
    std::uniform_int_distribution<Index> pick_lead(0, signal.rows() - 1);
    std::uniform_int_distribution<Index> pick_t(0, signal.cols() - 1);
    const Index lead = pick_lead(rng);
    const Index t = pick_t(rng);
    if (!used.insert({host, lead, t}).second) continue;
    signal(lead, t) = kValues[static_cast<std::size_t>(v) % kValues.size()];
    planted.nonfinite_records.push_back(pairs[host].ecg.record_id);
    ++v;
  }
  return planted;
}

CorpusManifest split_by_ratio(const CorpusManifest& manifest, SplitRatios ratios,
                              std::uint64_t seed) {
  if (manifest.entries.empty()) {
    throw Error(ErrorCode::empty_manifest, "cannot split an empty manifest");
  }
  if (ratios.train < 0 || ratios.valid < 0 || ratios.test < 0 ||
      std::abs(ratios.train + ratios.valid + ratios.test - 1.0) > 1e-9) {
    throw Error(ErrorCode::invalid_argument, "split ratios must be non-negative and sum to 1");
  }
  CorpusManifest out = manifest;
  out.split_assignment.clear();

  std::map<std::string, Index> vocab_rank;
  for (std::size_t i = 0; i < manifest.label_vocabulary.size(); ++i) {
    vocab_rank[manifest.label_vocabulary[i]] = static_cast<Index>(i);
  }
  auto stratum_of = [&](const ManifestEntry& e) {
    std::string best;
    Index best_rank = std::numeric_limits<Index>::max();
    for (const auto& label : e.labels) {
      const auto it = vocab_rank.find(label);
      const Index r = it == vocab_rank.end() ? best_rank - 1 : it->second;
      if (r < best_rank) {
        best_rank = r;
        best = label;
      }
    }
    return best;
  };

  std::vector<std::string> ids;
  std::map<std::string, std::vector<std::string>> strata;
  for (const auto& e : manifest.entries) {
    ids.push_back(e.record_id);
    strata[stratum_of(e)].push_back(e.record_id);
  }
  std::sort(ids.begin(), ids.end());

  const auto n = static_cast<long long>(ids.size());
  const long long n_train = std::llround(ratios.train * static_cast<double>(n));
  const long long n_valid = std::min(n - n_train, std::llround(ratios.valid * static_cast<double>(n)));

  auto assign_in_order = [&](const std::vector<std::string>& ordered) {
    std::map<std::string, Split> assignment;
    for (long long i = 0; i < n; ++i) {
      const Split s = i < n_train ? Split::train : (i < n_train + n_valid ? Split::valid : Split::test);
      assignment[ordered[static_cast<std::size_t>(i)]] = s;
    }
    return assignment;
  };

  // Stratified: shuffle within each stratum, then interleave strata by
  // fractional rank so every prefix is approximately class-proportional.
  struct Keyed {
    double position;
    std::size_t stratum;
    std::string id;
  };
  std::vector<Keyed> keyed;
  std::size_t stratum_index = 0;
  for (auto& [key, members] : strata) {
    std::sort(members.begin(), members.end());
    std::mt19937_64 rng(derive_seed(seed, fnv1a64(key)));
    std::shuffle(members.begin(), members.end(), rng);
    for (std::size_t r = 0; r < members.size(); ++r) {
      keyed.push_back({(static_cast<double>(r) + 0.5) / static_cast<double>(members.size()),
                       stratum_index, members[r]});
    }
    ++stratum_index;
  }
  std::sort(keyed.begin(), keyed.end(), [](const Keyed& a, const Keyed& b) {
    return a.position != b.position ? a.position < b.position : a.stratum < b.stratum;
  });
  std::vector<std::string> ordered;
  for (auto& k : keyed) ordered.push_back(k.id);
  auto assignment = assign_in_order(ordered);

  const std::array<std::pair<Split, long long>, 3> sizes = {
      std::pair{Split::train, n_train}, {Split::valid, n_valid}, {Split::test, n - n_train - n_valid}};
  bool stratified_ok = true;
  for (const auto& [key, members] : strata) {
    for (const auto& [split, size] : sizes) {
      if (size == 0) continue;
      const bool present = std::any_of(members.begin(), members.end(), [&](const std::string& id) {
        return assignment[id] == split;
      });
      if (!present) stratified_ok = false;
    }
  }
  if (!stratified_ok) {
    std::string message = "split_by_ratio: some class lacks a sample in a split; "
                          "falling back to unstratified assignment";
    out.warnings.push_back(message);
    warn(message);
    std::vector<std::string> shuffled = ids;
    std::mt19937_64 rng(seed);
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    assignment = assign_in_order(shuffled);
  }
  out.split_assignment = std::move(assignment);
  return out;
}

}  // namespace merl
