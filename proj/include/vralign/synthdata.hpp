#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "vralign/io.hpp"
#include "vralign/ndarray.hpp"
#include "vralign/rng.hpp"

namespace vralign {

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

/// Fixed word list shared by the generator and the tokenizer. Grouped by
/// role; ids are positions in this list.
inline const std::vector<std::string>& builtin_vocabulary() {
  static const std::vector<std::string> words = {
      // depth-band words, index == location code
      "cranial", "caudal", "central",
      // texture descriptors: first four describe marker 0, next four marker 1
      "ribbon", "lattice", "banded", "striped",
      "granular", "speckled", "mottled", "dotted",
      // intensity words driven by the latent brightness
      "faint", "dim", "muted", "bright", "vivid", "glaring",
      // template and filler words
      "scan", "lesion", "texture", "size", "signal", "marker", "review",
      "region", "tissue", "stable", "followup", "axial", "series", "study",
      "impression", "chronic", "routine", "note",
  };
  return words;
}

/// Marker class names that must never survive sanitization: they name the
/// label itself rather than describing the image.
inline const std::vector<std::string>& default_forbidden_terms() {
  static const std::vector<std::string> terms = {"typea", "typeb"};
  return terms;
}

inline std::string to_lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

/// Maps whitespace-separated words of sanitized text onto vocabulary ids.
inline std::vector<std::size_t> tokenize(const std::string& clean_text,
                                         const std::vector<std::string>& vocab) {
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < vocab.size(); ++i) index.emplace(vocab[i], i);
  std::vector<std::size_t> ids;
  std::size_t pos = 0;
  while (pos < clean_text.size()) {
    while (pos < clean_text.size() && clean_text[pos] == ' ') ++pos;
    std::size_t end = pos;
    while (end < clean_text.size() && clean_text[end] != ' ') ++end;
    if (end > pos) {
      const std::string word = to_lower(clean_text.substr(pos, end - pos));
      auto it = index.find(word);
      if (it == index.end())
        throw ConfigError("vocabulary error: unknown word '" + word + "'");
      ids.push_back(it->second);
    }
    pos = end;
  }
  return ids;
}

// ---------------------------------------------------------------------------
// Sanitization
// ---------------------------------------------------------------------------

/// Removes any word containing a forbidden term (case-insensitive), then
/// strips punctuation from the survivors and drops residues that are empty or
/// purely numeric. Dates in numeric d/m/y form reduce to digit strings once
/// separators are stripped, so the numeric rule removes them as well.
/// Surviving residues are joined by single spaces.
inline std::string sanitize_report(const std::string& text,
                                   const std::vector<std::string>& forbidden_terms) {
  std::vector<std::string> lowered_terms;
  lowered_terms.reserve(forbidden_terms.size());
  for (const auto& t : forbidden_terms) lowered_terms.push_back(to_lower(t));

  std::string out;
  std::size_t pos = 0;
  const auto is_space = [](char c) {
    return std::isspace(static_cast<unsigned char>(c)) != 0;
  };
  while (pos < text.size()) {
    while (pos < text.size() && is_space(text[pos])) ++pos;
    std::size_t end = pos;
    while (end < text.size() && !is_space(text[end])) ++end;
    if (end > pos) {
      const std::string word = text.substr(pos, end - pos);
      const std::string low = to_lower(word);
      bool drop = false;
      for (const auto& term : lowered_terms) {
        if (!term.empty() && low.find(term) != std::string::npos) {
          drop = true;
          break;
        }
      }
      if (!drop) {
        std::string residue;
        bool all_digits = true;
        for (char c : word) {
          if (std::isalnum(static_cast<unsigned char>(c))) {
            residue.push_back(c);
            if (!std::isdigit(static_cast<unsigned char>(c))) all_digits = false;
          }
        }
        if (!residue.empty() && !all_digits) {
          if (!out.empty()) out.push_back(' ');
          out += residue;
        }
      }
    }
    pos = end;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset generation
// ---------------------------------------------------------------------------

struct PatientRecord {
  NdArray volume;    // [D x H x W], values in [0,1]
  std::vector<std::size_t> tokens;
  int location = 0;  // 0 top band, 1 bottom band, 2 middle band
  int marker = 0;    // binary class label
  NdArray seg_mask;  // [D x H x W], 0/1, support of the inserted blob
  std::vector<double> latent;  // hidden generator state, for diagnostics only
  std::string raw_report;
  std::string clean_report;
};

struct DatasetSpec {
  std::size_t n_patients = 0;
  std::array<std::size_t, 3> dims{16, 16, 16};
  std::size_t vocab_size = 64;
  double class_balance = 0.33;  // fraction of marker-1 patients
  std::uint64_t seed = 0;
  bool shift = false;  // external-cohort analogue: intensity bias + extra noise

  void validate() const {
    if (n_patients < 4)
      throw ConfigError("dataset needs at least 4 patients for batching and folds");
    for (auto d : dims)
      if (d < 12)
        throw ConfigError("dims too small to fit a blob band: need >= 12, got " +
                          std::to_string(d));
    if (vocab_size < builtin_vocabulary().size())
      throw ConfigError("vocab size " + std::to_string(vocab_size) +
                        " smaller than the builtin vocabulary (" +
                        std::to_string(builtin_vocabulary().size()) + ")");
    if (class_balance <= 0.0 || class_balance >= 1.0)
      throw ConfigError("class balance must be in (0, 1)");
  }
};

namespace detail {

/// Marker-0 texture varies slowly (period 8 along the diagonal); marker-1
/// alternates voxel to voxel (period 2). The offset is an integer so the
/// period-2 wave always alternates at full amplitude instead of sampling
/// near a zero crossing.
inline double texture_factor(int marker, std::uint64_t offset, std::size_t d,
                             std::size_t h, std::size_t w) {
  const double diag = static_cast<double>(d + h + w + offset);
  const double period = marker == 0 ? 8.0 : 2.0;
  return 1.0 + 0.55 * std::cos(2.0 * 3.14159265358979323846 * diag / period);
}

struct BlobBand {
  std::size_t lo, hi;  // inclusive depth range for the blob center
};

inline BlobBand location_band(int location, std::size_t D, std::size_t radius) {
  const std::size_t third = D / 3;
  BlobBand b;
  switch (location) {
    case 0: b = {0, third > 0 ? third - 1 : 0}; break;
    case 1: b = {D - third, D - 1}; break;
    default: b = {third, D - third - 1}; break;
  }
  // Keep the center radius-safe inside the volume (band overflow of the
  // mask support by up to `radius` is allowed and tested).
  b.lo = std::max(b.lo, radius);
  b.hi = std::min(b.hi, D - 1 - radius);
  if (b.hi < b.lo) b.hi = b.lo;
  return b;
}

}  // namespace detail

inline PatientRecord generate_patient(const DatasetSpec& spec, std::size_t index,
                                      int marker) {
  const auto [D, H, W] = spec.dims;
  Rng rng = derive_stream(spec.seed, "data", index);

  PatientRecord rec;
  rec.marker = marker;
  rec.location = static_cast<int>(rng.below(3));
  rec.volume = NdArray({D, H, W});
  rec.seg_mask = NdArray({D, H, W});

  // Latent state: brightness jitter and texture offset. The jitter makes raw
  // mean intensity an unreliable class cue on purpose.
  const double jitter = rng.uniform(0.85, 1.15);
  const std::uint64_t tex_offset = rng.below(8);
  rec.latent = {jitter, static_cast<double>(tex_offset)};

  // Smooth per-patient background: three low-frequency cosine modes standing
  // in for anatomy. Without them every patient's background is statistically
  // identical and label-free shortcuts (ignore the lesion, describe the
  // background) survive training. Wavelengths are >= half the volume so the
  // structure is visible to coarse pooled features, and the draws stay ahead
  // of the noise loop so shifted and unshifted cohorts keep identical masks.
  struct BgMode {
    double kd, kh, kw, phase, amp;
  };
  std::array<BgMode, 3> bg{};
  for (auto& m : bg) {
    m.kd = static_cast<double>(rng.below(3));
    m.kh = static_cast<double>(rng.below(3));
    m.kw = static_cast<double>(rng.below(3));
    m.phase = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    m.amp = rng.uniform(0.04, 0.08);
  }
  const auto background = [&](std::size_t d, std::size_t h, std::size_t w) {
    double f = 0.0;
    for (const auto& m : bg)
      f += m.amp * std::cos(2.0 * 3.14159265358979323846 *
                                (m.kd * static_cast<double>(d) / static_cast<double>(D) +
                                 m.kh * static_cast<double>(h) / static_cast<double>(H) +
                                 m.kw * static_cast<double>(w) / static_cast<double>(W)) +
                            m.phase);
    return f;
  };

  const double noise_hi = spec.shift ? 0.30 : 0.15;
  const double bias = spec.shift ? 0.15 : 0.0;
  for (std::size_t d = 0; d < D; ++d)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t w = 0; w < W; ++w)
        rec.volume.at(d, h, w) = std::clamp(
            bias + rng.uniform(0.0, noise_hi) + background(d, h, w), 0.0, 1.0);

  const std::size_t radius = std::max<std::size_t>(2, D / 8);
  const auto band = detail::location_band(rec.location, D, radius);
  const std::size_t cd = band.lo + rng.below(band.hi - band.lo + 1);
  const std::size_t ch = radius + rng.below(H - 2 * radius);
  const std::size_t cw = radius + rng.below(W - 2 * radius);
  const double sigma = static_cast<double>(radius) / 1.2;

  for (std::size_t d = 0; d < D; ++d)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t w = 0; w < W; ++w) {
        const double dd = static_cast<double>(d) - static_cast<double>(cd);
        const double dh = static_cast<double>(h) - static_cast<double>(ch);
        const double dw = static_cast<double>(w) - static_cast<double>(cw);
        const double r2 = dd * dd + dh * dh + dw * dw;
        const double kernel = std::exp(-r2 / (2.0 * sigma * sigma));
        if (kernel >= 0.3) {
          const double tex = detail::texture_factor(marker, tex_offset, d, h, w);
          double v = rec.volume.at(d, h, w) + 0.62 * jitter * kernel * tex;
          rec.volume.at(d, h, w) = std::min(1.0, v);
          rec.seg_mask.at(d, h, w) = 1.0;
        }
      }

  // Raw report text with the artifacts sanitization must remove: a date, a
  // numeric size, punctuation, and the literal class name.
  const auto& vocab = builtin_vocabulary();
  const std::size_t desc_base = 3 + static_cast<std::size_t>(marker) * 4;
  std::size_t d1 = desc_base + rng.below(4);
  std::size_t d2 = desc_base + rng.below(4);
  const std::size_t zword = 11 + std::min<std::size_t>(5, static_cast<std::size_t>(
                                                              (jitter - 0.85) / 0.05));
  const std::size_t filler_base = 25;
  const std::size_t f1 = filler_base + rng.below(10);
  const std::size_t f2 = filler_base + rng.below(10);
  const int day = 1 + static_cast<int>(rng.below(28));
  const int month = 1 + static_cast<int>(rng.below(12));
  const int year = 2010 + static_cast<int>(rng.below(12));
  const int size_mm = 1 + static_cast<int>(rng.below(30));

  rec.raw_report = "Scan " + std::to_string(day) + "/" + std::to_string(month) + "/" +
                   std::to_string(year) + ": " + vocab[rec.location] + " lesion, " +
                   vocab[d1] + " " + vocab[d2] + " texture, size " +
                   std::to_string(size_mm) + ". " + vocab[zword] + " signal, " +
                   (marker == 0 ? "typeA" : "typeB") + " marker. " + vocab[f1] + " " +
                   vocab[f2] + " review.";
  rec.clean_report = sanitize_report(rec.raw_report, default_forbidden_terms());
  rec.tokens = tokenize(rec.clean_report, vocab);
  return rec;
}

/// Deterministic per (spec, index): patient i is generated from its own
/// derived stream, so datasets are reproducible and order-independent.
inline std::vector<PatientRecord> generate_dataset(const DatasetSpec& spec) {
  spec.validate();
  const std::size_t n1 = std::min<std::size_t>(
      spec.n_patients - 1,
      std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(
                                   spec.class_balance * static_cast<double>(spec.n_patients)))));
  std::vector<int> labels(spec.n_patients, 0);
  for (std::size_t i = 0; i < n1; ++i) labels[i] = 1;
  Rng shuffle = derive_stream(spec.seed, "data-labels");
  for (std::size_t i = spec.n_patients - 1; i > 0; --i)
    std::swap(labels[i], labels[shuffle.below(i + 1)]);

  std::vector<PatientRecord> records;
  records.reserve(spec.n_patients);
  for (std::size_t i = 0; i < spec.n_patients; ++i)
    records.push_back(generate_patient(spec, i, labels[i]));
  return records;
}

// ---------------------------------------------------------------------------
// Folds
// ---------------------------------------------------------------------------

struct FoldSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// K disjoint test folds stratified by marker label, assigned round-robin
/// after a seeded shuffle within each class.
inline std::vector<FoldSplit> make_folds(const std::vector<PatientRecord>& records,
                                         std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("need at least 2 folds");
  if (k > records.size()) throw ConfigError("more folds than patients");
  std::vector<std::vector<std::size_t>> by_class(2);
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].marker != 0 && records[i].marker != 1)
      throw ConfigError("marker labels must be binary");
    by_class[static_cast<std::size_t>(records[i].marker)].push_back(i);
  }
  for (std::size_t c = 0; c < 2; ++c) {
    if (by_class[c].size() < k)
      throw ConfigError("stratification error: class " + std::to_string(c) + " has " +
                        std::to_string(by_class[c].size()) + " members, need >= " +
                        std::to_string(k));
  }

  Rng rng = derive_stream(seed, "folds");
  std::vector<std::vector<std::size_t>> test_folds(k);
  for (auto& cls : by_class) {
    for (std::size_t i = cls.size() - 1; i > 0; --i)
      std::swap(cls[i], cls[rng.below(i + 1)]);
    for (std::size_t i = 0; i < cls.size(); ++i) test_folds[i % k].push_back(cls[i]);
  }

  std::vector<FoldSplit> folds(k);
  for (std::size_t f = 0; f < k; ++f) {
    auto& test = test_folds[f];
    std::sort(test.begin(), test.end());
    folds[f].test = test;
    for (std::size_t i = 0; i < records.size(); ++i) {
      if (!std::binary_search(test.begin(), test.end(), i)) folds[f].train.push_back(i);
    }
  }
  return folds;
}

// ---------------------------------------------------------------------------
// Dataset serialization: magic "VRDS", version 1.
// ---------------------------------------------------------------------------

inline constexpr char kDatasetMagic[5] = "VRDS";
inline constexpr std::uint32_t kDatasetVersion = 1;

inline void save_dataset(const std::string& path, const DatasetSpec& spec,
                         const std::vector<PatientRecord>& records) {
  auto os = io::open_out(path);
  os.write(kDatasetMagic, 4);
  io::write_u32(os, kDatasetVersion);
  io::write_u64(os, spec.n_patients);
  for (auto d : spec.dims) io::write_u64(os, d);
  io::write_u64(os, spec.vocab_size);
  io::write_f64(os, spec.class_balance);
  io::write_u64(os, spec.seed);
  io::write_u8(os, spec.shift ? 1 : 0);
  io::write_u64(os, records.size());
  for (const auto& r : records) {
    io::write_u8(os, static_cast<std::uint8_t>(r.location));
    io::write_u8(os, static_cast<std::uint8_t>(r.marker));
    for (double v : r.volume.data) io::write_f64(os, v);
    for (double v : r.seg_mask.data) io::write_u8(os, v != 0.0 ? 1 : 0);
    io::write_u64(os, r.tokens.size());
    for (auto t : r.tokens) io::write_u64(os, t);
    io::write_u64(os, r.latent.size());
    for (double v : r.latent) io::write_f64(os, v);
    io::write_string(os, r.raw_report);
    io::write_string(os, r.clean_report);
  }
  if (!os) throw IoError("short write: " + path);
}

struct Dataset {
  DatasetSpec spec;
  std::vector<PatientRecord> records;
};

inline Dataset load_dataset(const std::string& path) {
  auto is = io::open_in(path);
  io::expect_magic(is, kDatasetMagic, "dataset");
  const auto version = io::read_u32(is);
  if (version != kDatasetVersion)
    throw IoError("unsupported dataset version " + std::to_string(version));
  Dataset ds;
  ds.spec.n_patients = io::read_u64(is);
  for (auto& d : ds.spec.dims) d = io::read_u64(is);
  ds.spec.vocab_size = io::read_u64(is);
  ds.spec.class_balance = io::read_f64(is);
  ds.spec.seed = io::read_u64(is);
  ds.spec.shift = io::read_u8(is) != 0;
  const auto count = io::read_u64(is);
  const auto [D, H, W] = ds.spec.dims;
  ds.records.resize(count);
  for (auto& r : ds.records) {
    r.location = io::read_u8(is);
    r.marker = io::read_u8(is);
    r.volume = NdArray({D, H, W});
    for (auto& v : r.volume.data) v = io::read_f64(is);
    r.seg_mask = NdArray({D, H, W});
    for (auto& v : r.seg_mask.data) v = io::read_u8(is) != 0 ? 1.0 : 0.0;
    r.tokens.resize(io::read_u64(is));
    for (auto& t : r.tokens) t = io::read_u64(is);
    r.latent.resize(io::read_u64(is));
    for (auto& v : r.latent) v = io::read_f64(is);
    r.raw_report = io::read_string(is);
    r.clean_report = io::read_string(is);
  }
  return ds;
}

}  // namespace vralign
