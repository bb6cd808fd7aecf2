#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "nowcast/augment.hpp"
#include "nowcast/binning.hpp"
#include "nowcast/error.hpp"
#include "nowcast/metrics.hpp"
#include "nowcast/tensor.hpp"

namespace nowcast {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Tensor container
//
//   offset  size      field
//   0       4         magic "NWTF"
//   4       4         format version (u32, currently 1)
//   8       4         dtype code (u32, 1 = float32)
//   12      4         rank (u32)
//   16      8*rank    dims (u64 each)
//   ...     4*numel   payload, row-major
//
// All integers and floats are little-endian.
// ---------------------------------------------------------------------------

inline constexpr std::array<char, 4> kTensorMagic{'N', 'W', 'T', 'F'};
inline constexpr std::uint32_t kTensorVersion = 1;
inline constexpr std::uint32_t kDtypeFloat32 = 1;
inline constexpr std::uint32_t kMaxRank = 16;

namespace detail {

template <typename U>
void put_le(std::string& out, U v) {
  static_assert(std::is_unsigned_v<U>);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename U>
U get_le(const unsigned char* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

class ByteReader {
 public:
  ByteReader(std::string_view bytes, std::string context) : bytes_(bytes), context_(std::move(context)) {}

  const unsigned char* take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(FormatError::Kind::truncated, context_ + ": truncated while reading " + what);
    }
    const auto* p = reinterpret_cast<const unsigned char*>(bytes_.data() + pos_);
    pos_ += n;
    return p;
  }
  template <typename U>
  U read(const char* what) {
    return get_le<U>(take(sizeof(U), what));
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
  std::string context_;
};

inline Tensor decode_tensor(ByteReader& in, const std::string& context) {
  const unsigned char* magic = in.take(4, "magic");
  if (std::memcmp(magic, kTensorMagic.data(), 4) != 0) {
    throw FormatError(FormatError::Kind::bad_magic, context + ": bad magic (not a tensor file)");
  }
  const auto version = in.read<std::uint32_t>("version");
  if (version != kTensorVersion) {
    throw FormatError(FormatError::Kind::unsupported_version,
                      context + ": unsupported format version " + std::to_string(version));
  }
  const auto dtype = in.read<std::uint32_t>("dtype");
  if (dtype != kDtypeFloat32) {
    throw FormatError(FormatError::Kind::unsupported_dtype, context + ": unsupported dtype " + std::to_string(dtype));
  }
  const auto rank = in.read<std::uint32_t>("rank");
  if (rank > kMaxRank) {
    throw FormatError(FormatError::Kind::bad_shape, context + ": rank " + std::to_string(rank) + " too large");
  }
  Shape shape(rank);
  std::uint64_t numel = 1;
  for (auto& d : shape) {
    const auto v = in.read<std::uint64_t>("dims");
    if (v == 0) throw FormatError(FormatError::Kind::bad_shape, context + ": zero-sized dimension");
    if (numel > (std::uint64_t{1} << 62) / v) {
      throw FormatError(FormatError::Kind::bad_shape, context + ": element count overflows");
    }
    numel *= v;
    d = static_cast<std::size_t>(v);
  }
  if (in.remaining() / 4 < numel) {
    throw FormatError(FormatError::Kind::truncated, context + ": truncated payload (expected " +
                                                        std::to_string(numel * 4) + " bytes, have " +
                                                        std::to_string(in.remaining()) + ")");
  }
  const unsigned char* payload = in.take(static_cast<std::size_t>(numel * 4), "payload");
  std::vector<float> data(static_cast<std::size_t>(numel));
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = std::bit_cast<float>(get_le<std::uint32_t>(payload + 4 * i));
  return Tensor(std::move(shape), std::move(data));
}

inline std::string slurp(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError(FormatError::Kind::io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void spit(const fs::path& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError(FormatError::Kind::io, "cannot write " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw FormatError(FormatError::Kind::io, "write failed for " + path.string());
}

}  // namespace detail

inline std::string encode_tensor(const Tensor& t) {
  std::string out;
  out.reserve(16 + 8 * t.rank() + 4 * t.size());
  out.append(kTensorMagic.data(), 4);
  detail::put_le<std::uint32_t>(out, kTensorVersion);
  detail::put_le<std::uint32_t>(out, kDtypeFloat32);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) detail::put_le<std::uint64_t>(out, d);
  for (float v : t.data()) detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

inline Tensor decode_tensor(std::string_view bytes, const std::string& context = "tensor") {
  detail::ByteReader in(bytes, context);
  Tensor t = detail::decode_tensor(in, context);
  if (in.remaining() != 0) {
    throw FormatError(FormatError::Kind::bad_shape, context + ": " + std::to_string(in.remaining()) +
                                                        " trailing bytes after payload");
  }
  return t;
}

inline void write_tensor(const fs::path& path, const Tensor& t) { detail::spit(path, encode_tensor(t)); }

inline Tensor read_tensor(const fs::path& path) { return decode_tensor(detail::slurp(path), path.string()); }

// ---------------------------------------------------------------------------
// Keyed tensor archive (checkpoints): magic "NWCK", u32 version, u64-length
// metadata text, u32 entry count, then per entry a u32-length key followed by
// a u64-length embedded tensor container.
// ---------------------------------------------------------------------------

struct TensorArchive {
  std::string metadata;
  std::map<std::string, Tensor> tensors;
};

inline constexpr std::array<char, 4> kArchiveMagic{'N', 'W', 'C', 'K'};

inline std::string encode_archive(const TensorArchive& a) {
  std::string out(kArchiveMagic.data(), 4);
  detail::put_le<std::uint32_t>(out, 1);
  detail::put_le<std::uint64_t>(out, a.metadata.size());
  out += a.metadata;
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(a.tensors.size()));
  for (const auto& [key, t] : a.tensors) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(key.size()));
    out += key;
    const std::string blob = encode_tensor(t);
    detail::put_le<std::uint64_t>(out, blob.size());
    out += blob;
  }
  return out;
}

inline TensorArchive decode_archive(std::string_view bytes, const std::string& context = "archive") {
  detail::ByteReader in(bytes, context);
  if (std::memcmp(in.take(4, "magic"), kArchiveMagic.data(), 4) != 0) {
    throw FormatError(FormatError::Kind::bad_magic, context + ": bad magic (not a checkpoint)");
  }
  const auto version = in.read<std::uint32_t>("version");
  if (version != 1) {
    throw FormatError(FormatError::Kind::unsupported_version,
                      context + ": unsupported checkpoint version " + std::to_string(version));
  }
  TensorArchive a;
  const auto meta_len = in.read<std::uint64_t>("metadata length");
  if (meta_len > in.remaining()) throw FormatError(FormatError::Kind::truncated, context + ": truncated metadata");
  const auto* meta = in.take(static_cast<std::size_t>(meta_len), "metadata");
  a.metadata.assign(reinterpret_cast<const char*>(meta), static_cast<std::size_t>(meta_len));
  const auto count = in.read<std::uint32_t>("entry count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto key_len = in.read<std::uint32_t>("key length");
    const auto* key = in.take(key_len, "key");
    std::string k(reinterpret_cast<const char*>(key), key_len);
    const auto blob_len = in.read<std::uint64_t>("tensor length");
    if (blob_len > in.remaining()) throw FormatError(FormatError::Kind::truncated, context + ": truncated tensor " + k);
    const auto* blob = in.take(static_cast<std::size_t>(blob_len), "tensor");
    a.tensors.emplace(k, decode_tensor(std::string_view(reinterpret_cast<const char*>(blob), blob_len), context + ":" + k));
  }
  return a;
}

// ---------------------------------------------------------------------------
// Flat "key = value" text with '#' comments.
// ---------------------------------------------------------------------------

using KeyValues = std::map<std::string, std::string>;

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline KeyValues parse_key_values(std::string_view text, const std::string& context) {
  KeyValues kv;
  std::istringstream in{std::string(text)};
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw Error(context + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    const std::string key = trim(std::string_view(t).substr(0, eq));
    if (key.empty()) throw Error(context + ":" + std::to_string(lineno) + ": empty key");
    if (!kv.emplace(key, trim(std::string_view(t).substr(eq + 1))).second) {
      throw Error(context + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
    }
  }
  return kv;
}

inline std::string format_key_values(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

inline const std::string& require_key(const KeyValues& kv, const std::string& key, const std::string& context) {
  const auto it = kv.find(key);
  if (it == kv.end()) throw Error(context + ": missing key '" + key + "'");
  return it->second;
}

inline std::size_t require_size(const KeyValues& kv, const std::string& key, const std::string& context) {
  const std::string& v = require_key(kv, key, context);
  std::size_t pos = 0;
  unsigned long long n = 0;
  try {
    n = std::stoull(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty() || v[0] == '-') throw Error(context + ": key '" + key + "' is not a count: " + v);
  return static_cast<std::size_t>(n);
}

// ---------------------------------------------------------------------------
// Manifest: "input_path<TAB>target_path<TAB>region_id<TAB>start_index" lines.
// ---------------------------------------------------------------------------

struct ManifestEntry {
  std::string input_path;
  std::string target_path;
  std::string region;
  std::size_t start = 0;
};

inline std::vector<ManifestEntry> parse_manifest(std::string_view text, const std::string& context = "manifest") {
  std::vector<ManifestEntry> out;
  std::istringstream in{std::string(text)};
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::size_t b = 0;
    for (;;) {
      const auto tab = line.find('\t', b);
      fields.push_back(line.substr(b, tab - b));
      if (tab == std::string::npos) break;
      b = tab + 1;
    }
    const std::string where = context + ":" + std::to_string(lineno);
    if (fields.size() != 4) {
      throw Error(where + ": expected 4 tab-separated fields, found " + std::to_string(fields.size()));
    }
    ManifestEntry e{fields[0], fields[1], fields[2], 0};
    if (e.input_path.empty() || e.target_path.empty()) throw Error(where + ": empty path");
    std::size_t pos = 0;
    try {
      e.start = std::stoull(fields[3], &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos == 0 || pos != fields[3].size() || fields[3][0] == '-') {
      throw Error(where + ": start index '" + fields[3] + "' is not a non-negative integer");
    }
    out.push_back(std::move(e));
  }
  return out;
}

inline std::string format_manifest(const std::vector<ManifestEntry>& entries) {
  std::string out = "# input_path\ttarget_path\tregion_id\tstart_index\n";
  for (const auto& e : entries) {
    out += e.input_path + "\t" + e.target_path + "\t" + e.region + "\t" + std::to_string(e.start) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset layout
//
//   dataset.cfg          geometry (key = value)
//   manifest.txt         training windows
//   manifest_val.txt     validation windows
//   inputs/NNNN.nwt      satellite sequence (L, C, H_s, W_s)
//   targets/NNNN.nwt     radar sequence (L, H_r, W_r), same time axis
//
// A window starting at t takes inputs [t, t+F_in) and targets
// [t+F_in, t+F_in+T). The radar frame at t+F_in-1 is the last observation.
// ---------------------------------------------------------------------------

struct DatasetInfo {
  std::size_t sat_side = 32;
  std::size_t radar_side = 32;
  std::size_t factor = 1;  // radar pixels per satellite pixel
  std::size_t input_crop = 32;
  std::size_t bands = 4;
  std::size_t frames_in = 4;
  std::size_t lead_times = 4;
  std::size_t seq_len = 12;

  // Output patch side in satellite pixels; the radar grid covers it exactly.
  std::size_t patch() const { return radar_side / factor; }

  void validate() const {
    if (!sat_side || !radar_side || !factor || !bands || !frames_in || !lead_times) {
      throw Error("dataset geometry sizes must be positive");
    }
    if (radar_side % factor) throw Error("radar side must be a multiple of the resolution factor");
    if (input_crop > sat_side || patch() > input_crop) {
      throw Error("dataset geometry requires patch <= input_crop <= satellite side");
    }
    if ((sat_side - patch()) % 2 || (input_crop - patch()) % 2) {
      throw Error("radar patch must be centred on the satellite grid");
    }
    if (seq_len < frames_in + lead_times) throw Error("sequence too short for one window");
  }

  KeyValues to_key_values() const {
    return {{"sat_side", std::to_string(sat_side)},     {"radar_side", std::to_string(radar_side)},
            {"factor", std::to_string(factor)},         {"input_crop", std::to_string(input_crop)},
            {"bands", std::to_string(bands)},           {"frames_in", std::to_string(frames_in)},
            {"lead_times", std::to_string(lead_times)}, {"seq_len", std::to_string(seq_len)}};
  }

  static DatasetInfo from_key_values(const KeyValues& kv, const std::string& context) {
    DatasetInfo d;
    d.sat_side = require_size(kv, "sat_side", context);
    d.radar_side = require_size(kv, "radar_side", context);
    d.factor = require_size(kv, "factor", context);
    d.input_crop = require_size(kv, "input_crop", context);
    d.bands = require_size(kv, "bands", context);
    d.frames_in = require_size(kv, "frames_in", context);
    d.lead_times = require_size(kv, "lead_times", context);
    d.seq_len = require_size(kv, "seq_len", context);
    d.validate();
    return d;
  }

  std::string describe() const {
    std::ostringstream os;
    os << "satellite " << sat_side << "x" << sat_side << "x" << bands << " (crop " << input_crop << "), radar "
       << radar_side << "x" << radar_side << " (factor " << factor << "), " << frames_in << " input frames, "
       << lead_times << " lead times";
    return os.str();
  }

  bool operator==(const DatasetInfo&) const = default;
};

struct Sequence {
  Tensor inputs;
  Tensor targets;
};

struct Window {
  std::size_t sequence = 0;
  std::size_t start = 0;
  std::string region;
};

/// One split loaded into memory. Windows index into the shared sequences.
class Dataset {
 public:
  static Dataset load(const fs::path& dir, const std::string& manifest_name) {
    Dataset ds;
    ds.info_ = DatasetInfo::from_key_values(
        parse_key_values(detail::slurp(dir / "dataset.cfg"), (dir / "dataset.cfg").string()),
        (dir / "dataset.cfg").string());
    const fs::path mpath = dir / manifest_name;
    const auto entries = parse_manifest(detail::slurp(mpath), mpath.string());
    std::map<std::pair<std::string, std::string>, std::size_t> seen;
    for (const auto& e : entries) {
      const auto key = std::make_pair(e.input_path, e.target_path);
      auto it = seen.find(key);
      if (it == seen.end()) {
        Sequence s{read_tensor(dir / e.input_path), read_tensor(dir / e.target_path)};
        ds.check_sequence(s, e);
        it = seen.emplace(key, ds.sequences_.size()).first;
        ds.sequences_.push_back(std::move(s));
      }
      ds.add_window(it->second, e.start, e.region);
    }
    return ds;
  }

  static Dataset from_memory(DatasetInfo info, std::vector<Sequence> sequences, std::vector<Window> windows) {
    info.validate();
    Dataset ds;
    ds.info_ = info;
    ds.sequences_ = std::move(sequences);
    for (const auto& s : ds.sequences_) ds.check_sequence(s, ManifestEntry{"<memory>", "<memory>", "", 0});
    for (const auto& w : windows) ds.add_window(w.sequence, w.start, w.region);
    return ds;
  }

  const DatasetInfo& info() const { return info_; }
  const std::vector<Window>& windows() const { return windows_; }
  std::size_t size() const { return windows_.size(); }
  bool empty() const { return windows_.empty(); }

  Sample sample(std::size_t i) const {
    const auto& w = windows_.at(i);
    const auto& s = sequences_[w.sequence];
    return Sample{slice_frames(s.inputs, w.start, info_.frames_in),
                  slice_frames(s.targets, w.start + info_.frames_in, info_.lead_times), w.region, w.start};
  }

  // Empty at the end of a sequence, where the extra frames do not exist.
  std::optional<SampleExt> sample_ext(std::size_t i) const {
    const auto& w = windows_.at(i);
    const auto& s = sequences_[w.sequence];
    if (w.start + info_.frames_in + info_.lead_times >= s.inputs.dim(0)) return std::nullopt;
    return SampleExt{slice_frames(s.inputs, w.start, info_.frames_in + 1),
                     slice_frames(s.targets, w.start + info_.frames_in, info_.lead_times + 1), w.region, w.start};
  }

  // Radar frame aligned with the last input frame.
  Tensor last_observed(std::size_t i) const {
    const auto& w = windows_.at(i);
    return slice_frames(sequences_[w.sequence].targets, w.start + info_.frames_in - 1, 1);
  }

 private:
  void check_sequence(const Sequence& s, const ManifestEntry& e) const {
    const auto& d = info_;
    if (s.inputs.rank() != 4 || s.inputs.dim(1) != d.bands || s.inputs.dim(2) != d.sat_side ||
        s.inputs.dim(3) != d.sat_side) {
      throw Error(e.input_path + ": input shape " + shape_str(s.inputs.shape()) + " does not match " + d.describe());
    }
    if (s.targets.rank() != 3 || s.targets.dim(1) != d.radar_side || s.targets.dim(2) != d.radar_side ||
        s.targets.dim(0) != s.inputs.dim(0)) {
      throw Error(e.target_path + ": target shape " + shape_str(s.targets.shape()) +
                  " inconsistent with inputs " + shape_str(s.inputs.shape()));
    }
  }

  void add_window(std::size_t seq, std::size_t start, const std::string& region) {
    if (seq >= sequences_.size()) throw Error("window references unknown sequence");
    if (start + info_.frames_in + info_.lead_times > sequences_[seq].inputs.dim(0)) {
      throw Error("window at start " + std::to_string(start) + " runs past the end of its sequence");
    }
    windows_.push_back(Window{seq, start, region});
  }

  DatasetInfo info_;
  std::vector<Sequence> sequences_;
  std::vector<Window> windows_;
};

inline std::vector<Tensor> truth_frames(const Dataset& ds) {
  std::vector<Tensor> out;
  out.reserve(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) out.push_back(ds.sample(i).targets);
  return out;
}

// Every lead time predicted as the last observed radar frame.
inline ScoreReport persistence_baseline(const Dataset& ds, const RainBins& bins = RainBins()) {
  if (ds.empty()) throw Error("persistence baseline needs a non-empty dataset");
  ConfusionCounts counts;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const Tensor last = ds.last_observed(i);
    const Tensor truth = ds.sample(i).targets;
    Tensor pred(truth.shape());
    const std::size_t frame = last.size();
    for (std::size_t t = 0; t < truth.dim(0); ++t) std::copy(last.vec().begin(), last.vec().end(), &pred[t * frame]);
    accumulate(counts, pred, truth, bins);
  }
  return finalize(counts, bins);
}

inline ScoreReport persistence_baseline(const fs::path& dir, const std::string& manifest_name,
                                        const RainBins& bins = RainBins()) {
  return persistence_baseline(Dataset::load(dir, manifest_name), bins);
}

// ---------------------------------------------------------------------------
// Synthetic satellite/radar generator
// ---------------------------------------------------------------------------

struct SynthConfig {
  DatasetInfo geometry;
  std::size_t train_sequences = 16;
  std::size_t val_sequences = 6;
  std::size_t window_stride = 1;
  std::size_t regions = 3;
  std::size_t cells = 8;
  double speed_max = 1.0;  // satellite pixels per frame
  double amp_min = 4.0;    // mm/h
  double amp_max = 40.0;
  double sigma_min = 1.5;  // satellite pixels
  double sigma_max = 3.5;
  double life_min = 1.5;  // frames, std of the intensity envelope
  double life_max = 3.0;
  double satellite_lead = 2.5;  // frames the cloud signal runs ahead of rain
  double blur = 1.0;            // cloud width relative to the rain cell
  double noise = 0.05;
  std::uint64_t seed = 0;

  static SynthConfig desk() { return SynthConfig{}; }

  static SynthConfig geometry_preset() {
    SynthConfig c;
    c.geometry = DatasetInfo{252, 252, 6, 126, 11, 4, 4, 9};
    c.train_sequences = 1;
    c.val_sequences = 1;
    c.window_stride = 1;
    return c;
  }

  void validate() const {
    geometry.validate();
    if (!window_stride) throw Error("window stride must be positive");
    if (amp_min < 0.0 || amp_max < amp_min) throw Error("cell amplitudes must satisfy 0 <= min <= max");
    if (amp_max <= 15.0) throw Error("amp_max must exceed the top rain threshold so every bin can occur");
    if (!(sigma_min > 0.0) || sigma_max < sigma_min || !(life_min > 0.0) || life_max < life_min) {
      throw Error("invalid cell size or lifetime range");
    }
    if (!regions) throw Error("need at least one region");
  }
};

struct SynthSummary {
  std::size_t train_sequences = 0;
  std::size_t val_sequences = 0;
  std::size_t train_windows = 0;
  std::size_t val_windows = 0;
  std::array<std::int64_t, kNumBins> train_bin_histogram{};
};

namespace detail {

struct RainCell {
  double x0, y0, amp, sigma, peak, life;
};

// Rain (or cloud) intensity at satellite coordinate (x, y) and frame time t.
// `lead` shifts the lifecycle envelope, `width` scales the cell radius.
inline double cell_field(const std::vector<RainCell>& cells, double vx, double vy, double x, double y, double t,
                         double lead, double width) {
  double acc = 0.0;
  for (const auto& c : cells) {
    const double u = (t + lead - c.peak) / c.life;
    const double env = std::exp(-0.5 * u * u);
    if (env < 1e-6) continue;
    const double s = c.sigma * width;
    const double dx = x - (c.x0 + vx * t);
    const double dy = y - (c.y0 + vy * t);
    const double r2 = (dx * dx + dy * dy) / (s * s);
    if (r2 > 50.0) continue;
    acc += c.amp * env * std::exp(-0.5 * r2);
  }
  return acc;
}

inline Sequence synth_sequence(const SynthConfig& cfg, std::uint64_t seed) {
  const auto& g = cfg.geometry;
  Rng rng(seed);
  const auto L = static_cast<double>(g.seq_len);
  const double angle = rng.uniform(0.0, 2.0 * M_PI);
  const double speed = rng.uniform(0.3, 1.0) * cfg.speed_max;
  const double vx = speed * std::cos(angle);
  const double vy = speed * std::sin(angle);

  // Cells are seeded so that they cross the radar footprint during the sequence.
  const double footprint = static_cast<double>(g.patch());
  const double off = static_cast<double>(g.sat_side - g.patch()) / 2.0;
  const double margin = cfg.sigma_max * 2.0;
  std::vector<RainCell> cells(cfg.cells);
  for (auto& c : cells) {
    const double tc = rng.uniform(-0.2 * L, 1.2 * L);
    const double xc = off + rng.uniform(-margin, footprint + margin);
    const double yc = off + rng.uniform(-margin, footprint + margin);
    c.amp = rng.uniform(cfg.amp_min, cfg.amp_max);
    c.sigma = rng.uniform(cfg.sigma_min, cfg.sigma_max);
    c.peak = tc;
    c.life = rng.uniform(cfg.life_min, cfg.life_max);
    // Position (xc, yc) is reached at the peak time tc.
    c.x0 = xc - vx * tc;
    c.y0 = yc - vy * tc;
  }

  std::vector<double> gain(g.bands), bias(g.bands);
  for (std::size_t b = 0; b < g.bands; ++b) {
    const double sign = b % 2 == 0 ? 1.0 : -1.0;
    gain[b] = sign * (0.5 + 0.5 * static_cast<double>(b + 1) / static_cast<double>(g.bands));
    bias[b] = 0.1 * static_cast<double>(b);
  }

  Sequence s{Tensor({g.seq_len, g.bands, g.sat_side, g.sat_side}), Tensor({g.seq_len, g.radar_side, g.radar_side})};
  const std::size_t sat_plane = g.sat_side * g.sat_side;
  std::vector<double> cloud(sat_plane);
  const double f = static_cast<double>(g.factor);
  for (std::size_t t = 0; t < g.seq_len; ++t) {
    const auto tt = static_cast<double>(t);
    for (std::size_t y = 0; y < g.sat_side; ++y) {
      for (std::size_t x = 0; x < g.sat_side; ++x) {
        cloud[y * g.sat_side + x] = cell_field(cells, vx, vy, static_cast<double>(x) + 0.5,
                                               static_cast<double>(y) + 0.5, tt, cfg.satellite_lead, cfg.blur);
      }
    }
    for (std::size_t b = 0; b < g.bands; ++b) {
      float* dst = &s.inputs[(t * g.bands + b) * sat_plane];
      for (std::size_t p = 0; p < sat_plane; ++p) {
        dst[p] = static_cast<float>(gain[b] * std::log1p(cloud[p]) + bias[b] + cfg.noise * rng.normal());
      }
    }
    for (std::size_t y = 0; y < g.radar_side; ++y) {
      for (std::size_t x = 0; x < g.radar_side; ++x) {
        const double sx = off + (static_cast<double>(x) + 0.5) / f;
        const double sy = off + (static_cast<double>(y) + 0.5) / f;
        s.targets[(t * g.radar_side + y) * g.radar_side + x] =
            static_cast<float>(cell_field(cells, vx, vy, sx, sy, tt, 0.0, 1.0));
      }
    }
  }
  return s;
}

inline std::string seq_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04zu.nwt", i);
  return buf;
}

}  // namespace detail

inline std::vector<std::size_t> window_starts(const DatasetInfo& g, std::size_t stride) {
  std::vector<std::size_t> out;
  for (std::size_t t = 0; t + g.frames_in + g.lead_times <= g.seq_len; t += stride) out.push_back(t);
  return out;
}

/// Generates sequences in memory. Sequence i uses seed mix_seed(cfg.seed, i);
/// the first train_sequences form the training split, the rest validation.
inline std::vector<Sequence> synth_sequences(const SynthConfig& cfg) {
  cfg.validate();
  std::vector<Sequence> out;
  for (std::size_t i = 0; i < cfg.train_sequences + cfg.val_sequences; ++i) {
    out.push_back(detail::synth_sequence(cfg, mix_seed(cfg.seed, i)));
  }
  return out;
}

inline Dataset synth_split(const SynthConfig& cfg, bool validation) {
  auto all = synth_sequences(cfg);
  std::vector<Sequence> seqs;
  std::vector<Window> windows;
  const std::size_t first = validation ? cfg.train_sequences : 0;
  const std::size_t count = validation ? cfg.val_sequences : cfg.train_sequences;
  for (std::size_t i = 0; i < count; ++i) {
    seqs.push_back(std::move(all[first + i]));
    for (std::size_t t : window_starts(cfg.geometry, cfg.window_stride)) {
      windows.push_back(Window{i, t, "R" + std::to_string((first + i) % cfg.regions)});
    }
  }
  return Dataset::from_memory(cfg.geometry, std::move(seqs), std::move(windows));
}

inline SynthSummary synth_generate(const SynthConfig& cfg, const fs::path& dir) {
  cfg.validate();
  std::error_code ec;
  fs::create_directories(dir / "inputs", ec);
  fs::create_directories(dir / "targets", ec);
  if (ec || !fs::is_directory(dir / "inputs")) {
    throw FormatError(FormatError::Kind::io, "cannot create dataset directory " + dir.string());
  }
  SynthSummary summary;
  summary.train_sequences = cfg.train_sequences;
  summary.val_sequences = cfg.val_sequences;
  std::vector<ManifestEntry> train, val;
  const auto starts = window_starts(cfg.geometry, cfg.window_stride);
  const RainBins bins;
  for (std::size_t i = 0; i < cfg.train_sequences + cfg.val_sequences; ++i) {
    const Sequence s = detail::synth_sequence(cfg, mix_seed(cfg.seed, i));
    const std::string in_rel = "inputs/" + detail::seq_name(i);
    const std::string tg_rel = "targets/" + detail::seq_name(i);
    write_tensor(dir / in_rel, s.inputs);
    write_tensor(dir / tg_rel, s.targets);
    const bool is_train = i < cfg.train_sequences;
    for (std::size_t t : starts) {
      (is_train ? train : val).push_back(ManifestEntry{in_rel, tg_rel, "R" + std::to_string(i % cfg.regions), t});
    }
    if (is_train) {
      for (float v : s.targets.data()) ++summary.train_bin_histogram[quantize(v, bins)];
    }
  }
  summary.train_windows = train.size();
  summary.val_windows = val.size();
  detail::spit(dir / "dataset.cfg", format_key_values(cfg.geometry.to_key_values()));
  detail::spit(dir / "manifest.txt", format_manifest(train));
  detail::spit(dir / "manifest_val.txt", format_manifest(val));
  return summary;
}

}  // namespace nowcast
