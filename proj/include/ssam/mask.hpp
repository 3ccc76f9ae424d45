#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ssam/common.hpp"
#include "ssam/rng.hpp"

namespace ssam {

enum class PatternKind : std::uint8_t { unstructured = 0, structured = 1, nm = 2 };

inline std::string pattern_kind_name(PatternKind k) {
  switch (k) {
    case PatternKind::unstructured: return "unstructured";
    case PatternKind::structured: return "structured";
    case PatternKind::nm: return "nm";
  }
  return "?";
}

/// Sparsity pattern constraint for a BinaryMask.
///  - unstructured: no positional constraint.
///  - structured: bits constant within each unit of a kernel_units partition.
///  - nm: keep N of every M consecutive indices, groups aligned within each
///    parameter tensor's flat segment; a tensor tail shorter than M stays
///    all-ones and is excluded from sparsity accounting.
struct MaskPattern {
  PatternKind kind = PatternKind::unstructured;
  int n = 0, m = 0;  // nm only
  // structured: unit partition (contiguous index ranges from kernel_units).
  std::shared_ptr<const std::vector<std::vector<std::size_t>>> units;
  // nm: flat length of each parameter tensor, in entry order.
  std::vector<std::size_t> segment_lengths;

  static MaskPattern make_unstructured() { return {}; }

  static MaskPattern make_structured(std::vector<std::vector<std::size_t>> units_in) {
    MaskPattern p;
    p.kind = PatternKind::structured;
    p.units = std::make_shared<const std::vector<std::vector<std::size_t>>>(std::move(units_in));
    return p;
  }

  static MaskPattern make_nm(int n, int m, std::vector<std::size_t> segment_lengths) {
    if (n <= 0 || m <= 0 || n >= m)
      throw ConfigError("MaskPattern: N:M requires 0 < N < M, got " + std::to_string(n) + ":" +
                        std::to_string(m));
    MaskPattern p;
    p.kind = PatternKind::nm;
    p.n = n;
    p.m = m;
    p.segment_lengths = std::move(segment_lengths);
    return p;
  }
};

/// Per-parameter perturbation gate m in {0,1}^d. Masks are immutable values;
/// updates return new masks.
struct BinaryMask {
  std::vector<std::uint8_t> bits;
  double sparsity = 0.0;  // configured s
  MaskPattern pattern;

  std::size_t size() const { return bits.size(); }

  std::size_t active_count() const {
    std::size_t c = 0;
    for (std::uint8_t b : bits) c += b;
    return c;
  }

  /// Fraction of accountable coordinates with bit 0. For nm patterns, tail
  /// groups shorter than M are forced all-ones and excluded from accounting.
  double achieved_sparsity() const {
    std::size_t total = bits.size(), active = active_count();
    if (pattern.kind == PatternKind::nm) {
      std::size_t tail = 0;
      for (std::size_t len : pattern.segment_lengths)
        tail += len % static_cast<std::size_t>(pattern.m);
      total -= tail;
      active -= tail;  // tail bits are all ones by construction
    }
    if (total == 0) return 0.0;
    return 1.0 - static_cast<double>(active) / static_cast<double>(total);
  }

  std::uint64_t checksum() const { return fnv1a64(bits.data(), bits.size()); }
};

/// Drop/grow schedule knobs for dynamic masks.
struct DynamicMaskConfig {
  double alpha = 0.5;    // drop ratio in (0,1]
  int total_epochs = 1;  // T
  int update_interval = 1;  // T_m in epochs

  void validate() const {
    if (!(alpha > 0.0 && alpha <= 1.0))
      throw ConfigError("DynamicMaskConfig: alpha must be in (0,1]");
    if (update_interval < 1) throw ConfigError("DynamicMaskConfig: update_interval must be >= 1");
    if (total_epochs < 1) throw ConfigError("DynamicMaskConfig: total_epochs must be >= 1");
  }
};

/// Indices of the k largest values, ties broken by lowest index first.
inline std::vector<std::size_t> arg_top_k(std::span<const double> values, std::size_t k) {
  if (k > values.size())
    throw ConfigError("arg_top_k: k=" + std::to_string(k) + " exceeds " +
                      std::to_string(values.size()) + " values");
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (values[a] != values[b]) return values[a] > values[b];
    return a < b;
  });
  order.resize(k);
  return order;
}

inline std::size_t keep_count(double sparsity, std::size_t d) {
  return static_cast<std::size_t>(std::llround((1.0 - sparsity) * static_cast<double>(d)));
}

/// Cosine-decayed drop fraction: (alpha/2) * (1 + cos(t*pi/T)).
inline double cosine_decay(long t, long total, double alpha) {
  if (t < 0 || t > total)
    throw ConfigError("cosine_decay: t=" + std::to_string(t) + " outside [0," +
                      std::to_string(total) + "]");
  return 0.5 * alpha * (1.0 + std::cos(static_cast<double>(t) * M_PI / static_cast<double>(total)));
}

/// Mask from a Fisher importance vector (Alg. 2 Option I).
///  - unstructured: top round((1-s)*d) Fisher entries.
///  - structured: units ranked by mean Fisher, added until >= the target count
///    (overshoot at most one unit).
///  - nm: top-N Fisher entries in each aligned group of M; tensor tails all-ones.
inline BinaryMask fisher_mask(std::span<const double> fisher, double sparsity,
                              const MaskPattern& pattern) {
  if (!(sparsity >= 0.0 && sparsity < 1.0))
    throw ConfigError("fisher_mask: sparsity must be in [0,1)");
  const std::size_t d = fisher.size();
  BinaryMask mask;
  mask.pattern = pattern;
  mask.bits.assign(d, 0);

  switch (pattern.kind) {
    case PatternKind::unstructured: {
      mask.sparsity = sparsity;
      for (std::size_t i : arg_top_k(fisher, keep_count(sparsity, d))) mask.bits[i] = 1;
      break;
    }
    case PatternKind::structured: {
      mask.sparsity = sparsity;
      const auto& units = *pattern.units;
      std::size_t covered = 0;
      for (const auto& u : units) covered += u.size();
      if (covered != d)
        throw ConfigError("fisher_mask: unit partition covers " + std::to_string(covered) +
                          " of " + std::to_string(d) + " indices");
      std::vector<double> unit_mean(units.size(), 0.0);
      for (std::size_t u = 0; u < units.size(); ++u) {
        double s = 0.0;
        for (std::size_t i : units[u]) s += fisher[i];
        unit_mean[u] = s / static_cast<double>(units[u].size());
      }
      const std::size_t target = keep_count(sparsity, d);
      std::size_t active = 0;
      for (std::size_t u : arg_top_k(unit_mean, units.size())) {
        if (active >= target) break;
        for (std::size_t i : units[u]) mask.bits[i] = 1;
        active += units[u].size();
      }
      break;
    }
    case PatternKind::nm: {
      const std::size_t m = static_cast<std::size_t>(pattern.m);
      const std::size_t n = static_cast<std::size_t>(pattern.n);
      std::size_t seg_total = 0;
      for (std::size_t len : pattern.segment_lengths) seg_total += len;
      if (seg_total != d)
        throw ConfigError("fisher_mask: nm segments cover " + std::to_string(seg_total) + " of " +
                          std::to_string(d) + " indices");
      mask.sparsity = 1.0 - static_cast<double>(n) / static_cast<double>(m);
      std::size_t off = 0;
      for (std::size_t len : pattern.segment_lengths) {
        std::size_t g = 0;
        for (; g + m <= len; g += m) {
          for (std::size_t i : arg_top_k(fisher.subspan(off + g, m), n))
            mask.bits[off + g + i] = 1;
        }
        for (; g < len; ++g) mask.bits[off + g] = 1;  // tail stays dense
        off += len;
      }
      break;
    }
  }
  return mask;
}

/// Seeded random mask of the requested sparsity/pattern (Alg. 1 line 1).
inline BinaryMask random_mask(std::size_t d, double sparsity, const MaskPattern& pattern,
                              std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> scores(d);
  for (double& s : scores) s = rng.uniform();
  return fisher_mask(scores, sparsity, pattern);
}

/// One drop/grow step (Alg. 2 Option II): clears the floor(decay*(1-s)*d)
/// active bits with smallest |grad| and grows the same number uniformly at
/// random among bits inactive before the update. Unstructured masks only.
inline BinaryMask dynamic_update(const BinaryMask& mask, std::span<const double> grads, long epoch,
                                 const DynamicMaskConfig& cfg, double sparsity,
                                 std::uint64_t rng_seed) {
  cfg.validate();
  if (mask.pattern.kind != PatternKind::unstructured)
    throw ConfigError("dynamic_update: only unstructured masks evolve dynamically (got " +
                      pattern_kind_name(mask.pattern.kind) + ")");
  if (grads.size() != mask.size())
    throw ShapeError("dynamic_update: " + std::to_string(grads.size()) + " grads for mask of " +
                     std::to_string(mask.size()));
  const double decay = cosine_decay(epoch, cfg.total_epochs, cfg.alpha);
  const double keep = (1.0 - sparsity) * static_cast<double>(mask.size());
  std::size_t n_drop = static_cast<std::size_t>(std::floor(decay * keep));

  std::vector<std::size_t> active, inactive;
  for (std::size_t i = 0; i < mask.size(); ++i)
    (mask.bits[i] ? active : inactive).push_back(i);
  n_drop = std::min(n_drop, active.size());
  if (n_drop > inactive.size())
    throw ConfigError("dynamic_update: cannot grow " + std::to_string(n_drop) +
                      " bits, only " + std::to_string(inactive.size()) + " inactive");
  BinaryMask out = mask;
  if (n_drop == 0) return out;

  // Drop the flattest: smallest |grad| among actives, ties by lowest index.
  std::vector<double> neg_abs(active.size());
  for (std::size_t j = 0; j < active.size(); ++j) neg_abs[j] = -std::abs(grads[active[j]]);
  for (std::size_t j : arg_top_k(neg_abs, n_drop)) out.bits[active[j]] = 0;

  Rng rng(rng_seed);
  for (std::size_t i : rng.sample_without_replacement(inactive, n_drop)) out.bits[i] = 1;
  return out;
}

struct MaskValidation {
  bool ok = true;
  std::string report = "ok";
};

/// Checks the pattern invariant; reports the first violating index/group/unit.
inline MaskValidation validate(const BinaryMask& mask) {
  MaskValidation v;
  switch (mask.pattern.kind) {
    case PatternKind::unstructured: {
      const std::size_t expect = keep_count(mask.sparsity, mask.size());
      const std::size_t got = mask.active_count();
      if (got != expect) {
        v.ok = false;
        v.report = "unstructured: active count " + std::to_string(got) + " != round((1-s)*d) = " +
                   std::to_string(expect);
      }
      break;
    }
    case PatternKind::structured: {
      const auto& units = *mask.pattern.units;
      for (std::size_t u = 0; u < units.size(); ++u) {
        const std::uint8_t first = mask.bits[units[u][0]];
        for (std::size_t i : units[u])
          if (mask.bits[i] != first) {
            v.ok = false;
            v.report = "structured: unit " + std::to_string(u) + " has mixed bits (index " +
                       std::to_string(i) + ")";
            return v;
          }
      }
      break;
    }
    case PatternKind::nm: {
      const std::size_t m = static_cast<std::size_t>(mask.pattern.m);
      const std::size_t n = static_cast<std::size_t>(mask.pattern.n);
      std::size_t off = 0, group_idx = 0;
      for (std::size_t len : mask.pattern.segment_lengths) {
        std::size_t g = 0;
        for (; g + m <= len; g += m, ++group_idx) {
          std::size_t c = 0;
          for (std::size_t i = 0; i < m; ++i) c += mask.bits[off + g + i];
          if (c != n) {
            v.ok = false;
            v.report = "nm: group " + std::to_string(group_idx) + " has " + std::to_string(c) +
                       " active bits, expected " + std::to_string(n);
            return v;
          }
        }
        for (; g < len; ++g) {
          if (!mask.bits[off + g]) {
            v.ok = false;
            v.report = "nm: tail index " + std::to_string(off + g) + " must stay active";
            return v;
          }
        }
        off += len;
      }
      break;
    }
  }
  return v;
}

// ---------------------------------------------------------------------------
// Serialization.
//
// Binary layout (little-endian):
//   byte 0..7    magic "SSAMMSK1"
//   byte 8..15   u64 d
//   byte 16..23  f64 sparsity
//   byte 24      u8 pattern kind (0 unstructured, 1 structured, 2 nm)
//   byte 25      u8 reserved (0)
//   byte 26..27  u16 N
//   byte 28..29  u16 M
//   byte 30..31  u16 reserved (0)
//   byte 32..39  u64 S = table length (structured: unit count; nm: segment
//                count; unstructured: 0)
//   next 8*S     u64 lengths of contiguous units/segments, in flat order
//   next ceil(d/8)  mask bits, LSB-first within each byte
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}
inline std::uint64_t get_u64(const std::string& in, std::size_t off) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[off + static_cast<std::size_t>(i)]))
         << (8 * i);
  return v;
}
inline std::uint16_t get_u16(const std::string& in, std::size_t off) {
  return static_cast<std::uint16_t>(static_cast<unsigned char>(in[off]) |
                                    (static_cast<unsigned char>(in[off + 1]) << 8));
}

/// Lengths of the contiguous ranges of a unit partition; errors if any unit
/// is not a contiguous ascending index range.
inline std::vector<std::size_t> contiguous_lengths(
    const std::vector<std::vector<std::size_t>>& units) {
  std::vector<std::size_t> lens;
  std::size_t expect = 0;
  for (const auto& u : units) {
    for (std::size_t i = 0; i < u.size(); ++i)
      if (u[i] != expect + i)
        throw ConfigError("mask serialization: unit partition is not contiguous");
    lens.push_back(u.size());
    expect += u.size();
  }
  return lens;
}

}  // namespace detail

inline std::string serialize_mask(const BinaryMask& mask) {
  std::string out;
  out += "SSAMMSK1";
  detail::put_u64(out, mask.size());
  std::uint64_t sbits;
  std::memcpy(&sbits, &mask.sparsity, 8);
  detail::put_u64(out, sbits);
  out.push_back(static_cast<char>(mask.pattern.kind));
  out.push_back(0);
  detail::put_u16(out, static_cast<std::uint16_t>(mask.pattern.n));
  detail::put_u16(out, static_cast<std::uint16_t>(mask.pattern.m));
  detail::put_u16(out, 0);
  std::vector<std::size_t> table;
  if (mask.pattern.kind == PatternKind::structured)
    table = detail::contiguous_lengths(*mask.pattern.units);
  else if (mask.pattern.kind == PatternKind::nm)
    table = mask.pattern.segment_lengths;
  detail::put_u64(out, table.size());
  for (std::size_t len : table) detail::put_u64(out, len);
  std::string packed((mask.size() + 7) / 8, '\0');
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask.bits[i]) packed[i / 8] |= static_cast<char>(1 << (i % 8));
  out += packed;
  return out;
}

inline BinaryMask deserialize_mask(const std::string& in) {
  if (in.size() < 40 || in.compare(0, 8, "SSAMMSK1") != 0)
    throw ConfigError("deserialize_mask: bad magic or truncated header");
  const std::uint64_t d = detail::get_u64(in, 8);
  double sparsity;
  const std::uint64_t sbits = detail::get_u64(in, 16);
  std::memcpy(&sparsity, &sbits, 8);
  const auto kind = static_cast<PatternKind>(static_cast<unsigned char>(in[24]));
  const int n = detail::get_u16(in, 26);
  const int m = detail::get_u16(in, 28);
  const std::uint64_t table_len = detail::get_u64(in, 32);
  std::size_t off = 40;
  if (in.size() < off + 8 * table_len) throw ConfigError("deserialize_mask: truncated table");
  std::vector<std::size_t> table(table_len);
  for (std::size_t i = 0; i < table_len; ++i, off += 8) table[i] = detail::get_u64(in, off);

  BinaryMask mask;
  mask.sparsity = sparsity;
  if (kind == PatternKind::unstructured) {
    mask.pattern = MaskPattern::make_unstructured();
  } else if (kind == PatternKind::structured) {
    std::vector<std::vector<std::size_t>> units;
    std::size_t idx = 0;
    for (std::size_t len : table) {
      std::vector<std::size_t> u(len);
      std::iota(u.begin(), u.end(), idx);
      idx += len;
      units.push_back(std::move(u));
    }
    mask.pattern = MaskPattern::make_structured(std::move(units));
  } else if (kind == PatternKind::nm) {
    mask.pattern = MaskPattern::make_nm(n, m, table);
  } else {
    throw ConfigError("deserialize_mask: unknown pattern kind");
  }
  if (in.size() < off + (d + 7) / 8) throw ConfigError("deserialize_mask: truncated bits");
  mask.bits.assign(d, 0);
  for (std::size_t i = 0; i < d; ++i)
    mask.bits[i] = (in[off + i / 8] >> (i % 8)) & 1;
  return mask;
}

inline void save_mask(const BinaryMask& mask, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("save_mask: cannot open " + path);
  const std::string blob = serialize_mask(mask);
  f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
}

inline BinaryMask load_mask(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("load_mask: cannot open " + path);
  std::string blob((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_mask(blob);
}

/// Human-readable JSON debug form.
inline nlohmann::json mask_to_json(const BinaryMask& mask) {
  nlohmann::json j;
  j["d"] = mask.size();
  j["sparsity"] = mask.sparsity;
  j["achieved_sparsity"] = mask.achieved_sparsity();
  j["pattern"] = pattern_kind_name(mask.pattern.kind);
  if (mask.pattern.kind == PatternKind::nm) {
    j["n"] = mask.pattern.n;
    j["m"] = mask.pattern.m;
    j["segments"] = mask.pattern.segment_lengths;
  }
  if (mask.pattern.kind == PatternKind::structured)
    j["units"] = detail::contiguous_lengths(*mask.pattern.units);
  std::string bits(mask.size(), '0');
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask.bits[i]) bits[i] = '1';
  j["bits"] = bits;
  j["checksum"] = hex64(mask.checksum());
  return j;
}

}  // namespace ssam
