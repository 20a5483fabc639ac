#pragma once

#include <string>
#include <vector>

#include "orchidkit/array.hpp"
#include "orchidkit/nn.hpp"

namespace orchid {

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Parameter checkpoint container.
///
/// Layout: magic "ORCD", format version u32, then a sequence of entries
/// (name length u32, UTF-8 name, rank u32, extents u64 each, raw
/// little-endian f64 payload) until end of file. Round-trips bit-exactly.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(const std::string& path, const ParamSet& ps);
ParamSet read_checkpoint(const std::string& path);

/// Merge `src` under a dotted prefix into `dst` ("enc" + "stem.w" -> "enc.stem.w").
void merge_prefixed(ParamSet& dst, const std::string& prefix, const ParamSet& src);
/// Extract the subset of `src` under a prefix, with the prefix stripped.
ParamSet extract_prefixed(const ParamSet& src, const std::string& prefix);

/// Copy values from `src` into an existing ParamSet with identical names and
/// shapes (loading a checkpoint into a freshly built model).
void load_values(ParamSet& dst, const ParamSet& src);

}  // namespace orchid
