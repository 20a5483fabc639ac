#include "orchidkit/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace orchid {

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

void put_f64(std::ostream& os, double d) {
    std::uint64_t v;
    std::memcpy(&v, &d, 8);
    put_u64(os, v);
}

bool get_u32(std::istream& is, std::uint32_t& v) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
    v = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
        (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    return true;
}

bool get_u64(std::istream& is, std::uint64_t& v) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) return false;
    v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return true;
}

[[noreturn]] void truncated(const std::string& path, std::istream& is, const char* what) {
    throw FormatError("checkpoint '" + path + "': truncated while reading " + what + " at offset " +
                      std::to_string(static_cast<long long>(is.tellg())));
}

}  // namespace

void write_checkpoint(const std::string& path, const ParamSet& ps) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("checkpoint: cannot open '" + path + "' for writing");
    os.write("ORCD", 4);
    put_u32(os, kCheckpointVersion);
    for (std::size_t i = 0; i < ps.count(); ++i) {
        const std::string& name = ps.names[i];
        const DenseArray& a = ps.values[i];
        put_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        put_u32(os, static_cast<std::uint32_t>(a.rank()));
        for (std::size_t e : a.shape) put_u64(os, e);
        for (double d : a.data) put_f64(os, d);
    }
    if (!os) throw FormatError("checkpoint: write failed for '" + path + "'");
}

ParamSet read_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("checkpoint: cannot open '" + path + "'");
    char magic[4];
    if (!is.read(magic, 4)) truncated(path, is, "magic");
    if (std::memcmp(magic, "ORCD", 4) != 0)
        throw FormatError("checkpoint '" + path + "': bad magic, expected \"ORCD\"");
    std::uint32_t version = 0;
    if (!get_u32(is, version)) truncated(path, is, "version");
    if (version != kCheckpointVersion)
        throw FormatError("checkpoint '" + path + "': unsupported format version " +
                          std::to_string(version));
    ParamSet ps;
    for (;;) {
        std::uint32_t name_len = 0;
        if (!get_u32(is, name_len)) {
            if (is.eof()) break;  // clean end of sequence
            truncated(path, is, "name length");
        }
        std::string name(name_len, '\0');
        if (name_len && !is.read(name.data(), name_len)) truncated(path, is, "name");
        std::uint32_t rank = 0;
        if (!get_u32(is, rank)) truncated(path, is, "rank");
        std::vector<std::size_t> shape(rank);
        for (std::uint32_t r = 0; r < rank; ++r) {
            std::uint64_t e = 0;
            if (!get_u64(is, e)) truncated(path, is, "extent");
            shape[r] = static_cast<std::size_t>(e);
        }
        DenseArray a(shape);
        for (std::size_t j = 0; j < a.size(); ++j) {
            std::uint64_t bits = 0;
            if (!get_u64(is, bits)) truncated(path, is, "payload");
            std::memcpy(&a.data[j], &bits, 8);
        }
        ps.add(name, std::move(a));
    }
    return ps;
}

void merge_prefixed(ParamSet& dst, const std::string& prefix, const ParamSet& src) {
    for (std::size_t i = 0; i < src.count(); ++i) dst.add(prefix + "." + src.names[i], src.values[i]);
}

ParamSet extract_prefixed(const ParamSet& src, const std::string& prefix) {
    ParamSet out;
    std::string p = prefix + ".";
    for (std::size_t i = 0; i < src.count(); ++i)
        if (src.names[i].rfind(p, 0) == 0) out.add(src.names[i].substr(p.size()), src.values[i]);
    return out;
}

void load_values(ParamSet& dst, const ParamSet& src) {
    if (dst.count() != src.count())
        throw FormatError("load_values: parameter count mismatch (" + std::to_string(dst.count()) +
                          " vs " + std::to_string(src.count()) + ")");
    for (std::size_t i = 0; i < dst.count(); ++i) {
        auto it = src.index.find(dst.names[i]);
        if (it == src.index.end())
            throw FormatError("load_values: missing parameter '" + dst.names[i] + "'");
        const DenseArray& v = src.values[it->second];
        if (!dst.values[i].same_shape(v))
            throw FormatError("load_values: shape mismatch for '" + dst.names[i] + "': expected " +
                              dst.values[i].shape_string() + ", got " + v.shape_string());
        dst.values[i] = v;
    }
}

}  // namespace orchid
