#include "orchidkit/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "json.hpp"

namespace orchid {

namespace {

constexpr double kHitEps = 1e-9;

struct Palette {
    const char* name;
    double rgb[3];
};
constexpr Palette kPalette[] = {
    {"red", {0.80, 0.22, 0.20}},
    {"green", {0.25, 0.70, 0.30}},
    {"blue", {0.22, 0.35, 0.80}},
    {"yellow", {0.85, 0.78, 0.25}},
};
constexpr int kPaletteSize = 4;

struct Hit {
    double s = std::numeric_limits<double>::infinity();  // ray parameter; z-depth since dir_z = 1
    double n[3] = {0, 0, 0};
    const double* albedo = nullptr;
};

void consider_ground(const SceneSpec& spec, const double dir[3], Hit& h) {
    if (!spec.has_ground || dir[1] <= 0.0) return;
    double s = spec.ground_y / dir[1];
    if (s > kHitEps && s < h.s) {
        h.s = s;
        h.n[0] = 0;
        h.n[1] = -1;
        h.n[2] = 0;
        h.albedo = spec.ground_albedo;
    }
}

void consider_wall(const SceneSpec& spec, const double dir[3], Hit& h) {
    if (!spec.has_back_wall) return;
    double s = spec.wall_z;  // dir_z == 1
    if (s > kHitEps && s < h.s) {
        h.s = s;
        h.n[0] = 0;
        h.n[1] = 0;
        h.n[2] = -1;
        h.albedo = spec.wall_albedo;
    }
}

void consider_sphere(const ObjectSpec& o, const double dir[3], Hit& h) {
    double r = o.size[0];
    double dd = dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2];
    double dc = dir[0] * o.center[0] + dir[1] * o.center[1] + dir[2] * o.center[2];
    double cc = o.center[0] * o.center[0] + o.center[1] * o.center[1] + o.center[2] * o.center[2] - r * r;
    double disc = dc * dc - dd * cc;
    if (disc < 0.0) return;
    double sq = std::sqrt(disc);
    double s = (dc - sq) / dd;
    if (s <= kHitEps) s = (dc + sq) / dd;
    if (s <= kHitEps || s >= h.s) return;
    h.s = s;
    for (int c = 0; c < 3; ++c) h.n[c] = (s * dir[c] - o.center[c]) / r;
    h.albedo = o.albedo;
}

void consider_box(const ObjectSpec& o, const double dir[3], Hit& h) {
    double t0 = -std::numeric_limits<double>::infinity();
    double t1 = std::numeric_limits<double>::infinity();
    int axis = -1;
    double sign = 0.0;
    for (int a = 0; a < 3; ++a) {
        double lo = o.center[a] - o.size[a], hi = o.center[a] + o.size[a];
        if (std::abs(dir[a]) < 1e-12) {
            if (0.0 < lo || 0.0 > hi) return;  // ray parallel and outside slab
            continue;
        }
        double ta = lo / dir[a], tb = hi / dir[a];
        double sgn = -1.0;
        if (ta > tb) {
            std::swap(ta, tb);
            sgn = 1.0;
        }
        if (ta > t0) {
            t0 = ta;
            axis = a;
            sign = sgn;
        }
        t1 = std::min(t1, tb);
        if (t0 > t1) return;
    }
    if (axis < 0 || t0 <= kHitEps || t0 >= h.s) return;
    h.s = t0;
    h.n[0] = h.n[1] = h.n[2] = 0.0;
    h.n[axis] = sign;
    h.albedo = o.albedo;
}

inline float f32(double v) { return static_cast<float>(v); }

// binary helpers (little-endian on-disk)
void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_f32(std::ostream& os, float f) {
    std::uint32_t v;
    std::memcpy(&v, &f, 4);
    put_u32(os, v);
}

void put_f64(std::ostream& os, double d) {
    std::uint64_t v;
    std::memcpy(&v, &d, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

struct Reader {
    std::ifstream is;
    std::string path;
    std::size_t offset = 0;

    explicit Reader(const std::string& p) : is(p, std::ios::binary), path(p) {
        if (!is) throw ValueError("container: cannot open '" + p + "'");
    }

    [[noreturn]] void fail(const char* what) {
        throw orchid::ValueError("container '" + path + "': " + what + " at offset " +
                                 std::to_string(offset));
    }

    void bytes(void* dst, std::size_t n, const char* what) {
        if (!is.read(static_cast<char*>(dst), static_cast<std::streamsize>(n))) fail(what);
        offset += n;
    }

    std::uint32_t u32(const char* what) {
        unsigned char b[4];
        bytes(b, 4, what);
        return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
               (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    }

    float fl32(const char* what) {
        std::uint32_t v = u32(what);
        float f;
        std::memcpy(&f, &v, 4);
        return f;
    }

    double fl64(const char* what) {
        unsigned char b[8];
        bytes(b, 8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
        double d;
        std::memcpy(&d, &v, 8);
        return d;
    }
};

constexpr std::uint32_t kContainerVersion = 1;

}  // namespace

Intrinsics default_intrinsics(int height, int width) {
    Intrinsics k;
    k.fx = static_cast<double>(width);
    k.fy = static_cast<double>(width);
    k.cx = 0.5 * static_cast<double>(width - 1);
    k.cy = 0.5 * static_cast<double>(height - 1);
    return k;
}

SceneSpec random_scene(RandomStream rng, const SceneOptions& opts) {
    SceneSpec s;
    s.has_ground = true;
    s.ground_y = rng.uniform() * 0.5 + 0.9;
    s.has_back_wall = opts.back_wall;
    s.wall_z = rng.uniform() * 2.5 + 5.0;
    int min_obj = std::max(0, opts.min_objects);
    int max_obj = std::min(6, std::max(min_obj, opts.max_objects));
    int n = static_cast<int>(rng.uniform_int(min_obj, max_obj));
    for (int i = 0; i < n; ++i) {
        ObjectSpec o;
        o.kind = rng.uniform() < 0.5 ? ObjectSpec::Kind::Sphere : ObjectSpec::Kind::Box;
        double z = rng.uniform() * 2.2 + 2.2;
        double x = (rng.uniform() - 0.5) * 0.7 * z;
        if (o.kind == ObjectSpec::Kind::Sphere) {
            double r = rng.uniform() * 0.35 + 0.3;
            o.size[0] = o.size[1] = o.size[2] = r;
            o.center[0] = x;
            o.center[1] = s.ground_y - r;  // resting on the ground
            o.center[2] = z;
        } else {
            for (int a = 0; a < 3; ++a) o.size[a] = rng.uniform() * 0.3 + 0.25;
            o.center[0] = x;
            o.center[1] = s.ground_y - o.size[1];
            o.center[2] = z;
        }
        o.palette = static_cast<int>(rng.uniform_int(0, kPaletteSize - 1));
        for (int c = 0; c < 3; ++c) {
            double jitter = (rng.uniform() - 0.5) * 0.08;
            o.albedo[c] = std::min(0.95, std::max(0.05, kPalette[o.palette].rgb[c] + jitter));
        }
        s.objects.push_back(o);
    }
    double lx = (rng.uniform() - 0.5) * 1.0;
    double ly = -(rng.uniform() * 0.5 + 0.4);
    double lz = -(rng.uniform() * 0.5 + 0.3);
    double len = std::sqrt(lx * lx + ly * ly + lz * lz);
    s.light[0] = lx / len;
    s.light[1] = ly / len;
    s.light[2] = lz / len;
    return s;
}

SceneSpec scene_for_index(std::uint64_t dataset_seed, std::uint64_t index, const SceneOptions& opts) {
    return random_scene(RandomStream(dataset_seed).split(index), opts);
}

std::vector<std::string> tags_for(const SceneSpec& spec) {
    std::vector<std::string> tags;
    tags.push_back("objects:" + std::to_string(spec.objects.size()));
    bool sphere = false, box = false;
    std::set<int> palettes;
    for (const auto& o : spec.objects) {
        sphere |= o.kind == ObjectSpec::Kind::Sphere;
        box |= o.kind == ObjectSpec::Kind::Box;
        palettes.insert(o.palette);
    }
    if (sphere) tags.push_back("has:sphere");
    if (box) tags.push_back("has:box");
    tags.push_back(spec.has_back_wall ? "wall" : "open");
    for (int p : palettes) tags.push_back(kPalette[p].name);
    return tags;
}

std::vector<std::string> tag_vocabulary() {
    std::vector<std::string> v;
    for (int i = 0; i <= 6; ++i) v.push_back("objects:" + std::to_string(i));
    v.push_back("has:sphere");
    v.push_back("has:box");
    v.push_back("wall");
    v.push_back("open");
    for (const auto& p : kPalette) v.push_back(p.name);
    return v;
}

Sample render(const SceneSpec& spec, int height, int width) {
    if (height < 1 || width < 1) throw ValueError("render: empty raster");
    if (spec.objects.size() > 6) throw ValueError("render: object count must be in [0,6]");
    Sample s;
    s.intrinsics = default_intrinsics(height, width);
    std::size_t h = static_cast<std::size_t>(height), w = static_cast<std::size_t>(width);
    s.color = DenseArray({3, h, w});
    s.depth.values = DenseArray({h, w}, 0.0);
    s.depth.valid = BoolMask(h, w, false);
    s.normal.vectors = DenseArray({3, h, w}, 0.0);
    s.normal.valid = BoolMask(h, w, false);
    s.tags = tags_for(spec);

    for (std::size_t v = 0; v < h; ++v) {
        for (std::size_t u = 0; u < w; ++u) {
            double dir[3] = {(static_cast<double>(u) - s.intrinsics.cx) / s.intrinsics.fx,
                             (static_cast<double>(v) - s.intrinsics.cy) / s.intrinsics.fy, 1.0};
            Hit hit;
            consider_ground(spec, dir, hit);
            consider_wall(spec, dir, hit);
            for (const auto& o : spec.objects) {
                if (o.kind == ObjectSpec::Kind::Sphere)
                    consider_sphere(o, dir, hit);
                else
                    consider_box(o, dir, hit);
            }
            double rgb[3];
            if (std::isfinite(hit.s)) {
                double lam = std::max(0.0, hit.n[0] * spec.light[0] + hit.n[1] * spec.light[1] +
                                               hit.n[2] * spec.light[2]);
                for (int c = 0; c < 3; ++c)
                    rgb[c] = std::min(1.0, std::max(0.0, hit.albedo[c] * lam + spec.ambient));
                s.depth.values.at(v, u) = static_cast<double>(f32(hit.s));
                s.depth.valid.set(v, u, true);
                for (int c = 0; c < 3; ++c)
                    s.normal.vectors.at(static_cast<std::size_t>(c), v, u) =
                        static_cast<double>(f32(hit.n[c]));
                s.normal.valid.set(v, u, true);
            } else {
                // sky gradient, deterministic in the ray direction
                double f = std::min(1.0, std::max(0.0, 0.5 - dir[1]));
                rgb[0] = 0.55 + 0.15 * f;
                rgb[1] = 0.65 + 0.12 * f;
                rgb[2] = 0.82 + 0.08 * f;
            }
            for (int c = 0; c < 3; ++c)
                s.color.at(static_cast<std::size_t>(c), v, u) = static_cast<double>(f32(rgb[c]));
        }
    }
    return s;
}

void write_sample(const std::string& path, const Sample& s) {
    std::size_t h = s.color.shape[1], w = s.color.shape[2];
    if (s.color.rank() != 3 || s.color.shape[0] != 3) throw ShapeError("write_sample: color must be [3,H,W]");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ValueError("write_sample: cannot open '" + path + "'");
    os.write("OSMP", 4);
    put_u32(os, kContainerVersion);
    put_u32(os, static_cast<std::uint32_t>(h));
    put_u32(os, static_cast<std::uint32_t>(w));
    for (double v : s.color.data) put_f32(os, f32(v));
    for (std::size_t i = 0; i < h * w; ++i)
        put_f32(os, s.depth.valid.m[i] ? f32(s.depth.values.data[i])
                                       : std::numeric_limits<float>::quiet_NaN());
    for (double v : s.normal.vectors.data) put_f32(os, f32(v));
    for (std::size_t i = 0; i < h * w; ++i) {
        unsigned char b = s.depth.valid.m[i] ? 1 : 0;
        os.write(reinterpret_cast<const char*>(&b), 1);
    }
    put_f64(os, s.intrinsics.fx);
    put_f64(os, s.intrinsics.fy);
    put_f64(os, s.intrinsics.cx);
    put_f64(os, s.intrinsics.cy);
    put_u32(os, static_cast<std::uint32_t>(s.tags.size()));
    for (const auto& t : s.tags) {
        put_u32(os, static_cast<std::uint32_t>(t.size()));
        os.write(t.data(), static_cast<std::streamsize>(t.size()));
    }
    if (!os) throw ValueError("write_sample: write failed for '" + path + "'");
}

Sample read_sample(const std::string& path) {
    Reader r(path);
    char magic[4];
    r.bytes(magic, 4, "magic");
    if (std::memcmp(magic, "OSMP", 4) != 0) r.fail("bad magic, expected \"OSMP\"");
    std::uint32_t version = r.u32("version");
    if (version != kContainerVersion)
        throw ValueError("container '" + path + "': unsupported version " + std::to_string(version));
    std::size_t h = r.u32("height");
    std::size_t w = r.u32("width");
    if (h == 0 || w == 0 || h > 1 << 20 || w > 1 << 20) r.fail("implausible extents");

    Sample s;
    s.color = DenseArray({3, h, w});
    for (double& v : s.color.data) v = static_cast<double>(r.fl32("color plane"));
    s.depth.values = DenseArray({h, w});
    std::vector<float> rawd(h * w);
    for (auto& v : rawd) v = r.fl32("depth plane");
    s.normal.vectors = DenseArray({3, h, w});
    for (double& v : s.normal.vectors.data) v = static_cast<double>(r.fl32("normal plane"));
    s.depth.valid = BoolMask(h, w, false);
    for (std::size_t i = 0; i < h * w; ++i) {
        unsigned char b;
        r.bytes(&b, 1, "validity plane");
        s.depth.valid.m[i] = b ? 1 : 0;
        s.depth.values.data[i] = b ? static_cast<double>(rawd[i]) : 0.0;
    }
    s.normal.valid = s.depth.valid;
    s.intrinsics.fx = r.fl64("intrinsics");
    s.intrinsics.fy = r.fl64("intrinsics");
    s.intrinsics.cx = r.fl64("intrinsics");
    s.intrinsics.cy = r.fl64("intrinsics");
    std::uint32_t ntags = r.u32("tag count");
    if (ntags > 4096) r.fail("implausible tag count");
    for (std::uint32_t i = 0; i < ntags; ++i) {
        std::uint32_t len = r.u32("tag length");
        if (len > 4096) r.fail("implausible tag length");
        std::string t(len, '\0');
        if (len) r.bytes(t.data(), len, "tag");
        s.tags.push_back(std::move(t));
    }
    return s;
}

std::uint64_t file_checksum(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValueError("file_checksum: cannot open '" + path + "'");
    std::uint64_t h = 0xcbf29ce484222325ull;
    char buf[65536];
    while (is.read(buf, sizeof(buf)) || is.gcount() > 0)
        h = fnv1a64(buf, static_cast<std::size_t>(is.gcount()), h);
    return h;
}

std::vector<ManifestEntry> generate_dataset(const DatasetOptions& opts, const std::string& out_dir) {
    if (opts.count < 1) throw ValueError("generate_dataset: count must be >= 1");
    std::filesystem::create_directories(out_dir);
    std::vector<ManifestEntry> manifest;
    std::ofstream mf(out_dir + "/manifest.jsonl");
    if (!mf) throw ValueError("generate_dataset: cannot write manifest in '" + out_dir + "'");
    for (int i = 0; i < opts.count; ++i) {
        SceneSpec spec = scene_for_index(opts.seed, static_cast<std::uint64_t>(i), opts.scene);
        Sample s = render(spec, opts.height, opts.width);
        char name[32];
        std::snprintf(name, sizeof(name), "sample_%05d.osmp", i);
        std::string path = out_dir + "/" + name;
        write_sample(path, s);
        ManifestEntry e;
        e.file = name;
        e.tags = s.tags;
        char hex[24];
        std::snprintf(hex, sizeof(hex), "%016llx",
                      static_cast<unsigned long long>(file_checksum(path)));
        e.checksum = hex;
        nlohmann::json j{{"file", e.file}, {"tags", e.tags}, {"checksum", e.checksum}};
        mf << j.dump() << '\n';
        manifest.push_back(std::move(e));
    }
    return manifest;
}

std::vector<ManifestEntry> read_manifest(const std::string& dir) {
    std::ifstream mf(dir + "/manifest.jsonl");
    if (!mf) throw ValueError("read_manifest: cannot open '" + dir + "/manifest.jsonl'");
    std::vector<ManifestEntry> out;
    std::string line;
    while (std::getline(mf, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        ManifestEntry e;
        e.file = j.at("file").get<std::string>();
        e.tags = j.at("tags").get<std::vector<std::string>>();
        e.checksum = j.at("checksum").get<std::string>();
        out.push_back(std::move(e));
    }
    return out;
}

std::vector<Sample> load_dataset(const std::string& dir) {
    std::vector<Sample> out;
    for (const auto& e : read_manifest(dir)) out.push_back(read_sample(dir + "/" + e.file));
    return out;
}

}  // namespace orchid
