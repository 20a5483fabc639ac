#pragma once

#include <string>
#include <vector>

#include "orchidkit/array.hpp"
#include "orchidkit/geometry.hpp"
#include "orchidkit/rng.hpp"

namespace orchid {

struct ObjectSpec {
    enum class Kind { Sphere, Box };
    Kind kind = Kind::Sphere;
    double center[3] = {0, 0, 3};
    double size[3] = {0.5, 0.5, 0.5};  // radius in size[0] for spheres, half-extents for boxes
    double albedo[3] = {0.7, 0.7, 0.7};
    int palette = 0;  // index into the color tag palette
};

/// Procedural scene: ground plane, optional back wall, up to six primitives,
/// one directional light. Tags are a pure function of the spec.
struct SceneSpec {
    bool has_ground = true;
    double ground_y = 1.2;  // +y is down in camera space; ground is below the camera
    double ground_albedo[3] = {0.55, 0.52, 0.48};
    bool has_back_wall = true;
    double wall_z = 6.0;
    double wall_albedo[3] = {0.75, 0.73, 0.68};
    std::vector<ObjectSpec> objects;
    double light[3] = {0.3, -0.8, -0.5};  // direction toward the light, unit length
    double ambient = 0.15;
};

/// Coupled color/depth/normal raster triple with camera intrinsics and scene
/// tags. All raster values are f32-representable so the on-disk container
/// round-trips bit-exactly.
struct Sample {
    DenseArray color;  // [3,H,W] in [0,1]
    MetricDepth depth;
    NormalMap normal;
    Intrinsics intrinsics;
    std::vector<std::string> tags;
};

struct SceneOptions {
    int min_objects = 1;
    int max_objects = 3;
    bool back_wall = true;
};

struct DatasetOptions {
    int count = 32;
    std::uint64_t seed = 7;
    int height = 32;
    int width = 32;
    SceneOptions scene;
};

Intrinsics default_intrinsics(int height, int width);

SceneSpec random_scene(RandomStream rng, const SceneOptions& opts);
SceneSpec scene_for_index(std::uint64_t dataset_seed, std::uint64_t index, const SceneOptions& opts);

std::vector<std::string> tags_for(const SceneSpec& spec);
/// Every token the generator can emit, in canonical order. This is the
/// conditioning vocabulary for the denoiser's tag-embedding table.
std::vector<std::string> tag_vocabulary();

/// Ray-cast the analytic primitives: nearest-hit z-depth, analytic surface
/// normals, Lambertian shading. Sky pixels are invalid in depth and normals.
Sample render(const SceneSpec& spec, int height, int width);

/// Container file, magic "OSMP": version u32, H u32, W u32, then fixed-order
/// planes (color 3xHxW f32, depth HxW f32 with NaN = invalid, normal 3xHxW
/// f32, validity HxW u8, intrinsics 4 x f64, tag block). Little-endian.
void write_sample(const std::string& path, const Sample& s);
Sample read_sample(const std::string& path);

struct ManifestEntry {
    std::string file;
    std::vector<std::string> tags;
    std::string checksum;  // fnv1a64 of the file bytes, hex
};

/// Deterministic per-index scenes; samples written to out_dir along with a
/// JSON-lines manifest. Returns the manifest entries.
std::vector<ManifestEntry> generate_dataset(const DatasetOptions& opts, const std::string& out_dir);

std::vector<ManifestEntry> read_manifest(const std::string& dir);
std::vector<Sample> load_dataset(const std::string& dir);

std::uint64_t file_checksum(const std::string& path);

}  // namespace orchid
