#include "orchidkit/inpaint.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

namespace orchid {

// ---------------------------------------------------------------------------
// masking

BoolMask derive_latent_mask(const BoolMask& pixel_mask, int downsample, int dilation) {
    if (downsample < 1) throw ValueError("derive_latent_mask: bad downsample factor");
    if (dilation < 0) throw ValueError("derive_latent_mask: dilation must be >= 0");
    std::size_t f = static_cast<std::size_t>(downsample);
    if (pixel_mask.h % f != 0 || pixel_mask.w % f != 0)
        throw ShapeError("derive_latent_mask: raster " + std::to_string(pixel_mask.h) + "x" +
                         std::to_string(pixel_mask.w) + " not divisible by factor " +
                         std::to_string(downsample));
    std::size_t lh = pixel_mask.h / f, lw = pixel_mask.w / f;
    BoolMask block(lh, lw, false);
    for (std::size_t y = 0; y < pixel_mask.h; ++y)
        for (std::size_t x = 0; x < pixel_mask.w; ++x)
            if (pixel_mask.at(y, x)) block.set(y / f, x / f, true);
    if (dilation == 0) return block;
    BoolMask out(lh, lw, false);
    for (std::size_t y = 0; y < lh; ++y)
        for (std::size_t x = 0; x < lw; ++x) {
            if (!block.at(y, x)) continue;
            for (int dy = -dilation; dy <= dilation; ++dy)
                for (int dx = -dilation; dx <= dilation; ++dx) {
                    long ny = static_cast<long>(y) + dy, nx = static_cast<long>(x) + dx;
                    if (ny < 0 || nx < 0 || ny >= static_cast<long>(lh) || nx >= static_cast<long>(lw))
                        continue;
                    out.set(static_cast<std::size_t>(ny), static_cast<std::size_t>(nx), true);
                }
        }
    return out;
}

std::vector<std::pair<int, bool>> repaint_plan(int T, int resample, int jump) {
    if (resample < 1) throw ValueError("repaint_plan: resample count must be >= 1");
    if (jump < 0) throw ValueError("repaint_plan: jump length must be >= 0");
    std::vector<std::pair<int, bool>> plan;
    std::map<int, int> budget;
    if (jump > 0 && resample > 1)
        for (int a = T - jump; a >= 1; a -= jump) budget[a] = resample - 1;
    int t = T;
    while (t >= 1) {
        plan.emplace_back(t, true);
        --t;
        auto it = budget.find(t);
        if (it != budget.end() && it->second > 0) {
            --it->second;
            for (int k = 0; k < jump; ++k) {
                plan.emplace_back(t, false);
                ++t;
            }
        }
    }
    return plan;
}

Sample neutralize_masked(const Sample& s, const BoolMask& pixel_mask) {
    std::size_t h = s.color.shape[1], w = s.color.shape[2];
    if (pixel_mask.h != h || pixel_mask.w != w)
        throw ShapeError("neutralize_masked: mask raster does not match the sample");
    Sample out = s;
    for (std::size_t i = 0; i < h * w; ++i) {
        if (!pixel_mask.m[i]) continue;
        for (std::size_t c = 0; c < 3; ++c) {
            out.color.data[c * h * w + i] = 0.5;
            out.normal.vectors.data[c * h * w + i] = 0.0;
        }
        out.depth.values.data[i] = 0.0;
        out.depth.valid.m[i] = 0;
        out.normal.valid.m[i] = 0;
    }
    return out;
}

namespace {

TrainItem robust_train_item(const Sample& s) {
    if (s.depth.valid.count() > 0) return make_train_item(s);
    // fully masked geometry: feed neutral zeros
    std::size_t h = s.color.shape[1], w = s.color.shape[2];
    TrainItem it;
    it.color = s.color;
    it.d_model = DenseArray({1, h, w}, 0.0);
    it.normal = s.normal.vectors;
    it.mask = DenseArray({1, h, w}, 0.0);
    it.valid_count = 0;
    return it;
}

}  // namespace

DenseArray inpaint_known_latents(const InpaintTask& task, const Denoiser& m, const JointVae& vae) {
    Sample neutral = neutralize_masked(task.known, task.pixel_mask);
    TrainItem item = robust_train_item(neutral);
    ParamSet enc = vae.ema_enc.snapshot(vae.enc);
    DenseArray z_known = vae_encode(vae, enc, item).mu;
    double ls = m.latent_scale > 0.0 ? m.latent_scale : 1.0;
    for (double& v : z_known.data) v /= ls;
    return z_known;
}

InpaintResult inpaint(const InpaintTask& task, const Denoiser& m, const JointVae& vae,
                      const NoiseSchedule& sched, std::uint64_t seed) {
    if (m.cfg.cond_latent_channels != 0)
        throw ValueError("inpaint: needs the unconditional/text prior, not a color-conditioned model");
    std::size_t H = task.known.color.shape[1], W = task.known.color.shape[2];
    if (task.pixel_mask.h != H || task.pixel_mask.w != W)
        throw ShapeError("inpaint: mask raster does not match the known sample");
    int ds = vae.cfg.downsample();

    InpaintResult res;
    res.latent_mask = derive_latent_mask(task.pixel_mask, ds, task.dilation);
    std::size_t lh = res.latent_mask.h, lw = res.latent_mask.w;
    std::size_t masked = res.latent_mask.count();
    res.ran_unconditional = masked == lh * lw;

    DenseArray z_known = inpaint_known_latents(task, m, vae);
    double ls = m.latent_scale > 0.0 ? m.latent_scale : 1.0;
    if (z_known.shape[1] != lh || z_known.shape[2] != lw)
        throw ShapeError("inpaint: latent mask does not match the encoded latent");

    Condition cond = task.tags.empty() ? Condition::none() : Condition::with_tags(task.tags);
    RandomStream gen = RandomStream(seed).split(1);
    RandomStream known_rng = RandomStream(seed).split(2);

    std::size_t plane = lh * lw;
    std::size_t C = z_known.shape[0];
    DenseArray z = gen.normal_array(z_known.shape);

    auto merge = [&](const DenseArray& z_gen, const DenseArray& z_kn) {
        for (std::size_t i = 0; i < plane; ++i) {
            bool generate = res.latent_mask.m[i] != 0;
            for (std::size_t c = 0; c < C; ++c)
                z.data[c * plane + i] = generate ? z_gen.data[c * plane + i] : z_kn.data[c * plane + i];
        }
    };

    for (auto [t, down] : repaint_plan(sched.T, task.resample, task.jump)) {
        if (down) {
            DenseArray v = denoise(m, z, t, cond);
            DenseArray eta = gen.normal_array(z.shape);
            DenseArray z_gen = ddpm_step(z, v, t, eta, sched);
            if (masked == lh * lw) {
                z = std::move(z_gen);
            } else if (t - 1 == 0) {
                merge(z_gen, z_known);
            } else {
                DenseArray z_kn = forward_noise(z_known, t - 1, known_rng.normal_array(z.shape), sched);
                merge(z_gen, z_kn);
            }
        } else {
            // one-step re-noising z_t -> z_{t+1}
            double a = std::sqrt(sched.alpha_at(t + 1));
            double b = std::sqrt(sched.beta_at(t + 1));
            DenseArray eps = gen.normal_array(z.shape);
            for (std::size_t i = 0; i < z.size(); ++i) z.data[i] = a * z.data[i] + b * eps.data[i];
        }
        if (!z.all_finite()) throw TrainError("inpaint: non-finite latent at step " + std::to_string(t));
    }

    // exact known latents outside the mask
    for (std::size_t i = 0; i < plane; ++i) {
        if (res.latent_mask.m[i]) continue;
        for (std::size_t c = 0; c < C; ++c) z.data[c * plane + i] = z_known.data[c * plane + i];
    }
    res.z0 = z;
    DenseArray z_vae = z * ls;
    ParamSet dec = vae.ema_dec.snapshot(vae.dec);
    res.decoded = vae_decode(vae, dec, z_vae);
    return res;
}

// ---------------------------------------------------------------------------
// PNG grayscale masks (8-bit, color type 0, non-interlaced)

namespace {

constexpr unsigned char kPngSig[8] = {137, 80, 78, 71, 13, 10, 26, 10};

void put_be32(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v >> 24));
    out.push_back(static_cast<char>(v >> 16));
    out.push_back(static_cast<char>(v >> 8));
    out.push_back(static_cast<char>(v));
}

void append_chunk(std::string& out, const char type[4], const std::string& data) {
    put_be32(out, static_cast<std::uint32_t>(data.size()));
    std::string body(type, 4);
    body += data;
    out += body;
    std::uint32_t crc = static_cast<std::uint32_t>(
        ::crc32(0, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size())));
    put_be32(out, crc);
}

std::uint32_t be32(const unsigned char* p) {
    return (static_cast<std::uint32_t>(p[0]) << 24) | (static_cast<std::uint32_t>(p[1]) << 16) |
           (static_cast<std::uint32_t>(p[2]) << 8) | static_cast<std::uint32_t>(p[3]);
}

unsigned char paeth(int a, int b, int c) {
    int p = a + b - c;
    int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return static_cast<unsigned char>(a);
    if (pb <= pc) return static_cast<unsigned char>(b);
    return static_cast<unsigned char>(c);
}

}  // namespace

BoolMask read_mask_png(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ValueError("read_mask_png: cannot open '" + path + "'");
    std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kPngSig, 8) != 0)
        throw ValueError("read_mask_png: '" + path + "' is not a PNG file");

    std::size_t pos = 8;
    std::uint32_t w = 0, h = 0;
    int bit_depth = 0, color_type = -1, interlace = 0;
    std::string idat;
    bool saw_ihdr = false, saw_iend = false;
    const unsigned char* base = reinterpret_cast<const unsigned char*>(bytes.data());
    while (pos + 8 <= bytes.size() && !saw_iend) {
        std::uint32_t len = be32(base + pos);
        if (pos + 12 + len > bytes.size()) throw ValueError("read_mask_png: truncated chunk");
        std::string type(bytes, pos + 4, 4);
        const unsigned char* data = base + pos + 8;
        if (type == "IHDR") {
            if (len != 13) throw ValueError("read_mask_png: malformed IHDR");
            w = be32(data);
            h = be32(data + 4);
            bit_depth = data[8];
            color_type = data[9];
            interlace = data[12];
            saw_ihdr = true;
        } else if (type == "IDAT") {
            idat.append(reinterpret_cast<const char*>(data), len);
        } else if (type == "IEND") {
            saw_iend = true;
        }
        pos += 12 + len;
    }
    if (!saw_ihdr || w == 0 || h == 0) throw ValueError("read_mask_png: missing image header");
    if (color_type != 0 || bit_depth != 8)
        throw ValueError("read_mask_png: expected 8-bit grayscale (color type 0), got color type " +
                         std::to_string(color_type) + " depth " + std::to_string(bit_depth));
    if (interlace != 0) throw ValueError("read_mask_png: interlaced PNGs are not supported");

    std::size_t raw_len = static_cast<std::size_t>(h) * (w + 1);
    std::vector<unsigned char> raw(raw_len);
    uLongf dest = static_cast<uLongf>(raw_len);
    int rc = ::uncompress(raw.data(), &dest, reinterpret_cast<const Bytef*>(idat.data()),
                          static_cast<uLong>(idat.size()));
    if (rc != Z_OK || dest != raw_len) throw ValueError("read_mask_png: corrupt image data");

    BoolMask mask(h, w, false);
    std::vector<unsigned char> prev(w, 0), row(w, 0);
    for (std::uint32_t y = 0; y < h; ++y) {
        unsigned char filter = raw[static_cast<std::size_t>(y) * (w + 1)];
        const unsigned char* src = raw.data() + static_cast<std::size_t>(y) * (w + 1) + 1;
        for (std::uint32_t x = 0; x < w; ++x) {
            int left = x > 0 ? row[x - 1] : 0;
            int up = prev[x];
            int ul = x > 0 ? prev[x - 1] : 0;
            int v = src[x];
            switch (filter) {
                case 0: break;
                case 1: v += left; break;
                case 2: v += up; break;
                case 3: v += (left + up) / 2; break;
                case 4: v += paeth(left, up, ul); break;
                default: throw ValueError("read_mask_png: unknown filter type");
            }
            row[x] = static_cast<unsigned char>(v & 0xFF);
            mask.set(y, x, row[x] >= 128);
        }
        prev = row;
    }
    return mask;
}

void write_mask_png(const std::string& path, const BoolMask& mask) {
    std::string ihdr;
    put_be32(ihdr, static_cast<std::uint32_t>(mask.w));
    put_be32(ihdr, static_cast<std::uint32_t>(mask.h));
    ihdr.push_back(8);   // bit depth
    ihdr.push_back(0);   // grayscale
    ihdr.push_back(0);   // compression
    ihdr.push_back(0);   // filter method
    ihdr.push_back(0);   // no interlace

    std::vector<unsigned char> raw;
    raw.reserve(mask.h * (mask.w + 1));
    for (std::size_t y = 0; y < mask.h; ++y) {
        raw.push_back(0);  // filter: none
        for (std::size_t x = 0; x < mask.w; ++x) raw.push_back(mask.at(y, x) ? 255 : 0);
    }
    uLongf bound = ::compressBound(static_cast<uLong>(raw.size()));
    std::vector<unsigned char> comp(bound);
    int rc = ::compress2(comp.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6);
    if (rc != Z_OK) throw ValueError("write_mask_png: compression failed");

    std::string out(reinterpret_cast<const char*>(kPngSig), 8);
    append_chunk(out, "IHDR", ihdr);
    append_chunk(out, "IDAT", std::string(reinterpret_cast<const char*>(comp.data()), bound));
    append_chunk(out, "IEND", "");
    std::ofstream os(path, std::ios::binary);
    if (!os || !os.write(out.data(), static_cast<std::streamsize>(out.size())))
        throw ValueError("write_mask_png: cannot write '" + path + "'");
}

}  // namespace orchid
