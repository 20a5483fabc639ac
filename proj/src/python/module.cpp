#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "orchidkit/config.hpp"
#include "orchidkit/geometry.hpp"
#include "orchidkit/metrics.hpp"
#include "orchidkit/nn.hpp"
#include "orchidkit/schedule.hpp"
#include "orchidkit/selfcheck.hpp"
#include "orchidkit/synthdata.hpp"

namespace py = pybind11;
using namespace orchid;

namespace {

DenseArray from_numpy(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
    DenseArray out;
    out.shape.assign(a.shape(), a.shape() + a.ndim());
    out.data.assign(a.data(), a.data() + a.size());
    return out;
}

py::array_t<double> to_numpy(const DenseArray& a) {
    py::array_t<double> out(a.shape);
    std::copy(a.data.begin(), a.data.end(), out.mutable_data());
    return out;
}

BoolMask mask_from_numpy(const py::array_t<bool, py::array::c_style | py::array::forcecast>& a) {
    if (a.ndim() != 2) throw ShapeError("mask must be 2-D");
    BoolMask m(static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)));
    const bool* p = a.data();
    for (std::size_t i = 0; i < m.m.size(); ++i) m.m[i] = p[i] ? 1 : 0;
    return m;
}

py::array_t<bool> mask_to_numpy(const BoolMask& m) {
    py::array_t<bool> out({m.h, m.w});
    bool* p = out.mutable_data();
    for (std::size_t i = 0; i < m.m.size(); ++i) p[i] = m.m[i] != 0;
    return out;
}

MetricDepth metric_depth(const py::array_t<double, py::array::c_style | py::array::forcecast>& values,
                         const py::object& valid) {
    MetricDepth d;
    d.values = from_numpy(values);
    if (d.values.rank() != 2) throw ShapeError("depth must be [H,W]");
    if (valid.is_none())
        d.valid = BoolMask(d.values.shape[0], d.values.shape[1], true);
    else
        d.valid = mask_from_numpy(valid.cast<py::array_t<bool, py::array::c_style | py::array::forcecast>>());
    return d;
}

NormalMap normal_map(const py::array_t<double, py::array::c_style | py::array::forcecast>& vectors,
                     const py::object& valid) {
    NormalMap n;
    n.vectors = from_numpy(vectors);
    if (n.vectors.rank() != 3 || n.vectors.shape[0] != 3) throw ShapeError("normals must be [3,H,W]");
    if (valid.is_none())
        n.valid = BoolMask(n.vectors.shape[1], n.vectors.shape[2], true);
    else
        n.valid = mask_from_numpy(valid.cast<py::array_t<bool, py::array::c_style | py::array::forcecast>>());
    return n;
}

py::dict sample_to_dict(const Sample& s) {
    py::dict d;
    d["color"] = to_numpy(s.color);
    d["depth"] = to_numpy(s.depth.values);
    d["normal"] = to_numpy(s.normal.vectors);
    d["valid"] = mask_to_numpy(s.depth.valid);
    d["intrinsics"] = py::make_tuple(s.intrinsics.fx, s.intrinsics.fy, s.intrinsics.cx, s.intrinsics.cy);
    d["tags"] = s.tags;
    return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "orchidkit core: joint color-depth-normal latent diffusion toolkit";
    m.attr("__version__") = kVersionString;

    // ---- geometry
    m.def(
        "preprocess_depth",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& depth,
           const py::object& valid) {
            ModelDepth out = preprocess_depth(metric_depth(depth, valid));
            py::dict d;
            d["values"] = to_numpy(out.values);
            d["valid"] = mask_to_numpy(out.valid);
            d["d_sigma"] = out.d_sigma;
            d["d_prime_min"] = out.d_prime_min;
            d["degenerate"] = out.degenerate;
            return d;
        },
        py::arg("depth"), py::arg("valid") = py::none(),
        "Normalize inverse depth by its deviation around the median and shift the minimum to zero.");

    m.def(
        "depth_to_pointcloud",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& depth,
           const py::object& valid, double fx, double fy, double cx, double cy) {
            return to_numpy(depth_to_pointcloud(metric_depth(depth, valid), Intrinsics{fx, fy, cx, cy}));
        },
        py::arg("depth"), py::arg("valid"), py::arg("fx"), py::arg("fy"), py::arg("cx"), py::arg("cy"));

    m.def(
        "normals_from_pointcloud",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& points,
           const py::object& valid) {
            DenseArray p = from_numpy(points);
            NormalMap n = valid.is_none()
                              ? normals_from_pointcloud(p)
                              : normals_from_pointcloud(
                                    p, mask_from_numpy(valid.cast<py::array_t<
                                           bool, py::array::c_style | py::array::forcecast>>()));
            py::dict d;
            d["vectors"] = to_numpy(n.vectors);
            d["valid"] = mask_to_numpy(n.valid);
            return d;
        },
        py::arg("points"), py::arg("valid") = py::none());

    m.def(
        "depth_normal_inconsistency",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& depth,
           const py::object& depth_valid,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& normals,
           const py::object& normal_valid, double fx, double fy, double cx, double cy) {
            auto r = depth_normal_inconsistency(metric_depth(depth, depth_valid),
                                                normal_map(normals, normal_valid),
                                                Intrinsics{fx, fy, cx, cy});
            py::dict d;
            d["mean"] = r.mean;
            d["per_pixel"] = to_numpy(r.per_pixel);
            d["valid"] = mask_to_numpy(r.valid);
            return d;
        },
        py::arg("depth"), py::arg("depth_valid"), py::arg("normals"), py::arg("normal_valid"),
        py::arg("fx"), py::arg("fy"), py::arg("cx"), py::arg("cy"));

    m.def(
        "align_affine",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& pred,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& gt,
           const py::object& gt_valid) {
            MetricDepth g = metric_depth(gt, gt_valid);
            AffineFit f = fit_affine_inverse_depth(from_numpy(pred), g);
            MetricDepth a = align_affine(from_numpy(pred), g);
            py::dict d;
            d["scale"] = f.scale;
            d["shift"] = f.shift;
            d["depth"] = to_numpy(a.values);
            d["valid"] = mask_to_numpy(a.valid);
            return d;
        },
        py::arg("pred_inv_depth"), py::arg("gt_depth"), py::arg("gt_valid") = py::none());

    // ---- schedule
    py::class_<NoiseSchedule>(m, "NoiseSchedule")
        .def_readonly("T", &NoiseSchedule::T)
        .def_property_readonly("beta", [](const NoiseSchedule& s) { return to_numpy(s.beta); })
        .def_property_readonly("alpha_bar", [](const NoiseSchedule& s) { return to_numpy(s.alpha_bar); })
        .def_property_readonly("sigma", [](const NoiseSchedule& s) { return to_numpy(s.sigma); })
        .def("alpha_bar_at", &NoiseSchedule::alpha_bar_at)
        .def("csv", [](const NoiseSchedule& s) { return schedule_csv(s); });

    m.def("build_schedule", &build_schedule, py::arg("T"), py::arg("beta_start"), py::arg("beta_end"),
          py::arg("zero_terminal_snr"));
    m.def(
        "forward_noise",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& z0, int t,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& eps,
           const NoiseSchedule& s) { return to_numpy(forward_noise(from_numpy(z0), t, from_numpy(eps), s)); },
        py::arg("z0"), py::arg("t"), py::arg("eps"), py::arg("schedule"));
    m.def(
        "convert",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& pred,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& z_t, int t,
           const std::string& from, const std::string& to, const NoiseSchedule& s) {
            return to_numpy(convert(from_numpy(pred), from_numpy(z_t), t,
                                    parametrization_from_string(from), parametrization_from_string(to), s));
        },
        py::arg("pred"), py::arg("z_t"), py::arg("t"), py::arg("from_kind"), py::arg("to_kind"),
        py::arg("schedule"));
    m.def(
        "ddpm_step",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& z_t,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& pred_v, int t,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& eta,
           const NoiseSchedule& s) {
            return to_numpy(ddpm_step(from_numpy(z_t), from_numpy(pred_v), t, from_numpy(eta), s));
        },
        py::arg("z_t"), py::arg("pred_v"), py::arg("t"), py::arg("eta"), py::arg("schedule"));
    m.def(
        "ddim_step",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& z_t,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& pred_v, int t,
           int t_prev, const NoiseSchedule& s) {
            return to_numpy(ddim_step(from_numpy(z_t), from_numpy(pred_v), t, t_prev, s));
        },
        py::arg("z_t"), py::arg("pred_v"), py::arg("t"), py::arg("t_prev"), py::arg("schedule"));
    m.def("ddim_timesteps", &ddim_timesteps, py::arg("T"), py::arg("steps"));

    // ---- synthetic data
    m.def(
        "render_scene",
        [](std::uint64_t dataset_seed, std::uint64_t index, int height, int width, int min_objects,
           int max_objects, bool back_wall) {
            SceneOptions so;
            so.min_objects = min_objects;
            so.max_objects = max_objects;
            so.back_wall = back_wall;
            return sample_to_dict(render(scene_for_index(dataset_seed, index, so), height, width));
        },
        py::arg("dataset_seed"), py::arg("index"), py::arg("height"), py::arg("width"),
        py::arg("min_objects") = 1, py::arg("max_objects") = 3, py::arg("back_wall") = true);
    m.def("read_sample", [](const std::string& path) { return sample_to_dict(read_sample(path)); });
    m.def("tag_vocabulary", &tag_vocabulary);

    // ---- metrics
    m.def(
        "depth_metrics",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& pred,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& gt,
           const py::object& gt_valid, bool align) {
            DepthMetricsOptions o;
            o.align = align;
            DepthReport r = depth_metrics(from_numpy(pred), metric_depth(gt, gt_valid), o);
            py::dict d;
            d["abs_rel"] = r.abs_rel;
            d["delta1"] = r.delta1;
            d["valid_pixel_count"] = r.valid_pixel_count;
            return d;
        },
        py::arg("pred"), py::arg("gt"), py::arg("gt_valid") = py::none(), py::arg("align") = true);
    m.def(
        "normal_metrics",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& pred,
           const py::object& pred_valid,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& gt,
           const py::object& gt_valid) {
            NormalReport r = normal_metrics(normal_map(pred, pred_valid), normal_map(gt, gt_valid));
            py::dict d;
            d["mean_deg"] = r.mean_deg;
            d["pct_below_11_25"] = r.pct_below_11_25;
            d["valid_pixel_count"] = r.valid_pixel_count;
            return d;
        },
        py::arg("pred"), py::arg("pred_valid"), py::arg("gt"), py::arg("gt_valid") = py::none());
    m.def(
        "latent_pca_redundancy",
        [](const std::vector<py::array_t<double, py::array::c_style | py::array::forcecast>>& latents,
           double variance_target) {
            std::vector<DenseArray> zs;
            for (const auto& a : latents) zs.push_back(from_numpy(a));
            return latent_pca_redundancy(zs, variance_target);
        },
        py::arg("latents"), py::arg("variance_target") = 0.95);

    // ---- neural primitives
    m.def(
        "conv2d",
        [](const py::array_t<double, py::array::c_style | py::array::forcecast>& x,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& w,
           const py::array_t<double, py::array::c_style | py::array::forcecast>& b, int stride,
           int padding) {
            Tape t;
            auto out = t.conv2d(t.leaf(from_numpy(x)), t.leaf(from_numpy(w)), t.leaf(from_numpy(b)),
                                stride, padding);
            return to_numpy(t.value(out));
        },
        py::arg("x"), py::arg("w"), py::arg("b"), py::arg("stride") = 1, py::arg("padding") = 1);
    m.def("sinusoidal_time_embed",
          [](int t, int dim, int T) { return to_numpy(sinusoidal_time_embed(t, dim, T)); });

    // ---- selftest
    m.def("selftest", []() {
        auto results = run_property_suite();
        py::list out;
        for (const auto& r : results) {
            py::dict d;
            d["name"] = r.name;
            d["pass"] = r.pass;
            d["detail"] = r.detail;
            d["seconds"] = r.seconds;
            out.append(d);
        }
        return out;
    });

    py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
    py::register_exception<GeometryError>(m, "GeometryError", PyExc_ValueError);
    py::register_exception<ScheduleError>(m, "ScheduleError", PyExc_ValueError);
}
