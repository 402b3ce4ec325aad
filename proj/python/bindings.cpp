#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "fedwsidd/archive.hpp"
#include "fedwsidd/cli.hpp"
#include "fedwsidd/data.hpp"
#include "fedwsidd/distill.hpp"
#include "fedwsidd/eval.hpp"
#include "fedwsidd/fed.hpp"
#include "fedwsidd/stain.hpp"

namespace py = pybind11;
using namespace fedwsidd;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

PatchTensor to_patch(const FloatArray& a) {
  if (a.ndim() != 3) throw py::value_error("patch must be a (C, H, W) array");
  PatchTensor p(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), static_cast<int>(a.shape(2)));
  std::copy(a.data(), a.data() + a.size(), p.data.begin());
  return p;
}

FloatArray from_patch(const PatchTensor& p) {
  FloatArray a({p.channels, p.height, p.width});
  std::copy(p.data.begin(), p.data.end(), a.mutable_data());
  return a;
}

std::vector<PatchTensor> to_patches(const FloatArray& a) {
  if (a.ndim() != 4) throw py::value_error("bag must be a (T, C, H, W) array");
  std::vector<PatchTensor> out;
  const auto step = static_cast<std::size_t>(a.shape(1) * a.shape(2) * a.shape(3));
  for (py::ssize_t t = 0; t < a.shape(0); ++t) {
    PatchTensor p(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(2)), static_cast<int>(a.shape(3)));
    std::copy(a.data() + t * step, a.data() + (t + 1) * step, p.data.begin());
    out.push_back(std::move(p));
  }
  return out;
}

FloatArray from_patches(const std::vector<PatchTensor>& patches) {
  if (patches.empty()) return FloatArray(std::vector<py::ssize_t>{0, 3, 0, 0});
  const auto& f = patches.front();
  FloatArray a({static_cast<py::ssize_t>(patches.size()), static_cast<py::ssize_t>(f.channels),
                static_cast<py::ssize_t>(f.height), static_cast<py::ssize_t>(f.width)});
  float* dst = a.mutable_data();
  for (const auto& p : patches) dst = std::copy(p.data.begin(), p.data.end(), dst);
  return a;
}

py::dict slide_dict(const Slide& s) {
  py::dict d;
  d["id"] = s.id;
  d["centre"] = s.centre_id;
  d["label"] = s.label.index;
  d["label_name"] = s.label.name;
  d["patches"] = from_patches(s.patches);
  return d;
}

ToyGenConfig toy_from_kwargs(const py::kwargs& kw) {
  cli::RunConfig cfg;
  for (auto item : kw) cfg.set(py::str(item.first), py::str(item.second));
  return cfg.toy;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "FedWSIDD core: stain normalization, feature matching, MIL and one-shot federation";

  // messages start with the error code name, e.g. "ConfigInvalid: ..."
  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);

  // stain
  m.def("reference_basis", [] {
    const auto b = stain::reference_basis();
    return py::make_tuple(Eigen::MatrixXd(b.vectors), Eigen::VectorXd(b.max_concentrations));
  });
  m.def("rgb_to_od", [](const FloatArray& patch) {
    const auto od = stain::rgb_to_od(to_patch(patch));
    py::array_t<double> a({3, od.height, od.width});
    std::copy(od.data.begin(), od.data.end(), a.mutable_data());
    return a;
  });
  m.def("od_to_rgb", [](py::array_t<double, py::array::c_style | py::array::forcecast> od) {
    if (od.ndim() != 3 || od.shape(0) != 3) throw py::value_error("od must be a (3, H, W) array");
    stain::ODImage img{static_cast<int>(od.shape(1)), static_cast<int>(od.shape(2)), {od.data(), od.data() + od.size()}};
    return from_patch(stain::od_to_rgb(img));
  });
  m.def(
      "estimate_stain_basis",
      [](const FloatArray& patch, double beta, double alpha) {
        const auto b = stain::estimate_stain_basis(to_patch(patch), beta, alpha);
        return py::make_tuple(Eigen::MatrixXd(b.vectors), Eigen::VectorXd(b.max_concentrations));
      },
      py::arg("patch"), py::arg("beta") = 0.15, py::arg("alpha") = 1.0);
  m.def(
      "normalize",
      [](const FloatArray& patch, double beta, double alpha) {
        const auto r = stain::normalize(to_patch(patch), stain::reference_basis(), beta, alpha);
        return py::make_tuple(from_patch(r.patch), r.degenerate);
      },
      py::arg("patch"), py::arg("beta") = 0.15, py::arg("alpha") = 1.0,
      "Macenko normalization onto the reference basis; returns (patch, degenerate).");
  m.def("angular_distance_deg", [](const Eigen::Vector3d& a, const Eigen::Vector3d& b) {
    return stain::angular_distance_deg(a, b);
  });

  // features and distillation
  py::class_<SmallConvExtractor, std::shared_ptr<SmallConvExtractor>>(m, "SmallConvExtractor")
      .def(py::init([](int height, int width, int embed_dim, std::uint64_t seed) {
             auto rng = derive_stream(seed, "features");
             return std::make_shared<SmallConvExtractor>(height, width, embed_dim, rng);
           }),
           py::arg("height") = 64, py::arg("width") = 64, py::arg("embed_dim") = 64, py::arg("seed") = 0)
      .def_property_readonly("embed_dim", &SmallConvExtractor::embed_dim)
      .def("embed",
           [](const SmallConvExtractor& f, const FloatArray& patch) {
             const auto p = to_patch(patch);
             f.check_input(p);
             std::vector<double> out(static_cast<std::size_t>(f.embed_dim()));
             f.embed(p.to_double(), out);
             return out;
           })
      .def("save_weights", &SmallConvExtractor::save_weights);
  m.def(
      "fm_loss",
      [](const SmallConvExtractor& f, const FloatArray& real, const FloatArray& synthetic) {
        return fm_loss(f, to_patches(real), to_patches(synthetic));
      },
      py::arg("extractor"), py::arg("real"), py::arg("synthetic"),
      "||mean F(real) - mean F(synthetic)||^2 for (T, C, H, W) bags.");
  m.def(
      "fm_gradient",
      [](const SmallConvExtractor& f, const FloatArray& real, const FloatArray& synthetic, bool stain_norm) {
        const auto real_p = to_patches(real);
        const auto mu = mean_feature(f, real_p);
        std::vector<std::vector<double>> syn;
        for (const auto& p : to_patches(synthetic)) syn.push_back(p.to_double());
        FeatureMatchObjective obj(f, stain_norm, stain::reference_basis(), {});
        const auto r = obj.evaluate(mu, syn);
        py::array_t<double> g({static_cast<py::ssize_t>(synthetic.shape(0)), synthetic.shape(1), synthetic.shape(2),
                               synthetic.shape(3)});
        double* dst = g.mutable_data();
        for (const auto& v : r.grads) dst = std::copy(v.begin(), v.end(), dst);
        return py::make_tuple(r.loss, g);
      },
      py::arg("extractor"), py::arg("real"), py::arg("synthetic"), py::arg("stain_norm") = false,
      "Loss and gradient w.r.t. synthetic pixels; the real bag is used as given.");

  // evaluation
  m.def("paired_t_test", [](const std::vector<double>& a, const std::vector<double>& b) {
    const auto r = paired_t_test(a, b);
    return py::make_tuple(r.t_statistic, r.p_value);
  });
  m.def("weighted_global_average",
        [](const std::map<std::string, double>& accuracy, const std::map<std::string, int>& test_sizes) {
          RunAccuracies r;
          r.per_centre = accuracy;
          r.test_sizes = test_sizes;
          return weighted_global_average(r);
        });
  m.def("mean_std", [](const std::vector<double>& v) {
    const auto r = mean_std(v);
    return py::make_tuple(r.mean, r.std);
  });
  m.def(
      "communication_cost",
      [](int M, int B, int num_classes, int num_clients, int patch_size) {
        DistillConfig cfg;
        cfg.slides_per_class = M;
        cfg.patches_per_slide = B;
        cfg.patch_height = cfg.patch_width = patch_size;
        const auto c = communication_cost(cfg, num_classes, num_clients);
        return py::make_tuple(c.upload_per_client, c.broadcast);
      },
      py::arg("M") = 10, py::arg("B") = 100, py::arg("num_classes") = 2, py::arg("num_clients") = 2,
      py::arg("patch_size") = 64, "Payload bytes (upload per client, broadcast).");

  // data
  m.def(
      "generate_toy_federation",
      [](const py::kwargs& kw) {
        py::list out;
        for (const auto& ds : generate_toy_federation(toy_from_kwargs(kw))) {
          py::dict d;
          d["centre"] = ds.centre_id;
          d["num_classes"] = ds.num_classes;
          py::list train, test;
          for (const auto& s : ds.train_slides) train.append(slide_dict(s));
          for (const auto& s : ds.test_slides) test.append(slide_dict(s));
          d["train"] = train;
          d["test"] = test;
          out.append(d);
        }
        return out;
      },
      "Toy federation; keyword arguments are CLI config keys (preset, class_signal, T, ...).");

  // archives
  m.def("encode_archive", [](const std::vector<std::pair<std::string, FloatArray>>& entries) {
    std::vector<NamedTensor> tensors;
    for (const auto& [name, a] : entries) {
      NamedTensor t;
      t.name = name;
      for (py::ssize_t i = 0; i < a.ndim(); ++i) t.shape.push_back(static_cast<std::uint64_t>(a.shape(i)));
      t.data.assign(a.data(), a.data() + a.size());
      tensors.push_back(std::move(t));
    }
    const auto bytes = encode_archive(tensors);
    return py::bytes(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  });
  m.def("decode_archive", [](const py::bytes& data) {
    const std::string s = data;
    const auto tensors = decode_archive({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
    py::list out;
    for (const auto& t : tensors) {
      std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
      FloatArray a(shape);
      std::copy(t.data.begin(), t.data.end(), a.mutable_data());
      out.append(py::make_tuple(t.name, a));
    }
    return out;
  });

  // command line
  m.def(
      "run_cli",
      [](std::vector<std::string> args) {
        args.insert(args.begin(), "fedwsidd");
        py::gil_scoped_release release;
        return cli::run(args);
      },
      py::arg("args"), "Runs a fedwsidd command (without the program name); returns the exit code.");
  m.def("config_keys", [] { return cli::RunConfig::keys(); });
}
