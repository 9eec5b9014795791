#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>
#include <memory>
#include <stdexcept>
#include <utility>

#include "memreg/data.hpp"
#include "memreg/losses.hpp"
#include "memreg/metrics.hpp"
#include "memreg/model.hpp"
#include "memreg/optim.hpp"
#include "memreg/pipeline.hpp"

namespace py = pybind11;
using namespace memreg;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using LabelArray = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

TensorF tensor_from(const FloatArray& a, int ndim, const char* what) {
  if (a.ndim() != ndim)
    throw std::invalid_argument(std::string(what) + ": expected a " + std::to_string(ndim) +
                                "-d array, got " + std::to_string(a.ndim()) + "-d");
  Shape shape;
  for (int i = 0; i < a.ndim(); ++i) shape.push_back(static_cast<std::size_t>(a.shape(i)));
  return TensorF::from_data(std::move(shape),
                            std::vector<float>(a.data(), a.data() + a.size()));
}

py::array_t<float> array_from(const TensorF& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<float> a(shape);
  std::memcpy(a.mutable_data(), t.data().data(), sizeof(float) * t.numel());
  return a;
}

std::vector<std::uint8_t> labels_from(const LabelArray& a) {
  return std::vector<std::uint8_t>(a.data(), a.data() + a.size());
}

py::array_t<std::uint8_t> label_map(const std::vector<std::uint8_t>& v, std::size_t h,
                                    std::size_t w) {
  py::array_t<std::uint8_t> a({static_cast<py::ssize_t>(h), static_cast<py::ssize_t>(w)});
  std::memcpy(a.mutable_data(), v.data(), v.size());
  return a;
}

DomainSpec spec_for(const std::string& domain, std::uint64_t seed, std::size_t image_size,
                    double style_shift) {
  DomainSpec s;
  if (domain == "source")
    s = source_domain(seed);
  else if (domain == "target")
    s = target_domain(seed, style_shift);
  else
    throw std::invalid_argument("domain must be 'source' or 'target', got '" + domain + "'");
  s.height = s.width = image_size;
  return s;
}

// Inference-only wrapper over the segmentation net.
class Model {
 public:
  Model(std::size_t num_classes, std::uint64_t seed) : net_(num_classes, seed) {}

  explicit Model(const std::string& checkpoint_path)
      : net_(checkpoint_num_classes(load_checkpoint(checkpoint_path)), 0) {
    Checkpoint ck = load_checkpoint(checkpoint_path);
    restore_seg_model(ck, net_);
  }

  std::size_t num_classes() const { return net_.num_classes(); }

  py::tuple forward(const FloatArray& image) {
    TensorF x = tensor_from(image, 3, "image");
    auto [p_aux, p_primary] = net_.forward(x, /*train=*/false);
    return py::make_tuple(array_from(p_aux), array_from(p_primary));
  }

  py::array_t<std::uint8_t> predict(const FloatArray& image) {
    TensorF x = tensor_from(image, 3, "image");
    auto [p_aux, p_primary] = net_.forward(x, /*train=*/false);
    return label_map(fuse_pseudo_label(p_primary, p_aux), p_primary.dim(1), p_primary.dim(2));
  }

 private:
  SegModel net_;
};

}  // namespace

PYBIND11_MODULE(_memreg, m) {
  m.doc() = "two-stage scene adaptation: data synthesis, losses, and inference";

  m.def(
      "generate_sample",
      [](const std::string& domain, std::uint64_t seed, std::uint64_t index,
         std::size_t image_size, double style_shift) {
        SegSample s = generate(spec_for(domain, seed, image_size, style_shift), index);
        return py::make_tuple(array_from(s.image), label_map(s.label, image_size, image_size));
      },
      py::arg("domain"), py::arg("seed"), py::arg("index"), py::arg("image_size") = 64,
      py::arg("style_shift") = 1.0,
      "One deterministic (image, label) pair from the shapes world; image is "
      "[3,H,W] float32 in [0,1], labels are [H,W] uint8 class ids.");

  py::class_<Model>(m, "Model", "segmentation net with auxiliary and primary heads")
      .def(py::init<std::size_t, std::uint64_t>(), py::arg("num_classes"), py::arg("seed"))
      .def(py::init<const std::string&>(), py::arg("checkpoint_path"))
      .def_property_readonly("num_classes", &Model::num_classes)
      .def("forward", &Model::forward, py::arg("image"),
           "(p_aux, p_primary) softmax maps, each [C,H,W], for a [3,H,W] image")
      .def("predict", &Model::predict, py::arg("image"),
           "fused [H,W] uint8 prediction (primary + 0.5 * aux, argmax)");

  m.def(
      "seg_ce",
      [](const FloatArray& probs, const LabelArray& labels) {
        return seg_ce(tensor_from(probs, 3, "probs"), labels_from(labels)).item();
      },
      py::arg("probs"), py::arg("labels"),
      "pixel-averaged cross-entropy of a [C,H,W] probability map against [H,W] labels");

  m.def(
      "memory_reg",
      [](const FloatArray& p_aux, const FloatArray& p_primary, bool detach_teacher) {
        return memory_reg(tensor_from(p_aux, 3, "p_aux"), tensor_from(p_primary, 3, "p_primary"),
                          detach_teacher)
            .item();
      },
      py::arg("p_aux"), py::arg("p_primary"), py::arg("detach_teacher") = true,
      "symmetric cross-classifier consistency between the two head outputs");

  m.def(
      "fuse_labels",
      [](const FloatArray& p_primary, const FloatArray& p_aux) {
        TensorF pp = tensor_from(p_primary, 3, "p_primary");
        TensorF pa = tensor_from(p_aux, 3, "p_aux");
        return label_map(fuse_pseudo_label(pp, pa), pp.dim(1), pp.dim(2));
      },
      py::arg("p_primary"), py::arg("p_aux"),
      "argmax of p_primary + 0.5 * p_aux; ties resolve to the lower class id");

  m.def(
      "miou",
      [](const LabelArray& pred, const LabelArray& truth, std::size_t num_classes) {
        ConfusionMatrix cm(num_classes);
        cm.add(labels_from(truth), labels_from(pred));
        return cm.miou();
      },
      py::arg("pred"), py::arg("truth"), py::arg("num_classes"),
      "mean IoU over the classes present in prediction or ground truth");

  m.def(
      "disagreement",
      [](const LabelArray& a, const LabelArray& b) {
        return disagreement(labels_from(a), labels_from(b));
      },
      py::arg("a"), py::arg("b"), "fraction of pixels where two label maps differ");

  m.def(
      "poly_lr",
      [](double base_lr, std::size_t iter, std::size_t total_iters, double power) {
        return PolySchedule{base_lr, total_iters, power}.lr(iter);
      },
      py::arg("base_lr"), py::arg("iter"), py::arg("total_iters"), py::arg("power") = 0.9,
      "polynomial learning-rate decay: base_lr * (1 - iter/total)^power");
}
