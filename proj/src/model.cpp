#include "memreg/model.hpp"

#include <cmath>
#include <stdexcept>

namespace memreg {

ConvLayer make_conv(std::size_t cout, std::size_t cin, std::size_t k, std::size_t stride,
                    std::size_t pad, std::uint64_t seed, std::uint64_t tag, double gain) {
  Rng rng(Rng::key(seed, tag));
  std::size_t fan_in = cin * k * k;
  float std_dev = static_cast<float>(gain) * std::sqrt(2.0f / static_cast<float>(fan_in));
  std::vector<float> w(cout * cin * k * k);
  for (auto& v : w) v = static_cast<float>(rng.normal()) * std_dev;
  ConvLayer layer;
  layer.weight = TensorF::from_data({cout, cin, k, k}, std::move(w)).set_requires_grad(true);
  layer.bias = TensorF::zeros({cout}).set_requires_grad(true);
  layer.stride = stride;
  layer.pad = pad;
  return layer;
}

namespace {

// Probability maps are DC-dominated, low-contrast inputs (every channel
// hovers near 1/C early in training). Centering removes the shared DC
// so class-pattern differences drive the first layer, and the gain
// rescales the residual to unit-ish contrast — which also sets the
// scale of the gradient the adversarial terms push back through here.
constexpr float kDiscInputGain = 8.0f;

TensorF apply(const ConvLayer& l, const TensorF& x) {
  return conv2d(x, l.weight, l.bias, l.stride, l.pad);
}

void collect(std::vector<std::pair<std::string, TensorF>>& out, const std::string& prefix,
             ConvLayer& l) {
  out.emplace_back(prefix + ".weight", l.weight);
  out.emplace_back(prefix + ".bias", l.bias);
}

}  // namespace

SegModel::SegModel(std::size_t num_classes, std::uint64_t seed)
    : num_classes_(num_classes),
      enc1_(make_conv(16, 3, 3, 2, 1, seed, 1)),
      enc2_(make_conv(32, 16, 3, 2, 1, seed, 2)),
      enc3_(make_conv(64, 32, 3, 1, 1, seed, 3)),
      enc4_(make_conv(64, 64, 3, 1, 1, seed, 4)),
      aux_head_(make_conv(num_classes, 64, 1, 1, 0, seed, 5, 0.1)),
      primary_head_(make_conv(num_classes, 64, 1, 1, 0, seed, 6, 0.1)),
      drop_rng_(seed, 0xd0) {
  if (num_classes < 2) throw std::invalid_argument("SegModel needs at least 2 classes");
}

std::pair<TensorF, TensorF> SegModel::forward(const TensorF& image, bool train) {
  if (image.ndim() != 3 || image.dim(0) != 3)
    throw ShapeError("SegModel expects a [3,H,W] image, got " + shape_str(image.shape()));
  std::size_t h = image.dim(1), w = image.dim(2);
  if (h % kStride != 0 || w % kStride != 0)
    throw ShapeError("image size " + std::to_string(h) + "x" + std::to_string(w) +
                     " not divisible by encoder stride " + std::to_string(kStride));

  auto f1 = relu(apply(enc1_, image));   // 16 x H/2 x W/2
  auto f2 = relu(apply(enc2_, f1));      // 32 x H/4 x W/4
  auto f3 = relu(apply(enc3_, f2));      // 64 x H/4 x W/4
  auto f4 = relu(apply(enc4_, f3));      // 64 x H/4 x W/4

  // Softmax commutes with nearest upsample, so normalize at feature
  // resolution where it is 16x cheaper.
  auto aux_in = dropout(f3, kDropoutRate, train, drop_rng_);
  auto p_aux = upsample_nearest(softmax(apply(aux_head_, aux_in), 0), kStride);
  auto pri_in = dropout(f4, kDropoutRate, train, drop_rng_);
  auto p_primary = upsample_nearest(softmax(apply(primary_head_, pri_in), 0), kStride);
  return {p_aux, p_primary};
}

std::vector<std::pair<std::string, TensorF>> SegModel::named_parameters() {
  std::vector<std::pair<std::string, TensorF>> out;
  collect(out, "enc1", enc1_);
  collect(out, "enc2", enc2_);
  collect(out, "enc3", enc3_);
  collect(out, "enc4", enc4_);
  collect(out, "aux_head", aux_head_);
  collect(out, "primary_head", primary_head_);
  return out;
}

void SegModel::zero_grad() {
  for (auto& [name, p] : named_parameters()) p.zero_grad();
}

std::size_t SegModel::parameter_count() {
  std::size_t n = 0;
  for (auto& [name, p] : named_parameters()) n += p.numel();
  return n;
}

Discriminator::Discriminator(std::size_t num_classes, std::uint64_t seed)
    : num_classes_(num_classes),
      d1_(make_conv(24, num_classes, 3, 2, 1, seed, 11)),
      d2_(make_conv(32, 24, 3, 2, 1, seed, 12)),
      d3_(make_conv(48, 32, 3, 2, 1, seed, 13)),
      head4_(make_conv(1, 32, 1, 1, 0, seed, 14, 0.1)),
      head8_(make_conv(1, 48, 1, 1, 0, seed, 15, 0.1)) {}

std::vector<TensorF> Discriminator::forward(const TensorF& prob_map) {
  if (prob_map.ndim() != 3 || prob_map.dim(0) != num_classes_)
    throw ShapeError("Discriminator expects [" + std::to_string(num_classes_) +
                     ",H,W] probability map, got " + shape_str(prob_map.shape()));
  std::size_t h = prob_map.dim(1), w = prob_map.dim(2);
  if (h % kStride != 0 || w % kStride != 0)
    throw ShapeError("map size " + std::to_string(h) + "x" + std::to_string(w) +
                     " not divisible by discriminator stride " + std::to_string(kStride));
  auto x = mul_scalar(add_scalar(prob_map, -1.0f / static_cast<float>(num_classes_)),
                      kDiscInputGain);
  auto g1 = relu(apply(d1_, x));         // 24 x H/2
  auto g2 = relu(apply(d2_, g1));        // 32 x H/4
  auto g3 = relu(apply(d3_, g2));        // 48 x H/8
  auto s4 = sigmoid(apply(head4_, g2));
  auto s8 = sigmoid(apply(head8_, g3));
  return {s4, s8};
}

std::vector<std::pair<std::string, TensorF>> Discriminator::named_parameters() {
  std::vector<std::pair<std::string, TensorF>> out;
  collect(out, "d1", d1_);
  collect(out, "d2", d2_);
  collect(out, "d3", d3_);
  collect(out, "head4", head4_);
  collect(out, "head8", head8_);
  return out;
}

void Discriminator::zero_grad() {
  for (auto& [name, p] : named_parameters()) p.zero_grad();
}

std::size_t Discriminator::parameter_count() {
  std::size_t n = 0;
  for (auto& [name, p] : named_parameters()) n += p.numel();
  return n;
}

}  // namespace memreg
