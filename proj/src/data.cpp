#include "memreg/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "memreg/checkpoint.hpp"  // FormatError / VersionError

namespace memreg {

namespace {

const std::vector<std::array<float, 3>> kBasePalette = {
    {0.15f, 0.15f, 0.18f},  // background
    {0.85f, 0.20f, 0.20f},  // circle
    {0.20f, 0.75f, 0.25f},  // square
    {0.20f, 0.35f, 0.85f},  // triangle
    {0.90f, 0.80f, 0.20f},  // bar
};

constexpr double kTau = 6.283185307179586476925286766559;

}  // namespace

DomainSpec source_domain(std::uint64_t seed) {
  DomainSpec spec;
  spec.seed = seed;
  spec.style.palette = kBasePalette;
  spec.style.noise_sigma = 0.02f;
  return spec;
}

DomainSpec target_domain(std::uint64_t seed, double shift) {
  DomainSpec spec;
  spec.seed = seed;
  // Photometric shift: blend every class color toward its channel
  // rotation (R,G,B) -> (G,B,R). A global recolor keeps classes
  // distinguishable in-domain while moving the whole input distribution
  // away from the source; permuting colors *across classes* would make
  // target classes unrecoverable without labels.
  // Component strengths are sized so shift=1.0 costs a source-trained
  // model roughly 15-25 mIoU points on target: a real gap with enough
  // signal left for unsupervised adaptation to work with.
  float mix = static_cast<float>(0.22 * shift);
  spec.style.palette = kBasePalette;
  for (auto& c : spec.style.palette) {
    std::array<float, 3> rot = {c[1], c[2], c[0]};
    for (int i = 0; i < 3; ++i) c[i] = (1.0f - mix) * c[i] + mix * rot[i];
  }
  spec.style.noise_sigma = static_cast<float>(0.02 + 0.036 * shift);
  spec.style.texture_freq = 2.5f;
  spec.style.texture_amp = static_cast<float>(0.07 * shift);
  spec.style.illum_strength = static_cast<float>(0.11 * shift);
  return spec;
}

SegSample generate(const DomainSpec& spec, std::uint64_t index) {
  if (spec.height < 16 || spec.width < 16)
    throw std::invalid_argument("domain images must be at least 16x16, got " +
                                std::to_string(spec.height) + "x" + std::to_string(spec.width));
  if (spec.style.palette.size() != spec.num_classes)
    throw std::invalid_argument("palette has " + std::to_string(spec.style.palette.size()) +
                                " colors for " + std::to_string(spec.num_classes) + " classes");
  const std::size_t h = spec.height, w = spec.width, hw = h * w;

  // Geometry and style draw from separate streams of the same (seed,
  // index) key: specs sharing a seed agree on shapes (hence labels)
  // regardless of style parameters.
  Rng geom(Rng::key(spec.seed, index), 1);
  Rng style(Rng::key(spec.seed, index), 2);

  std::vector<std::uint8_t> label(hw, 0);
  const double scale = static_cast<double>(std::min(h, w));
  const std::size_t n_shapes = 2 + geom.uniform_int(4);
  for (std::size_t s = 0; s < n_shapes; ++s) {
    const std::size_t kind = geom.uniform_int(4);  // circle, square, triangle, bar
    const double cx = geom.uniform_range(0.15, 0.85) * static_cast<double>(w);
    const double cy = geom.uniform_range(0.15, 0.85) * static_cast<double>(h);
    // Per-kind size multipliers equalize expected pixel areas across the
    // four kinds (~pi*r^2 each), so no class is starved of training
    // signal by its geometry alone.
    static constexpr double kAreaEq[4] = {1.0, 0.886, 1.253, 1.253};
    const double r = geom.uniform_range(0.15, 0.28) * scale * kAreaEq[kind];
    const bool horizontal = geom.uniform() < 0.5;  // only bars consume this meaningfully
    const auto cls = static_cast<std::uint8_t>(kind + 1);
    for (std::size_t y = 0; y < h; ++y) {
      const double dy = static_cast<double>(y) + 0.5 - cy;
      for (std::size_t x = 0; x < w; ++x) {
        const double dx = static_cast<double>(x) + 0.5 - cx;
        bool inside = false;
        switch (kind) {
          case 0:  // circle
            inside = dx * dx + dy * dy <= r * r;
            break;
          case 1:  // square
            inside = std::fabs(dx) <= r && std::fabs(dy) <= r;
            break;
          case 2:  // upward triangle: width grows linearly toward the base
            inside = dy >= -r && dy <= r && std::fabs(dx) <= (dy + r) * 0.5;
            break;
          case 3:  // axis-aligned bar; thick enough to survive the
                   // model's output stride
            if (horizontal)
              inside = std::fabs(dx) <= r && std::fabs(dy) <= std::max(r / 2.0, 3.0);
            else
              inside = std::fabs(dy) <= r && std::fabs(dx) <= std::max(r / 2.0, 3.0);
            break;
        }
        if (inside) label[y * w + x] = cls;
      }
    }
  }

  // Style pass: fixed draw order keeps the noise sequence aligned
  // between differently parameterized styles.
  const double tex_phase = style.uniform_range(0.0, kTau);
  const double tex_angle = style.uniform_range(0.0, kTau);
  const double tex_ux = std::cos(tex_angle), tex_uy = std::sin(tex_angle);
  const double illum_angle = style.uniform_range(0.0, kTau);
  const double illum_gx = std::cos(illum_angle), illum_gy = std::sin(illum_angle);

  std::vector<float> image(3 * hw);
  const auto& st = spec.style;
  for (std::size_t y = 0; y < h; ++y) {
    const double ny = static_cast<double>(y) / static_cast<double>(h) - 0.5;
    for (std::size_t x = 0; x < w; ++x) {
      const double nx = static_cast<double>(x) / static_cast<double>(w) - 0.5;
      const auto& base = st.palette[label[y * w + x]];
      double tex = 1.0;
      if (st.texture_amp > 0.0f)
        tex = 1.0 + st.texture_amp *
                        std::sin(kTau * st.texture_freq * (nx * tex_ux + ny * tex_uy) + tex_phase);
      const double illum = st.illum_strength * (nx * illum_gx + ny * illum_gy);
      for (std::size_t c = 0; c < 3; ++c) {
        double v = base[c] * tex + illum + st.noise_sigma * style.normal();
        image[c * hw + y * w + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }

  SegSample sample;
  sample.image = TensorF::from_data({3, h, w}, std::move(image));
  sample.label = std::move(label);
  sample.has_label = true;
  return sample;
}

BatchIterator::BatchIterator(DomainSpec spec, std::size_t batch_size, std::uint64_t shuffle_seed,
                             Options opts)
    : spec_(std::move(spec)),
      batch_size_(batch_size),
      opts_(opts),
      rng_(shuffle_seed, 0xb47c),
      shuffle_seed_(shuffle_seed) {
  if (batch_size_ < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (opts_.epoch_size < 1) throw std::invalid_argument("epoch_size must be >= 1");
  if (opts_.crop != 0 &&
      (opts_.crop > spec_.height || opts_.crop > spec_.width || opts_.crop < 16))
    throw std::invalid_argument("crop size " + std::to_string(opts_.crop) +
                                " out of range for " + std::to_string(spec_.height) + "x" +
                                std::to_string(spec_.width) + " images");
  if (opts_.overlay != nullptr &&
      (opts_.overlay->height != spec_.height || opts_.overlay->width != spec_.width))
    throw ShapeError("pseudo-label overlay is " + std::to_string(opts_.overlay->height) + "x" +
                     std::to_string(opts_.overlay->width) + " but the domain is " +
                     std::to_string(spec_.height) + "x" + std::to_string(spec_.width));
  reshuffle();
}

void BatchIterator::reshuffle() {
  order_.resize(opts_.epoch_size);
  std::iota(order_.begin(), order_.end(), std::uint64_t(0));
  Rng shuffle(Rng::key(shuffle_seed_, epoch_), 0x5f);
  for (std::size_t i = order_.size() - 1; i > 0; --i)
    std::swap(order_[i], order_[shuffle.uniform_int(i + 1)]);
  cursor_ = 0;
}

std::vector<SegSample> BatchIterator::next() {
  std::vector<SegSample> batch;
  batch.reserve(batch_size_);
  while (batch.size() < batch_size_) {
    if (cursor_ >= order_.size()) {
      ++epoch_;
      reshuffle();
    }
    const std::uint64_t idx = opts_.index_base + order_[cursor_++];
    SegSample s = generate(spec_, idx);
    if (opts_.overlay != nullptr) {
      auto it = std::find_if(opts_.overlay->labels.begin(), opts_.overlay->labels.end(),
                             [idx](const auto& rec) { return rec.first == idx; });
      if (it == opts_.overlay->labels.end())
        throw std::invalid_argument("no pseudo label stored for sample index " +
                                    std::to_string(idx));
      s.label = it->second;
      s.has_label = true;
    }
    if (opts_.crop != 0) {
      const std::size_t h = spec_.height, w = spec_.width, cs = opts_.crop;
      const std::size_t oy = rng_.uniform_int(h - cs + 1);
      const std::size_t ox = rng_.uniform_int(w - cs + 1);
      std::vector<float> img(3 * cs * cs);
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < cs; ++y)
          std::copy_n(s.image.data().data() + (c * h + oy + y) * w + ox, cs,
                      img.data() + (c * cs + y) * cs);
      std::vector<std::uint8_t> lab(cs * cs);
      for (std::size_t y = 0; y < cs; ++y)
        std::copy_n(s.label.data() + (oy + y) * w + ox, cs, lab.data() + y * cs);
      s.image = TensorF::from_data({3, cs, cs}, std::move(img));
      s.label = std::move(lab);
    }
    if (opts_.strip_labels) {
      s.label.clear();
      s.has_label = false;
    }
    ++draws_;
    batch.push_back(std::move(s));
  }
  return batch;
}

namespace {

constexpr char kDatasetMagic[8] = {'M', 'R', 'S', 'E', 'G', 'D', 'S', '1'};
constexpr char kPseudoMagic[8] = {'M', 'R', 'S', 'E', 'G', 'P', 'L', '1'};
constexpr std::uint32_t kContainerVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_f32(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;
  void need(std::size_t n, const char* what) const {
    if (pos + n > buf.size())
      throw FormatError(std::string("truncated container: expected ") + what, pos);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  float f32(const char* what) {
    std::uint32_t bits = u32(what);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<std::uint8_t>(buf[pos++]);
  }
};

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("short write to '" + path + "'");
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open '" + path + "'");
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

}  // namespace

void export_dataset(const std::string& path, const DomainSpec& spec, std::uint64_t start_index,
                    std::size_t count, bool with_labels) {
  std::string out;
  out.append(kDatasetMagic, 8);
  put_u32(out, kContainerVersion);
  put_u64(out, spec.seed);
  put_u32(out, static_cast<std::uint32_t>(spec.height));
  put_u32(out, static_cast<std::uint32_t>(spec.width));
  put_u32(out, static_cast<std::uint32_t>(spec.num_classes));
  for (const auto& c : spec.style.palette)
    for (float v : c) put_f32(out, v);
  put_f32(out, spec.style.noise_sigma);
  put_f32(out, spec.style.texture_freq);
  put_f32(out, spec.style.texture_amp);
  put_f32(out, spec.style.illum_strength);
  put_u32(out, static_cast<std::uint32_t>(count));
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t index = start_index + i;
    SegSample s = generate(spec, index);
    put_u64(out, index);
    out.push_back(with_labels ? 1 : 0);
    for (float v : s.image.data()) put_f32(out, v);
    if (with_labels)
      out.append(reinterpret_cast<const char*>(s.label.data()), s.label.size());
  }
  write_file(path, out);
}

Dataset import_dataset(const std::string& path) {
  std::string buf = read_file(path);
  Reader r{buf};
  r.need(8, "magic");
  if (std::memcmp(buf.data(), kDatasetMagic, 8) != 0)
    throw FormatError("bad magic, not a dataset container", 0);
  r.pos = 8;
  std::uint32_t version = r.u32("version");
  if (version != kContainerVersion)
    throw VersionError("dataset container version " + std::to_string(version) +
                       " is not readable by this build");
  Dataset ds;
  ds.spec.seed = r.u64("spec seed");
  ds.spec.height = r.u32("height");
  ds.spec.width = r.u32("width");
  ds.spec.num_classes = r.u32("class count");
  if (ds.spec.num_classes == 0 || ds.spec.num_classes > 64)
    throw FormatError("implausible class count", r.pos - 4);
  ds.spec.style.palette.resize(ds.spec.num_classes);
  for (auto& c : ds.spec.style.palette)
    for (auto& v : c) v = r.f32("palette entry");
  ds.spec.style.noise_sigma = r.f32("noise sigma");
  ds.spec.style.texture_freq = r.f32("texture freq");
  ds.spec.style.texture_amp = r.f32("texture amp");
  ds.spec.style.illum_strength = r.f32("illumination strength");
  const std::uint32_t count = r.u32("sample count");
  const std::size_t hw = ds.spec.height * ds.spec.width;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint64_t index = r.u64("sample index");
    std::uint8_t has_label = r.u8("label flag");
    if (has_label > 1) throw FormatError("label flag must be 0 or 1", r.pos - 1);
    std::vector<float> img(3 * hw);
    for (auto& v : img) v = r.f32("image data");
    SegSample s;
    s.image = TensorF::from_data({3, ds.spec.height, ds.spec.width}, std::move(img));
    if (has_label) {
      r.need(hw, "label data");
      s.label.resize(hw);
      std::memcpy(s.label.data(), buf.data() + r.pos, hw);
      r.pos += hw;
      for (auto y : s.label)
        if (y >= ds.spec.num_classes)
          throw FormatError("label value out of range", r.pos - hw);
    } else {
      s.has_label = false;
    }
    ds.samples.emplace_back(index, std::move(s));
  }
  if (r.pos != buf.size()) throw FormatError("trailing bytes after last sample", r.pos);
  return ds;
}

std::uint64_t file_checksum(const std::string& path) {
  std::string buf = read_file(path);
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (unsigned char c : buf) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

void save_pseudo_labels(const std::string& path, const PseudoLabelSet& set) {
  if (set.weights.size() != set.num_classes)
    throw std::invalid_argument("pseudo label set: weight count does not match classes");
  std::string out;
  out.append(kPseudoMagic, 8);
  put_u32(out, kContainerVersion);
  put_u32(out, static_cast<std::uint32_t>(set.height));
  put_u32(out, static_cast<std::uint32_t>(set.width));
  put_u32(out, static_cast<std::uint32_t>(set.num_classes));
  for (double w : set.weights) put_f32(out, static_cast<float>(w));
  put_u32(out, static_cast<std::uint32_t>(set.labels.size()));
  for (const auto& [index, lab] : set.labels) {
    if (lab.size() != set.height * set.width)
      throw std::invalid_argument("pseudo label map has wrong size");
    put_u64(out, index);
    out.append(reinterpret_cast<const char*>(lab.data()), lab.size());
  }
  write_file(path, out);
}

PseudoLabelSet load_pseudo_labels(const std::string& path) {
  std::string buf = read_file(path);
  Reader r{buf};
  r.need(8, "magic");
  if (std::memcmp(buf.data(), kPseudoMagic, 8) != 0)
    throw FormatError("bad magic, not a pseudo-label container", 0);
  r.pos = 8;
  std::uint32_t version = r.u32("version");
  if (version != kContainerVersion)
    throw VersionError("pseudo-label container version " + std::to_string(version) +
                       " is not readable by this build");
  PseudoLabelSet set;
  set.height = r.u32("height");
  set.width = r.u32("width");
  set.num_classes = r.u32("class count");
  if (set.num_classes == 0 || set.num_classes > 64)
    throw FormatError("implausible class count", r.pos - 4);
  set.weights.resize(set.num_classes);
  for (auto& w : set.weights) w = r.f32("class weight");
  const std::uint32_t count = r.u32("record count");
  const std::size_t hw = set.height * set.width;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint64_t index = r.u64("record index");
    r.need(hw, "label data");
    std::vector<std::uint8_t> lab(hw);
    std::memcpy(lab.data(), buf.data() + r.pos, hw);
    r.pos += hw;
    for (auto y : lab)
      if (y >= set.num_classes) throw FormatError("label value out of range", r.pos - hw);
    set.labels.emplace_back(index, std::move(lab));
  }
  if (r.pos != buf.size()) throw FormatError("trailing bytes after last record", r.pos);
  return set;
}

}  // namespace memreg
