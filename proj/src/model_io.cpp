#include "cpli/model_io.hpp"

#include <json.hpp>
#include <zlib.h>

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <random>
#include <sstream>

namespace cpli {

using nlohmann::json;

namespace {

constexpr char kMagic[] = "CPLI";
constexpr char kVersion = '1';

std::uint32_t crc_of(const std::uint8_t* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

void put_le32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_le64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_le(const std::vector<std::uint8_t>& b, std::size_t off, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= std::uint64_t{b[off + i]} << (8 * i);
  return v;
}

struct IdxHeader {
  std::uint8_t type_code;
  std::vector<std::size_t> dims;
  std::size_t data_offset;
};

IdxHeader parse_idx_header(const std::vector<std::uint8_t>& b) {
  if (b.size() < 4) throw ParseError("IDX file shorter than magic number", b.size());
  if (b[0] != 0 || b[1] != 0) throw ParseError("IDX magic must start with two zero bytes", 0);
  IdxHeader h{b[2], {}, 0};
  if (h.type_code != 0x08) throw ParseError("IDX element type must be unsigned byte (0x08)", 2);
  const std::size_t rank = b[3];
  if (rank == 0) throw ParseError("IDX rank must be >= 1", 3);
  h.data_offset = 4 + 4 * rank;
  if (b.size() < h.data_offset) throw ParseError("IDX header truncated", b.size());
  for (std::size_t i = 0; i < rank; ++i) h.dims.push_back(read_be32(b, 4 + 4 * i));
  std::size_t expected = 1;
  for (std::size_t d : h.dims) {
    if (d != 0 && expected > std::numeric_limits<std::size_t>::max() / d) {
      throw ParseError("IDX dimensions overflow", 4);
    }
    expected *= d;
  }
  if (b.size() - h.data_offset < expected) {
    throw ParseError("IDX payload truncated: header declares " + std::to_string(expected) +
                         " bytes, file holds " + std::to_string(b.size() - h.data_offset),
                     b.size());
  }
  if (b.size() - h.data_offset > expected) {
    throw ParseError("IDX file has trailing bytes", h.data_offset + expected);
  }
  return h;
}

json spec_to_json(const NetworkSpec& spec) {
  json layers = json::array();
  for (const LayerSpec& l : spec.layers) {
    json j{{"kind", std::string(to_string(l.kind))}};
    switch (l.kind) {
      case LayerKind::conv2d:
        j["in_channels"] = l.in_channels;
        j["out_channels"] = l.out_channels;
        j["kernel_h"] = l.kernel_h;
        j["kernel_w"] = l.kernel_w;
        j["stride"] = l.stride;
        j["pad"] = l.pad;
        break;
      case LayerKind::maxpool2d:
        j["window"] = l.window;
        j["stride"] = l.stride;
        break;
      case LayerKind::linear:
        j["in_features"] = l.in_features;
        j["out_features"] = l.out_features;
        break;
      default:
        break;
    }
    layers.push_back(std::move(j));
  }
  return {{"input_dims", spec.input_dims}, {"num_classes", spec.num_classes}, {"layers", layers}};
}

NetworkSpec spec_from_json(const json& j) {
  NetworkSpec spec;
  spec.input_dims = j.at("input_dims").get<Dims>();
  spec.num_classes = j.at("num_classes").get<std::size_t>();
  for (const json& lj : j.at("layers")) {
    LayerSpec l;
    l.kind = layer_kind_from_string(lj.at("kind").get<std::string>());
    switch (l.kind) {
      case LayerKind::conv2d:
        l.in_channels = lj.at("in_channels");
        l.out_channels = lj.at("out_channels");
        l.kernel_h = lj.at("kernel_h");
        l.kernel_w = lj.at("kernel_w");
        l.stride = lj.at("stride");
        l.pad = lj.at("pad");
        break;
      case LayerKind::maxpool2d:
        l.window = lj.at("window");
        l.stride = lj.at("stride");
        break;
      case LayerKind::linear:
        l.in_features = lj.at("in_features");
        l.out_features = lj.at("out_features");
        break;
      default:
        break;
    }
    spec.layers.push_back(l);
  }
  spec.validate();
  return spec;
}

std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

// ---------------------------------------------------------------------------
// Datasets

Dims DatasetHandle::image_dims() const {
  if (images.rank() != 4) return {};
  return {images.dim(1), images.dim(2), images.dim(3)};
}

Tensor DatasetHandle::image(std::size_t i) const {
  const Dims d = image_dims();
  const std::size_t n = dims_product(d);
  const double* src = images.data() + i * n;
  return Tensor(d, std::vector<double>(src, src + n));
}

DatasetHandle DatasetHandle::subset(const std::vector<std::size_t>& indices) const {
  const Dims d = image_dims();
  const std::size_t n = dims_product(d);
  DatasetHandle out;
  out.num_classes = num_classes;
  out.split = split;
  out.images = Tensor({indices.size(), d[0], d[1], d[2]});
  out.labels.reserve(indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const std::size_t i = indices.at(k);
    if (i >= count()) throw std::out_of_range("dataset subset index out of range");
    std::copy_n(images.data() + i * n, n, out.images.data() + k * n);
    out.labels.push_back(labels[i]);
  }
  return out;
}

void DatasetHandle::validate() const {
  if (images.rank() != 4) throw std::invalid_argument("dataset images must be [count,c,h,w]");
  if (images.dim(0) != labels.size()) {
    throw std::invalid_argument("dataset has " + std::to_string(images.dim(0)) + " images but " +
                                std::to_string(labels.size()) + " labels");
  }
  for (std::size_t l : labels) {
    if (l >= num_classes) {
      throw std::invalid_argument("label " + std::to_string(l) + " >= class count " +
                                  std::to_string(num_classes));
    }
  }
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

Tensor load_idx_images(const std::filesystem::path& path) {
  const auto b = read_file_bytes(path);
  const IdxHeader h = parse_idx_header(b);
  if (h.dims.size() != 3) throw ParseError("IDX image file must have rank 3", 3);
  const std::size_t count = h.dims[0], rows = h.dims[1], cols = h.dims[2];
  if (count > 0 && (rows == 0 || cols == 0)) throw ParseError("IDX image extents must be > 0", 8);
  Tensor t({count, 1, std::max<std::size_t>(rows, 1), std::max<std::size_t>(cols, 1)});
  for (std::size_t i = 0; i < count * rows * cols; ++i) t[i] = b[h.data_offset + i] / 255.0;
  return t;
}

std::vector<std::size_t> load_idx_labels(const std::filesystem::path& path) {
  const auto b = read_file_bytes(path);
  const IdxHeader h = parse_idx_header(b);
  if (h.dims.size() != 1) throw ParseError("IDX label file must have rank 1", 3);
  return {b.begin() + static_cast<std::ptrdiff_t>(h.data_offset), b.end()};
}

DatasetHandle load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                       std::size_t num_classes, std::string split) {
  DatasetHandle d;
  d.images = load_idx_images(images);
  d.labels = load_idx_labels(labels);
  d.num_classes = num_classes;
  d.split = std::move(split);
  if (d.images.dim(0) != d.labels.size()) {
    throw std::invalid_argument("IDX image count " + std::to_string(d.images.dim(0)) +
                                " does not match label count " + std::to_string(d.labels.size()));
  }
  d.validate();
  return d;
}

DatasetHandle parse_cifar_binary(const std::vector<std::uint8_t>& b, std::string split) {
  constexpr std::size_t kRecord = 3073, kPixels = 3072;
  if (b.size() % kRecord != 0) {
    throw ParseError("CIFAR-10 batch length " + std::to_string(b.size()) +
                         " is not a multiple of 3073",
                     b.size() - b.size() % kRecord);
  }
  const std::size_t count = b.size() / kRecord;
  DatasetHandle d;
  d.num_classes = 10;
  d.split = std::move(split);
  d.images = Tensor({count, 3, 32, 32});
  d.labels.resize(count);
  for (std::size_t r = 0; r < count; ++r) {
    const std::size_t off = r * kRecord;
    if (b[off] > 9) {
      throw ParseError("CIFAR-10 label byte " + std::to_string(b[off]) + " > 9", off);
    }
    d.labels[r] = b[off];
    for (std::size_t p = 0; p < kPixels; ++p) d.images[r * kPixels + p] = b[off + 1 + p] / 255.0;
  }
  return d;
}

DatasetHandle load_cifar_binary(const std::filesystem::path& path, std::string split) {
  return parse_cifar_binary(read_file_bytes(path), std::move(split));
}

DatasetHandle synth_dataset(std::uint64_t seed, std::size_t count, std::size_t classes,
                            const Dims& dims, const SynthOptions& opt, std::string split) {
  if (classes < 1) throw std::invalid_argument("synth_dataset needs at least one class");
  if (dims.size() != 3) throw std::invalid_argument("synth_dataset dims must be [c,h,w]");
  const std::size_t c = dims[0], h = dims[1], w = dims[2];
  DatasetHandle d;
  d.num_classes = classes;
  d.split = std::move(split);
  d.images = Tensor({count, c, h, w});
  d.labels.resize(count);

  // Class prototypes: blob centres on an ellipse inside the image and a
  // per-channel tint, both fixed for a given class count and image shape.
  std::vector<double> cy(classes), cx(classes);
  std::vector<std::vector<double>> tint(classes, std::vector<double>(c));
  const double pi = std::acos(-1.0);
  for (std::size_t k = 0; k < classes; ++k) {
    const double a = 2.0 * pi * static_cast<double>(k) / static_cast<double>(classes);
    cy[k] = (static_cast<double>(h) - 1) / 2.0 + 0.3 * static_cast<double>(h) * std::sin(a);
    cx[k] = (static_cast<double>(w) - 1) / 2.0 + 0.3 * static_cast<double>(w) * std::cos(a);
    for (std::size_t ch = 0; ch < c; ++ch) {
      tint[k][ch] = 0.6 + 0.4 * std::cos(a + 2.0 * pi * static_cast<double>(ch) / static_cast<double>(c));
    }
  }

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const double inv2s2 = 1.0 / (2.0 * opt.blob_sigma * opt.blob_sigma);
  for (std::size_t n = 0; n < count; ++n) {
    const std::size_t label = static_cast<std::size_t>(uni(rng) * static_cast<double>(classes)) % classes;
    d.labels[n] = label;
    struct Blob { double y, x, amp; std::vector<double> tint; };
    std::vector<Blob> blobs;
    blobs.push_back({cy[label] + opt.jitter * normal(rng), cx[label] + opt.jitter * normal(rng),
                     0.7 + 0.3 * uni(rng), tint[label]});
    for (std::size_t q = 0; q < opt.distractors; ++q) {
      const std::size_t other = static_cast<std::size_t>(uni(rng) * static_cast<double>(classes)) % classes;
      blobs.push_back({uni(rng) * static_cast<double>(h - 1), uni(rng) * static_cast<double>(w - 1),
                       0.3 + 0.3 * uni(rng), tint[other]});
    }
    double* img = d.images.data() + n * c * h * w;
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          double v = 0.0;
          for (const Blob& bl : blobs) {
            const double dy = static_cast<double>(y) - bl.y, dx = static_cast<double>(x) - bl.x;
            v += bl.amp * bl.tint[ch] * std::exp(-(dy * dy + dx * dx) * inv2s2);
          }
          v += opt.noise * normal(rng);
          img[(ch * h + y) * w + x] = std::clamp(v, 0.0, 1.0);
        }
      }
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// Checkpoints

std::string network_spec_to_json(const NetworkSpec& spec) { return spec_to_json(spec).dump(); }

NetworkSpec network_spec_from_json(const std::string& text) {
  return spec_from_json(json::parse(text));
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  ckpt.spec.validate();
  check_weights(ckpt.spec, ckpt.weights);

  json tensors = json::array();
  std::vector<const Tensor*> blocks;
  for (std::size_t i = 0; i < ckpt.weights.size(); ++i) {
    if (!ckpt.spec.layers[i].has_params()) continue;
    tensors.push_back({{"layer", i}, {"role", "weight"}, {"dims", ckpt.weights[i].weight.dims()}});
    tensors.push_back({{"layer", i}, {"role", "bias"}, {"dims", ckpt.weights[i].bias.dims()}});
    blocks.push_back(&ckpt.weights[i].weight);
    blocks.push_back(&ckpt.weights[i].bias);
  }
  const json header{{"spec", spec_to_json(ckpt.spec)},
                    {"meta",
                     {{"seed", ckpt.meta.seed},
                      {"epochs", ckpt.meta.epochs},
                      {"dataset", ckpt.meta.dataset},
                      {"accuracy", ckpt.meta.accuracy},
                      {"pixel_mean", ckpt.meta.pixel_mean},
                      {"pixel_std", ckpt.meta.pixel_std}}},
                    {"tensors", tensors}};
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  out.push_back(static_cast<std::uint8_t>(kVersion));
  put_le32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  put_le32(out, crc_of(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  for (const Tensor* t : blocks) {
    const std::size_t start = out.size();
    for (double v : t->values()) put_le64(out, std::bit_cast<std::uint64_t>(v));
    put_le32(out, crc_of(out.data() + start, out.size() - start));
  }
  return out;
}

Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& b) {
  if (b.size() < 5 || std::memcmp(b.data(), kMagic, 4) != 0) {
    throw ParseError("not a checkpoint: magic 'CPLI' missing", 0);
  }
  if (b[4] != static_cast<std::uint8_t>(kVersion)) {
    throw VersionError(std::string("unsupported checkpoint version '") + static_cast<char>(b[4]) +
                       "', expected '" + kVersion + "'");
  }
  std::size_t off = 5;
  auto need = [&](std::size_t n, const char* what) {
    if (b.size() - off < n) throw ParseError(std::string("checkpoint truncated in ") + what, b.size());
  };
  need(4, "header length");
  const std::size_t hlen = get_le(b, off, 4);
  off += 4;
  need(hlen + 4, "header");
  const std::uint32_t hcrc = crc_of(b.data() + off, hlen);
  if (hcrc != get_le(b, off + hlen, 4)) throw ChecksumError("checkpoint header checksum mismatch");
  const json header = json::parse(b.begin() + static_cast<std::ptrdiff_t>(off),
                                  b.begin() + static_cast<std::ptrdiff_t>(off + hlen));
  off += hlen + 4;

  Checkpoint ck;
  ck.spec = spec_from_json(header.at("spec"));
  const json& meta = header.at("meta");
  ck.meta.seed = meta.at("seed");
  ck.meta.epochs = meta.at("epochs");
  ck.meta.dataset = meta.at("dataset");
  ck.meta.accuracy = meta.at("accuracy");
  ck.meta.pixel_mean = meta.at("pixel_mean");
  ck.meta.pixel_std = meta.at("pixel_std");

  ck.weights.resize(ck.spec.layers.size());
  for (const json& tj : header.at("tensors")) {
    const std::size_t layer = tj.at("layer");
    const std::string role = tj.at("role");
    const Dims dims = tj.at("dims").get<Dims>();
    if (layer >= ck.spec.layers.size() || !ck.spec.layers[layer].has_params()) {
      throw ParseError("checkpoint tensor refers to parameter-free layer " + std::to_string(layer), off);
    }
    const Dims expected = role == "weight" ? ck.spec.layers[layer].weight_dims()
                                           : ck.spec.layers[layer].bias_dims();
    if (dims != expected) {
      throw ParseError("checkpoint tensor dims " + dims_to_string(dims) + " disagree with spec " +
                           dims_to_string(expected),
                       off);
    }
    const std::size_t n = dims_product(dims);
    need(n * 8 + 4, "tensor payload");
    if (crc_of(b.data() + off, n * 8) != get_le(b, off + n * 8, 4)) {
      throw ChecksumError("checksum mismatch in layer " + std::to_string(layer) + " " + role);
    }
    std::vector<double> values(n);
    for (std::size_t i = 0; i < n; ++i) values[i] = std::bit_cast<double>(get_le(b, off + 8 * i, 8));
    off += n * 8 + 4;
    Tensor t(dims, std::move(values));
    (role == "weight" ? ck.weights[layer].weight : ck.weights[layer].bias) = std::move(t);
  }
  if (off != b.size()) throw ParseError("checkpoint has trailing bytes", off);
  check_weights(ck.spec, ck.weights);
  return ck;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_file_bytes(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(read_file_bytes(path));
}

// ---------------------------------------------------------------------------
// Traces

void write_trace(std::ostream& os, const PruneTrace& trace) {
  os << "layer\tvariant\tlambda\tc_in\tbudget\tkept\tsupport\tbackfilled\tprobes\tclamped"
        "\tresidual_before\tresidual_after\tdamping\trefit_grad\trefit_bound\trefit_ok\n";
  for (const auto& r : trace) {
    std::string support;
    for (std::size_t i = 0; i < r.support.size(); ++i) {
      if (i) support += ',';
      support += std::to_string(r.support[i]);
    }
    if (support.empty()) support = "-";
    os << r.layer << '\t' << r.variant << '\t' << format_double(r.lambda) << '\t' << r.c_in << '\t'
       << r.budget << '\t' << r.support.size() << '\t' << support << '\t' << r.backfilled << '\t'
       << r.probes << '\t' << (r.locations_clamped ? 1 : 0) << '\t'
       << format_double(r.residual_before) << '\t' << format_double(r.residual_after) << '\t'
       << format_double(r.damping) << '\t' << format_double(r.refit_gradient_norm) << '\t'
       << format_double(r.refit_bound) << '\t' << (r.refit_ok ? 1 : 0) << '\n';
  }
}

PruneTrace read_trace(std::istream& is) {
  PruneTrace trace;
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(is, line)) return trace;
  std::size_t offset = line.size() + 1;
  while (std::getline(is, line)) {
    ++line_no;
    const std::size_t line_start = offset;
    offset += line.size() + 1;
    if (line.empty()) continue;
    auto fail = [&](const std::string& what) -> ParseError {
      return ParseError("trace line " + std::to_string(line_no) + ": " + what, line_start);
    };
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, '\t');) f.push_back(cell);
    if (f.size() != 16) {
      throw fail(std::to_string(f.size()) + " fields, expected 16");
    }
    auto num = [&]<typename T>(const std::string& text, T& out) {
      const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), out);
      if (ec != std::errc{} || ptr != text.data() + text.size()) {
        throw fail("bad number '" + text + "'");
      }
    };
    PruneTraceRecord r;
    num(f[0], r.layer);
    r.variant = f[1];
    num(f[2], r.lambda);
    num(f[3], r.c_in);
    num(f[4], r.budget);
    if (f[6] != "-") {
      std::stringstream sp(f[6]);
      for (std::string idx; std::getline(sp, idx, ',');) num(idx, r.support.emplace_back());
    }
    std::size_t kept = 0;
    num(f[5], kept);
    if (r.support.size() != kept) throw fail("kept count disagrees with support");
    num(f[7], r.backfilled);
    num(f[8], r.probes);
    r.locations_clamped = f[9] == "1";
    num(f[10], r.residual_before);
    num(f[11], r.residual_after);
    num(f[12], r.damping);
    num(f[13], r.refit_gradient_norm);
    num(f[14], r.refit_bound);
    r.refit_ok = f[15] == "1";
    trace.push_back(std::move(r));
  }
  return trace;
}

}  // namespace cpli
