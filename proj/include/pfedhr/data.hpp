#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "pfedhr/archzoo.hpp"
#include "pfedhr/rng.hpp"
#include "pfedhr/tensor.hpp"

namespace pfedhr {

template <typename S = float>
struct LabeledDataset {
  Tensor<S> features;       // (n, d) or (n, c, h, w)
  std::vector<int> labels;  // in [0, num_classes)
  int num_classes = 0;

  int size() const { return features.shape.empty() ? 0 : features.dim(0); }
  InputSpec input_spec() const { return InputSpec{sample_dims(features.shape)}; }
};

// Server-held data. Labels are carried but only consulted when `labeled`.
template <typename S = float>
struct PublicDataset {
  Tensor<S> features;
  std::vector<int> labels;
  bool labeled = true;
  int num_classes = 0;

  int size() const { return features.shape.empty() ? 0 : features.dim(0); }
};

enum class PartitionScheme : std::uint8_t { Iid = 0, TwoClassNonIid = 1 };

struct PartitionPlan {
  std::vector<std::vector<int>> client_train;
  std::vector<std::vector<int>> client_test;
  std::vector<int> public_indices;
  PartitionScheme scheme = PartitionScheme::Iid;
};

// ---------------------------------------------------------------------------
// IDX ingestion (big-endian magic + dims header, raw payload)

namespace detail {

inline std::uint32_t read_be_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (is.gcount() != 4) throw TruncatedFile(std::string("unexpected end of file reading ") + what);
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
         std::uint32_t(b[3]);
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

// Loads an IDX image/label pair; pixels are scaled to [0,1].
template <typename S = float>
LabeledDataset<S> load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw Error("cannot open images file: " + images_path);
  std::ifstream lab(labels_path, std::ios::binary);
  if (!lab) throw Error("cannot open labels file: " + labels_path);

  if (detail::read_be_u32(img, "images magic") != kIdxImagesMagic)
    throw BadMagic("bad IDX images magic in " + images_path);
  if (detail::read_be_u32(lab, "labels magic") != kIdxLabelsMagic)
    throw BadMagic("bad IDX labels magic in " + labels_path);

  const std::uint32_t n_images = detail::read_be_u32(img, "image count");
  const std::uint32_t rows = detail::read_be_u32(img, "rows");
  const std::uint32_t cols = detail::read_be_u32(img, "cols");
  const std::uint32_t n_labels = detail::read_be_u32(lab, "label count");
  if (n_images != n_labels)
    throw CountMismatch("image count " + std::to_string(n_images) + " != label count " +
                        std::to_string(n_labels));

  LabeledDataset<S> ds;
  ds.features = Tensor<S>({static_cast<int>(n_images), 1, static_cast<int>(rows), static_cast<int>(cols)});
  std::vector<unsigned char> buf(static_cast<std::size_t>(rows) * cols);
  for (std::uint32_t i = 0; i < n_images; ++i) {
    img.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (static_cast<std::size_t>(img.gcount()) != buf.size())
      throw TruncatedFile("images file truncated at record " + std::to_string(i));
    S* dst = ds.features.data.data() + static_cast<std::size_t>(i) * buf.size();
    for (std::size_t p = 0; p < buf.size(); ++p) dst[p] = static_cast<S>(buf[p]) / S(255);
  }
  ds.labels.resize(n_labels);
  int max_label = 0;
  for (std::uint32_t i = 0; i < n_labels; ++i) {
    char b;
    lab.read(&b, 1);
    if (lab.gcount() != 1) throw TruncatedFile("labels file truncated at record " + std::to_string(i));
    ds.labels[i] = static_cast<unsigned char>(b);
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.num_classes = max_label + 1;
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic blobs

inline constexpr double kBlobSigma = 0.5;

// Gaussian class blobs with means on a scaled simplex (class c sits on the
// c-th coordinate axis). Classes are generated in equal counts.
template <typename S = float>
LabeledDataset<S> make_synthetic(int num_classes, int n, int dim, std::uint64_t seed,
                                 double mean_scale = 1.0) {
  if (num_classes < 2) throw ConfigInvalid("make_synthetic needs at least 2 classes");
  if (dim < num_classes) throw ConfigInvalid("make_synthetic needs dim >= num_classes");
  Rng rng(seed);
  LabeledDataset<S> ds;
  ds.num_classes = num_classes;
  ds.features = Tensor<S>({n, dim});
  ds.labels.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int c = i % num_classes;
    ds.labels[static_cast<std::size_t>(i)] = c;
    S* row = ds.features.data.data() + static_cast<std::size_t>(i) * dim;
    for (int k = 0; k < dim; ++k)
      row[k] = static_cast<S>((k == c ? mean_scale : 0.0) + kBlobSigma * rng.normal());
  }
  // Shuffle rows so class labels are not ordered.
  std::vector<int> perm(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
  rng.shuffle(perm);
  Tensor<S> shuffled = gather_rows(ds.features, perm);
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) labels[static_cast<std::size_t>(i)] = ds.labels[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
  ds.features = std::move(shuffled);
  ds.labels = std::move(labels);
  return ds;
}

template <typename S>
void export_csv(const LabeledDataset<S>& ds, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open csv for writing: " + path);
  const long long stride = ds.features.numel() / ds.size();
  for (int i = 0; i < ds.size(); ++i) {
    os << ds.labels[static_cast<std::size_t>(i)];
    const S* row = ds.features.data.data() + static_cast<std::size_t>(i) * stride;
    for (long long k = 0; k < stride; ++k) os << ',' << row[k];
    os << '\n';
  }
}

// ---------------------------------------------------------------------------
// Partitioning

namespace detail {

inline std::vector<std::vector<int>> by_class(const std::vector<int>& indices,
                                              const std::vector<int>& labels, int num_classes) {
  std::vector<std::vector<int>> out(static_cast<std::size_t>(num_classes));
  for (int idx : indices) out[static_cast<std::size_t>(labels[static_cast<std::size_t>(idx)])].push_back(idx);
  return out;
}

// Deals `pool` out to the clients listed in `owners`, near-equally.
inline void deal_to(const std::vector<int>& pool, const std::vector<int>& owners,
                    std::vector<std::vector<int>>& sink) {
  for (std::size_t i = 0; i < pool.size(); ++i)
    sink[static_cast<std::size_t>(owners[i % owners.size()])].push_back(pool[i]);
}

}  // namespace detail

// Splits a dataset 80/20 into train/test pools, carves the public share out of
// the training pool, and distributes the rest per scheme. Under the two-class
// scheme each client holds exactly two label classes and its test slice follows
// the same label distribution.
template <typename S>
PartitionPlan partition(const LabeledDataset<S>& ds, int num_clients, PartitionScheme scheme,
                        double public_fraction, std::uint64_t seed) {
  if (public_fraction < 0.0 || public_fraction > 0.5)
    throw ConfigInvalid("public_fraction must lie in [0, 0.5]");
  if (num_clients < 1) throw ConfigInvalid("need at least one client");

  Rng rng(seed);
  const int n = ds.size();
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  rng.shuffle(order);

  const int n_train = static_cast<int>(n * 0.8);
  std::vector<int> train_pool(order.begin(), order.begin() + n_train);
  std::vector<int> test_pool(order.begin() + n_train, order.end());

  PartitionPlan plan;
  plan.scheme = scheme;
  const int n_public = static_cast<int>(static_cast<double>(train_pool.size()) * public_fraction);
  plan.public_indices.assign(train_pool.begin(), train_pool.begin() + n_public);
  std::vector<int> client_pool(train_pool.begin() + n_public, train_pool.end());

  plan.client_train.assign(static_cast<std::size_t>(num_clients), {});
  plan.client_test.assign(static_cast<std::size_t>(num_clients), {});

  if (scheme == PartitionScheme::Iid) {
    // Stratified by class so per-client histograms track the global one.
    auto train_by_class = detail::by_class(client_pool, ds.labels, ds.num_classes);
    auto test_by_class = detail::by_class(test_pool, ds.labels, ds.num_classes);
    std::vector<int> all_clients(static_cast<std::size_t>(num_clients));
    for (int i = 0; i < num_clients; ++i) all_clients[static_cast<std::size_t>(i)] = i;
    for (int c = 0; c < ds.num_classes; ++c) {
      rng.shuffle(train_by_class[static_cast<std::size_t>(c)]);
      rng.shuffle(test_by_class[static_cast<std::size_t>(c)]);
      detail::deal_to(train_by_class[static_cast<std::size_t>(c)], all_clients, plan.client_train);
      detail::deal_to(test_by_class[static_cast<std::size_t>(c)], all_clients, plan.client_test);
    }
  } else {
    // Round-robin class pairs over a shuffled class list.
    std::vector<int> classes(static_cast<std::size_t>(ds.num_classes));
    for (int c = 0; c < ds.num_classes; ++c) classes[static_cast<std::size_t>(c)] = c;
    rng.shuffle(classes);
    std::vector<std::pair<int, int>> pairs;
    for (std::size_t i = 0; i + 1 < classes.size(); i += 2) pairs.emplace_back(classes[i], classes[i + 1]);
    if (classes.size() % 2 == 1) pairs.emplace_back(classes.back(), classes.front());
    std::vector<std::vector<int>> holders_of_class(static_cast<std::size_t>(ds.num_classes));
    for (int i = 0; i < num_clients; ++i) {
      const auto& pr = pairs[static_cast<std::size_t>(i) % pairs.size()];
      holders_of_class[static_cast<std::size_t>(pr.first)].push_back(i);
      holders_of_class[static_cast<std::size_t>(pr.second)].push_back(i);
    }
    auto train_by_class = detail::by_class(client_pool, ds.labels, ds.num_classes);
    auto test_by_class = detail::by_class(test_pool, ds.labels, ds.num_classes);
    for (int c = 0; c < ds.num_classes; ++c) {
      if (holders_of_class[static_cast<std::size_t>(c)].empty()) continue;
      rng.shuffle(train_by_class[static_cast<std::size_t>(c)]);
      rng.shuffle(test_by_class[static_cast<std::size_t>(c)]);
      detail::deal_to(train_by_class[static_cast<std::size_t>(c)], holders_of_class[static_cast<std::size_t>(c)],
                      plan.client_train);
      detail::deal_to(test_by_class[static_cast<std::size_t>(c)], holders_of_class[static_cast<std::size_t>(c)],
                      plan.client_test);
    }
  }

  for (int i = 0; i < num_clients; ++i)
    if (plan.client_train[static_cast<std::size_t>(i)].size() < 2)
      throw InsufficientData("client " + std::to_string(i) + " would receive fewer than 2 samples");
  return plan;
}

template <typename S>
PublicDataset<S> make_public(const LabeledDataset<S>& ds, const PartitionPlan& plan, bool labeled) {
  PublicDataset<S> pub;
  pub.features = gather_rows(ds.features, plan.public_indices);
  pub.labels.reserve(plan.public_indices.size());
  for (int idx : plan.public_indices) pub.labels.push_back(ds.labels[static_cast<std::size_t>(idx)]);
  pub.labeled = labeled;
  pub.num_classes = ds.num_classes;
  return pub;
}

// ---------------------------------------------------------------------------
// Cross-dataset public data

// Reshapes/resizes public features from another dataset onto the clients'
// input spec: images are average-pooled by the integer size ratio, then
// center-cropped or zero-padded; vectors are truncated or zero-padded; images
// may be flattened into vectors. Vector sources cannot become images.
template <typename S>
PublicDataset<S> cross_public(const LabeledDataset<S>& source, const InputSpec& target, bool labeled) {
  PublicDataset<S> out;
  out.labels = source.labels;
  out.labeled = labeled;
  out.num_classes = source.num_classes;
  const InputSpec src = InputSpec{sample_dims(source.features.shape)};

  if (src.dims == target.dims) {
    out.features = source.features;
    return out;
  }

  const int n = source.size();
  if (!src.is_image() && target.is_image())
    throw IncompatibleSpec("cannot lift vector features to an image spec");

  if (src.is_image() && !target.is_image()) {
    Tensor<S> flat = flatten_batch(source.features);
    Tensor<S> resized({n, target.dims[0]});
    const int copy = std::min(flat.dim(1), target.dims[0]);
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < copy; ++k) resized.at(i, k) = flat.at(i, k);
    out.features = std::move(resized);
    return out;
  }

  if (!src.is_image()) {  // vector -> vector
    Tensor<S> resized({n, target.dims[0]});
    const int copy = std::min(src.dims[0], target.dims[0]);
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < copy; ++k) resized.at(i, k) = source.features.at(i, k);
    out.features = std::move(resized);
    return out;
  }

  // image -> image
  const int tc = target.dims[0], th = target.dims[1], tw = target.dims[2];
  if (src.dims[0] != tc)
    throw IncompatibleSpec("channel count mismatch between public source and target spec");
  const int factor = std::max(1, std::min(src.dims[1] / th, src.dims[2] / tw));
  const int ph = src.dims[1] / factor, pw = src.dims[2] / factor;
  Tensor<S> pooled({n, tc, ph, pw});
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < tc; ++c)
      for (int y = 0; y < ph; ++y)
        for (int x = 0; x < pw; ++x) {
          S acc = S(0);
          for (int dy = 0; dy < factor; ++dy)
            for (int dx = 0; dx < factor; ++dx)
              acc += source.features.at(i, c, y * factor + dy, x * factor + dx);
          pooled.at(i, c, y, x) = acc / static_cast<S>(factor * factor);
        }
  Tensor<S> fitted({n, tc, th, tw});
  const int off_y = (ph - th) / 2, off_x = (pw - tw) / 2;  // negative => pad
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < tc; ++c)
      for (int y = 0; y < th; ++y)
        for (int x = 0; x < tw; ++x) {
          const int sy = y + off_y, sx = x + off_x;
          fitted.at(i, c, y, x) =
              (sy >= 0 && sy < ph && sx >= 0 && sx < pw) ? pooled.at(i, c, sy, sx) : S(0);
        }
  out.features = std::move(fitted);
  return out;
}

}  // namespace pfedhr
