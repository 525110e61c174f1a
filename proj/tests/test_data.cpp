#include <doctest.h>

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "pfedhr/data.hpp"
#include "pfedhr/losses.hpp"
#include "pfedhr/model.hpp"
#include "pfedhr/archzoo.hpp"

using namespace pfedhr;

namespace {

void put_be32(std::string& s, std::uint32_t v) {
  s.push_back(static_cast<char>((v >> 24) & 0xff));
  s.push_back(static_cast<char>((v >> 16) & 0xff));
  s.push_back(static_cast<char>((v >> 8) & 0xff));
  s.push_back(static_cast<char>(v & 0xff));
}

// Two 2x2 images with pixels 0..7, labels {1, 0}.
void write_idx_fixture(const std::string& img_path, const std::string& lbl_path,
                       std::uint32_t img_magic = kIdxImagesMagic, std::uint32_t lbl_magic = kIdxLabelsMagic,
                       std::uint32_t label_count = 2, bool truncate_images = false) {
  std::string img;
  put_be32(img, img_magic);
  put_be32(img, 2);
  put_be32(img, 2);
  put_be32(img, 2);
  for (int p = 0; p < 8; ++p) img.push_back(static_cast<char>(p));
  if (truncate_images) img.resize(img.size() - 3);
  std::ofstream(img_path, std::ios::binary) << img;

  std::string lbl;
  put_be32(lbl, lbl_magic);
  put_be32(lbl, label_count);
  lbl.push_back(1);
  lbl.push_back(0);
  std::ofstream(lbl_path, std::ios::binary) << lbl;
}

}  // namespace

TEST_CASE("idx loader round-trips a byte-level fixture") {
  write_idx_fixture("/tmp/pfedhr_t10k_images", "/tmp/pfedhr_t10k_labels");
  auto ds = load_idx<float>("/tmp/pfedhr_t10k_images", "/tmp/pfedhr_t10k_labels");
  CHECK(ds.size() == 2);
  CHECK(ds.features.shape == std::vector<int>{2, 1, 2, 2});
  CHECK(ds.labels == std::vector<int>{1, 0});
  CHECK(ds.features.at(0, 0, 0, 0) == doctest::Approx(0.0f));
  CHECK(ds.features.at(0, 0, 1, 1) == doctest::Approx(3.0f / 255.0f));
  CHECK(ds.features.at(1, 0, 0, 0) == doctest::Approx(4.0f / 255.0f));
  CHECK(ds.features.at(1, 0, 1, 1) == doctest::Approx(7.0f / 255.0f));
}

TEST_CASE("idx loader rejects a wrong magic") {
  write_idx_fixture("/tmp/pfedhr_badmagic_img", "/tmp/pfedhr_badmagic_lbl", 0x00000999);
  CHECK_THROWS_AS(load_idx<float>("/tmp/pfedhr_badmagic_img", "/tmp/pfedhr_badmagic_lbl"), BadMagic);
}

TEST_CASE("idx loader rejects mismatched counts") {
  write_idx_fixture("/tmp/pfedhr_cnt_img", "/tmp/pfedhr_cnt_lbl", kIdxImagesMagic, kIdxLabelsMagic, 3);
  CHECK_THROWS_AS(load_idx<float>("/tmp/pfedhr_cnt_img", "/tmp/pfedhr_cnt_lbl"), CountMismatch);
}

TEST_CASE("idx loader reports truncation") {
  write_idx_fixture("/tmp/pfedhr_tr_img", "/tmp/pfedhr_tr_lbl", kIdxImagesMagic, kIdxLabelsMagic, 2, true);
  CHECK_THROWS_AS(load_idx<float>("/tmp/pfedhr_tr_img", "/tmp/pfedhr_tr_lbl"), TruncatedFile);
}

TEST_CASE("synthetic blobs are deterministic and class-balanced") {
  auto a = make_synthetic<float>(4, 1000, 8, 42);
  auto b = make_synthetic<float>(4, 1000, 8, 42);
  CHECK(a.features.data == b.features.data);
  CHECK(a.labels == b.labels);

  std::vector<int> counts(4, 0);
  for (int y : a.labels) ++counts[static_cast<std::size_t>(y)];
  for (int c : counts) CHECK(c == 250);
}

TEST_CASE("a linear classifier separates the blobs") {
  auto ds = make_synthetic<float>(4, 600, 8, 9, 2.0);
  Rng rng(5);
  ModelState<float> m;
  m.head = make_classifier<float>(8, 4, rng);
  m.set_mode(Mode::Train);
  std::vector<int> idx(static_cast<std::size_t>(ds.size()));
  for (int i = 0; i < ds.size(); ++i) idx[static_cast<std::size_t>(i)] = i;
  for (int epoch = 0; epoch < 40; ++epoch) {
    Tensor<float> logits = forward(m, ds.features);
    LossValue<float> ce = cross_entropy(logits, ds.labels);
    backward_and_step(m, ce.grad, SgdConfig<float>{0.1f, 0.9f});
  }
  m.set_mode(Mode::Eval);
  Tensor<float> logits = forward_eval(m, ds.features);
  int correct = 0;
  for (int i = 0; i < ds.size(); ++i) {
    int arg = 0;
    for (int k = 1; k < 4; ++k)
      if (logits.at(i, k) > logits.at(i, arg)) arg = k;
    if (arg == ds.labels[static_cast<std::size_t>(i)]) ++correct;
  }
  CHECK(static_cast<double>(correct) / ds.size() > 0.9);
}

TEST_CASE("partition separates public, train and test pools") {
  auto ds = make_synthetic<float>(4, 1200, 8, 7);
  for (double frac : {0.02, 0.05, 0.10}) {
    auto plan = partition(ds, 12, PartitionScheme::TwoClassNonIid, frac, 11);
    const int train_pool = static_cast<int>(1200 * 0.8);
    CHECK(static_cast<int>(plan.public_indices.size()) == static_cast<int>(train_pool * frac));

    std::set<int> public_set(plan.public_indices.begin(), plan.public_indices.end());
    std::set<int> seen;
    for (int c = 0; c < 12; ++c) {
      for (int i : plan.client_train[static_cast<std::size_t>(c)]) {
        CHECK(public_set.count(i) == 0);
        CHECK(seen.insert(i).second);  // disjoint across clients too
      }
      for (int i : plan.client_test[static_cast<std::size_t>(c)]) CHECK(public_set.count(i) == 0);
    }
  }
}

TEST_CASE("two-class partition gives each client exactly two label classes") {
  auto ds = make_synthetic<float>(4, 1600, 8, 3);
  auto plan = partition(ds, 12, PartitionScheme::TwoClassNonIid, 0.1, 5);
  std::set<int> covered;
  for (int c = 0; c < 12; ++c) {
    std::set<int> train_labels, test_labels;
    for (int i : plan.client_train[static_cast<std::size_t>(c)])
      train_labels.insert(ds.labels[static_cast<std::size_t>(i)]);
    for (int i : plan.client_test[static_cast<std::size_t>(c)])
      test_labels.insert(ds.labels[static_cast<std::size_t>(i)]);
    CHECK(train_labels.size() == 2);
    for (int y : test_labels) CHECK(train_labels.count(y) == 1);
    covered.insert(train_labels.begin(), train_labels.end());
  }
  CHECK(covered.size() == 4);  // all classes present somewhere
}

TEST_CASE("iid partition tracks the global histogram within two samples") {
  auto ds = make_synthetic<float>(4, 2000, 8, 13);
  auto plan = partition(ds, 10, PartitionScheme::Iid, 0.1, 17);
  // 2000*0.8 = 1600 train pool, minus 160 public = 1440 spread over 10 clients
  for (int c = 0; c < 10; ++c) {
    std::vector<int> counts(4, 0);
    for (int i : plan.client_train[static_cast<std::size_t>(c)])
      ++counts[static_cast<std::size_t>(ds.labels[static_cast<std::size_t>(i)])];
    const double expected = static_cast<double>(plan.client_train[static_cast<std::size_t>(c)].size()) / 4.0;
    for (int cnt : counts) CHECK(std::fabs(cnt - expected) <= 2.0);
  }
}

TEST_CASE("partition is deterministic under its seed") {
  auto ds = make_synthetic<float>(4, 800, 8, 3);
  auto a = partition(ds, 8, PartitionScheme::TwoClassNonIid, 0.1, 77);
  auto b = partition(ds, 8, PartitionScheme::TwoClassNonIid, 0.1, 77);
  CHECK(a.public_indices == b.public_indices);
  CHECK(a.client_train == b.client_train);
  CHECK(a.client_test == b.client_test);
}

TEST_CASE("partition rejects starved clients") {
  auto ds = make_synthetic<float>(4, 40, 8, 3);
  CHECK_THROWS_AS(partition(ds, 30, PartitionScheme::TwoClassNonIid, 0.5, 3), InsufficientData);
}

TEST_CASE("synthetic datasets export to label-first csv rows") {
  auto ds = make_synthetic<float>(3, 9, 4, 5);
  export_csv(ds, "/tmp/pfedhr_blobs.csv");
  std::ifstream is("/tmp/pfedhr_blobs.csv");
  std::string line;
  int rows = 0;
  while (std::getline(is, line)) {
    ++rows;
    CHECK(std::count(line.begin(), line.end(), ',') == 4);  // label + 4 features
  }
  CHECK(rows == 9);
}

TEST_CASE("cross_public passes a same-spec source through unchanged") {
  auto src = make_synthetic<float>(4, 50, 16, 9);
  auto pub = cross_public(src, InputSpec{{16}}, true);
  CHECK(pub.features.data == src.features.data);
}

TEST_CASE("cross_public resizes 28x28 images to 16x16 by pooling and cropping") {
  LabeledDataset<float> src;
  src.features = Tensor<float>({3, 1, 28, 28});
  Rng rng(5);
  for (auto& v : src.features.data) v = static_cast<float>(rng.uniform());
  src.labels = {0, 1, 2};
  src.num_classes = 3;
  auto pub = cross_public(src, InputSpec{{1, 16, 16}}, false);
  CHECK(pub.features.shape == std::vector<int>{3, 1, 16, 16});
  CHECK(pub.features.all_finite());
}

TEST_CASE("cross_public rejects vector sources for image targets") {
  auto src = make_synthetic<float>(4, 10, 16, 9);
  CHECK_THROWS_AS(cross_public(src, InputSpec{{1, 8, 8}}, true), IncompatibleSpec);
}
