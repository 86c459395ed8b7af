#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "simprop/data.hpp"
#include "test_util.hpp"

using namespace simprop;
namespace fs = std::filesystem;
using simprop::testing::random_tensor;
using simprop::testing::scratch_dir;

namespace {

SyntheticConfig small_config() {
  SyntheticConfig c;
  c.image_size = 32;
  c.samples_per_class = 12;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

bool trees_equal(const fs::path& a, const fs::path& b) {
  std::set<std::string> names_a, names_b;
  for (const auto& e : fs::recursive_directory_iterator(a)) names_a.insert(fs::relative(e.path(), a).string());
  for (const auto& e : fs::recursive_directory_iterator(b)) names_b.insert(fs::relative(e.path(), b).string());
  if (names_a != names_b) return false;
  for (const std::string& n : names_a) {
    if (fs::is_regular_file(a / n) && slurp(a / n) != slurp(b / n)) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("config validation and fold split") {
  SyntheticConfig c = small_config();
  CHECK_NOTHROW(c.validate());
  c.test_classes = {0, 2};
  CHECK_THROWS_AS(c.validate(), ValidationError);  // 2 is also a train class
  c = small_config();
  c.test_classes = {0};
  CHECK_THROWS_AS(c.validate(), ValidationError);  // class 1 unused
  c = small_config();
  c.image_size = 4;
  CHECK_THROWS_AS(c.validate(), ValidationError);

  std::set<int> held_out;
  for (int fold = 0; fold < 3; ++fold) {
    const auto [train, test] = SyntheticConfig::fold_split(5, 2, fold);
    CHECK(train.size() == 3);
    CHECK(test.size() == 2);
    std::set<int> all(train.begin(), train.end());
    for (int t : test) {
      CHECK(all.count(t) == 0);
      all.insert(t);
      held_out.insert(t);
    }
    CHECK(all.size() == 5);
  }
  CHECK(held_out.size() == 5);
}

TEST_CASE("render_sample") {
  const SyntheticConfig cfg = small_config();
  for (int cls = 0; cls < 5; ++cls) {
    for (int id = 0; id < 6; ++id) {
      const ImageSample s = render_sample(cfg, 3, cls, cls * 100 + id);
      CHECK(s.image.shape() == Shape{3, 32, 32});
      CHECK(s.mask.shape() == Shape{32, 32});
      double fg = 0.0;
      for (float v : s.mask.data()) {
        CHECK((v == 0.0f || v == 1.0f));
        fg += v;
      }
      CHECK(fg > 0.0);
      CHECK(fg < 32.0 * 32.0);
      for (float v : s.image.data()) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
      }
    }
  }
  CHECK(render_sample(cfg, 3, 1, 7).image == render_sample(cfg, 3, 1, 7).image);
  CHECK_FALSE(render_sample(cfg, 3, 1, 7).image == render_sample(cfg, 4, 1, 7).image);
}

TEST_CASE("generate_dataset is deterministic and thread-invariant") {
  const SyntheticConfig cfg = small_config();
  const fs::path a = scratch_dir("gen_a"), b = scratch_dir("gen_b"), c = scratch_dir("gen_c");
  const DatasetManifest m = generate_dataset(cfg, 5, a, 1);
  generate_dataset(cfg, 5, b, 1);
  generate_dataset(cfg, 5, c, 4);
  CHECK(trees_equal(a, b));
  CHECK(trees_equal(a, c));
  std::vector<int> counts(5, 0);
  for (const ManifestRecord& r : m.records) ++counts[static_cast<std::size_t>(r.class_id)];
  for (int n : counts) CHECK(n == cfg.samples_per_class);

  SUBCASE("manifest round trip is byte identical") {
    const DatasetManifest read = read_manifest(a / "manifest.txt");
    write_manifest(read, a / "copy.txt");
    CHECK(slurp(a / "manifest.txt") == slurp(a / "copy.txt"));
    CHECK(read.seed == 5);
    const SyntheticConfig back = read.config();
    CHECK(back.image_size == cfg.image_size);
    CHECK(back.train_classes == cfg.train_classes);
    CHECK(back.test_classes == cfg.test_classes);
  }
  SUBCASE("loaded samples match rendering within quantization") {
    const Dataset data = load_dataset(a / "manifest.txt");
    CHECK(data.image_size() == 32);
    const ImageSample& s = data.samples().front();
    const ImageSample r = render_sample(cfg, 5, s.class_id, s.sample_id);
    CHECK(s.mask == r.mask);
    for (std::size_t i = 0; i < s.image.size(); ++i) CHECK(std::abs(s.image[i] - r.image[i]) <= 1.0f / 255.0f);
  }
  SUBCASE("malformed manifest") {
    std::ofstream(a / "bad.txt") << "seed=1\n\n1\t0\tonly-three-fields\n";
    CHECK_THROWS_AS(read_manifest(a / "bad.txt"), ValidationError);
    CHECK_THROWS_AS(read_manifest(a / "nope.txt"), ValidationError);
  }
}

TEST_CASE("sample_episode") {
  const fs::path dir = scratch_dir("episodes");
  generate_dataset(small_config(), 2, dir);
  const Dataset data = load_dataset(dir / "manifest.txt");

  Rng r1(9), r2(9);
  const Episode e1 = sample_episode(data, {2, 3, 4}, 1, r1);
  const Episode e2 = sample_episode(data, {2, 3, 4}, 1, r2);
  CHECK(e1.query.sample_id == e2.query.sample_id);
  CHECK(e1.supports.front().sample_id == e2.supports.front().sample_id);
  REQUIRE(e1.supports.size() == 1);
  CHECK(e1.query.sample_id != e1.supports.front().sample_id);

  Rng rng(10);
  const Episode e5 = sample_episode(data, {0, 1}, 5, rng);
  std::set<int> ids{e5.query.sample_id};
  for (const ImageSample& s : e5.supports) {
    ids.insert(s.sample_id);
    CHECK(s.class_id == e5.class_id);
  }
  CHECK(ids.size() == 6);

  // coverage and disjointness over many draws
  std::set<int> train_classes_seen, train_ids, test_ids;
  Rng tr(11), te(12);
  for (int i = 0; i < 10000; ++i) {
    const Episode t = sample_episode(data, {2, 3, 4}, 1, tr);
    train_classes_seen.insert(t.class_id);
    train_ids.insert(t.query.sample_id);
    train_ids.insert(t.supports.front().sample_id);
    if (i < 1000) {
      const Episode u = sample_episode(data, {0, 1}, 1, te);
      test_ids.insert(u.query.sample_id);
      test_ids.insert(u.supports.front().sample_id);
    }
  }
  CHECK(train_classes_seen == std::set<int>{2, 3, 4});
  for (int id : test_ids) CHECK(train_ids.count(id) == 0);

  CHECK_THROWS_AS(sample_episode(data, {0}, 12, rng), ValidationError);
  CHECK_THROWS_AS(sample_episode(data, {}, 1, rng), ValidationError);
}

TEST_CASE("ica_augment and schedule") {
  Rng rng(13);
  const Tensor img = random_tensor({3, 4, 5}, rng, -2, 2);
  SUBCASE("p = 0 is the identity") {
    Tensor t = img;
    for (int i = 0; i < 100; ++i) CHECK_FALSE(ica_augment(t, 0.0f, rng));
    CHECK(t == img);
  }
  SUBCASE("p = 1 averages channels, preserving the pixel mean") {
    Tensor t = img;
    CHECK(ica_augment(t, 1.0f, rng));
    for (int y = 0; y < 4; ++y) {
      for (int x = 0; x < 5; ++x) {
        CHECK(t.at(0, y, x) == t.at(1, y, x));
        CHECK(t.at(1, y, x) == t.at(2, y, x));
        const double mean = (static_cast<double>(img.at(0, y, x)) + img.at(1, y, x) + img.at(2, y, x)) / 3.0;
        CHECK(t.at(0, y, x) == doctest::Approx(mean).epsilon(1e-6));
      }
    }
  }
  SUBCASE("gray input is a fixed point") {
    Tensor gray({3, 2, 2});
    for (int c = 0; c < 3; ++c) {
      for (int i = 0; i < 4; ++i) gray[static_cast<std::size_t>(c * 4 + i)] = 0.25f * static_cast<float>(i);
    }
    Tensor t = gray;
    ica_augment(t, 1.0f, rng);
    CHECK(t == gray);
  }
  SUBCASE("switch frequency follows p") {
    int fired = 0;
    for (int i = 0; i < 4000; ++i) {
      Tensor t = img;
      fired += ica_augment(t, 0.25f, rng) ? 1 : 0;
    }
    CHECK(fired > 850);
    CHECK(fired < 1150);
  }
  CHECK(switch_prob_schedule(0, 0.25f, 45) == 0.25f);
  CHECK(switch_prob_schedule(45, 0.25f, 45) == doctest::Approx(0.125));
  float prev = 1.0f;
  for (int e = 0; e < 200; ++e) {
    const float p = switch_prob_schedule(e, 0.25f, 45);
    CHECK(p <= prev);
    prev = p;
  }
}

TEST_CASE("PPM / PGM") {
  const fs::path dir = scratch_dir("pnm");
  Rng rng(14);
  Tensor img = random_tensor({3, 5, 7}, rng, 0, 1);
  img[0] = 1.0f;
  img[1] = 0.0f;
  save_image_ppm(img, dir / "a.ppm");
  const Tensor back = load_image_ppm(dir / "a.ppm");
  REQUIRE(back.shape() == img.shape());
  CHECK(back[0] == 1.0f);
  CHECK(back[1] == 0.0f);
  for (std::size_t i = 0; i < img.size(); ++i) CHECK(std::abs(back[i] - img[i]) <= 1.0f / 255.0f);
  CHECK(slurp(dir / "a.ppm").substr(0, 2) == "P6");

  Tensor mask({5, 7});
  for (std::size_t i = 0; i < mask.size(); i += 3) mask[i] = 1.0f;
  save_mask_pgm(mask, dir / "m.pgm");
  CHECK(load_mask_pgm(dir / "m.pgm") == mask);

  {
    std::ofstream f(dir / "bad.pgm", std::ios::binary);
    f << "P5\n1 1\n255\n" << static_cast<char>(17);
  }
  CHECK_THROWS_AS(load_mask_pgm(dir / "bad.pgm"), ValidationError);
  {
    std::ofstream f(dir / "short.ppm", std::ios::binary);
    f << "P6\n4 4\n255\nabc";
  }
  CHECK_THROWS_AS(load_image_ppm(dir / "short.ppm"), ValidationError);
  {
    std::ofstream f(dir / "garbage.ppm", std::ios::binary);
    f << "hello";
  }
  CHECK_THROWS_AS(load_image_ppm(dir / "garbage.ppm"), ValidationError);

  save_mask_pgm(Tensor({4, 4}), dir / "small.pgm");
  CHECK_THROWS_AS(load_sample(dir / "a.ppm", dir / "small.pgm"), ValidationError);
}

TEST_CASE("int list helpers") {
  CHECK(join_ints({1, 22, 3}) == "1,22,3");
  CHECK(parse_ints("1,22,3") == std::vector<int>{1, 22, 3});
  CHECK(parse_ints("").empty());
  CHECK_THROWS_AS(parse_ints("1,x"), ValidationError);
}
