#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <string>

#include "cli_util.hpp"
#include "simprop/data.hpp"
#include "test_util.hpp"

using namespace simprop;
namespace fs = std::filesystem;
using namespace simprop::testing;

namespace {

const std::string kTiny =
    " --input-size 32 --feature-channels 8 --fusion-channels 16 --decoder-channels 8"
    " --encoder-channels 4,8,8 --aspp-rates 1,2";
const std::string kQuickTrain = " --epochs 2 --episodes-per-epoch 4 --batch 2 --val-episodes 4";

CliResult run(const std::string& args) { return run_cli(args); }

// Shared 32x32 dataset and a quickly trained tiny checkpoint.
const fs::path& fixture() {
  static const fs::path dir = [] {
    const fs::path d = scratch_dir("cli_fixture");
    REQUIRE(run("--seed 3 gen-data --out " + (d / "data").string() + " --image-size 32 --samples-per-class 10").code ==
            0);
    REQUIRE(run("--seed 1 train --data " + (d / "data").string() + " --out " + (d / "run").string() + kTiny +
                kQuickTrain)
                .code == 0);
    return d;
  }();
  return dir;
}

}  // namespace

TEST_CASE("help and argument errors") {
  CHECK(run("--help").code == 0);
  CHECK(run("train --help").code == 0);
  CHECK(run("").code == 1);
  CHECK(run("no-such-command").code == 1);
  CHECK(run("gen-data --out /tmp/x --no-such-flag").code == 1);
  CHECK(run("gen-data").code == 1);  // --out missing
  CHECK(run("gen-data --out /tmp/x --image-size banana").code == 1);
  CHECK(run("eval --data /nonexistent/manifest.txt --oracle").code == 1);
}

TEST_CASE("gen-data is reproducible at any thread count") {
  const fs::path root = scratch_dir("cli_gen");
  const std::string common = " --image-size 32 --samples-per-class 6";
  REQUIRE(run("--seed 7 --threads 1 gen-data --out " + (root / "a").string() + common).code == 0);
  REQUIRE(run("--seed 7 --threads 4 gen-data --out " + (root / "b").string() + common).code == 0);
  REQUIRE(run("--seed 8 gen-data --out " + (root / "c").string() + common).code == 0);
  CHECK(trees_equal(root / "a", root / "b"));
  CHECK(slurp(root / "a" / "manifest.txt") != slurp(root / "c" / "manifest.txt"));
  CHECK(run("gen-data --out " + (root / "d").string() + " --train-classes 0,1 --test-classes 1,2,3,4").code == 1);
  REQUIRE(run("gen-data --out " + (root / "f").string() + common + " --fold 1").code == 0);
  const SyntheticConfig f = read_manifest(root / "f" / "manifest.txt").config();
  CHECK(f.test_classes == std::vector<int>{2, 3});
}

TEST_CASE("train writes its artifacts and is reproducible at any thread count") {
  const fs::path& fx = fixture();
  const fs::path run_dir = fx / "run";
  CHECK(fs::exists(run_dir / "best.ckpt"));
  CHECK(fs::exists(run_dir / "last.ckpt"));
  CHECK(fs::exists(run_dir / "metrics.csv"));
  const std::string config = slurp(run_dir / "config.txt");
  CHECK(config.find("seed=1") != std::string::npos);
  CHECK(config.find("train.lr=") != std::string::npos);

  const fs::path again = scratch_dir("cli_train_again");
  REQUIRE(run("--seed 1 --threads 3 train --data " + (fx / "data").string() + " --out " + again.string() + kTiny +
              kQuickTrain)
              .code == 0);
  CHECK(trees_equal(run_dir, again));
}

TEST_CASE("exit codes for induced failures") {
  const fs::path& fx = fixture();
  const std::string data = (fx / "data").string();
  const fs::path tmp = scratch_dir("cli_fail");

  SUBCASE("diverging training aborts with 2") {
    CHECK(run("train --data " + data + " --out " + (tmp / "nan").string() + kTiny + kQuickTrain + " --lr 1e30").code ==
          2);
  }
  SUBCASE("missing or corrupt checkpoint gives 1") {
    CHECK(run("eval --data " + data + " --checkpoint " + (tmp / "missing.ckpt").string()).code == 1);
    fs::copy_file(fx / "run" / "best.ckpt", tmp / "trunc.ckpt");
    fs::resize_file(tmp / "trunc.ckpt", fs::file_size(tmp / "trunc.ckpt") / 2);
    CHECK(run("eval --data " + data + " --checkpoint " + (tmp / "trunc.ckpt").string()).code == 1);
    std::ofstream(tmp / "junk.ckpt") << "junk";
    CHECK(run("eval --data " + data + " --checkpoint " + (tmp / "junk.ckpt").string()).code == 1);
  }
  SUBCASE("corrupt dataset gives 1") {
    REQUIRE(run("gen-data --out " + (tmp / "d").string() + " --image-size 32 --samples-per-class 4").code == 0);
    for (const auto& e : fs::recursive_directory_iterator(tmp / "d")) {
      if (e.path().extension() == ".pgm") {
        std::ofstream(e.path(), std::ios::binary) << "P5\n2 2\n255\nab";
        break;
      }
    }
    CHECK(run("eval --oracle --data " + (tmp / "d").string()).code == 1);
  }
  SUBCASE("invalid flag values give 1") {
    CHECK(run("train --data " + data + " --out " + (tmp / "x").string() + " --batch 0").code == 1);
    CHECK(run("eval --data " + data + " --oracle --k 3").code == 1);
    CHECK(run("train --data " + data + " --out " + (tmp / "y").string() + " --input-size 64").code == 1);
  }
}

TEST_CASE("eval") {
  const fs::path& fx = fixture();
  const std::string data = (fx / "data").string();
  const std::string ckpt = (fx / "run" / "best.ckpt").string();

  SUBCASE("oracle scores 1") {
    const CliResult r = run("eval --data " + data + " --oracle --episodes 20 --repeats 2");
    REQUIRE(r.code == 0);
    CHECK(r.out.find("mean,1,20,1.000000,1.000000,1.000000,1.000000") != std::string::npos);
  }
  SUBCASE("byte-reproducible across thread counts and with --ica") {
    const CliResult a = run("--threads 1 eval --data " + data + " --checkpoint " + ckpt + " --episodes 20 --repeats 2");
    const CliResult b = run("--threads 3 eval --data " + data + " --checkpoint " + ckpt + " --episodes 20 --repeats 2");
    const CliResult c =
        run("--threads 2 eval --data " + data + " --checkpoint " + ckpt + " --episodes 20 --repeats 2 --ica");
    REQUIRE(a.code == 0);
    CHECK(a.out == b.out);
    CHECK(a.out == c.out);
    CHECK(a.out.rfind("seed,k,n_episodes,mean_iou,fgbg_iou,", 0) == 0);
  }
  SUBCASE("k = 5 and the identical-input report") {
    const CliResult r = run("eval --data " + data + " --checkpoint " + ckpt + " --episodes 10 --repeats 1 --k 5");
    REQUIRE(r.code == 0);
    CHECK(r.out.find("\n0,5,10,") != std::string::npos);
    const fs::path out = scratch_dir("cli_eval_out") / "report.csv";
    REQUIRE(run("eval --data " + data + " --oracle --episodes 5 --repeats 1 --identical 8 --out " + out.string())
                .code == 0);
    CHECK(slurp(out).find("identical") != std::string::npos);
  }
  SUBCASE("prediction dump") {
    const fs::path dump = scratch_dir("cli_dump");
    REQUIRE(run("eval --data " + data + " --checkpoint " + ckpt + " --episodes 4 --repeats 1 --dump " + dump.string())
                .code == 0);
    CHECK(fs::exists(dump / "repeat_0" / "predictions.manifest"));
    int pgms = 0;
    for (const auto& e : fs::recursive_directory_iterator(dump)) pgms += e.path().extension() == ".pgm" ? 1 : 0;
    CHECK(pgms >= 4);
  }
}

TEST_CASE("predict") {
  const fs::path& fx = fixture();
  const DatasetManifest m = read_manifest(fx / "data" / "manifest.txt");
  const fs::path root = m.root;
  const ManifestRecord& q = m.records.at(0);
  const ManifestRecord& s = m.records.at(1);
  const fs::path out = scratch_dir("cli_predict") / "sub" / "mask.pgm";
  const std::string base = "predict --checkpoint " + (fx / "run" / "best.ckpt").string();
  const CliResult r = run(base + " --query " + (root / q.image_path).string() + " --supports " +
                       (root / s.image_path).string() + " --support-masks " + (root / s.mask_path).string() +
                       " --out " + out.string());
  REQUIRE(r.code == 0);
  CHECK(r.out == out.string() + "\n");
  const Tensor mask = load_mask_pgm(out);
  CHECK(mask.shape() == Shape{32, 32});

  SUBCASE("larger query images keep their size") {
    Rng rng(1);
    const fs::path dir = out.parent_path();
    save_image_ppm(simprop::testing::random_tensor({3, 40, 40}, rng, 0, 1), dir / "q40.ppm");
    save_image_ppm(simprop::testing::random_tensor({3, 40, 40}, rng, 0, 1), dir / "s40.ppm");
    Tensor sm({40, 40});
    for (std::size_t i = 0; i < 400; ++i) sm[i] = 1.0f;
    save_mask_pgm(sm, dir / "s40.pgm");
    REQUIRE(run(base + " --query " + (dir / "q40.ppm").string() + " --supports " + (dir / "s40.ppm").string() +
                " --support-masks " + (dir / "s40.pgm").string() + " --out " + (dir / "m40.pgm").string())
                .code == 0);
    CHECK(load_mask_pgm(dir / "m40.pgm").shape() == Shape{40, 40});
  }
  SUBCASE("mismatched support lists give 1") {
    CHECK(run(base + " --query " + (root / q.image_path).string() + " --supports " + (root / s.image_path).string() +
              " " + (root / q.image_path).string() + " --support-masks " + (root / s.mask_path).string() + " --out " +
              out.string())
              .code == 1);
  }
}

TEST_CASE("ablate and premise") {
  const fs::path& fx = fixture();
  const std::string data = (fx / "data").string();
  SUBCASE("ablate is reproducible at any thread count") {
    const fs::path a = scratch_dir("cli_abl_a"), b = scratch_dir("cli_abl_b");
    const std::string args = " ablate --data " + data + kTiny + kQuickTrain + " --episodes 6 --identical-n 4 --out ";
    REQUIRE(run("--threads 1" + args + a.string()).code == 0);
    REQUIRE(run("--threads 3" + args + b.string()).code == 0);
    CHECK(trees_equal(a, b));
    const std::string csv = slurp(a / "ablation.csv");
    for (const char* row : {"baseline", "dpr", "fbaf", "dpr+fbaf", "dpr+fbaf+ica"}) {
      CHECK(csv.find(std::string("\nmean,") + row + ",") != std::string::npos);
    }
  }
  SUBCASE("premise writes every report") {
    const fs::path out = scratch_dir("cli_premise");
    REQUIRE(run("premise --data " + data + " --checkpoint " + (fx / "run" / "best.ckpt").string() + " --reference " +
                (fx / "run" / "last.ckpt").string() + " --pairs 10 --episodes 6 --identical-n 4 --out " + out.string())
                .code == 0);
    for (const char* f : {"identical_input.csv", "error_overlap.csv", "similarity_ratio.csv", "fgbg_similarity.csv"}) {
      CHECK(fs::exists(out / f));
    }
    CHECK(slurp(out / "error_overlap.csv").find("reconstructed metric") != std::string::npos);
  }
}
