#include <doctest.h>

#include "mthd/checkpoint.hpp"
#include "test_util.hpp"

#include <json.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::string kSmall =
    " --set data.n_labeled=30 --set data.n_unlabeled_complete=8 --set data.n_unlabeled_incomplete=4"
    " --set data.height=32 --set data.width=32 --set model.stem_channels=4 --set model.trunk_channels=8"
    " --set model.head_channels=8 --set train.batch_size=2";

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Run {
  int code;
  std::string output;
};

Run cli(const std::string& args, const fs::path& dir) {
  const auto log = dir / "cli.log";
  const std::string cmd = std::string(MTHD_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(log)};
}

bool same_tree(const fs::path& a, const fs::path& b) {
  std::size_t files = 0;
  for (const auto& entry : fs::recursive_directory_iterator(a)) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), a);
    if (!fs::exists(b / rel) || slurp(entry.path()) != slurp(b / rel)) return false;
    ++files;
  }
  return files > 0;
}

}  // namespace

TEST_CASE("command line workflow on a tiny dataset") {
  const auto dir = scratch_dir("cli");
  const std::string data = " --data " + (dir / "data").string();
  const std::string base = " --seed 3" + kSmall + data;

  auto r = cli("generate-data" + base, dir);
  REQUIRE(r.code == 0);
  CHECK(r.output.find("42 studies (30 labeled / 8 complete / 4 incomplete)") != std::string::npos);

  SUBCASE("existing data is kept unless forced, and regeneration is reproducible") {
    CHECK(cli("generate-data" + base, dir).code != 0);
    CHECK(cli("generate-data --force" + base + " --out " + (dir / "again").string(), dir).code == 0);
    CHECK(same_tree(dir / "data", dir / "again"));
    CHECK(cli("generate-data --seed 4" + kSmall + " --out " + (dir / "other").string(), dir).code == 0);
    CHECK(!same_tree(dir / "data", dir / "other"));
  }

  SUBCASE("config errors are reported") {
    CHECK(cli("train-supervised" + base + " --set train.nope=1", dir).code == 1);
    r = cli("train-ssl" + base + " --out " + (dir / "x").string(), dir);
    CHECK(r.code != 0);
    CHECK(r.output.find("init-checkpoint") != std::string::npos);
  }

  SUBCASE("train, fine-tune, evaluate, plot") {
    const auto sup_dir = dir / "sup", ssl_dir = dir / "ssl", eval_dir = dir / "eval";
    r = cli("train-supervised" + base + " --set train.steps=20 --set train.eval_every=10 --out " +
                 sup_dir.string(),
             dir);
    REQUIRE(r.code == 0);
    const auto sup_ckpt = mthd::load_checkpoint(sup_dir / "last.ckpt");
    CHECK(sup_ckpt.step == 20);
    CHECK(!sup_ckpt.teacher);

    r = cli("train-ssl" + base + " --set train.steps=6 --labeled-fraction 0.5 --init-checkpoint " +
                 (sup_dir / "last.ckpt").string() + " --out " + ssl_dir.string(),
             dir);
    REQUIRE(r.code == 0);
    const auto ssl_ckpt = mthd::load_checkpoint(ssl_dir / "last.ckpt");
    CHECK(ssl_ckpt.phase == "ssl");
    CHECK(ssl_ckpt.teacher);

    r = cli("evaluate" + base + " --split all --sequences seq1,seq3 --checkpoint " +
                 (ssl_dir / "last.ckpt").string() + " --out " + eval_dir.string(),
             dir);
    REQUIRE(r.code == 0);
    const auto report = json::parse(slurp(eval_dir / "eval.json"));
    CHECK(report.at("sensitivities").size() == 5);
    for (double s : report.at("sensitivities")) CHECK((s >= 0 && s <= 1));
    CHECK(fs::exists(eval_dir / "predictions.json"));

    const auto svg = dir / "froc.svg";
    r = cli("plot-froc " + sup_dir.string() + " " + ssl_dir.string() + " --labels baseline,teacher --out " +
                 svg.string(),
             dir);
    REQUIRE(r.code == 0);
    const auto text = slurp(svg);
    CHECK(text.find("baseline") != std::string::npos);
    CHECK(text.find("teacher") != std::string::npos);
  }

  SUBCASE("ablation table") {
    const auto out = dir / "ablation";
    r = cli("run-ablation" + base +
                 " --rows supervised,full --set ablation.supervised_steps=10 --set ablation.ssl_steps=4 --out " +
                 out.string(),
             dir);
    REQUIRE(r.code == 0);
    const auto rows = json::parse(slurp(out / "ablation.json"));
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].at("row") == "supervised");
    CHECK(rows[1].at("row") == "full");
    CHECK(slurp(out / "ablation.txt").find("full") != std::string::npos);
  }
}
