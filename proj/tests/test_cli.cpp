#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;

namespace {

struct CmdResult {
  int code = -1;
  std::string out;
};

fs::path fresh_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("acmn_cli_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is.good());
  return std::string(std::istreambuf_iterator<char>(is), {});
}

// Runs the installed binary with the given arguments, capturing stdout.
CmdResult run(const std::string& args, const std::string& env = "") {
  static int serial = 0;
  fs::path outfile =
      fs::temp_directory_path() / ("acmn_cli_out_" + std::to_string(serial++));
  std::string cmd = (env.empty() ? "" : env + " ") + std::string(ACMN_BIN) +
                    " " + args + " > " + outfile.string() + " 2>/dev/null";
  int status = std::system(cmd.c_str());
  CmdResult r;
  REQUIRE(status != -1);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = file_bytes(outfile);
  fs::remove(outfile);
  return r;
}

// Relative path -> contents for every regular file under root.
std::map<std::string, std::string> dir_contents(const fs::path& root) {
  std::map<std::string, std::string> m;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file())
      m[fs::relative(e.path(), root).string()] = file_bytes(e.path());
  return m;
}

const std::string kTinyModel =
    "--grid 2 --c-vis 3 --d-word 6 --d-hidden 4 --d-fuse 5 --d-att 4 "
    "--heights 3 --mlp 4 4 --coords";

}  // namespace

TEST_CASE("cli exit codes") {
  CHECK(run("--help").code == 0);
  CHECK(run("gen-data").code == 2);             // missing --out
  CHECK(run("no-such-command").code == 2);      // unknown subcommand
  CHECK(run("stats").code == 2);                // neither source given
  CHECK(run("stats --conllu /nonexistent/x.conllu").code == 1);
  CHECK(run("eval --checkpoint /nonexistent --dataset /nonexistent").code == 1);
}

TEST_CASE("gen-data is reproducible byte for byte", "[slow]") {
  fs::path a = fresh_dir("gen_a"), b = fresh_dir("gen_b");
  CHECK(run("gen-data --out " + a.string() + " --train 3 --test 2 --seed 9").code == 0);
  CHECK(run("gen-data --out " + b.string() + " --train 3 --test 2 --seed 9").code == 0);
  auto ca = dir_contents(a), cb = dir_contents(b);
  CHECK(ca.size() == cb.size());
  CHECK(ca == cb);

  fs::path c = fresh_dir("gen_c");
  CHECK(run("gen-data --out " + c.string() + " --train 3 --test 2 --seed 10").code == 0);
  CHECK(dir_contents(c) != ca);
}

TEST_CASE("compile and stats emit consistent json") {
  fs::path dir = fresh_dir("parse");
  {
    std::ofstream f(dir / "one.conllu");
    f << "1\tdog\tdog\tNOUN\t_\t_\t2\tnsubj\t_\t_\n"
         "2\tbarks\tbark\tVERB\t_\t_\t0\troot\t_\t_\n";
  }

  CmdResult st = run("stats --conllu " + (dir / "one.conllu").string());
  REQUIRE(st.code == 0);
  nlohmann::json sj = nlohmann::json::parse(st.out);
  CHECK(sj.at("deprels").at("NSUBJ").get<long>() == 1);
  CHECK(sj.at("edges").get<long>() == 1);
  long total = sj.at("classes").at("ClausalPredicate").get<long>() +
               sj.at("classes").at("Modifier").get<long>() +
               sj.at("classes").at("Neutral").get<long>();
  CHECK(total == sj.at("edges").get<long>());

  CmdResult cp = run("compile --conllu " + (dir / "one.conllu").string());
  REQUIRE(cp.code == 0);
  nlohmann::json pj = nlohmann::json::parse(cp.out);
  REQUIRE(pj.is_array());
  REQUIRE(pj.size() == 1);
  // "barks" is not a noun leaf once "dog" hangs off it; both survive pruning.
  CHECK(pj[0].at("steps").size() == 2);
  CHECK(pj[0].at("steps")[1].at("children")[0][1].get<std::string>() == "P");
}

TEST_CASE("stats over a dataset covers both splits") {
  fs::path data = fresh_dir("stats_data");
  REQUIRE(run("gen-data --out " + data.string() + " --train 2 --test 1 --seed 4").code == 0);
  CmdResult st = run("stats --dataset " + data.string());
  REQUIRE(st.code == 0);
  nlohmann::json sj = nlohmann::json::parse(st.out);
  long total = sj.at("classes").at("ClausalPredicate").get<long>() +
               sj.at("classes").at("Modifier").get<long>() +
               sj.at("classes").at("Neutral").get<long>();
  CHECK(total == sj.at("edges").get<long>());
  CHECK(sj.at("edges").get<long>() > 0);
}

TEST_CASE("train, eval, and dump-attention round trip", "[slow]") {
  fs::path data = fresh_dir("pipe_data");
  fs::path rundir = fresh_dir("pipe_run");
  fs::path att = fresh_dir("pipe_att");
  REQUIRE(run("gen-data --out " + data.string() + " --train 3 --test 2 --seed 6").code == 0);

  CmdResult tr = run("train --dataset " + data.string() + " --out " +
                     rundir.string() + " --epochs 2 --seed 3 " + kTinyModel);
  REQUIRE(tr.code == 0);
  nlohmann::json tj = nlohmann::json::parse(tr.out);
  CHECK(tj.at("epoch").get<int>() == 2);
  CHECK(tj.at("train_loss").get<double>() > 0);
  CHECK(fs::exists(rundir / "latest.ckpt"));
  {
    std::ifstream m(rundir / "metrics.jsonl");
    std::string line;
    int lines = 0;
    while (std::getline(m, line)) {
      nlohmann::json j = nlohmann::json::parse(line);
      CHECK(j.contains("eval_rel"));
      CHECK(j.contains("eval_nonrel"));
      CHECK(j.contains("wall_seconds"));
      ++lines;
    }
    CHECK(lines == 2);
  }

  CmdResult ev = run("eval --checkpoint " + (rundir / "latest.ckpt").string() +
                     " --dataset " + data.string() + " --debug");
  REQUIRE(ev.code == 0);
  nlohmann::json ej = nlohmann::json::parse(ev.out);
  CHECK(ej.at("n").get<long>() == 40);
  CHECK(ej.at("overall").get<double>() >= 0.0);
  CHECK(ej.at("overall").get<double>() <= 1.0);
  CHECK(ej.contains("relational"));
  CHECK(ej.contains("non_relational"));

  // Resuming from the checkpoint continues the epoch count.
  CmdResult tr2 = run("train --dataset " + data.string() + " --out " +
                      rundir.string() + " --epochs 3 --seed 3 --resume " +
                      kTinyModel);
  REQUIRE(tr2.code == 0);
  CHECK(nlohmann::json::parse(tr2.out).at("epoch").get<int>() == 3);

  CmdResult da = run("dump-attention --checkpoint " +
                     (rundir / "latest.ckpt").string() + " --dataset " +
                     data.string() + " --scene 1 --question 12 --out " +
                     att.string());
  REQUIRE(da.code == 0);
  nlohmann::json rec = nlohmann::json::parse(file_bytes(att / "1_12.json"));
  REQUIRE(rec.at("nodes").size() > 0);
  for (const auto& node : rec.at("nodes")) {
    double sum = 0;
    for (double a : node.at("att")) sum += a;
    CHECK(std::abs(sum - 1.0) < 1e-5);
    fs::path pgm = att / ("1_12_" +
                          std::to_string(&node - &*rec.at("nodes").begin()) +
                          "_" + node.at("form").get<std::string>() + ".pgm");
    CHECK(fs::exists(pgm));
  }
  std::string answers[] = {"circle", "square", "yes", "no", "1",
                           "2",      "3",      "4",   "5",  "6"};
  bool ok = false;
  for (const std::string& a : answers) ok |= rec.at("predicted") == a;
  CHECK(ok);
}

TEST_CASE("worker count can come from the environment", "[slow]") {
  fs::path data = fresh_dir("env_data");
  fs::path r1 = fresh_dir("env_run1"), r2 = fresh_dir("env_run2");
  REQUIRE(run("gen-data --out " + data.string() + " --train 2 --test 1 --seed 8").code == 0);

  std::string base = "train --dataset " + data.string() +
                     " --epochs 1 --seed 5 " + kTinyModel + " --out ";
  CHECK(run(base + r1.string(), "ACMN_THREADS=2").code == 0);
  CHECK(run(base + r2.string(), "ACMN_THREADS=bogus").code == 1);
}
