#include "support.hpp"

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

namespace frmdn {
namespace {

namespace fs = std::filesystem;

struct Run {
  int code = -1;
  std::string out;
};

Run cli(const std::string& args) {
  const std::string cmd = std::string(FRMDN_CLI_PATH) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) throw std::runtime_error("popen failed");
  Run r;
  char buf[4096];
  while (std::size_t n = std::fread(buf, 1, sizeof buf, pipe)) r.out.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("frmdn_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
};

double value_after(const std::string& text, const std::string& key) {
  const auto pos = text.find(key + "=");
  if (pos == std::string::npos) return std::nan("");
  return std::stod(text.substr(pos + key.size() + 1));
}

TEST_F(Cli, HelpAndUsageErrors) {
  EXPECT_EQ(cli("--help").code, 0);
  EXPECT_EQ(cli("").code, 2);
  EXPECT_EQ(cli("nonsense").code, 2);
  EXPECT_EQ(cli("gen").code, 2);  // --out missing
  EXPECT_EQ(cli("eval --model x").code, 2);
}

TEST_F(Cli, GenWritesReadableDatasets) {
  for (const std::string kind : {"ar", "modes", "control"}) {
    const auto file = path(kind + ".fseq");
    const auto r = cli("gen --kind " + kind + " --q 3 --t 20 --d 2 --seed 4 --out " + file + " --csv " +
                       path(kind + ".csv"));
    ASSERT_EQ(r.code, 0) << r.out;
    const auto data = read_fseq(file);
    EXPECT_EQ(data.q, 3u);
    EXPECT_EQ(data.t, 20u);
    EXPECT_EQ(data.d_action, kind == "control" ? 2u : 0u);
    EXPECT_TRUE(fs::exists(path(kind + ".csv")));
  }
  const auto ar = read_fseq(path("ar.fseq"));
  EXPECT_EQ(ar.observations, gen_correlated_ar(3, 20, 2, 0.9, 0.8, 4).observations);
  EXPECT_NEAR(value_after(cli("gen --d 4 --corr 0.5 --q 1 --t 2 --out " + path("x.fseq")).out, "entropy_rate"),
              ar_entropy_rate(4, 0.5), 1e-12);
}

TEST_F(Cli, GenRejectsBadParameters) {
  EXPECT_EQ(cli("gen --kind ar --corr 1.5 --out " + path("a.fseq")).code, 2);
  EXPECT_EQ(cli("gen --kind bogus --out " + path("a.fseq")).code, 2);
  EXPECT_EQ(cli("gen --kind ar --rho 1 --out " + path("a.fseq")).code, 2);
}

TEST_F(Cli, TrainEvalSample) {
  ASSERT_EQ(cli("gen --q 8 --t 40 --d 3 --seed 1 --out " + path("train.fseq")).code, 0);
  ASSERT_EQ(cli("gen --q 4 --t 40 --d 3 --seed 2 --out " + path("test.fseq")).code, 0);
  const auto r = cli("train --data " + path("train.fseq") + " --test " + path("test.fseq") +
                     " --k 2 --h 8 --flow-hidden 8 --epochs 2 --window 10 --batch-size 4 --optimizer adam --lr 1e-3"
                     " --out " + path("m.frmd") + " --log " + path("log.csv"));
  ASSERT_EQ(r.code, 0) << r.out;
  std::ifstream log(path("log.csv"));
  std::string text((std::istreambuf_iterator<char>(log)), {});
  EXPECT_NE(text.find("# k=2"), std::string::npos);
  EXPECT_NE(text.find("epoch,split,nll_total,nll_mixture,nll_logdet"), std::string::npos);
  EXPECT_NE(text.find("\n2,test,"), std::string::npos);

  const auto ev = cli("eval --model " + path("m.frmd") + " --data " + path("test.fseq") + " --window 10");
  ASSERT_EQ(ev.code, 0) << ev.out;
  const auto ck = read_checkpoint(path("m.frmd"));
  const auto expect = evaluate(ck.model, read_fseq(path("test.fseq")), 10);
  EXPECT_EQ(value_after(ev.out, "nll_total"), expect.total);
  EXPECT_NEAR(value_after(ev.out, "nll_total"),
              value_after(ev.out, "nll_mixture") + value_after(ev.out, "nll_logdet"), 1e-12);

  const auto s = cli("sample --model " + path("m.frmd") + " --steps 5 --count 2 --seed 3 --init " +
                     path("test.fseq"));
  ASSERT_EQ(s.code, 0) << s.out;
  EXPECT_EQ(std::count(s.out.begin(), s.out.end(), '\n'), 1 + 2 * 6);
  EXPECT_EQ(s.out, cli("sample --model " + path("m.frmd") + " --steps 5 --count 2 --seed 3 --init " +
                       path("test.fseq")).out);
}

TEST_F(Cli, ResumeMatchesUninterruptedRun) {
  ASSERT_EQ(cli("gen --q 8 --t 30 --d 2 --seed 1 --out " + path("d.fseq")).code, 0);
  const std::string common = " --data " + path("d.fseq") + " --k 2 --h 6 --flow-hidden 4 --window 10 --batch-size 4";
  ASSERT_EQ(cli("train" + common + " --epochs 4 --out " + path("full.frmd")).code, 0);
  ASSERT_EQ(cli("train" + common + " --epochs 2 --out " + path("half.frmd")).code, 0);
  const auto r = cli("train --resume " + path("half.frmd") + " --data " + path("d.fseq") +
                     " --window 10 --batch-size 4 --epochs 4 --out " + path("resumed.frmd"));
  ASSERT_EQ(r.code, 0) << r.out;
  const auto a = read_checkpoint(path("full.frmd"));
  const auto b = read_checkpoint(path("resumed.frmd"));
  EXPECT_EQ(a.model.flat_parameters(), b.model.flat_parameters());
  EXPECT_EQ(a.training->optimizer_steps, b.training->optimizer_steps);
}

TEST_F(Cli, FreshFlowMatchesNoFlowAtEpochZero) {
  ASSERT_EQ(cli("gen --q 6 --t 24 --d 3 --seed 3 --out " + path("d.fseq")).code, 0);
  auto epoch0 = [&](const std::string& flow) {
    const auto log = path("log_" + flow + ".csv");
    const auto r = cli("train --data " + path("d.fseq") + " --flow " + flow + " --k 2 --h 6 --epochs 1 --window 8 --out " +
                       path("m.frmd") + " --log " + log);
    EXPECT_EQ(r.code, 0) << r.out;
    std::ifstream in(log);
    for (std::string line; std::getline(in, line);) {
      if (line.rfind("0,train,", 0) == 0) return std::stod(line.substr(8));
    }
    return std::nan("");
  };
  EXPECT_NEAR(epoch0("off"), epoch0("on"), 1e-9);
}

TEST_F(Cli, TrainFailures) {
  ASSERT_EQ(cli("gen --q 2 --t 10 --d 2 --out " + path("d.fseq")).code, 0);
  EXPECT_EQ(cli("train --data " + path("d.fseq") + " --structure full --out " + path("m.frmd")).code, 2);
  EXPECT_EQ(cli("train --data " + path("d.fseq") + " --k 0 --out " + path("m.frmd")).code, 2);
  EXPECT_EQ(cli("train --data " + path("d.fseq")).code, 2);
  EXPECT_EQ(cli("train --data " + path("missing.fseq") + " --out " + path("m.frmd")).code, 1);
  std::ofstream(path("junk.fseq")) << "not a dataset";
  EXPECT_EQ(cli("train --data " + path("junk.fseq") + " --out " + path("m.frmd")).code, 1);
  EXPECT_EQ(cli("eval --model " + path("junk.fseq") + " --data " + path("d.fseq")).code, 1);
  std::ofstream(path("bad.cfg")) << "k = 2\nunknown_key = 1\n";
  EXPECT_EQ(cli("train --config " + path("bad.cfg") + " --data " + path("d.fseq") + " --out " + path("m.frmd")).code,
            2);
}

TEST_F(Cli, ConfigFileWithFlagOverride) {
  ASSERT_EQ(cli("gen --q 4 --t 12 --d 2 --out " + path("d.fseq")).code, 0);
  std::ofstream(path("run.cfg")) << "# small run\nk = 3\nhidden = 5\nepochs = 1\nwindow = 6\nstructure = tied\n";
  const auto r = cli("train --config " + path("run.cfg") + " --h 7 --data " + path("d.fseq") + " --out " +
                     path("m.frmd"));
  ASSERT_EQ(r.code, 0) << r.out;
  const auto ck = read_checkpoint(path("m.frmd"));
  EXPECT_EQ(ck.model.config.k, 3u);
  EXPECT_EQ(ck.model.config.hidden, 7u);
  EXPECT_EQ(ck.model.config.structure, Structure::tied);
}

TEST_F(Cli, Gradcheck) {
  for (const std::string s : {"diagonal", "tied", "logistic"}) {
    const auto r = cli("gradcheck --structure " + s);
    EXPECT_EQ(r.code, 0) << r.out;
    EXPECT_LT(value_after(r.out, "max_relative_error"), 1e-4) << s;
  }
  const auto documented = cli("gradcheck --d 3 --k 2 --h 8 --flow-depth 2 --seed 0");
  EXPECT_EQ(documented.code, 0) << documented.out;
  EXPECT_LT(value_after(documented.out, "max_relative_error"), 1e-4);
  EXPECT_EQ(cli("gradcheck --d-action 2").code, 0);
  EXPECT_EQ(cli("gradcheck --step 0.5").code, 2);
  EXPECT_EQ(cli("gradcheck --t 1").code, 2);
  EXPECT_EQ(cli("gradcheck --tolerance 0").code, 1);
}

TEST_F(Cli, ParamCount) {
  const auto r = cli("paramcount --k 5 --d 32 --structure full");
  ASSERT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("full,5,32,5,160,2640,2805"), std::string::npos) << r.out;
  EXPECT_NE(cli("paramcount --k 5 --d 32 --structure diagonal").out.find("diagonal,5,32,5,160,160,325"),
            std::string::npos);
  // Per-component scales plus the shared d x d matrix.
  EXPECT_NE(cli("paramcount --k 5 --d 32 --structure tied").out.find("tied,5,32,5,160,1184,1349"), std::string::npos);
  EXPECT_EQ(cli("paramcount --structure round").code, 2);
  EXPECT_EQ(cli("paramcount --k 0").code, 2);
}

TEST_F(Cli, Dream) {
  ASSERT_EQ(cli("gen --kind control --q 16 --t 32 --d 2 --d-action 1 --out " + path("c.fseq")).code, 0);
  ASSERT_EQ(cli("train --data " + path("c.fseq") + " --k 1 --h 3 --epochs 2 --window 8 --out " + path("c.frmd")).code,
            0);
  const std::string args = "dream --model " + path("c.frmd") + " --generations 4 --popsize 6 --horizon 5 --seed 2";
  const auto r = cli(args + " --log " + path("dream.csv"));
  ASSERT_EQ(r.code, 0) << r.out;
  std::ifstream in(path("dream.csv"));
  std::string text((std::istreambuf_iterator<char>(in)), {});
  EXPECT_NE(text.find("generation,mean_reward,best_reward,sigma\n"), std::string::npos);
  EXPECT_NE(text.find("\n4,"), std::string::npos);
  EXPECT_EQ(cli(args).out, cli(args + " --threads 3").out);

  ASSERT_EQ(cli("gen --q 4 --t 12 --d 2 --out " + path("a.fseq")).code, 0);
  ASSERT_EQ(cli("train --data " + path("a.fseq") + " --k 1 --h 3 --epochs 1 --window 6 --out " + path("a.frmd")).code,
            0);
  EXPECT_EQ(cli("dream --model " + path("a.frmd")).code, 2);  // no action input
  EXPECT_EQ(cli("dream --model " + path("c.frmd") + " --reward bogus").code, 2);
  EXPECT_EQ(cli("dream --model " + path("c.frmd") + " --popsize 1").code, 2);
}

}  // namespace
}  // namespace frmdn
