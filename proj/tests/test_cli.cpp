#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fixtures.hpp"
#include "mesurv/cli.hpp"

using namespace mesurv;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out, err;
};

Outcome run(std::vector<std::string> args) {
  std::vector<const char*> argv{"mesurv"};
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

// Runs the installed executable through the shell.
Outcome run_binary(const std::string& args, const fs::path& dir) {
  const fs::path o = dir / "stdout.txt", e = dir / "stderr.txt";
  const std::string cmd = std::string(MESURV_CLI) + " " + args + " >" + o.string() + " 2>" + e.string();
  const int status = std::system(cmd.c_str());
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(o), slurp(e)};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("mesurv_cli_" + std::to_string(::getpid()) + "_" +
                                        ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  fs::path dir_;
};

std::vector<std::string> catheter_fit_args() {
  return {"fit", "--data", fixtures::data_path("catheter.csv"), "--time", "time", "--event", "infect", "--fixed",
          "age,female", "--re", "patient:", "--distribution", "rp", "--df", "3", "--threads", "1"};
}

int count_lines(const std::string& s) { return static_cast<int>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST_F(Cli, FitPrintsTable) {
  const Outcome r = run(catheter_fit_args());
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("Fitting fixed effects model:"), std::string::npos);
  EXPECT_NE(r.out.find("M1[patient]"), std::string::npos);
  EXPECT_NE(r.out.find("sd(M1)"), std::string::npos);
  EXPECT_NE(r.out.find("-1.46"), std::string::npos);
  EXPECT_NE(r.out.find("Warning: Baseline spline coefficients not shown"), std::string::npos);
}

TEST_F(Cli, TvcRowShown) {
  auto args = catheter_fit_args();
  args.insert(args.end(), {"--tvc", "female", "--dftvc", "1"});
  const Outcome r = run(args);
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("female#rcs()"), std::string::npos) << r.out;
}

TEST_F(Cli, DfOutOfRange) {
  auto args = catheter_fit_args();
  args[14] = "12";
  const Outcome r = run_binary([&] {
    std::string s;
    for (const auto& a : args) s += "'" + a + "' ";
    return s;
  }(), dir_);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("df must be between 1 and 10"), std::string::npos) << r.err;
  EXPECT_EQ(count_lines(r.err), 1);
}

TEST_F(Cli, ErrorsAreOneLine) {
  const std::vector<std::vector<std::string>> cases = {
      {"fit", "--data", (dir_ / "missing.csv").string(), "--time", "t", "--event", "d"},
      {"fit", "--data", fixtures::data_path("catheter.csv"), "--time", "time", "--event", "infect", "--fixed", "weight"},
      {"fit", "--data", fixtures::data_path("catheter.csv"), "--time", "time", "--event", "infect", "--distribution", "lognormal"},
      {"predict", "--model", (dir_ / "none.json").string(), "--kind", "survival"},
      {"simulate", "--dist", "weibull", "--lambda", "-1", "--maxt", "5"},
      {"frobnicate"},
  };
  for (const auto& c : cases) {
    const Outcome r = run(c);
    EXPECT_NE(r.code, 0) << c[0];
    EXPECT_EQ(count_lines(r.err), 1) << r.err;
    EXPECT_EQ(r.err.rfind("error: ", 0), 0u) << r.err;
  }
}

TEST_F(Cli, FitPredictRoundTripIsBitExact) {
  auto args = catheter_fit_args();
  const fs::path model = dir_ / "m.json";
  args.insert(args.end(), {"--out", model.string()});
  ASSERT_EQ(run(args).code, 0);
  const Outcome p = run({"predict", "--model", model.string(), "--kind", "survival", "--ci", "--at", "age=45,female=1",
                     "--fixedonly", "--times", "10:562:50"});
  ASSERT_EQ(p.code, 0) << p.err;

  // same fit in memory
  const Dataset d = fixtures::catheter();
  FitOptions o;
  o.threads = 1;
  const FittedModel fit = fit_model(Model::prepare(fixtures::catheter_spec(), d), d, o);
  PredictionRequest req;
  req.kind = PredictKind::survival;
  req.ci = true;
  req.fixedonly = true;
  req.at = {{"age", 45.0}, {"female", 1.0}};
  for (double t = 10.0; t <= 562.0; t += 50.0) req.times.push_back(t);
  const auto rows = predict(fit, Dataset{}, req);

  std::istringstream in(p.out);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "rowid,time,estimate,lci,uci");
  std::size_t i = 0;
  while (std::getline(in, line)) {
    ASSERT_LT(i, rows.size());
    std::vector<double> v;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) v.push_back(std::stod(cell));
    EXPECT_EQ(v[2], rows[i].estimate);
    EXPECT_EQ(v[3], rows[i].lci);
    EXPECT_EQ(v[4], rows[i].uci);
    ++i;
  }
  EXPECT_EQ(i, rows.size());
}

TEST_F(Cli, ModelFileRoundTripInMemory) {
  const Dataset d = fixtures::catheter();
  FitOptions o;
  o.threads = 1;
  const FittedModel fit = fit_model(Model::prepare(fixtures::catheter_spec(true), d), d, o);
  std::stringstream buf;
  save_model(buf, ModelFile{fit, OutcomeColumns{"time", "infect", {}, {}}});
  const ModelFile back = load_model(buf);
  EXPECT_EQ(back.fit.theta.values, fit.theta.values);
  EXPECT_EQ(back.fit.vcov, fit.vcov);
  EXPECT_EQ(back.fit.loglik, fit.loglik);
  EXPECT_EQ(back.outcome.event, "infect");
  for (auto kind : {PredictKind::survival, PredictKind::hazard, PredictKind::rmst, PredictKind::eta}) {
    PredictionRequest req;
    req.kind = kind;
    req.ci = true;
    const auto a = predict(fit, d, req), b = predict(back.fit, d, req);
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_EQ(a[i].estimate, b[i].estimate);
      EXPECT_EQ(a[i].lci, b[i].lci);
      EXPECT_EQ(a[i].uci, b[i].uci);
    }
  }
  // refuses newer formats
  std::string text = buf.str();
  std::stringstream again;
  save_model(again, ModelFile{fit, {}});
  text = again.str();
  const auto pos = text.find("\"version\"");
  ASSERT_NE(pos, std::string::npos);
  const auto colon = text.find(':', pos), end = text.find_first_of(",}", colon);
  text.replace(colon + 1, end - colon - 1, "99");
  std::istringstream newer(text);
  EXPECT_THROW(load_model(newer), Error);
}

TEST_F(Cli, EtaEqualsFixedPart) {
  auto args = catheter_fit_args();
  const fs::path model = dir_ / "m.json";
  args.insert(args.end(), {"--tvc", "female", "--dftvc", "1", "--out", model.string()});
  ASSERT_EQ(run(args).code, 0);
  std::ifstream in(model);
  const ModelFile mf = load_model(in);
  // tvc terms vanish where every tvc basis is zero; with orthogonalized bases that is
  // where the transformed value is zero
  const SplineBasis& b = mf.fit.model.tvc_bases.at(0);
  const double t0 = std::exp(b.center()[0]);
  ASSERT_NEAR(b.value(std::log(t0))[0], 0.0, 1e-12);
  std::ostringstream times;
  times.precision(17);
  times << t0 << ":" << t0 << ":1";
  const Outcome p = run({"predict", "--model", model.string(), "--kind", "eta", "--at", "age=45,female=1", "--fixedonly",
                     "--times", times.str()});
  ASSERT_EQ(p.code, 0) << p.err;
  const auto& th = mf.fit.theta.values;
  const std::string row = p.out.substr(p.out.find('\n') + 1);
  const double eta = std::stod(row.substr(row.rfind(',') + 1));
  EXPECT_NEAR(eta, 45.0 * th[0] + th[1], 1e-12);
}

TEST_F(Cli, SimulateDeterministicAndCounts) {
  const std::vector<std::string> base = {"simulate", "--clusters", "30", "--per-cluster", "100", "--dist", "weibull",
                                         "--lambda", "0.1", "--gamma", "1.2", "--beta", "trt=-0.5", "--re-sd", "0.5",
                                         "--maxt", "5", "--seed", "278945"};
  auto a = base, b = base;
  a.insert(a.end(), {"--out", (dir_ / "a.csv").string()});
  b.insert(b.end(), {"--out", (dir_ / "b.csv").string()});
  ASSERT_EQ(run(a).code, 0);
  ASSERT_EQ(run(b).code, 0);
  const std::string sa = slurp(dir_ / "a.csv");
  EXPECT_EQ(sa, slurp(dir_ / "b.csv"));
  EXPECT_EQ(count_lines(sa), 3001);
  EXPECT_EQ(sa.substr(0, sa.find('\n')), "clusterid,trt,time,event");
  ColumnSchema sc{{"clusterid", ColumnRole::identifier}, {"trt", ColumnRole::numeric}, {"time", ColumnRole::numeric},
                  {"event", ColumnRole::numeric}};
  const Dataset d = declare_survival(fixtures::from_text(sa, sc), "time", "event");
  EXPECT_NEAR(static_cast<double>(d.summary().events), 1239.0, 80.0);
}

TEST_F(Cli, SimulateTinyMaxTimeCensorsNearlyAll) {
  const Outcome r = run({"simulate", "--clusters", "10", "--per-cluster", "100", "--dist", "weibull", "--lambda", "0.1",
                     "--gamma", "1.2", "--maxt", "0.001", "--seed", "3"});
  ASSERT_EQ(r.code, 0) << r.err;
  ColumnSchema sc{{"clusterid", ColumnRole::identifier}, {"time", ColumnRole::numeric}, {"event", ColumnRole::numeric}};
  const Dataset d = fixtures::from_text(r.out, sc);
  double ev = 0.0;
  for (double e : d.column("event").values) ev += e;
  EXPECT_LE(ev, 2.0);
}

TEST_F(Cli, BinaryRunsFitAndPredict) {
  const fs::path model = dir_ / "m.json";
  std::string args;
  for (const auto& a : catheter_fit_args()) args += "'" + a + "' ";
  const Outcome f = run_binary(args + "--out '" + model.string() + "'", dir_);
  ASSERT_EQ(f.code, 0) << f.err;
  const Outcome p = run_binary("predict --model '" + model.string() + "' --kind rmst --marginal --ci --at age=45,female=0 --times 100:500:100",
                           dir_);
  ASSERT_EQ(p.code, 0) << p.err;
  EXPECT_EQ(count_lines(p.out), 6);
  const Outcome bad = run_binary("predict --model '" + model.string() + "' --kind median --times 1:2:1", dir_);
  EXPECT_EQ(bad.code, 2);
  EXPECT_EQ(count_lines(bad.err), 1);
}
