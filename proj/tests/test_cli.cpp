#include <gtest/gtest.h>
#include <httplib.h>

#include <csignal>
#include <cstring>
#include <fcntl.h>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <sys/wait.h>
#include <thread>
#include <unistd.h>

#include "support.hpp"

using triage::testing::source_path;
using triage::testing::temp_dir;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out;
};

Outcome cli(const std::string& args, const fs::path& scratch) {
  const auto out = scratch / "stdout.txt";
  const std::string cmd = std::string(TRIAGE_CLI_PATH) + " " + args + " > " + out.string() + " 2> " +
                          (scratch / "stderr.txt").string();
  const int status = std::system(cmd.c_str());
  std::ifstream in(out);
  std::stringstream ss;
  ss << in.rdbuf();
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override { dir_ = temp_dir(::testing::UnitTest::GetInstance()->current_test_info()->name()); }
  void TearDown() override { fs::remove_all(dir_); }

  Outcome run(const std::string& args) { return cli(args, dir_); }
  std::string corpus_replay(const std::string& out) {
    const auto c = source_path("data/corpus");
    return "replay --input " + (c / "tweets.jsonl").string() + " --manifest " + (c / "manifest.jsonl").string() +
           " --config " + (c / "pipeline.conf").string() + " --out " + (dir_ / out).string();
  }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
  EXPECT_EQ(run("replay --input x --manifest y").code, 2);
  EXPECT_EQ(run("replay --input x --manifest y --out z --bogus").code, 2);
  EXPECT_EQ(run("report --format xml").code, 2);
  EXPECT_EQ(run("sample --window-hours 4 --none-fraction 1.5").code, 2);
  EXPECT_EQ(run("sample --none-fraction 0.1").code, 2);
  EXPECT_EQ(run("serve --port 70000").code, 2);
  EXPECT_EQ(run("--help").code, 0);
}

TEST_F(Cli, RuntimeFailuresExitOne) {
  EXPECT_EQ(run("replay --input /nonexistent.jsonl --manifest " + source_path("data/corpus/manifest.jsonl").string() +
                " --out " + (dir_ / "o").string()).code, 1);
  EXPECT_EQ(run("replay --input x --manifest /nonexistent/m.jsonl --out " + (dir_ / "o").string()).code, 1);
  EXPECT_EQ(run("evaluate --judgments /nonexistent.jsonl --out " + (dir_ / "e").string()).code, 1);
  EXPECT_EQ(run("report --state " + dir_.string()).code, 1);
  std::ofstream(dir_ / "bad.conf") << "[dedup]\nmystery = 1\n";
  std::ofstream(dir_ / "empty.jsonl");
  EXPECT_EQ(run("replay --input " + (dir_ / "empty.jsonl").string() + " --manifest " + (dir_ / "empty.jsonl").string() +
                " --config " + (dir_ / "bad.conf").string() + " --out " + (dir_ / "o").string()).code, 1);
}

TEST_F(Cli, ReplayOfEmptyInputIsAllZero) {
  std::ofstream(dir_ / "empty.jsonl");
  auto r = run("replay --input " + (dir_ / "empty.jsonl").string() + " --manifest " + (dir_ / "empty.jsonl").string() +
               " --out " + (dir_ / "run").string());
  ASSERT_EQ(r.code, 0);
  auto acc = json::parse(slurp(dir_ / "run" / "accounting.json"))["accounting"];
  for (const auto& [k, v] : acc.items()) EXPECT_EQ(v, 0) << k;
  EXPECT_EQ(json::parse(slurp(dir_ / "run" / "metrics.json"))["ternary"], nullptr);
}

TEST_F(Cli, ReplayReportAndSampleOnCorpus) {
  ASSERT_EQ(run(corpus_replay("run")).code, 0);
  const auto golden = json::parse(slurp(source_path("tests/data/corpus_golden_accounting.json")));
  EXPECT_EQ(json::parse(slurp(dir_ / "run" / "accounting.json"))["accounting"], golden);
  for (const char* f : {"events.jsonl", "metrics.json", "states.jsonl", "dead_letter.jsonl", "timeseries.csv"})
    EXPECT_TRUE(fs::exists(dir_ / "run" / f)) << f;
  EXPECT_EQ(json::parse(slurp(dir_ / "run" / "metrics.json"))["ternary"]["labels"].size(), 3u);

  auto js = run("report --format json --state " + (dir_ / "run").string());
  ASSERT_EQ(js.code, 0);
  EXPECT_EQ(json::parse(js.out)["accounting"], golden);
  auto csv = run("report --format csv --state " + (dir_ / "run").string());
  ASSERT_EQ(csv.code, 0);
  EXPECT_EQ(csv.out.rfind("Total tweets,", 0), 0u);
  EXPECT_NE(csv.out.find("\n1920,1230,1181,40,992,844,406,142,264,189,337,775,9\n"), std::string::npos);
  auto ts = run("report --format csv --timeseries --state " + (dir_ / "run").string());
  EXPECT_EQ(ts.code, 0);
  EXPECT_GT(std::count(ts.out.begin(), ts.out.end(), '\n'), 2);

  const auto state = (dir_ / "run").string();
  auto first = run("sample --window-hours 100000 --none-fraction 0.1 --seed 3 --state " + state);
  ASSERT_EQ(first.code, 0);
  auto s1 = json::parse(first.out);
  EXPECT_GT(s1["created_damage"].get<int>(), 0);
  EXPECT_GT(s1["created_none"].get<int>(), 0);
  auto second = run("sample --window-hours 100000 --none-fraction 0.1 --seed 3 --state " + state);
  ASSERT_EQ(second.code, 0);
  EXPECT_EQ(json::parse(second.out)["created"], 0);
  EXPECT_EQ(json::parse(second.out)["total_tasks"], s1["total_tasks"]);
}

TEST_F(Cli, ReplayIsDeterministicAcrossWorkerCounts) {
  ASSERT_EQ(run(corpus_replay("w1") + " --workers 1").code, 0);
  ASSERT_EQ(run(corpus_replay("w6") + " --workers 6").code, 0);
  for (const char* f : {"accounting.json", "metrics.json", "timeseries.csv", "dead_letter.jsonl"})
    EXPECT_EQ(slurp(dir_ / "w1" / f), slurp(dir_ / "w6" / f)) << f;
}

TEST_F(Cli, EvaluateDeploymentFixture) {
  auto r = run("evaluate --judgments " + source_path("tests/data/deployment_judgments.jsonl").string() + " --out " +
               (dir_ / "eval").string());
  ASSERT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("judgments=29136 dontknow=1086 n=28050"), std::string::npos);
  EXPECT_NE(r.out.find("FN_SevereMissed=357"), std::string::npos);
  EXPECT_NE(r.out.find("FP_MildSpurious=5233"), std::string::npos);
  EXPECT_EQ(slurp(dir_ / "eval" / "binary_matrix.csv"),
            "human\\machine,Damage,No Damage\nDamage,2088,712\nNo Damage,5954,19296\n");
  EXPECT_EQ(json::parse(slurp(dir_ / "eval" / "ternary.json"))["n"], 28050);
  const auto cases = slurp(dir_ / "eval" / "error_cases.jsonl");
  EXPECT_EQ(std::count(cases.begin(), cases.end(), '\n'), 357 + 355 + 721 + 5233);
}

TEST_F(Cli, ServeAnswersAndPersistsOnSigterm) {
  ASSERT_EQ(run(corpus_replay("run")).code, 0);
  const auto state = dir_ / "run";
  ASSERT_EQ(run("sample --window-hours 100000 --none-fraction 0 --state " + state.string()).code, 0);
  std::ofstream(state / "tokens.json") << R"([{"assessor_id":"a1","token":"tok"}])";

  const auto log = dir_ / "serve.log";
  const pid_t pid = fork();
  ASSERT_GE(pid, 0);
  if (pid == 0) {
    const int fd = open(log.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    dup2(fd, 2);
    execl(TRIAGE_CLI_PATH, "triage", "serve", "--port", "0", "--state", state.c_str(), "--manifest",
          source_path("data/corpus/manifest.jsonl").c_str(), static_cast<char*>(nullptr));
    _exit(127);
  }
  int port = 0;
  for (int i = 0; i < 200 && port == 0; ++i) {
    std::this_thread::sleep_for(std::chrono::milliseconds(25));
    const auto text = slurp(log);
    if (auto at = text.find("listening on 127.0.0.1:"); at != std::string::npos)
      port = std::atoi(text.c_str() + at + std::strlen("listening on 127.0.0.1:"));
  }
  ASSERT_GT(port, 0) << slurp(log);

  httplib::Client c("127.0.0.1", port);
  auto t = c.Get("/tasks/next", httplib::Headers{{"X-Assessor-Token", "tok"}});
  ASSERT_TRUE(t);
  ASSERT_EQ(t->status, 200);
  const auto task = json::parse(t->body);
  auto img = c.Get(task["image_url"].get<std::string>());
  EXPECT_EQ(img->status, 200);
  auto sub = c.Post("/judgments", httplib::Headers{{"X-Assessor-Token", "tok"}},
                    json{{"task_id", task["task_id"]}, {"verdict", "no_damage"}}.dump(), "application/json");
  EXPECT_EQ(sub->status, 200);

  kill(pid, SIGTERM);
  int status = 0;
  waitpid(pid, &status, 0);
  ASSERT_TRUE(WIFEXITED(status));
  EXPECT_EQ(WEXITSTATUS(status), 0);
  EXPECT_NE(slurp(state / "tasks.jsonl").find("\"completed\""), std::string::npos);
  const auto logged = slurp(state / "judgments.jsonl");
  EXPECT_EQ(std::count(logged.begin(), logged.end(), '\n'), 1);
}
