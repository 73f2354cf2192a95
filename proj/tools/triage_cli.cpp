// Command-line front end: replay, sample, serve, evaluate, report.
#include <CLI11.hpp>

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "triage/evaluation.hpp"
#include "triage/hitl.hpp"
#include "triage/pipeline.hpp"
#include "triage/service.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace triage;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

void write_file(const fs::path& p, const std::string& content) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw InputError("cannot write " + p.string());
  out << content;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw InputError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Stub truth vs emitted damage label over classified relevant canonicals.
json replay_metrics(const PipelineResult& result, const Manifest& manifest) {
  ConfusionMatrix cm(kTernaryLabels);
  for (const auto& s : result.states) {
    if (!s.is_cluster_canonical || s.dead_letter || !s.damage) continue;
    const auto* e = manifest.find(s.source_url);
    if (!e || !e->stub_damage) continue;
    cm.add(index_of(*e->stub_damage), index_of(*s.damage));
  }
  if (cm.n == 0) return {{"ternary", nullptr}, {"binary", nullptr}};
  const auto bin = collapse_to_binary(cm);
  return {{"ternary", report_json("ternary", cm, weighted_metrics(cm))},
          {"binary", report_json("binary", bin, weighted_metrics(bin))}};
}

struct ReplayOpts {
  std::string input, manifest, config, out;
  std::size_t workers = 0;
};

int run_replay(const ReplayOpts& o) {
  PipelineConfig cfg = o.config.empty() ? PipelineConfig{} : load_pipeline_config(o.config);
  if (o.workers > 0) {
    cfg.fetch_workers = o.workers;
    cfg.inference_workers = o.workers;
  }
  cfg.validate();
  auto manifest = Manifest::load(o.manifest);
  std::ifstream source(o.input);
  if (!source) throw InputError("cannot read " + o.input);

  fs::create_directories(o.out);
  std::ofstream events(fs::path(o.out) / "events.jsonl");
  EventLog log(&events);
  ReplayFetcher fetcher(manifest);
  ReplayExtractor extractor(manifest);
  StubAdapter stub(manifest, cfg.stub);
  auto result = run_pipeline(cfg, source, PipelineDeps{fetcher, extractor, stub, stub, &log});

  write_run_outputs(result, o.out);
  write_file(fs::path(o.out) / "metrics.json", replay_metrics(result, *manifest).dump(2) + "\n");

  const auto& a = result.accounting;
  std::printf("tweets=%llu unique_urls=%llu downloaded=%llu failed=%llu dead_lettered=%llu\n",
              static_cast<unsigned long long>(a.total_tweets),
              static_cast<unsigned long long>(a.unique_urls),
              static_cast<unsigned long long>(a.downloaded), static_cast<unsigned long long>(a.failed),
              static_cast<unsigned long long>(a.dead_lettered));
  if (auto bad = a.violated_identities(); !bad.empty()) {
    for (const auto& b : bad) std::fprintf(stderr, "accounting identity violated: %s\n", b.c_str());
    return kExitRuntime;
  }
  return 0;
}

struct SampleOpts {
  std::string state = ".";
  std::string campaign;
  std::string window_end;
  double window_hours = 0;
  double none_fraction = 0.10;
  std::uint64_t seed = 0;
};

int run_sample(const SampleOpts& o, bool hours_given, bool fraction_given, bool seed_given) {
  SamplerConfig cfg;
  if (!o.campaign.empty()) cfg = load_campaign_config(o.campaign);
  if (hours_given) cfg.window_hours = o.window_hours;
  if (fraction_given) cfg.none_fraction = o.none_fraction;
  if (seed_given) cfg.seed = o.seed;
  cfg.validate();

  const fs::path dir = o.state;
  auto states = load_states(dir / "states.jsonl");
  Timestamp end{};
  if (!o.window_end.empty()) {
    end = parse_iso8601(o.window_end);
  } else {
    // Default window closes just after the newest image.
    for (const auto& s : states) end = std::max(end, s.first_seen);
    end += std::chrono::milliseconds(1);
  }

  Campaign campaign(cfg);
  const auto tasks_path = dir / "tasks.jsonl";
  if (fs::exists(tasks_path)) {
    std::ifstream in(tasks_path);
    campaign.load(in);
  }
  auto created = campaign.draw_sample(TimeWindow::ending_at(end, cfg.window_hours), states);
  std::ofstream out(tasks_path, std::ios::trunc);
  campaign.save_tasks(out);
  if (!out) throw InputError("cannot write " + tasks_path.string());

  std::size_t none = 0;
  for (const auto& t : created) none += t.machine_damage == DamageLabel::None;
  std::cout << json{{"created", created.size()},
                    {"created_none", none},
                    {"created_damage", created.size() - none},
                    {"total_tasks", campaign.tasks().size()},
                    {"window_end", format_iso8601(end)}}
                   .dump()
            << "\n";
  return 0;
}

struct ServeOpts {
  std::string state = ".";
  std::string tokens;
  std::string manifest;
  std::string host = "127.0.0.1";
  int port = 8080;
};

int run_serve(const ServeOpts& o) {
  const fs::path dir = o.state;
  // Block termination signals before any thread starts; the main thread waits for them.
  sigset_t sigs;
  sigemptyset(&sigs);
  sigaddset(&sigs, SIGINT);
  sigaddset(&sigs, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &sigs, nullptr);

  ServiceConfig sc;
  sc.host = o.host;
  sc.port = o.port;
  sc.sessions = load_sessions(o.tokens.empty() ? dir / "tokens.json" : fs::path(o.tokens));
  if (fs::exists(dir / "states.jsonl")) sc.states = load_states(dir / "states.jsonl");
  if (fs::exists(dir / "accounting.json")) sc.accounting = json::parse(read_file(dir / "accounting.json"));
  if (!o.manifest.empty()) sc.manifest = Manifest::load(o.manifest);
  sc.judgments_log = dir / "judgments.jsonl";

  SamplerConfig cfg{.window_hours = 1.0};
  if (fs::exists(dir / "campaign.json")) cfg = load_campaign_config(dir / "campaign.json");
  Campaign campaign(cfg);
  if (fs::exists(dir / "tasks.jsonl")) {
    std::ifstream tasks(dir / "tasks.jsonl");
    std::ifstream judgments(dir / "judgments.jsonl");
    campaign.load(tasks, judgments ? &judgments : nullptr);
  }

  Service service(std::move(sc), campaign);
  const int port = service.start();
  std::fprintf(stderr, "listening on %s:%d (%zu open tasks)\n", o.host.c_str(), port, campaign.open_count());
  int sig = 0;
  sigwait(&sigs, &sig);
  service.stop();

  std::ofstream out(dir / "tasks.jsonl", std::ios::trunc);
  campaign.save_tasks(out);
  return 0;
}

int run_evaluate(const std::string& judgments_path, const std::string& out_dir) {
  std::ifstream in(judgments_path);
  if (!in) throw InputError("cannot read " + judgments_path);
  const auto judgments = read_judgments(in);
  const auto ternary = build_ternary_matrix(judgments);
  const auto binary = build_binary_matrix(judgments);
  const auto mt = weighted_metrics(ternary);
  const auto mb = weighted_metrics(binary);

  const fs::path dir = out_dir;
  fs::create_directories(dir);
  write_file(dir / "binary.json", report_json("binary", binary, mb).dump(2) + "\n");
  write_file(dir / "ternary.json", report_json("ternary", ternary, mt).dump(2) + "\n");
  write_file(dir / "binary_matrix.csv", matrix_csv(binary));
  write_file(dir / "ternary_matrix.csv", matrix_csv(ternary));
  const auto table = metrics_table_csv({{"binary", mb}, {"ternary", mt}});
  write_file(dir / "metrics.csv", table);

  std::ostringstream cases;
  std::map<std::string, std::size_t> per_slice;
  for (const auto& c : extract_error_cases(judgments)) {
    cases << to_json(c).dump() << '\n';
    ++per_slice[std::string(to_string(c.slice))];
  }
  write_file(dir / "error_cases.jsonl", cases.str());

  std::size_t dontknow = 0;
  for (const auto& j : judgments) dontknow += j.dontknow();
  std::printf("judgments=%zu dontknow=%zu n=%llu\n", judgments.size(), dontknow,
              static_cast<unsigned long long>(ternary.n));
  std::fputs(table.c_str(), stdout);
  for (const auto& [slice, n] : per_slice) std::printf("%s=%zu\n", slice.c_str(), n);
  return 0;
}

int run_report(const std::string& format, const std::string& state, bool timeseries) {
  const fs::path dir = state;
  if (timeseries) {
    auto states = load_states(dir / "states.jsonl");
    auto buckets = bucketize(states, std::chrono::hours(24));
    if (format == "csv") {
      std::cout << timeseries_csv(buckets);
    } else {
      json out = json::array();
      for (const auto& b : buckets) {
        out.push_back({{"bucket_start", format_iso8601(b.bucket_start)}, {"counts", to_json(b.counts)}});
      }
      std::cout << out.dump(2) << "\n";
    }
    return 0;
  }
  const auto report = json::parse(read_file(dir / "accounting.json"));
  if (format == "json") {
    std::cout << report.dump(2) << "\n";
    return 0;
  }
  const auto& a = report.at("accounting");
  StageAccounting acc;
  acc.total_tweets = a.at("total_tweets");
  acc.unique_urls = a.at("unique_urls");
  acc.downloaded = a.at("downloaded");
  acc.failed = a.at("failed");
  acc.unique_images = a.at("unique_images");
  acc.duplicate_images = a.at("duplicate_images");
  acc.relevant = a.at("relevant");
  acc.not_relevant = a.at("not_relevant");
  acc.with_damage = a.at("with_damage");
  acc.severe = a.at("severe");
  acc.mild = a.at("mild");
  acc.no_damage = a.at("no_damage");
  acc.dead_lettered = a.at("dead_lettered");
  std::cout << accounting_csv(acc);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Disaster image triage: replay, sampling, labeling service and evaluation"};
  app.require_subcommand(1);

  ReplayOpts replay;
  auto* cmd_replay = app.add_subcommand("replay", "Run the pipeline over a recorded tweet stream");
  cmd_replay->add_option("--input", replay.input, "tweets JSONL")->required();
  cmd_replay->add_option("--manifest", replay.manifest, "replay manifest JSONL")->required();
  cmd_replay->add_option("--config", replay.config, "pipeline config (key = value)");
  cmd_replay->add_option("--out", replay.out, "output directory")->required();
  cmd_replay->add_option("--workers", replay.workers, "fetch and inference workers (overrides config)");

  SampleOpts sample;
  auto* cmd_sample = app.add_subcommand("sample", "Draw labeling tasks for a time window");
  auto* opt_hours = cmd_sample->add_option("--window-hours", sample.window_hours, "window length in hours");
  auto* opt_frac = cmd_sample->add_option("--none-fraction", sample.none_fraction, "share of None images to sample")
                       ->check(CLI::Range(0.0, 1.0));
  auto* opt_seed = cmd_sample->add_option("--seed", sample.seed);
  cmd_sample->add_option("--state", sample.state, "run directory holding states.jsonl");
  cmd_sample->add_option("--campaign", sample.campaign, "campaign JSON");
  cmd_sample->add_option("--window-end", sample.window_end, "ISO-8601 window end (default: after newest image)");

  ServeOpts serve;
  auto* cmd_serve = app.add_subcommand("serve", "Serve the labeling API");
  cmd_serve->add_option("--port", serve.port)->check(CLI::Range(0, 65535));
  cmd_serve->add_option("--host", serve.host);
  cmd_serve->add_option("--state", serve.state, "run directory");
  cmd_serve->add_option("--tokens", serve.tokens, "token file (default: <state>/tokens.json)");
  cmd_serve->add_option("--manifest", serve.manifest, "manifest used to serve image bytes");

  std::string judgments, eval_out;
  auto* cmd_eval = app.add_subcommand("evaluate", "Confusion matrices and metrics from exported judgments");
  cmd_eval->add_option("--judgments", judgments)->required();
  cmd_eval->add_option("--out", eval_out)->required();

  std::string format = "json", report_state = ".";
  bool timeseries = false;
  auto* cmd_report = app.add_subcommand("report", "Print stage accounting of a replay run");
  cmd_report->add_option("--format", format)->check(CLI::IsMember({"json", "csv"}));
  cmd_report->add_option("--state", report_state, "run directory");
  cmd_report->add_flag("--timeseries", timeseries, "per-day buckets instead of totals");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  try {
    if (*cmd_replay) return run_replay(replay);
    if (*cmd_sample) {
      if (opt_hours->count() == 0 && sample.campaign.empty()) {
        std::fprintf(stderr, "sample: --window-hours or --campaign is required\n");
        return kExitUsage;
      }
      return run_sample(sample, opt_hours->count() > 0, opt_frac->count() > 0, opt_seed->count() > 0);
    }
    if (*cmd_serve) return run_serve(serve);
    if (*cmd_eval) return run_evaluate(judgments, eval_out);
    if (*cmd_report) return run_report(format, report_state, timeseries);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return kExitUsage;
}
