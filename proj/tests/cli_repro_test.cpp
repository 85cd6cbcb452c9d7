// End-to-end CLI checks: byte-reproducible outputs for a fixed seed, config
// round trip, and error exit codes. argv[1] is the CLI binary path.

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace {

int failures = 0;

void check(bool ok, const std::string& what) {
  std::printf("%-52s %s\n", what.c_str(), ok ? "ok" : "FAILED");
  if (!ok) ++failures;
}

int run(const std::string& cmd) {
  const int rc = std::system((cmd + " > /dev/null 2>&1").c_str());
  return rc < 0 ? rc : WEXITSTATUS(rc);
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Drops the final comma-separated field of every line (the wall-clock
// column of table.csv).
std::string strip_last_column(const std::string& text) {
  std::stringstream in(text);
  std::string line;
  std::string out;
  while (std::getline(in, line)) {
    const std::size_t pos = line.rfind(',');
    out += (pos == std::string::npos ? line : line.substr(0, pos)) + "\n";
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::fprintf(stderr, "usage: cli_repro <cli binary>\n");
    return 2;
  }
  const std::string cli = argv[1];

  const std::string base = cli + " run --scenario 1 --seed 3 --distance 10";
  check(run(base + " --out cli_a") == 0, "run exits cleanly");
  check(run(base + " --out cli_b") == 0, "second run exits cleanly");
  check(!slurp("cli_a/trace.csv").empty(), "trace.csv written");
  check(slurp("cli_a/trace.csv") == slurp("cli_b/trace.csv"),
        "trace.csv byte-identical across runs");
  check(slurp("cli_a/metrics.json") == slurp("cli_b/metrics.json"),
        "metrics.json byte-identical across runs");
  check(slurp("cli_a/config.json") == slurp("cli_b/config.json"),
        "config.json byte-identical across runs");
  check(!slurp("cli_a/timing.json").empty(), "timing.json written");

  // Rehydrating the echoed config reproduces the exact same episode.
  check(run(cli + " run --config cli_a/config.json --out cli_c") == 0,
        "run from echoed config exits cleanly");
  check(slurp("cli_c/trace.csv") == slurp("cli_a/trace.csv"),
        "config round trip reproduces the trace");
  check(slurp("cli_c/config.json") == slurp("cli_a/config.json"),
        "config round trip reproduces the config");

  // A different seed must change the trace.
  check(run(cli + " run --scenario 1 --seed 4 --distance 10 --out cli_d") ==
            0,
        "run with another seed exits cleanly");
  check(slurp("cli_d/trace.csv") != slurp("cli_a/trace.csv"),
        "different seed changes the trace");

  const std::string batch =
      cli + " batch --grid single --reps 1 --workers 2 --scenario 1";
  check(run(batch + " --out cli_ba") == 0, "batch exits cleanly");
  check(run(batch + " --out cli_bb") == 0, "second batch exits cleanly");
  check(slurp("cli_ba/batch.json") == slurp("cli_bb/batch.json"),
        "batch.json byte-identical across runs");
  const std::string ta = slurp("cli_ba/table.csv");
  check(!ta.empty(), "table.csv written");
  check(strip_last_column(ta) == strip_last_column(slurp("cli_bb/table.csv")),
        "table.csv identical excluding the wall-clock column");

  check(run(cli + " dump-socp --scenario 2 --out cli_sa") == 0,
        "dump-socp exits cleanly");
  check(run(cli + " dump-socp --scenario 2 --out cli_sb") == 0,
        "second dump-socp exits cleanly");
  check(slurp("cli_sa/socp.json") == slurp("cli_sb/socp.json"),
        "socp.json byte-identical across runs");

  // Error paths: invalid configuration exits 2.
  check(run(cli + " run --scenario 9 --out cli_err") == 2,
        "invalid scenario exits 2");
  {
    std::ofstream bad("cli_bad_config.json");
    bad << "{\"no_such_key\": 1}\n";
  }
  check(run(cli + " run --config cli_bad_config.json --out cli_err") == 2,
        "unknown config key exits 2");

  run("rm -rf cli_a cli_b cli_c cli_d cli_ba cli_bb cli_sa cli_sb cli_err "
      "cli_bad_config.json");
  if (failures) std::printf("%d check(s) failed\n", failures);
  return failures == 0 ? 0 : 1;
}
