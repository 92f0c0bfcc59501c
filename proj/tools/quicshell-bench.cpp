// SPDX-License-Identifier: Apache-2.0
//
// quicshell-bench — desk-scale measurement harness: session completion time
// under injected latency, keystroke echo latency, and forwarding throughput.
#include <CLI11.hpp>

#include <fmt/format.h>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>

#include "quicshell/bench.hpp"
#include "quicshell/log.hpp"

using namespace quicshell;
using bench::RunReport;

namespace {

// Output of about this many bytes, printed by the remote command.
std::string sized_output_command(size_t bytes) {
  return fmt::format("head -c {} /dev/zero | tr '\\0' 'x'", bytes);
}

void print_summary(const RunReport& report, const char* unit) {
  fmt::print("{:<22} n={:<5} mean={:>10.3f} {u}  median={:>10.3f} {u}  std={:>8.3f}  max_rtts={}\n",
             report.scenario, report.samples.size(), report.mean, report.median(),
             report.stddev, fmt::arg("u", unit), report.max_round_trips());
}

// Optional SSHv2 comparison: runs only when an external target is supplied
// via QUICSHELL_SSH_BASELINE (e.g. "user@host"); skipped otherwise so the
// harness stays self-contained.
int ssh_baseline(int n, std::string& csv) {
  const char* target = getenv("QUICSHELL_SSH_BASELINE");
  if (!target || !*target) {
    fmt::print("ssh-baseline skipped: set QUICSHELL_SSH_BASELINE=user@host to enable\n");
    return 0;
  }
  RunReport report;
  report.scenario = "ssh-baseline";
  for (int i = 0; i < n; i++) {
    auto t0 = std::chrono::steady_clock::now();
    std::string cmd = fmt::format(
        "ssh -o BatchMode=yes -o StrictHostKeyChecking=accept-new {} true >/dev/null 2>&1",
        target);
    if (std::system(cmd.c_str()) != 0) {
      fmt::print("ssh-baseline aborted: ssh invocation failed\n");
      return 1;
    }
    report.samples.push_back(
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
            .count());
  }
  report.finalize();
  print_summary(report, "ms");
  csv += report.to_csv();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  log::set_level(log::Level::Warn);

  CLI::App app{"quicshell-bench: desk-scale latency and throughput measurements"};
  std::string scenario = "establishment";
  int rtt_ms = 0;
  int n = 50;
  double seconds = 3.0;
  std::string out_path;
  app.add_option("--scenario", scenario,
                 "establishment | output-size | echo | tcp-throughput | udp-throughput | "
                 "ssh-baseline")
      ->required();
  app.add_option("--rtt", rtt_ms, "emulated round-trip time in ms (latency proxy)");
  app.add_option("--n", n, "sample count");
  app.add_option("--seconds", seconds, "duration for throughput scenarios");
  app.add_option("--out", out_path, "write CSV report here");
  CLI11_PARSE(app, argc, argv);

  std::string csv;
  try {
    bench::Rig::Options rig_options;
    rig_options.rtt_ms = rtt_ms;

    if (scenario == "establishment") {
      bench::Rig rig(rig_options);
      bench::CompletionOptions options;
      options.command = "true";
      options.n = n;
      options.rtt_ms = rtt_ms;
      options.scenario_name = fmt::format("establishment-rtt{}", rtt_ms);
      auto report = bench::measure_session_completion(rig, options);
      print_summary(report, "ms");
      csv += report.to_csv();
    } else if (scenario == "output-size") {
      bench::Rig rig(rig_options);
      for (auto [label, bytes] : {std::pair{"582B", size_t{582}},
                                  std::pair{"131kB", size_t{131072}}}) {
        bench::CompletionOptions options;
        options.command = sized_output_command(bytes);
        options.n = n;
        options.rtt_ms = rtt_ms;
        options.scenario_name = fmt::format("completion-{}-rtt{}", label, rtt_ms);
        auto report = bench::measure_session_completion(rig, options);
        print_summary(report, "ms");
        csv += report.to_csv();
      }
    } else if (scenario == "echo") {
      bench::Rig rig(rig_options);
      bench::EchoLatencyOptions options;
      options.keystrokes = n;
      options.rtt_ms = rtt_ms;
      options.scenario_name = fmt::format("echo-rtt{}", rtt_ms);
      auto report = bench::measure_echo_latency(rig, options);
      print_summary(report, "ms");
      csv += report.to_csv();
    } else if (scenario == "tcp-throughput" || scenario == "udp-throughput") {
      bench::Rig rig(rig_options);
      bench::ThroughputOptions options;
      options.protocol = scenario == "tcp-throughput"
                             ? forward::ForwardingSpec::Protocol::Tcp
                             : forward::ForwardingSpec::Protocol::Udp;
      options.seconds = seconds;
      options.scenario_name = scenario;
      auto report = bench::measure_forward_throughput(rig, options);
      print_summary(report, "Mbps");
      csv += report.to_csv();
    } else if (scenario == "ssh-baseline") {
      int rc = ssh_baseline(n, csv);
      if (rc != 0) return rc;
    } else {
      std::cerr << "quicshell-bench: unknown scenario " << scenario << "\n";
      return 2;
    }
  } catch (const std::exception& e) {
    std::cerr << "quicshell-bench: " << e.what() << "\n";
    return 1;
  }

  if (!out_path.empty() && !csv.empty()) {
    std::ofstream out(out_path);
    if (!out) {
      std::cerr << "quicshell-bench: cannot write " << out_path << "\n";
      return 1;
    }
    out << csv;
    fmt::print("report written to {}\n", out_path);
  }
  return 0;
}
