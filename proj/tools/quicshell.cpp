// SPDX-License-Identifier: Apache-2.0
//
// quicshell — remote shell / exec / port-forwarding client.
#include <CLI11.hpp>

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/ioctl.h>
#include <termios.h>
#include <unistd.h>

#include <fmt/format.h>

#include <atomic>
#include <csignal>
#include <iostream>
#include <thread>

#include "quicshell/exec.hpp"
#include "quicshell/forward.hpp"
#include "quicshell/log.hpp"
#include "quicshell/session.hpp"

using namespace quicshell;

namespace {

constexpr int kClientFailure = 255;

// --- destination ---------------------------------------------------------------

struct Destination {
  std::string user;
  std::string host;
  uint16_t port = 4433;
  std::string path = "/";
};

std::optional<Destination> parse_destination(std::string text) {
  Destination dest;
  if (text.rfind("https://", 0) == 0) text = text.substr(8);
  size_t at = text.find('@');
  if (at != std::string::npos) {
    dest.user = text.substr(0, at);
    text = text.substr(at + 1);
  }
  size_t slash = text.find('/');
  if (slash != std::string::npos) {
    dest.path = text.substr(slash);
    text = text.substr(0, slash);
  }
  size_t colon = text.rfind(':');
  if (colon != std::string::npos) {
    unsigned long port = strtoul(text.c_str() + colon + 1, nullptr, 10);
    if (port < 1 || port > 65535) return std::nullopt;
    dest.port = static_cast<uint16_t>(port);
    text = text.substr(0, colon);
  }
  if (text.empty()) return std::nullopt;
  dest.host = text;
  return dest;
}

// --- terminal raw mode -----------------------------------------------------------

struct TerminalState {
  termios saved{};
  std::atomic<bool> active{false};
};
TerminalState g_terminal;

void restore_terminal() {
  if (g_terminal.active.exchange(false))
    tcsetattr(STDIN_FILENO, TCSANOW, &g_terminal.saved);
}

void enable_raw_mode() {
  if (!isatty(STDIN_FILENO)) return;
  tcgetattr(STDIN_FILENO, &g_terminal.saved);
  termios raw = g_terminal.saved;
  cfmakeraw(&raw);
  raw.c_cc[VMIN] = 1;
  raw.c_cc[VTIME] = 0;
  tcsetattr(STDIN_FILENO, TCSANOW, &raw);
  g_terminal.active = true;
}

void fatal_signal_handler(int sig) {
  restore_terminal();
  signal(sig, SIG_DFL);
  raise(sig);
}

void install_terminal_guards() {
  atexit(restore_terminal);
  std::set_terminate([] {
    restore_terminal();
    std::abort();
  });
  for (int sig : {SIGTERM, SIGHUP, SIGQUIT, SIGABRT, SIGSEGV}) signal(sig, fatal_signal_handler);
}

// --- window size ------------------------------------------------------------------

std::pair<uint64_t, uint64_t> local_window_size() {
  winsize ws{};
  if (ioctl(STDOUT_FILENO, TIOCGWINSZ, &ws) == 0 && ws.ws_col > 0 && ws.ws_row > 0)
    return {ws.ws_col, ws.ws_row};
  return {80, 24};
}

int g_winch_pipe[2] = {-1, -1};

void winch_handler(int) {
  char b = 'w';
  [[maybe_unused]] ssize_t n = write(g_winch_pipe[1], &b, 1);
}

// --- invocation ---------------------------------------------------------------------

struct Invocation {
  Destination dest;
  auth::Credential credential;
  std::optional<Bytes> pin;
  std::optional<std::string> ca_file;
  std::vector<forward::ForwardingSpec> forwards;
  bool want_pty = true;
  std::optional<std::string> command;
};

std::string prompt_password(const std::string& user, const std::string& host) {
  std::cerr << fmt::format("password for {}@{}: ", user, host) << std::flush;
  termios tty{};
  bool have_tty = tcgetattr(STDIN_FILENO, &tty) == 0;
  termios quiet = tty;
  quiet.c_lflag &= ~static_cast<tcflag_t>(ECHO);
  if (have_tty) tcsetattr(STDIN_FILENO, TCSANOW, &quiet);
  std::string password;
  std::getline(std::cin, password);
  if (have_tty) tcsetattr(STDIN_FILENO, TCSANOW, &tty);
  std::cerr << "\n";
  return password;
}

// Token precedence: flag, then environment, then token file.
auth::Credential resolve_credential(const Destination& dest, const std::string& token_flag,
                                    const std::string& token_file,
                                    const std::string& identity_file) {
  if (!token_flag.empty()) return auth::OidcTokenCredential{token_flag};
  if (const char* env = getenv("QUICSHELL_TOKEN"); env && *env)
    return auth::OidcTokenCredential{env};
  if (!token_file.empty()) {
    std::ifstream in(token_file);
    if (!in) throw std::runtime_error("cannot read token file: " + token_file);
    std::string token;
    std::getline(in, token);
    return auth::OidcTokenCredential{token};
  }
  if (!identity_file.empty()) {
    keys::Key key = keys::Key::from_private_pem_file(identity_file);
    return auth::PrivateKeyCredential{dest.user, key, key.default_alg()};
  }
  if (const char* env = getenv("QUICSHELL_PASSWORD"); env && *env)
    return auth::PasswordCredential{dest.user, env};
  return auth::PasswordCredential{dest.user, prompt_password(dest.user, dest.host)};
}

session::Conversation dial(const Invocation& invocation) {
  session::ClientOptions options;
  options.host = invocation.dest.host;
  options.port = invocation.dest.port;
  options.path = invocation.dest.path;
  options.username = invocation.dest.user;
  options.credential = invocation.credential;
  options.pinned_cert_sha256 = invocation.pin;
  options.ca_file = invocation.ca_file;
  return session::open_conversation(options);
}

// Keeps -L listeners alive for the lifetime of the session.
struct Forwarders {
  std::vector<std::unique_ptr<forward::TcpForwarder>> tcp;
  std::vector<std::unique_ptr<forward::UdpForwarder>> udp;

  void start(session::Conversation& conv, const std::vector<forward::ForwardingSpec>& specs) {
    for (const auto& spec : specs) {
      if (spec.protocol == forward::ForwardingSpec::Protocol::Tcp) {
        tcp.push_back(std::make_unique<forward::TcpForwarder>(conv, spec));
        std::cerr << fmt::format("forwarding {} (listening on port {})\n", spec.to_string(),
                                 tcp.back()->port());
      } else {
        udp.push_back(std::make_unique<forward::UdpForwarder>(conv, spec));
        std::cerr << fmt::format("forwarding {} (listening on port {})\n", spec.to_string(),
                                 udp.back()->port());
      }
    }
  }
};

// Relays local stdin to the channel; exits with the process.
void stdin_pump(session::Channel ch, std::atomic<bool>& done) {
  Bytes buf(8192);
  while (!done) {
    pollfd pfd{STDIN_FILENO, POLLIN, 0};
    int rc = poll(&pfd, 1, 100);
    if (rc <= 0) continue;
    ssize_t n = read(STDIN_FILENO, buf.data(), buf.size());
    if (n <= 0) {
      try {
        ch.close();  // EOF to the remote process
      } catch (...) {
      }
      return;
    }
    try {
      ch.send_message(wire::Data{wire::DataKind::Stdin, Bytes(buf.begin(), buf.begin() + n)});
    } catch (const session::ChannelError&) {
      return;
    }
  }
}

// Watches SIGWINCH and forwards new dimensions.
void winch_pump(session::Channel ch, std::atomic<bool>& done) {
  Bytes buf(16);
  while (!done) {
    pollfd pfd{g_winch_pipe[0], POLLIN, 0};
    int rc = poll(&pfd, 1, 100);
    if (rc <= 0) continue;
    if (read(g_winch_pipe[0], buf.data(), buf.size()) <= 0) continue;
    auto [cols, rows] = local_window_size();
    try {
      ch.send_message(wire::WindowChange{cols, rows});
    } catch (const session::ChannelError&) {
      return;
    }
  }
}

int run_session(const Invocation& invocation) {
  session::Conversation conv;
  try {
    conv = dial(invocation);
  } catch (const session::AuthError& e) {
    std::cerr << "quicshell: " << e.what() << "\n";
    return kClientFailure;
  } catch (const std::exception& e) {
    std::cerr << "quicshell: " << e.what() << "\n";
    return kClientFailure;
  }

  Forwarders forwarders;
  try {
    forwarders.start(conv, invocation.forwards);
  } catch (const std::exception& e) {
    std::cerr << "quicshell: " << e.what() << "\n";
    return kClientFailure;
  }

  int exit_code = kClientFailure;
  try {
    session::Channel ch = conv.open_channel({wire::ChannelType::Session, "", 0, 0});
    bool interactive = !invocation.command.has_value();
    bool use_pty = invocation.want_pty;

    if (use_pty) {
      auto [cols, rows] = local_window_size();
      const char* term = getenv("TERM");
      ch.send_message(wire::PtyRequest{term && *term ? term : "xterm", cols, rows});
    }
    if (interactive)
      ch.send_message(wire::ShellRequest{});
    else
      ch.send_message(wire::ExecRequest{*invocation.command});

    if (interactive && isatty(STDIN_FILENO)) enable_raw_mode();

    std::atomic<bool> done{false};
    std::thread input_thread(stdin_pump, ch, std::ref(done));
    std::thread winch_thread;
    if (use_pty && isatty(STDOUT_FILENO)) {
      if (pipe(g_winch_pipe) == 0) {
        signal(SIGWINCH, winch_handler);
        winch_thread = std::thread(winch_pump, ch, std::ref(done));
      }
    }

    bool signalled = false;
    std::string signal_name;
    while (auto m = ch.next_message()) {
      if (const auto* data = std::get_if<wire::Data>(&*m)) {
        int fd = data->kind == wire::DataKind::Stderr ? STDERR_FILENO : STDOUT_FILENO;
        size_t off = 0;
        while (off < data->payload.size()) {
          ssize_t n = write(fd, data->payload.data() + off, data->payload.size() - off);
          if (n <= 0) break;
          off += static_cast<size_t>(n);
        }
      } else if (const auto* status = std::get_if<wire::ExitStatus>(&*m)) {
        exit_code = static_cast<int>(status->code);
      } else if (const auto* sig = std::get_if<wire::ExitSignal>(&*m)) {
        signalled = true;
        signal_name = sig->signal_name;
      }
    }
    done = true;
    input_thread.join();
    if (winch_thread.joinable()) winch_thread.join();
    restore_terminal();
    if (signalled) {
      std::cerr << fmt::format("quicshell: remote process terminated by SIG{}\n", signal_name);
      exit_code = kClientFailure;
    }
  } catch (const session::ChannelError& e) {
    restore_terminal();
    std::cerr << fmt::format("quicshell: channel failed: {} ({})\n", e.what(),
                             transport::errc_name(e.code));
    exit_code = kClientFailure;
  } catch (const std::exception& e) {
    restore_terminal();
    std::cerr << "quicshell: " << e.what() << "\n";
    exit_code = kClientFailure;
  }
  conv.close();
  return exit_code;
}

}  // namespace

int main(int argc, char** argv) {
  install_terminal_guards();
  log::set_level(log::Level::Warn);

  CLI::App app{"quicshell: remote shell, exec, and port forwarding over a secure datagram transport"};
  app.require_subcommand(1);

  std::string dest_arg;
  std::string user_flag;
  std::string identity_file;
  std::string token_flag;
  std::string token_file;
  std::string pin_hex;
  std::string ca_file;
  std::vector<std::string> forward_args;
  bool no_pty = false;
  bool force_pty = false;
  bool verbose = false;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("destination", dest_arg,
                    "[user@]host[:port][/path] or https://user@host:port/path")
        ->required();
    cmd->add_option("-l,--user", user_flag, "username (overrides user@ in the destination)");
    cmd->add_option("-i,--identity", identity_file, "private key (PEM) for public-key auth");
    cmd->add_option("--token", token_flag, "bearer token (OIDC ID token)");
    cmd->add_option("--token-file", token_file, "file containing a bearer token");
    cmd->add_option("--insecure-pin", pin_hex,
                    "hex SHA-256 fingerprint of a self-signed server certificate to trust");
    cmd->add_option("--ca-file", ca_file, "CA bundle for server certificate verification");
    cmd->add_option("-L,--forward", forward_args,
                    "forwarding spec tcp/<bind>:<port>/<host>:<port> or udp/...");
    cmd->add_flag("-v,--verbose", verbose, "verbose logging");
  };

  CLI::App* shell_cmd = app.add_subcommand("shell", "interactive shell (default pty)");
  add_common(shell_cmd);
  shell_cmd->add_flag("--no-pty", no_pty, "do not request a pseudo-terminal");

  CLI::App* exec_cmd = app.add_subcommand("exec", "run a single command");
  add_common(exec_cmd);
  std::vector<std::string> command_parts;
  exec_cmd->add_option("command", command_parts, "command to run remotely")->required();
  exec_cmd->add_flag("--pty", force_pty, "request a pseudo-terminal for the command");

  CLI11_PARSE(app, argc, argv);
  if (verbose) log::set_level(log::Level::Debug);

  auto dest = parse_destination(dest_arg);
  if (!dest) {
    std::cerr << "quicshell: cannot parse destination: " << dest_arg << "\n";
    return kClientFailure;
  }
  if (!user_flag.empty()) dest->user = user_flag;
  if (dest->user.empty()) {
    const char* env_user = getenv("USER");
    dest->user = env_user ? env_user : "";
  }
  if (dest->user.empty()) {
    std::cerr << "quicshell: no username (use user@host or --user)\n";
    return kClientFailure;
  }

  Invocation invocation;
  invocation.dest = *dest;
  try {
    invocation.credential = resolve_credential(*dest, token_flag, token_file, identity_file);
  } catch (const std::exception& e) {
    std::cerr << "quicshell: " << e.what() << "\n";
    return kClientFailure;
  }
  if (!pin_hex.empty()) {
    auto pin = hex_decode(pin_hex);
    if (!pin || pin->size() != 32) {
      std::cerr << "quicshell: --insecure-pin must be 64 hex digits\n";
      return kClientFailure;
    }
    invocation.pin = *pin;
  }
  if (!ca_file.empty()) invocation.ca_file = ca_file;
  for (const auto& arg : forward_args) {
    auto spec = forward::ForwardingSpec::parse(arg);
    if (!spec) {
      std::cerr << "quicshell: bad forwarding spec: " << arg << "\n";
      return kClientFailure;
    }
    invocation.forwards.push_back(*spec);
  }

  if (app.got_subcommand(exec_cmd)) {
    std::string command;
    for (const auto& part : command_parts) {
      if (!command.empty()) command += ' ';
      command += part;
    }
    invocation.command = command;
    invocation.want_pty = force_pty;
  } else {
    invocation.want_pty = !no_pty;
  }

  return run_session(invocation);
}
