// SPDX-License-Identifier: Apache-2.0
#include "quicshell/exec.hpp"

#include <fcntl.h>
#include <grp.h>
#include <pty.h>
#include <pwd.h>
#include <signal.h>
#include <sys/ioctl.h>
#include <sys/wait.h>
#include <termios.h>
#include <unistd.h>

#include <fmt/format.h>

#include <atomic>
#include <cstring>
#include <thread>
#include <vector>

#include "quicshell/log.hpp"

namespace quicshell::exec {

namespace errc = transport::errc;

// --- pty ---------------------------------------------------------------------

Pty::Pty(Pty&& other) noexcept : master_(other.master_), slave_(other.slave_) {
  other.master_ = -1;
  other.slave_ = -1;
}

Pty& Pty::operator=(Pty&& other) noexcept {
  if (this != &other) {
    this->~Pty();
    master_ = other.master_;
    slave_ = other.slave_;
    other.master_ = -1;
    other.slave_ = -1;
  }
  return *this;
}

Pty::~Pty() {
  if (master_ >= 0) ::close(master_);
  if (slave_ >= 0) ::close(slave_);
}

void Pty::release_slave() {
  if (slave_ >= 0) {
    ::close(slave_);
    slave_ = -1;
  }
}

void Pty::resize(uint32_t cols, uint32_t rows) {
  if (cols == 0 || rows == 0) throw std::invalid_argument("pty size must be at least 1x1");
  winsize ws{};
  ws.ws_col = static_cast<unsigned short>(cols);
  ws.ws_row = static_cast<unsigned short>(rows);
  if (ioctl(master_, TIOCSWINSZ, &ws) != 0)
    throw ExecError(fmt::format("pty resize failed: {}", strerror(errno)), errc::kInternal);
}

std::pair<uint32_t, uint32_t> Pty::size() const {
  winsize ws{};
  ioctl(master_, TIOCGWINSZ, &ws);
  return {ws.ws_col, ws.ws_row};
}

Pty allocate_pty(const std::string& term, uint32_t cols, uint32_t rows) {
  if (cols == 0 || rows == 0) throw std::invalid_argument("pty size must be at least 1x1");
  (void)term;  // applied via the child environment at spawn
  winsize ws{};
  ws.ws_col = static_cast<unsigned short>(cols);
  ws.ws_row = static_cast<unsigned short>(rows);
  Pty pty;
  if (openpty(&pty.master_, &pty.slave_, nullptr, nullptr, &ws) != 0)
    throw ExecError(fmt::format("pty allocation unavailable: {}", strerror(errno)),
                    errc::kInternal);
  return pty;
}

// --- spawning ------------------------------------------------------------------

namespace {

struct Account {
  uid_t uid;
  gid_t gid;
  std::string name;
  std::string home;
  std::string shell;
};

std::optional<Account> lookup_account(const std::string& username) {
  passwd* pw = getpwnam(username.c_str());
  if (!pw) return std::nullopt;
  return Account{pw->pw_uid, pw->pw_gid, pw->pw_name,
                 pw->pw_dir ? pw->pw_dir : "/",
                 pw->pw_shell && *pw->pw_shell ? pw->pw_shell : "/bin/sh"};
}

Account invoking_account() {
  passwd* pw = getpwuid(getuid());
  if (pw)
    return {pw->pw_uid, pw->pw_gid, pw->pw_name,
            pw->pw_dir ? pw->pw_dir : "/",
            pw->pw_shell && *pw->pw_shell ? pw->pw_shell : "/bin/sh"};
  const char* home = getenv("HOME");
  const char* shell = getenv("SHELL");
  return {getuid(), getgid(), "user", home ? home : "/", shell ? shell : "/bin/sh"};
}

[[noreturn]] void child_exec(const Account& account, bool drop_privileges,
                             const std::optional<std::string>& command,
                             const std::optional<std::string>& term) {
  if (drop_privileges) {
    if (initgroups(account.name.c_str(), account.gid) != 0 || setgid(account.gid) != 0 ||
        setuid(account.uid) != 0)
      _exit(127);
  }
  if (chdir(account.home.c_str()) != 0) {
    [[maybe_unused]] int rc = chdir("/");
  }

  // Minimal fixed environment; shells source the rest themselves.
  std::vector<std::string> env_store = {
      "PATH=/usr/local/sbin:/usr/local/bin:/usr/sbin:/usr/bin:/sbin:/bin",
      "HOME=" + account.home,
      "USER=" + account.name,
      "LOGNAME=" + account.name,
      "SHELL=" + account.shell,
  };
  if (term) env_store.push_back("TERM=" + *term);
  std::vector<char*> envp;
  for (auto& e : env_store) envp.push_back(e.data());
  envp.push_back(nullptr);

  if (command) {
    const char* argv[] = {account.shell.c_str(), "-c", command->c_str(), nullptr};
    execve(account.shell.c_str(), const_cast<char**>(argv), envp.data());
  } else {
    const char* argv[] = {account.shell.c_str(), "-i", nullptr};
    execve(account.shell.c_str(), const_cast<char**>(argv), envp.data());
  }
  _exit(127);
}

}  // namespace

RemoteProcess run_for_user(const SpawnOptions& options) {
  Account account;
  bool drop = false;
  if (options.privileged && getuid() == 0) {
    auto found = lookup_account(options.username);
    if (!found)
      throw ExecError(fmt::format("unknown user account \"{}\"", options.username),
                      errc::kUnknownUser);
    account = *found;
    drop = account.uid != getuid();
  } else {
    account = invoking_account();
  }

  RemoteProcess proc;
  std::optional<std::string> term;

  if (options.pty) {
    term = options.pty->term;
    Pty pty = allocate_pty(options.pty->term, options.pty->cols, options.pty->rows);
    pid_t pid = fork();
    if (pid < 0) throw ExecError("fork failed", errc::kSpawnFailed);
    if (pid == 0) {
      setsid();
      ioctl(pty.slave_fd(), TIOCSCTTY, 0);
      dup2(pty.slave_fd(), 0);
      dup2(pty.slave_fd(), 1);
      dup2(pty.slave_fd(), 2);
      if (pty.slave_fd() > 2) ::close(pty.slave_fd());
      ::close(pty.master_fd());
      child_exec(account, drop, options.command, term);
    }
    pty.release_slave();
    proc.pid = pid;
    proc.stdin_fd = pty.master_fd();
    proc.stdout_fd = pty.master_fd();
    proc.stderr_fd = -1;
    proc.pty = std::move(pty);
    return proc;
  }

  int in_pipe[2], out_pipe[2], err_pipe[2];
  if (pipe(in_pipe) != 0 || pipe(out_pipe) != 0 || pipe(err_pipe) != 0)
    throw ExecError("pipe failed", errc::kSpawnFailed);
  pid_t pid = fork();
  if (pid < 0) throw ExecError("fork failed", errc::kSpawnFailed);
  if (pid == 0) {
    dup2(in_pipe[0], 0);
    dup2(out_pipe[1], 1);
    dup2(err_pipe[1], 2);
    for (int fd : {in_pipe[0], in_pipe[1], out_pipe[0], out_pipe[1], err_pipe[0], err_pipe[1]})
      if (fd > 2) ::close(fd);
    child_exec(account, drop, options.command, term);
  }
  ::close(in_pipe[0]);
  ::close(out_pipe[1]);
  ::close(err_pipe[1]);
  proc.pid = pid;
  proc.stdin_fd = in_pipe[1];
  proc.stdout_fd = out_pipe[0];
  proc.stderr_fd = err_pipe[0];
  return proc;
}

void RemoteProcess::close_stdin() {
  if (pty) return;  // closing the master would kill output too
  if (stdin_fd >= 0) {
    ::close(stdin_fd);
    stdin_fd = -1;
  }
}

void RemoteProcess::close_all() {
  if (pty) {
    pty.reset();  // owns the master
    stdin_fd = stdout_fd = -1;
    return;
  }
  for (int* fd : {&stdin_fd, &stdout_fd, &stderr_fd}) {
    if (*fd >= 0) {
      ::close(*fd);
      *fd = -1;
    }
  }
}

namespace {

ExitResult decode_status(int status) {
  ExitResult result;
  if (WIFSIGNALED(status)) {
    result.signaled = true;
    int sig = WTERMSIG(status);
    const char* abbrev = sigabbrev_np(sig);
    result.signal_name = abbrev ? abbrev : std::to_string(sig);
    result.core_dumped = WCOREDUMP(status);
  } else {
    result.code = WEXITSTATUS(status);
  }
  return result;
}

std::optional<ExitResult> try_reap(pid_t pid) {
  int status = 0;
  pid_t r = waitpid(pid, &status, WNOHANG);
  if (r == pid) return decode_status(status);
  if (r < 0) return ExitResult{true, 0, "HUP", false};  // reaped elsewhere
  return std::nullopt;
}

}  // namespace

ExitResult wait_process(pid_t pid, bool hangup_first) {
  if (!hangup_first) {
    int status = 0;
    if (waitpid(pid, &status, 0) == pid) return decode_status(status);
    return {true, 0, "HUP", false};
  }
  kill(pid, SIGHUP);
  auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(2);
  for (;;) {
    if (auto r = try_reap(pid)) return *r;
    if (std::chrono::steady_clock::now() > deadline) {
      kill(pid, SIGKILL);
      int status = 0;
      waitpid(pid, &status, 0);
      return decode_status(status);
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }
}

// --- session channel state machine ------------------------------------------------

namespace {

// Relays one output fd to Data messages of the given kind until EOF.
void pump_output(int fd, wire::DataKind kind, session::Channel& ch, std::atomic<bool>& broken,
                 std::atomic<int>& active) {
  Bytes buf(16384);
  for (;;) {
    ssize_t n = ::read(fd, buf.data(), buf.size());
    if (n <= 0) break;  // EOF or pty master closed by exit
    try {
      ch.send_message(wire::Data{kind, Bytes(buf.begin(), buf.begin() + n)});
    } catch (const session::ChannelError&) {
      broken = true;
      break;
    }
  }
  active.fetch_sub(1);
}

}  // namespace

void handle_session_channel(session::Conversation& conv, session::Channel ch,
                            const SessionPolicy& policy) {
  std::optional<PtyParams> pty_params;
  std::optional<RemoteProcess> proc;
  std::atomic<bool> peer_broken{false};
  std::atomic<int> pumps_active{0};
  std::thread out_pump, err_pump;
  bool had_error = false;
  bool input_open = true;
  std::optional<ExitResult> exit_result;

  auto fail_channel = [&](uint64_t code, const std::string& msg) {
    log::warn("session channel {}: {}", ch.id(), msg);
    ch.reset(code);
    had_error = true;
  };

  auto join_pumps = [&] {
    if (out_pump.joinable()) out_pump.join();
    if (err_pump.joinable()) err_pump.join();
  };

  try {
    while (input_open && !had_error) {
      std::optional<wire::Message> msg;
      try {
        // Once a process runs, poll so its exit is noticed even while the
        // client keeps the channel open.
        msg = proc ? ch.next_message(session::Millis(100)) : ch.next_message();
      } catch (const session::ChannelError& e) {
        if (proc && e.code == errc::kTargetTimeout) {
          if (!exit_result) exit_result = try_reap(proc->pid);
          if (exit_result && pumps_active.load() == 0) break;  // all output flushed
          continue;
        }
        had_error = true;  // peer reset or connection loss
        break;
      }
      if (!msg) {
        input_open = false;
        break;
      }

      if (const auto* pty_req = std::get_if<wire::PtyRequest>(&*msg)) {
        if (proc || pty_params) {
          fail_channel(errc::kProtocol, "pty-request out of order");
          break;
        }
        if (pty_req->cols == 0 || pty_req->rows == 0 || pty_req->cols > 10000 ||
            pty_req->rows > 10000) {
          fail_channel(errc::kProtocol, "pty dimensions out of range");
          break;
        }
        pty_params = PtyParams{pty_req->term, static_cast<uint32_t>(pty_req->cols),
                               static_cast<uint32_t>(pty_req->rows)};
        continue;
      }

      bool is_shell = std::holds_alternative<wire::ShellRequest>(*msg);
      bool is_exec = std::holds_alternative<wire::ExecRequest>(*msg);
      if (is_shell || is_exec) {
        if (proc) {
          fail_channel(errc::kProtocol, "second shell/exec request on one channel");
          break;
        }
        SpawnOptions options;
        options.username = conv.username();
        options.privileged = policy.privileged;
        options.pty = pty_params;
        if (is_exec) options.command = std::get<wire::ExecRequest>(*msg).command;
        try {
          proc = run_for_user(options);
        } catch (const ExecError& e) {
          fail_channel(e.code, e.what());
          break;
        }
        pumps_active.fetch_add(1);
        out_pump = std::thread([&] {
          pump_output(proc->stdout_fd, wire::DataKind::Stdout, ch, peer_broken, pumps_active);
        });
        if (proc->stderr_fd >= 0) {
          pumps_active.fetch_add(1);
          err_pump = std::thread([&] {
            pump_output(proc->stderr_fd, wire::DataKind::Stderr, ch, peer_broken, pumps_active);
          });
        }
        continue;
      }

      if (const auto* data = std::get_if<wire::Data>(&*msg)) {
        if (!proc) {
          fail_channel(errc::kProtocol, "data before shell/exec request");
          break;
        }
        if (data->kind != wire::DataKind::Stdin) {
          fail_channel(errc::kProtocol, "only stdin data flows client-to-server");
          break;
        }
        size_t off = 0;
        while (off < data->payload.size() && proc->stdin_fd >= 0) {
          ssize_t n = ::write(proc->stdin_fd, data->payload.data() + off,
                              data->payload.size() - off);
          if (n <= 0) break;  // process went away; exit status will tell
          off += static_cast<size_t>(n);
        }
        continue;
      }

      if (const auto* wc = std::get_if<wire::WindowChange>(&*msg)) {
        if (proc && proc->pty && wc->cols > 0 && wc->rows > 0 && wc->cols <= 10000 &&
            wc->rows <= 10000) {
          proc->pty->resize(static_cast<uint32_t>(wc->cols), static_cast<uint32_t>(wc->rows));
        } else if (!proc) {
          fail_channel(errc::kProtocol, "window-change before shell/exec");
          break;
        }
        continue;
      }

      fail_channel(errc::kProtocol,
                   fmt::format("unexpected {} message from client", message_type_name(*msg)));
      break;
    }

    if (!proc) {
      if (!had_error) ch.close();
      return;
    }

    // Input finished or channel broke: EOF the process stdin, collect the
    // exit status (hanging up if the peer is gone), drain output, then
    // report termination exactly once, after all Data.
    proc->close_stdin();
    bool hup_sent = false;
    auto hup_deadline = std::chrono::steady_clock::now();
    while (!exit_result) {
      exit_result = try_reap(proc->pid);
      if (exit_result) break;
      // A pty process with no more input coming is hung up like a closed
      // terminal; pipe-fed processes get real EOF and finish on their own.
      bool hangup = had_error || peer_broken.load() || ch.is_broken() ||
                    (!input_open && proc->pty.has_value());
      if (hangup) {
        if (!hup_sent) {
          kill(proc->pid, SIGHUP);
          hup_sent = true;
          hup_deadline = std::chrono::steady_clock::now() + std::chrono::seconds(2);
        } else if (std::chrono::steady_clock::now() > hup_deadline) {
          kill(proc->pid, SIGKILL);
        }
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }
    join_pumps();
    proc->close_all();

    if (!had_error && !peer_broken) {
      if (exit_result->signaled)
        ch.send_message(wire::ExitSignal{exit_result->signal_name, exit_result->core_dumped, ""});
      else
        ch.send_message(wire::ExitStatus{static_cast<uint64_t>(exit_result->code)});
      ch.close();
    }
  } catch (const std::exception& e) {
    log::warn("session channel {}: {}", ch.id(), e.what());
    if (proc) {
      kill(proc->pid, SIGKILL);
      waitpid(proc->pid, nullptr, 0);
      join_pumps();
      proc->close_all();
    }
    ch.reset(errc::kInternal);
  }
}

session::Server::ChannelHandler make_session_handler(SessionPolicy policy) {
  return [policy](session::Conversation& conv, session::Channel ch) {
    handle_session_channel(conv, std::move(ch), policy);
  };
}

}  // namespace quicshell::exec
