// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>

#include "quicshell/session.hpp"

namespace quicshell::exec {

struct ExecError : std::runtime_error {
  uint64_t code;
  ExecError(const std::string& msg, uint64_t code_) : std::runtime_error(msg), code(code_) {}
};

// RAII wrapper around a POSIX pseudo-terminal master.
class Pty {
 public:
  Pty() = default;
  Pty(Pty&& other) noexcept;
  Pty& operator=(Pty&& other) noexcept;
  ~Pty();

  int master_fd() const { return master_; }
  int slave_fd() const { return slave_; }
  void release_slave();  // parent side closes the slave after fork
  void resize(uint32_t cols, uint32_t rows);
  std::pair<uint32_t, uint32_t> size() const;  // {cols, rows}

 private:
  friend Pty allocate_pty(const std::string&, uint32_t, uint32_t);
  int master_ = -1;
  int slave_ = -1;
};

// Allocates a pty pair with the window size applied; TERM is applied at
// spawn time. Throws std::invalid_argument for zero dimensions, ExecError
// when the platform refuses.
Pty allocate_pty(const std::string& term, uint32_t cols, uint32_t rows);

struct PtyParams {
  std::string term = "xterm";
  uint32_t cols = 80;
  uint32_t rows = 24;
};

struct SpawnOptions {
  std::string username;                // authenticated account name
  std::optional<std::string> command;  // nullopt: interactive login shell
  std::optional<PtyParams> pty;
  bool privileged = false;  // setuid to `username` (requires root)
};

// A spawned remote process with its I/O endpoints. stderr_fd is -1 under a
// pty, where the terminal merges the streams.
struct RemoteProcess {
  pid_t pid = -1;
  int stdin_fd = -1;
  int stdout_fd = -1;
  int stderr_fd = -1;
  std::optional<Pty> pty;

  void close_stdin();
  void close_all();
};

// Spawns a shell or command for the user. In privileged mode the username
// must exist in the account database (ExecError kUnknownUser before any
// fork); otherwise the process runs as the invoking account.
RemoteProcess run_for_user(const SpawnOptions& options);

struct ExitResult {
  bool signaled = false;
  int code = 0;
  std::string signal_name;  // without the SIG prefix
  bool core_dumped = false;
};

// Reaps the process, sending SIGKILL if it ignores SIGHUP for too long.
ExitResult wait_process(pid_t pid, bool hangup_first = false);

struct SessionPolicy {
  bool privileged = false;
};

// Drives one session channel to completion: optional PtyRequest, exactly one
// ShellRequest or ExecRequest, stdin/stdout/stderr relay, WindowChange, and
// exactly one terminal ExitStatus/ExitSignal message after all output.
void handle_session_channel(session::Conversation& conv, session::Channel ch,
                            const SessionPolicy& policy = {});

session::Server::ChannelHandler make_session_handler(SessionPolicy policy = {});

}  // namespace quicshell::exec
