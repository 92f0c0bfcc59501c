// SPDX-License-Identifier: Apache-2.0
#include <arpa/inet.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <fmt/format.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <mutex>
#include <queue>
#include <stdexcept>
#include <thread>

#include "quicshell/bench.hpp"

namespace quicshell::bench {

namespace {

using Clock = std::chrono::steady_clock;

int make_udp_socket() {
  int fd = ::socket(AF_INET, SOCK_DGRAM, 0);
  if (fd < 0) throw std::runtime_error("socket() failed");
  int size = 8 * 1024 * 1024;
  setsockopt(fd, SOL_SOCKET, SO_RCVBUF, &size, sizeof size);
  setsockopt(fd, SOL_SOCKET, SO_SNDBUF, &size, sizeof size);
  return fd;
}

}  // namespace

struct LatencyProxy::Impl {
  Options options;
  int client_fd = -1;  // clients talk to this
  int server_fd = -1;  // we talk to the target from this
  uint16_t port = 0;
  std::thread thread;
  std::atomic<bool> stop{false};
  std::atomic<uint64_t> forwarded{0};
  std::atomic<uint64_t> dropped{0};
  uint64_t seen = 0;

  sockaddr_in target{};
  sockaddr_in client{};  // latest peer on the client side
  bool client_known = false;

  struct Delayed {
    Clock::time_point due;
    bool to_server;
    Bytes payload;
    bool operator>(const Delayed& o) const { return due > o.due; }
  };
  std::priority_queue<Delayed, std::vector<Delayed>, std::greater<>> queue;

  void run() {
    pollfd fds[2] = {{client_fd, POLLIN, 0}, {server_fd, POLLIN, 0}};
    std::vector<uint8_t> buf(65536);
    while (!stop.load(std::memory_order_relaxed)) {
      int timeout = 1;
      if (!queue.empty()) {
        auto wait = std::chrono::duration_cast<std::chrono::milliseconds>(queue.top().due -
                                                                          Clock::now());
        timeout = std::clamp<int>(static_cast<int>(wait.count()), 0, 1);
      }
      ::poll(fds, 2, timeout);

      for (int side = 0; side < 2; side++) {
        for (;;) {
          sockaddr_in from{};
          socklen_t from_len = sizeof from;
          ssize_t n = ::recvfrom(side == 0 ? client_fd : server_fd, buf.data(), buf.size(),
                                 MSG_DONTWAIT, reinterpret_cast<sockaddr*>(&from), &from_len);
          if (n <= 0) break;
          if (side == 0) {
            client = from;
            client_known = true;
          }
          seen++;
          if (options.drop_every > 0 && seen % options.drop_every == 0) {
            dropped.fetch_add(1, std::memory_order_relaxed);
            continue;
          }
          Delayed d;
          d.due = Clock::now() + options.one_way_delay;
          d.to_server = side == 0;
          d.payload.assign(buf.begin(), buf.begin() + n);
          queue.push(std::move(d));
        }
      }

      auto now = Clock::now();
      while (!queue.empty() && queue.top().due <= now) {
        const Delayed& d = queue.top();
        if (d.to_server) {
          ::sendto(server_fd, d.payload.data(), d.payload.size(), MSG_DONTWAIT,
                   reinterpret_cast<sockaddr*>(&target), sizeof target);
        } else if (client_known) {
          ::sendto(client_fd, d.payload.data(), d.payload.size(), MSG_DONTWAIT,
                   reinterpret_cast<sockaddr*>(&client), sizeof client);
        }
        forwarded.fetch_add(1, std::memory_order_relaxed);
        queue.pop();
      }
    }
  }
};

LatencyProxy::LatencyProxy(Options options) : impl_(std::make_unique<Impl>()) {
  impl_->options = options;

  impl_->client_fd = make_udp_socket();
  sockaddr_in bind_addr{};
  bind_addr.sin_family = AF_INET;
  bind_addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  bind_addr.sin_port = 0;
  if (::bind(impl_->client_fd, reinterpret_cast<sockaddr*>(&bind_addr), sizeof bind_addr) != 0)
    throw std::runtime_error(fmt::format("proxy bind failed: {}", strerror(errno)));
  socklen_t len = sizeof bind_addr;
  getsockname(impl_->client_fd, reinterpret_cast<sockaddr*>(&bind_addr), &len);
  impl_->port = ntohs(bind_addr.sin_port);

  impl_->server_fd = make_udp_socket();
  impl_->target.sin_family = AF_INET;
  impl_->target.sin_port = htons(options.target_port);
  if (inet_pton(AF_INET, options.target_host.c_str(), &impl_->target.sin_addr) != 1)
    throw std::runtime_error("proxy target must be an IPv4 address");

  impl_->thread = std::thread([impl = impl_.get()] { impl->run(); });
}

LatencyProxy::~LatencyProxy() { stop(); }

void LatencyProxy::stop() {
  if (!impl_) return;
  impl_->stop.store(true);
  if (impl_->thread.joinable()) impl_->thread.join();
  if (impl_->client_fd >= 0) {
    ::close(impl_->client_fd);
    impl_->client_fd = -1;
  }
  if (impl_->server_fd >= 0) {
    ::close(impl_->server_fd);
    impl_->server_fd = -1;
  }
}

uint16_t LatencyProxy::listen_port() const { return impl_->port; }
uint64_t LatencyProxy::packets_forwarded() const { return impl_->forwarded.load(); }
uint64_t LatencyProxy::packets_dropped() const { return impl_->dropped.load(); }

void RunReport::finalize() {
  mean = 0;
  stddev = 0;
  if (samples.empty()) return;
  for (double s : samples) mean += s;
  mean /= static_cast<double>(samples.size());
  if (samples.size() > 1) {
    double acc = 0;
    for (double s : samples) acc += (s - mean) * (s - mean);
    stddev = std::sqrt(acc / static_cast<double>(samples.size() - 1));
  }
}

double RunReport::median() const {
  if (samples.empty()) return 0;
  std::vector<double> sorted = samples;
  std::sort(sorted.begin(), sorted.end());
  size_t mid = sorted.size() / 2;
  if (sorted.size() % 2 == 1) return sorted[mid];
  return (sorted[mid - 1] + sorted[mid]) / 2;
}

uint64_t RunReport::max_round_trips() const {
  uint64_t m = 0;
  for (uint64_t r : round_trips) m = std::max(m, r);
  return m;
}

std::string RunReport::to_csv() const {
  std::string out = "scenario,sample_index,value,rtt_count\n";
  for (size_t i = 0; i < samples.size(); i++) {
    uint64_t rtt = i < round_trips.size() ? round_trips[i] : 0;
    out += fmt::format("{},{},{:.3f},{}\n", scenario, i, samples[i], rtt);
  }
  return out;
}

}  // namespace quicshell::bench
