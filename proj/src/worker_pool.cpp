#include "nasfcos/worker_pool.hpp"

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <deque>
#include <optional>
#include <stdexcept>
#include <system_error>
#include <thread>
#include <unordered_map>

#include <fmt/format.h>

namespace nasfcos {

namespace {

using Clock = std::chrono::steady_clock;

bool write_all(int fd, std::string_view data) {
  while (!data.empty()) {
    const ssize_t n = ::write(fd, data.data(), data.size());
    if (n < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    data.remove_prefix(static_cast<std::size_t>(n));
  }
  return true;
}

void close_fd(int& fd) {
  if (fd >= 0) ::close(fd);
  fd = -1;
}

WireResponse failure(std::int64_t id, std::string message) {
  return WireResponse{.id = id, .ok = false, .reward = 0.0, .components = std::nullopt,
                      .message = std::move(message)};
}

}  // namespace

WorkerPool::WorkerPool(std::vector<std::string> commands, PoolOptions options)
    : options_(options) {
  if (commands.empty()) throw std::invalid_argument("worker pool needs at least one worker");
  if (options_.max_attempts < 1) throw std::invalid_argument("max_attempts must be >= 1");
  // Writes to a worker that just died must fail with EPIPE, not kill us.
  ::signal(SIGPIPE, SIG_IGN);
  workers_.resize(commands.size());
  for (std::size_t k = 0; k < commands.size(); ++k) {
    workers_[k].command = std::move(commands[k]);
    spawn(workers_[k]);
  }
}

WorkerPool::~WorkerPool() {
  for (Worker& w : workers_) terminate(w, false);
}

void WorkerPool::spawn(Worker& w) {
  int in_pipe[2];
  int out_pipe[2];
  if (::pipe2(in_pipe, O_CLOEXEC) != 0) {
    throw std::system_error(errno, std::generic_category(), "pipe");
  }
  if (::pipe2(out_pipe, O_CLOEXEC) != 0) {
    ::close(in_pipe[0]);
    ::close(in_pipe[1]);
    throw std::system_error(errno, std::generic_category(), "pipe");
  }
  const pid_t pid = ::fork();
  if (pid < 0) throw std::system_error(errno, std::generic_category(), "fork");
  if (pid == 0) {
    ::dup2(in_pipe[0], STDIN_FILENO);
    ::dup2(out_pipe[1], STDOUT_FILENO);
    ::execl("/bin/sh", "sh", "-c", w.command.c_str(), static_cast<char*>(nullptr));
    ::_exit(127);
  }
  ::close(in_pipe[0]);
  ::close(out_pipe[1]);
  w.pid = pid;
  w.to_child = in_pipe[1];
  w.from_child = out_pipe[0];
  w.buffer.clear();
  w.in_flight = -1;
}

void WorkerPool::terminate(Worker& w, bool force) {
  close_fd(w.to_child);
  close_fd(w.from_child);
  if (w.pid <= 0) return;
  if (force) ::kill(w.pid, SIGKILL);
  // Closing stdin asks a well-behaved worker to exit; escalate if it lingers.
  for (int attempt = 0; attempt < 200; ++attempt) {
    const pid_t r = ::waitpid(w.pid, nullptr, WNOHANG);
    if (r == w.pid || (r < 0 && errno == ECHILD)) {
      w.pid = -1;
      return;
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }
  ::kill(w.pid, SIGKILL);
  ::waitpid(w.pid, nullptr, 0);
  w.pid = -1;
}

std::vector<WireResponse> WorkerPool::dispatch(std::span<const WireRequest> requests) {
  const std::size_t n = requests.size();
  std::vector<std::optional<WireResponse>> results(n);
  std::vector<int> attempts(n, 0);
  std::unordered_map<std::int64_t, std::size_t> index_of;
  for (std::size_t k = 0; k < n; ++k) {
    if (!index_of.emplace(requests[k].id, k).second) {
      throw std::invalid_argument(fmt::format("duplicate request id {}", requests[k].id));
    }
  }
  std::deque<std::size_t> pending;
  for (std::size_t k = 0; k < n; ++k) pending.push_back(k);
  std::size_t remaining = n;

  const auto lose_worker = [&](Worker& w, const std::string& why) {
    const std::ptrdiff_t idx = w.in_flight;
    terminate(w, true);
    spawn(w);
    ++stats_.respawns;
    if (idx < 0) return;
    const auto k = static_cast<std::size_t>(idx);
    if (attempts[k] < options_.max_attempts) {
      ++stats_.retries;
      pending.push_front(k);
    } else {
      results[k] = failure(requests[k].id, why);
      --remaining;
    }
  };

  while (remaining > 0) {
    for (Worker& w : workers_) {
      if (w.in_flight >= 0 || pending.empty()) continue;
      const std::size_t k = pending.front();
      pending.pop_front();
      ++attempts[k];
      ++stats_.dispatched;
      w.in_flight = static_cast<std::ptrdiff_t>(k);
      w.deadline = Clock::now() + options_.timeout;
      if (!write_all(w.to_child, encode_request(requests[k]) + "\n")) {
        lose_worker(w, "worker died");
      }
    }

    std::vector<pollfd> fds;
    std::vector<Worker*> polled;
    auto wait = options_.timeout;
    const auto now = Clock::now();
    for (Worker& w : workers_) {
      if (w.in_flight < 0) continue;
      fds.push_back({w.from_child, POLLIN, 0});
      polled.push_back(&w);
      wait = std::min(wait, std::chrono::duration_cast<std::chrono::milliseconds>(
                                w.deadline - now) + std::chrono::milliseconds(1));
    }
    if (fds.empty()) continue;
    const int ready = ::poll(fds.data(), fds.size(),
                             static_cast<int>(std::max<std::int64_t>(wait.count(), 0)));
    if (ready < 0 && errno != EINTR) {
      throw std::system_error(errno, std::generic_category(), "poll");
    }

    for (std::size_t f = 0; f < fds.size(); ++f) {
      Worker& w = *polled[f];
      if (fds[f].revents == 0) continue;
      char chunk[4096];
      const ssize_t got = ::read(w.from_child, chunk, sizeof chunk);
      if (got < 0 && errno == EINTR) continue;
      if (got <= 0) {
        lose_worker(w, "worker died");
        continue;
      }
      w.buffer.append(chunk, static_cast<std::size_t>(got));
      std::size_t eol;
      while ((eol = w.buffer.find('\n')) != std::string::npos) {
        const std::string line = w.buffer.substr(0, eol);
        w.buffer.erase(0, eol + 1);
        if (line.empty()) continue;
        WireResponse response = decode_response(line);
        const auto it = index_of.find(response.id);
        if (it == index_of.end() || w.in_flight < 0 ||
            it->second != static_cast<std::size_t>(w.in_flight)) {
          throw ProtocolError(fmt::format("unexpected response id {}", response.id));
        }
        results[it->second] = std::move(response);
        --remaining;
        w.in_flight = -1;
      }
    }

    const auto after = Clock::now();
    for (Worker& w : workers_) {
      if (w.in_flight < 0 || after < w.deadline) continue;
      const auto k = static_cast<std::size_t>(w.in_flight);
      ++stats_.timeouts;
      results[k] = failure(requests[k].id, "timeout");
      --remaining;
      w.in_flight = -1;
      terminate(w, true);
      spawn(w);
      ++stats_.respawns;
    }
  }

  std::vector<WireResponse> out;
  out.reserve(n);
  for (auto& r : results) out.push_back(std::move(*r));
  return out;
}

}  // namespace nasfcos
