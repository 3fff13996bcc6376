#ifndef NASFCOS_WORKER_POOL_HPP_
#define NASFCOS_WORKER_POOL_HPP_

#include <sys/types.h>

#include <chrono>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "nasfcos/wire.hpp"

namespace nasfcos {

struct PoolOptions {
  std::chrono::milliseconds timeout{600'000};
  int max_attempts = 2;  // a request lost to a dying worker is retried once
};

struct PoolStats {
  std::size_t dispatched = 0;  // request lines written, retries included
  std::size_t retries = 0;
  std::size_t respawns = 0;
  std::size_t timeouts = 0;
};

// Local pool of worker processes speaking the wire protocol. Each command is
// run through /bin/sh -c; every worker holds at most one request in flight.
// A worker that exits is respawned with its original command. Requests
// failing permanently come back as error responses carrying their id.
class WorkerPool {
 public:
  WorkerPool(std::vector<std::string> commands, PoolOptions options = {});
  ~WorkerPool();

  WorkerPool(const WorkerPool&) = delete;
  WorkerPool& operator=(const WorkerPool&) = delete;

  // Responses are returned in request order. Request ids must be unique.
  // Throws ProtocolError on malformed or unmatched response lines.
  std::vector<WireResponse> dispatch(std::span<const WireRequest> requests);

  std::size_t size() const { return workers_.size(); }
  const PoolStats& stats() const { return stats_; }

 private:
  struct Worker {
    std::string command;
    pid_t pid = -1;
    int to_child = -1;
    int from_child = -1;
    std::string buffer;
    std::ptrdiff_t in_flight = -1;  // request index
    std::chrono::steady_clock::time_point deadline;
  };

  void spawn(Worker& w);
  void terminate(Worker& w, bool force);

  std::vector<Worker> workers_;
  PoolOptions options_;
  PoolStats stats_;
};

}  // namespace nasfcos

#endif  // NASFCOS_WORKER_POOL_HPP_
