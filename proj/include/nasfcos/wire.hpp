#ifndef NASFCOS_WIRE_HPP_
#define NASFCOS_WIRE_HPP_

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

#include "nasfcos/search_space.hpp"

namespace nasfcos {

// Newline-delimited JSON exchanged with evaluation workers over their
// stdin/stdout. One message per line; a response echoes its request id.
//
//   request  {"id":int,"stage":"fpn"|"head"|"full","genome":{...},
//             "config":{"iterations":int,"seed":int}}
//   response {"id":int,"status":"ok"|"error","reward":real,
//             "components":{"cls":real,"reg":real,"ctr":real}?,
//             "message":str?}
//
// "reward" is required when status is "ok".

enum class EvalStage : std::uint8_t { Fpn, Head, Full };

std::string_view stage_name(EvalStage stage);
EvalStage stage_from_name(std::string_view name);

struct LossComponents {
  double cls = 0.0;
  double reg = 0.0;
  double ctr = 0.0;

  friend bool operator==(const LossComponents&, const LossComponents&) = default;
};

struct WireRequest {
  std::int64_t id = 0;
  EvalStage stage = EvalStage::Full;
  DecoderGenome genome;
  int iterations = 300;
  std::uint64_t seed = 0;

  friend bool operator==(const WireRequest&, const WireRequest&) = default;
};

struct WireResponse {
  std::int64_t id = 0;
  bool ok = true;
  double reward = 0.0;
  std::optional<LossComponents> components;
  std::optional<std::string> message;

  friend bool operator==(const WireResponse&, const WireResponse&) = default;
};

class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Encoders return a single line without the trailing newline.
std::string encode_request(const WireRequest& request);
WireRequest decode_request(std::string_view line);
std::string encode_response(const WireResponse& response);
WireResponse decode_response(std::string_view line);

}  // namespace nasfcos

#endif  // NASFCOS_WIRE_HPP_
