#include "nasfcos/wire.hpp"

#include <array>

#include <fmt/format.h>

namespace nasfcos {

namespace {

constexpr std::array<std::string_view, 3> kStageNames = {"fpn", "head", "full"};

nlohmann::json parse_line(std::string_view line) {
  try {
    nlohmann::json j = nlohmann::json::parse(line);
    if (!j.is_object()) throw ProtocolError("message is not a JSON object");
    return j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ProtocolError(fmt::format("malformed message: {}", e.what()));
  }
}

}  // namespace

std::string_view stage_name(EvalStage stage) {
  return kStageNames.at(static_cast<std::size_t>(stage));
}

EvalStage stage_from_name(std::string_view name) {
  for (std::size_t k = 0; k < kStageNames.size(); ++k) {
    if (kStageNames[k] == name) return static_cast<EvalStage>(k);
  }
  throw ProtocolError(fmt::format("unknown stage \"{}\"", name));
}

std::string encode_request(const WireRequest& request) {
  nlohmann::ordered_json j;
  j["id"] = request.id;
  j["stage"] = stage_name(request.stage);
  j["genome"] = to_json(request.genome);
  j["config"] = {{"iterations", request.iterations}, {"seed", request.seed}};
  return j.dump();
}

WireRequest decode_request(std::string_view line) {
  const nlohmann::json j = parse_line(line);
  try {
    WireRequest request;
    request.id = j.at("id").get<std::int64_t>();
    request.stage = stage_from_name(j.at("stage").get<std::string>());
    request.genome = genome_from_json(j.at("genome"));
    const auto& cfg = j.at("config");
    request.iterations = cfg.at("iterations").get<int>();
    request.seed = cfg.at("seed").get<std::uint64_t>();
    return request;
  } catch (const nlohmann::json::exception& e) {
    throw ProtocolError(fmt::format("malformed request: {}", e.what()));
  } catch (const SearchSpaceError& e) {
    throw ProtocolError(fmt::format("malformed request genome: {}", e.what()));
  }
}

std::string encode_response(const WireResponse& response) {
  nlohmann::ordered_json j;
  j["id"] = response.id;
  j["status"] = response.ok ? "ok" : "error";
  if (response.ok) j["reward"] = response.reward;
  if (response.components) {
    j["components"] = {{"cls", response.components->cls},
                       {"reg", response.components->reg},
                       {"ctr", response.components->ctr}};
  }
  if (response.message) j["message"] = *response.message;
  return j.dump();
}

WireResponse decode_response(std::string_view line) {
  const nlohmann::json j = parse_line(line);
  try {
    WireResponse response;
    response.id = j.at("id").get<std::int64_t>();
    const std::string status = j.at("status").get<std::string>();
    if (status != "ok" && status != "error") {
      throw ProtocolError(fmt::format("unknown status \"{}\"", status));
    }
    response.ok = status == "ok";
    if (response.ok || j.contains("reward")) {
      response.reward = j.at("reward").get<double>();
    }
    if (j.contains("components") && !j["components"].is_null()) {
      const auto& c = j["components"];
      response.components = LossComponents{c.at("cls").get<double>(),
                                           c.at("reg").get<double>(),
                                           c.at("ctr").get<double>()};
    }
    if (j.contains("message") && !j["message"].is_null()) {
      response.message = j["message"].get<std::string>();
    }
    return response;
  } catch (const nlohmann::json::exception& e) {
    throw ProtocolError(fmt::format("malformed response: {}", e.what()));
  }
}

}  // namespace nasfcos
