#include "aggpose/manifest.hpp"

#include <chrono>
#include <ctime>
#include <stdexcept>

#include "aggpose/fileutil.hpp"

namespace aggpose {

using nlohmann::json;

json RunManifest::to_json() const {
  json out = json::array();
  for (const auto& p : outputs) out.push_back(p.string());
  return {{"command", command}, {"arguments", arguments}, {"config", config},     {"seed", seed},
          {"build", build_id},  {"started", started},     {"finished", finished}, {"outputs", out}};
}

RunManifest RunManifest::from_json(const json& j) {
  RunManifest m;
  m.command = j.at("command").get<std::string>();
  m.arguments = j.value("arguments", std::vector<std::string>{});
  m.config = j.value("config", json::object());
  m.seed = j.value("seed", std::uint64_t{0});
  m.build_id = j.value("build", std::string());
  m.started = j.value("started", std::string());
  m.finished = j.value("finished", std::string());
  for (const auto& p : j.value("outputs", std::vector<std::string>{})) m.outputs.emplace_back(p);
  return m;
}

void RunManifest::write(const std::filesystem::path& path) const {
  for (const auto& p : outputs) {
    if (!std::filesystem::exists(p)) throw std::runtime_error("manifest output '" + p.string() + "' does not exist");
  }
  atomic_write_text(path, to_json().dump(2) + "\n");
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace aggpose
