#include "stub_endpoint.hpp"

#include <chrono>
#include <httplib.h>
#include <json.hpp>
#include <sstream>
#include <vector>

namespace musc::testing {

namespace {

using json = nlohmann::json;

std::vector<std::string> split(const std::string& s, const std::string& sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(s.substr(start, pos - start));
    if (pos == std::string::npos) break;
    start = pos + sep.size();
  }
  return out;
}

std::string after(const std::string& s, const std::string& marker) {
  const auto pos = s.find(marker);
  return pos == std::string::npos ? "" : s.substr(pos + marker.size());
}

std::string reply_for(const std::string& msg) {
  if (msg.find("Break the instruction") != std::string::npos) {
    std::string out;
    int i = 1;
    for (const auto& part : split(after(msg, "Instruction:\n"), "; ")) {
      out += std::to_string(i++) + ". " + part + "\n";
    }
    return out;
  }
  if (msg.find("Merge these constraints") != std::string::npos) {
    std::istringstream in(after(msg, "Constraints:\n"));
    std::string line, out;
    while (std::getline(in, line)) {
      const auto dot = line.find(". ");
      if (dot == std::string::npos) continue;
      if (!out.empty()) out += "; ";
      out += line.substr(dot + 2);
    }
    return out;
  }
  if (msg.find("demands the opposite") != std::string::npos) {
    return "not " + after(msg, "Constraint: ");
  }
  if (msg.find("Replace this constraint") != std::string::npos) {
    return "other " + after(msg, "Constraint: ");
  }
  return "reply to: " + msg;
}

}  // namespace

StubEndpoint::StubEndpoint() : server_(std::make_unique<httplib::Server>()) {
  server_->Post(R"(/v1/chat/completions)", [this](const httplib::Request& req,
                                                  httplib::Response& res) {
    const int now = in_flight_.fetch_add(1) + 1;
    int prev = max_in_flight_.load();
    while (now > prev && !max_in_flight_.compare_exchange_weak(prev, now)) {
    }
    requests_.fetch_add(1);
    int status = 200;
    {
      std::lock_guard lock(mu_);
      last_auth_ = req.get_header_value("Authorization");
      if (!script_.empty()) {
        status = script_.front();
        script_.pop_front();
      }
    }
    if (delay_ms_ > 0) std::this_thread::sleep_for(std::chrono::milliseconds(delay_ms_));
    res.status = status;
    if (status != 200) {
      res.set_content("{\"error\": \"scripted\"}", "application/json");
    } else if (garbage_) {
      res.set_content("<html>not json</html>", "text/html");
    } else {
      const auto body = json::parse(req.body);
      std::string last;
      for (const auto& m : body.at("messages")) {
        if (m.at("role") == "user") last = m.at("content").get<std::string>();
      }
      json out;
      out["choices"] = json::array({{{"message", {{"role", "assistant"},
                                                  {"content", reply_for(last)}}}}});
      res.set_content(out.dump(), "application/json");
    }
    in_flight_.fetch_sub(1);
  });
  port_ = server_->bind_to_any_port("127.0.0.1");
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
}

StubEndpoint::~StubEndpoint() {
  server_->stop();
  thread_.join();
}

void StubEndpoint::script(std::deque<int> statuses) {
  std::lock_guard lock(mu_);
  script_ = std::move(statuses);
}

std::string StubEndpoint::last_authorization() const {
  std::lock_guard lock(mu_);
  return last_auth_;
}

}  // namespace musc::testing
