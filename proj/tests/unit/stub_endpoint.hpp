#pragma once

#include <atomic>
#include <deque>
#include <memory>
#include <mutex>
#include <string>
#include <thread>

namespace httplib {
class Server;
}

namespace musc::testing {

// In-process chat-completion endpoint on 127.0.0.1. Replies are a
// deterministic function of the last user message:
//   decompose prompts  -> the "; "-separated parts as a numbered list
//   recombine prompts  -> the items joined with "; "
//   negate prompts     -> "not " + constraint
//   substitute prompts -> "other " + constraint
//   anything else      -> "reply to: " + message
class StubEndpoint {
 public:
  StubEndpoint();
  ~StubEndpoint();

  std::string base_url() const { return "http://127.0.0.1:" + std::to_string(port_); }

  // Statuses returned (in order) before falling back to 200.
  void script(std::deque<int> statuses);
  void set_delay_ms(int ms) { delay_ms_ = ms; }
  void set_garbage(bool on) { garbage_ = on; }

  int requests() const { return requests_.load(); }
  int max_in_flight() const { return max_in_flight_.load(); }
  std::string last_authorization() const;

 private:
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
  int port_ = 0;
  mutable std::mutex mu_;
  std::deque<int> script_;
  std::string last_auth_;
  std::atomic<int> delay_ms_{0};
  std::atomic<bool> garbage_{false};
  std::atomic<int> requests_{0};
  std::atomic<int> in_flight_{0};
  std::atomic<int> max_in_flight_{0};
};

}  // namespace musc::testing
