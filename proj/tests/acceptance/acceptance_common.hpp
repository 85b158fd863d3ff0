#pragma once

#include <chrono>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

namespace vseg::acceptance {

// Runs named criteria, prints one PASS/FAIL line each, returns the count of
// failures as the process exit code.
class Suite {
 public:
  void run(const std::string& name, const std::function<bool(std::string&)>& body) {
    std::string detail;
    bool ok = false;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      ok = body(detail);
    } catch (const std::exception& e) {
      detail = std::string("exception: ") + e.what();
    }
    const double sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s  %s (%.1fs)%s%s\n", ok ? "PASS" : "FAIL", name.c_str(), sec,
                detail.empty() ? "" : " -- ", detail.c_str());
    std::fflush(stdout);
    failures_ += ok ? 0 : 1;
  }

  int exit_code() const { return failures_; }

 private:
  int failures_ = 0;
};

}  // namespace vseg::acceptance
