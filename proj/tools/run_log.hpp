#pragma once

// Run logger writing to stdout and <out>/log.txt. Kept free of spdlog
// headers: torch ships its own fmt, which clashes with the one spdlog uses.

#include <filesystem>
#include <memory>
#include <sstream>
#include <string>

namespace spdlog {
class logger;
}

class RunLog {
 public:
  RunLog(const std::filesystem::path& file, bool append);
  ~RunLog();

  void info(const std::string& msg);
  void warn(const std::string& msg);
  void error(const std::string& msg);

 private:
  std::shared_ptr<spdlog::logger> impl_;
};

template <typename... Args>
std::string cat(const Args&... args) {
  std::ostringstream ss;
  (ss << ... << args);
  return ss.str();
}
