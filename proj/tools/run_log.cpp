#include "run_log.hpp"

#include <spdlog/sinks/basic_file_sink.h>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

RunLog::RunLog(const std::filesystem::path& file, bool append) {
  std::vector<spdlog::sink_ptr> sinks{std::make_shared<spdlog::sinks::stdout_sink_mt>(),
                                      std::make_shared<spdlog::sinks::basic_file_sink_mt>(file.string(), !append)};
  impl_ = std::make_shared<spdlog::logger>("microdiff", sinks.begin(), sinks.end());
  impl_->set_pattern("[%Y-%m-%d %H:%M:%S] [%l] %v");
  impl_->flush_on(spdlog::level::info);
}

RunLog::~RunLog() = default;

void RunLog::info(const std::string& msg) { impl_->info(msg); }
void RunLog::warn(const std::string& msg) { impl_->warn(msg); }
void RunLog::error(const std::string& msg) { impl_->error(msg); }
