#include "test_util.hpp"

#include <filesystem>
#include <unistd.h>

namespace musc::testing {

TempDir::TempDir(const std::string& name) {
  namespace fs = std::filesystem;
  path_ = (fs::temp_directory_path() / ("musc-test-" + std::to_string(::getpid()) + "-" + name)).string();
  fs::remove_all(path_);
  fs::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  std::filesystem::remove_all(path_, ec);
}

}  // namespace musc::testing
