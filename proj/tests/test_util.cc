#include "test_util.h"

#include <filesystem>
#include <unistd.h>

namespace soa::testing {

std::string TempDir(const std::string& tag) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() /
                       ("soa_test_" + tag + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir.string();
}

}  // namespace soa::testing
