#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace pcpred::cli {

enum ExitCode : int {
  ok = 0,
  usage_error = 1,
  data_error = 2,
  numeric_error = 3,
};

/// Runs one `pcpred` invocation; `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace pcpred::cli
