#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace patchlm {

// Exit codes: 0 success, 1 contract/config/usage error, 2 I/O error.
inline constexpr int kExitOk = 0;
inline constexpr int kExitContract = 1;
inline constexpr int kExitIo = 2;

// `args` excludes the program name.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int dispatch(int argc, char** argv);

}  // namespace patchlm
