#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace curvereg {

// Exit codes of the command-line tool.
enum ExitCode { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumerical = 3 };

// Runs one subcommand (args exclude the program name). JSON goes to out, human text to err.
int run_cli(const std::vector<std::string> &args, std::ostream &out, std::ostream &err);

} // namespace curvereg
