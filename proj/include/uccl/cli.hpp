#pragma once

#include <ostream>

#include "uccl/verification.hpp"

namespace uccl {

enum ExitCode : int {
    kExitOk = 0,
    kExitUsage = 1,
    kExitVerification = 2,
    kExitDivergence = 3,
};

/// `uccl gen-data|train|eval|check|plot ...`; returns the process exit code.
/// `suite` backs `check` so tests can inject a broken loss.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err,
            const LossSuite& suite = LossSuite::reference());

}  // namespace uccl
