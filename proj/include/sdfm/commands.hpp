#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

#include "sdfm/numerics.hpp"

namespace sdfm {

/// Exit codes shared by every subcommand.
enum ExitCode : int { kExitOk = 0, kExitUsage = 2, kExitBudget = 3, kExitNumeric = 4 };

/// Runs the command line `args` (args[0] is the program name). Results go
/// to `out`; failures print one `error: ...` line to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// n points from eight isotropic Gaussians (std `spread`) centred on the
/// circle of radius `radius`.
DenseMatrix eight_gaussians(std::size_t n, Rng& rng, double radius = 2.0, double spread = 0.1);

/// Exact 2-Wasserstein distance between two uniform clouds of equal size.
double empirical_w2(const DenseMatrix& a, const DenseMatrix& b);

}  // namespace sdfm
