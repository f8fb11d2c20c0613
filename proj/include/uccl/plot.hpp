#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <ostream>
#include <vector>

#include "uccl/tensor.hpp"

namespace uccl {

/// RGB colour of class `c`; fixed across runs, cycles after the table ends.
std::array<std::uint8_t, 3> class_color(int c);

/// (H, W) labels -> (3, H, W) image in [0, 1].
Tensor colorize(const LabelMap& labels);

/// Writes figures/loss_curve.png, figures/miou_curve.png and figures/predictions.png under
/// `run_dir`. The mIoU curve is skipped, with a warning on `warn`, when eval.csv has no rows.
/// Throws std::runtime_error when metrics.csv is missing or empty.
std::vector<std::filesystem::path> plot_run(const std::filesystem::path& run_dir, std::ostream& warn,
                                            int panel_scenes = 4);

}  // namespace uccl
