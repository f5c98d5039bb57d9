#pragma once

#include <filesystem>
#include <vector>

#include "cryoseg/metrics.hpp"

namespace cryoseg::pipeline {

/// report.csv: one row per image, then organ/fold aggregate rows, then
/// reference-score footer rows.
void write_report_csv(const std::filesystem::path& path,
                      const std::vector<metrics::TaggedReport>& reports,
                      const metrics::Aggregates& agg);

/// Per-fold AJI/PQ table with the reference baseline column.
void write_fold_table(const std::filesystem::path& path, const metrics::Aggregates& agg);

/// Per-organ AJI/PQ/Dice table.
void write_organ_table(const std::filesystem::path& path, const metrics::Aggregates& agg);

}  // namespace cryoseg::pipeline
