// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "stq/trainer.hpp"

namespace stq {

std::string report_to_json(const TrainingReport& report);
TrainingReport report_from_json(const std::string& text);

void write_report_files(const TrainingReport& report, const std::string& run_dir);

// Derived artifacts regenerated from report.json: per-layer summary table and
// histogram CSVs. Throws when the report is missing.
void write_report_summaries(const std::string& run_dir);

}  // namespace stq
