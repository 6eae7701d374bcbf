#pragma once

#include <string>
#include <vector>

#include "ifsr/protocol.hpp"

namespace ifsr::rep {

/// metrics.csv: header variant,K,seed,split,metric,value; doubles are written
/// with round-trip precision so byte-compares are meaningful.
void write_metrics_csv(const std::vector<proto::MetricRow>& rows, const std::string& path);
std::vector<proto::MetricRow> read_metrics_csv(const std::string& path);

/// Canonical ordering for deterministic output files.
void sort_rows(std::vector<proto::MetricRow>& rows);

struct Aggregate {
    std::string variant;
    long k = 0;
    std::string split;
    std::string metric;
    double mean = 0.0;
    double ci95 = 0.0;  // Student-t half width over seeds
    std::size_t runs = 0;
};

std::vector<Aggregate> aggregate(const std::vector<proto::MetricRow>& rows);

/// Markdown table (per metric: variant x K rows, split columns, mean +- ci)
/// plus a flat CSV of the same numbers.
void write_report(const std::vector<Aggregate>& aggs, const std::string& md_path,
                  const std::string& csv_path);

}  // namespace ifsr::rep
