#include "ifsr/report.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include "ifsr/stats.hpp"

namespace ifsr::rep {
namespace {

std::string fmt_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(tok);
    return out;
}

}  // namespace

void sort_rows(std::vector<proto::MetricRow>& rows) {
    std::sort(rows.begin(), rows.end(), [](const proto::MetricRow& a, const proto::MetricRow& b) {
        if (a.variant != b.variant) return a.variant < b.variant;
        if (a.k != b.k) return a.k < b.k;
        if (a.seed != b.seed) return a.seed < b.seed;
        if (a.split != b.split) return a.split < b.split;
        return a.metric < b.metric;
    });
}

void write_metrics_csv(const std::vector<proto::MetricRow>& rows, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw MissingArtifact("write_metrics_csv: cannot open " + path);
    out << "variant,K,seed,split,metric,value\n";
    for (const auto& r : rows)
        out << r.variant << "," << r.k << "," << r.seed << "," << r.split << "," << r.metric << ","
            << fmt_double(r.value) << "\n";
}

std::vector<proto::MetricRow> read_metrics_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw MissingArtifact("read_metrics_csv: cannot open " + path);
    std::string line;
    std::getline(in, line);
    require(line == "variant,K,seed,split,metric,value", "read_metrics_csv: bad header in " + path);
    std::vector<proto::MetricRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto f = split_csv_line(line);
        require(f.size() == 6, "read_metrics_csv: bad row in " + path);
        rows.push_back({f[0], std::stol(f[1]), std::stol(f[2]), f[3], f[4], std::stod(f[5])});
    }
    return rows;
}

std::vector<Aggregate> aggregate(const std::vector<proto::MetricRow>& rows) {
    std::map<std::tuple<std::string, long, std::string, std::string>, std::vector<double>> groups;
    for (const auto& r : rows) groups[{r.variant, r.k, r.split, r.metric}].push_back(r.value);

    std::vector<Aggregate> out;
    for (const auto& [key, values] : groups) {
        Aggregate a;
        a.variant = std::get<0>(key);
        a.k = std::get<1>(key);
        a.split = std::get<2>(key);
        a.metric = std::get<3>(key);
        a.mean = stats::mean(values);
        a.ci95 = stats::ci95_half_width(values);
        a.runs = values.size();
        out.push_back(a);
    }
    return out;
}

void write_report(const std::vector<Aggregate>& aggs, const std::string& md_path,
                  const std::string& csv_path) {
    {
        std::ofstream csv(csv_path);
        if (!csv) throw MissingArtifact("write_report: cannot open " + csv_path);
        csv << "variant,K,split,metric,mean,ci95,runs\n";
        csv.precision(17);
        for (const auto& a : aggs)
            csv << a.variant << "," << a.k << "," << a.split << "," << a.metric << "," << a.mean
                << "," << a.ci95 << "," << a.runs << "\n";
    }

    std::ofstream md(md_path);
    if (!md) throw MissingArtifact("write_report: cannot open " + md_path);
    md << "# Results\n\nMean AP with 95% confidence half-widths (Student-t over seeds).\n";
    for (const std::string metric : {"box_ap", "mask_ap"}) {
        md << "\n## " << metric << "\n\n";
        md << "| variant | K | new | base | all |\n";
        md << "|---|---|---|---|---|\n";
        std::map<std::pair<std::string, long>, std::map<std::string, const Aggregate*>> table;
        for (const auto& a : aggs)
            if (a.metric == metric) table[{a.variant, a.k}][a.split] = &a;
        for (const auto& [vk, splits] : table) {
            md << "| " << vk.first << " | " << vk.second << " |";
            for (const std::string split : {"new", "base", "all"}) {
                auto it = splits.find(split);
                if (it == splits.end()) {
                    md << " - |";
                } else {
                    char buf[64];
                    std::snprintf(buf, sizeof(buf), " %.4f ± %.4f |", it->second->mean,
                                  it->second->ci95);
                    md << buf;
                }
            }
            md << "\n";
        }
    }
}

}  // namespace ifsr::rep
