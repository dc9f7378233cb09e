#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace bdistill {

/// Append-only table of named scalars, one row per epoch (or per run).
class MetricsLog {
public:
    MetricsLog() = default;
    explicit MetricsLog(std::vector<std::string> columns);

    const std::vector<std::string>& columns() const { return columns_; }
    const std::vector<std::vector<double>>& rows() const { return rows_; }
    std::size_t size() const { return rows_.size(); }
    bool empty() const { return rows_.empty(); }

    /// Row values in column order. The first column, when named "epoch", must not decrease.
    void append(std::vector<double> row);

    std::size_t column_index(const std::string& name) const;
    double at(std::size_t row, const std::string& column) const;
    std::vector<double> column(const std::string& name) const;

    void write_csv(std::ostream& out) const;
    void write_csv(const std::string& path) const;

private:
    std::vector<std::string> columns_;
    std::vector<std::vector<double>> rows_;
};

/// Shortest decimal form that parses back to the same double; "nan"/"inf" for non-finite values.
std::string format_double(double x);

} // namespace bdistill
