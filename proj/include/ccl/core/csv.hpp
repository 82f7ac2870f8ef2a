#ifndef CCL_CORE_CSV_HPP
#define CCL_CORE_CSV_HPP

#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ccl {

/// Minimal CSV: our fields never contain commas, quotes, or newlines.
class CsvWriter {
public:
    explicit CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header)
        : out_(path), columns_(header.size()) {
        if (!out_) throw std::runtime_error("CsvWriter: cannot open " + path.string());
        write_row(header);
    }

    void write_row(const std::vector<std::string>& cells) {
        if (cells.size() != columns_) throw std::invalid_argument("CsvWriter: column count mismatch");
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) out_ << ',';
            out_ << cells[i];
        }
        out_ << '\n';
    }

private:
    std::ofstream out_;
    std::size_t columns_;
};

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    int column(const std::string& name) const {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return static_cast<int>(i);
        throw std::runtime_error("CsvTable: no column named " + name);
    }
};

inline CsvTable read_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("read_csv: cannot open " + path.string());
    CsvTable table;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (!line.empty() && line.back() == ',') cells.emplace_back();
        if (first) {
            table.header = std::move(cells);
            first = false;
        } else {
            table.rows.push_back(std::move(cells));
        }
    }
    return table;
}

}  // namespace ccl

#endif  // CCL_CORE_CSV_HPP
