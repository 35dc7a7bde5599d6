#pragma once

// Minimal comma-separated table reader used by the ingest and artifact code.
// Fields are never quoted in the formats this project reads and writes.

#include "dtr/errors.hpp"

#include <fmt/core.h>

#include <charconv>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace dtr::csv {

struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
    std::vector<std::size_t> line_numbers; // 1-based source line per row

    [[nodiscard]] std::size_t column(std::string_view name) const {
        for (std::size_t j = 0; j < header.size(); ++j) {
            if (header[j] == name) return j;
        }
        throw DataError(fmt::format("missing column '{}'", name));
    }
};

inline std::vector<std::string> split_line(std::string_view line) {
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
        const auto comma = line.find(',', start);
        if (comma == std::string_view::npos) {
            fields.emplace_back(line.substr(start));
            break;
        }
        fields.emplace_back(line.substr(start, comma - start));
        start = comma + 1;
    }
    for (auto& f : fields) {
        while (!f.empty() && (f.back() == ' ' || f.back() == '\t')) f.pop_back();
        std::size_t lead = 0;
        while (lead < f.size() && (f[lead] == ' ' || f[lead] == '\t')) ++lead;
        f.erase(0, lead);
    }
    return fields;
}

inline Table parse(std::string_view text, std::string_view what) {
    Table table;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    bool have_header = false;
    while (pos <= text.size()) {
        auto end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        auto line = text.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (line.empty()) {
            if (end == text.size()) break;
            continue;
        }
        auto fields = split_line(line);
        if (!have_header) {
            table.header = std::move(fields);
            have_header = true;
            continue;
        }
        if (fields.size() != table.header.size()) {
            throw DataError(fmt::format("{}: row {} has {} fields, expected {}", what, line_no,
                                        fields.size(), table.header.size()));
        }
        table.rows.push_back(std::move(fields));
        table.line_numbers.push_back(line_no);
        if (end == text.size()) break;
    }
    if (!have_header) throw DataError(fmt::format("{}: missing header row", what));
    return table;
}

inline std::optional<double> parse_optional_double(std::string_view field) {
    if (field.empty() || field == "NA") return std::nullopt;
    double value = 0.0;
    const auto* first = field.data();
    const auto* last = field.data() + field.size();
    auto [ptr, ec] = std::from_chars(first, last, value);
    if (ec != std::errc() || ptr != last) throw DataError("not a number");
    return value;
}

} // namespace dtr::csv
