#pragma once

// RFC 4180 reader: comma separator, double-quoted fields with "" escapes,
// CRLF or LF line ends, embedded newlines inside quotes.

#include <string>
#include <string_view>
#include <vector>

#include "offcurate/error.hpp"

namespace offcurate {

struct CsvRecord {
    std::size_t line = 0;  // 1-based line where the record starts
    std::vector<std::string> fields;
};

inline std::vector<CsvRecord> parse_csv(std::string_view text) {
    std::vector<CsvRecord> records;
    CsvRecord current;
    std::string field;
    bool in_quotes = false;
    bool field_started = false;
    bool after_quote = false;
    std::size_t line = 1;
    current.line = 1;

    auto end_field = [&] {
        current.fields.push_back(std::move(field));
        field.clear();
        field_started = false;
        after_quote = false;
    };
    auto end_record = [&] {
        end_field();
        // a bare empty line is not a record
        if (!(current.fields.size() == 1 && current.fields[0].empty())) records.push_back(std::move(current));
        current = CsvRecord{};
        current.line = line;
    };

    if (text.substr(0, 3) == "\xEF\xBB\xBF") text.remove_prefix(3);
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (in_quotes) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field.push_back('"');
                    ++i;
                } else {
                    in_quotes = false;
                    after_quote = true;
                }
            } else {
                if (c == '\n') ++line;
                field.push_back(c);
            }
            continue;
        }
        if (c == ',') {
            end_field();
        } else if (c == '\r' || c == '\n') {
            if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
            ++line;
            end_record();
        } else if (c == '"') {
            if (field_started || after_quote) {
                fail(ErrorCode::ParseFailure, "stray quote on line " + std::to_string(line));
            }
            in_quotes = true;
            field_started = true;
        } else {
            if (after_quote) {
                fail(ErrorCode::ParseFailure, "text after closing quote on line " + std::to_string(line));
            }
            field.push_back(c);
            field_started = true;
        }
    }
    if (in_quotes) fail(ErrorCode::ParseFailure, "unterminated quoted field starting on line " + std::to_string(current.line));
    if (field_started || after_quote || !current.fields.empty()) end_record();
    return records;
}

}  // namespace offcurate
