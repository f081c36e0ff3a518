// Copyright 2026 The quantlab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License"); you
// may not use this file except in compliance with the License.  You
// may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
// implied.  See the License for the specific language governing
// permissions and limitations under the License.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace quantlab {

/// Shortest text that reads back to the same double ("%.17g").
std::string format_double(double value);

class CsvTable {
public:
    CsvTable(std::string name, std::vector<std::string> header);

    const std::string& name() const { return name_; }
    const std::vector<std::string>& header() const { return header_; }
    const std::vector<std::vector<std::string>>& rows() const { return rows_; }

    /// Appends a row; the cell count must match the header.
    void add_row(std::vector<std::string> cells);

    /// "# manifest <hash>" line, header row, data rows; LF line endings.
    std::string render(const std::string& manifest_hash) const;

private:
    std::string name_;
    std::vector<std::string> header_;
    std::vector<std::vector<std::string>> rows_;
};

std::string cell(double value);
std::string cell(std::int64_t value);
std::string cell(int value);
std::string cell(bool value);
std::string cell(const std::string& value);

/// What determines a run's outputs. Rendering is deterministic so equal
/// manifests hash equal.
struct RunManifest {
    std::string subcommand;
    std::string config_hash;
    std::string config_json;
    std::vector<std::uint64_t> seeds;
    std::map<std::string, std::string> arguments;
    /// input file name -> FNV-1a of its bytes
    std::map<std::string, std::string> inputs;

    std::string render() const;
    std::string hash() const;
};

std::string tool_version();
std::string file_digest(const std::filesystem::path& path);

/// Exclusive writer of an output directory. Files are staged in a private
/// subdirectory and moved into place by commit(); a run that never commits
/// leaves no partial outputs behind.
class RunDirectory {
public:
    explicit RunDirectory(std::filesystem::path root);
    ~RunDirectory();
    RunDirectory(const RunDirectory&) = delete;
    RunDirectory& operator=(const RunDirectory&) = delete;

    const std::filesystem::path& root() const { return root_; }
    /// Path inside the staging area for a file that commit() will publish.
    std::filesystem::path staged(const std::string& name);
    void write_text(const std::string& name, const std::string& content);
    void commit();

private:
    std::filesystem::path root_;
    std::filesystem::path lock_;
    std::filesystem::path staging_;
    std::vector<std::string> files_;
    bool committed_ = false;
    bool created_ = false;
};

} // namespace quantlab
