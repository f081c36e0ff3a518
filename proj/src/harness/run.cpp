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

#include "quantlab/harness/run.hpp"

#include "quantlab/error.hpp"
#include "quantlab/harness/config.hpp"

#include <nlohmann/json.hpp>

#include <fcntl.h>
#include <unistd.h>

#include <cstdio>
#include <fstream>
#include <sstream>

namespace quantlab {

std::string format_double(double value)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", value);
    return buf;
}

std::string cell(double value)
{
    return format_double(value);
}

std::string cell(std::int64_t value)
{
    return std::to_string(value);
}

std::string cell(int value)
{
    return std::to_string(value);
}

std::string cell(bool value)
{
    return value ? "1" : "0";
}

std::string cell(const std::string& value)
{
    if (value.find_first_of(",\"\n") == std::string::npos)
        return value;
    std::string quoted = "\"";
    for (char c : value) {
        if (c == '"')
            quoted += '"';
        quoted += c;
    }
    return quoted + "\"";
}

CsvTable::CsvTable(std::string name, std::vector<std::string> header)
    : name_(std::move(name)), header_(std::move(header))
{
    if (header_.empty())
        throw ContractError("csv table '" + name_ + "' needs at least one column");
}

void CsvTable::add_row(std::vector<std::string> cells)
{
    if (cells.size() != header_.size())
        throw ContractError("csv table '" + name_ + "' row has " + std::to_string(cells.size()) + " cells, expected "
                            + std::to_string(header_.size()));
    rows_.push_back(std::move(cells));
}

std::string CsvTable::render(const std::string& manifest_hash) const
{
    std::ostringstream out;
    out << "# manifest " << manifest_hash << '\n';
    auto line = [&](const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i)
            out << (i ? "," : "") << cells[i];
        out << '\n';
    };
    line(header_);
    for (const auto& row : rows_)
        line(row);
    return out.str();
}

std::string tool_version()
{
    return "quantlab 1.0.0";
}

std::string RunManifest::render() const
{
    nlohmann::json j;
    j["subcommand"] = subcommand;
    j["config_hash"] = config_hash;
    j["config"] = nlohmann::json::parse(config_json);
    j["seeds"] = seeds;
    j["arguments"] = arguments;
    j["inputs"] = inputs;
    j["version"] = tool_version();
    return j.dump(2) + "\n";
}

std::string RunManifest::hash() const
{
    return fnv1a_hex(render());
}

std::string file_digest(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw InputError("cannot read " + path.string());
    std::ostringstream bytes;
    bytes << in.rdbuf();
    return fnv1a_hex(bytes.str());
}

RunDirectory::RunDirectory(std::filesystem::path root) : root_(std::move(root))
{
    created_ = std::filesystem::create_directories(root_);
    lock_ = root_ / ".quantlab.lock";
    const int fd = ::open(lock_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0)
        throw InputError("output directory " + root_.string() + " is locked by another run (" + lock_.string() + ")");
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] const auto written = ::write(fd, pid.data(), pid.size());
    ::close(fd);
    staging_ = root_ / (".staging-" + std::to_string(::getpid()));
    std::error_code ec;
    std::filesystem::remove_all(staging_, ec);
    std::filesystem::create_directories(staging_);
}

RunDirectory::~RunDirectory()
{
    std::error_code ec;
    std::filesystem::remove_all(staging_, ec);
    std::filesystem::remove(lock_, ec);
    if (!committed_ && created_ && std::filesystem::is_empty(root_, ec))
        std::filesystem::remove(root_, ec);
}

std::filesystem::path RunDirectory::staged(const std::string& name)
{
    if (name.empty() || name.find('/') != std::string::npos || name.front() == '.')
        throw ContractError("invalid output file name '" + name + "'");
    if (std::find(files_.begin(), files_.end(), name) != files_.end())
        throw ContractError("output file '" + name + "' written twice");
    files_.push_back(name);
    return staging_ / name;
}

void RunDirectory::write_text(const std::string& name, const std::string& content)
{
    const auto path = staged(name);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << content;
    if (!out)
        throw InputError("cannot write " + path.string());
}

void RunDirectory::commit()
{
    if (committed_)
        throw ContractError("run directory committed twice");
    for (const auto& name : files_)
        std::filesystem::rename(staging_ / name, root_ / name);
    committed_ = true;
}

} // namespace quantlab
