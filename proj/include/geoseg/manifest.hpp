// Copyright 2026 The GeoSeg Tools Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "geoseg/error.hpp"
#include "geoseg/instruct.hpp"
#include "geoseg/prompts.hpp"

namespace geoseg {

// Writes to a sibling temp file and renames it over the target.
inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(out.good(), ErrorCode::kIo, "cannot write " + tmp.string());
    out << text;
    out.flush();
    require(out.good(), ErrorCode::kIo, "short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::kIo, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::string count_key(const InstructionRecord& r) {
  std::string key(to_string(r.task));
  if (r.subtype) key += "/" + std::string(to_string(*r.subtype));
  return key;
}

struct ManifestHeader {
  int version = 1;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string prompt_version{prompts::kVersion};
  std::map<std::string, std::int64_t> task_counts;     // task -> n
  std::map<std::string, std::int64_t> subtype_counts;  // task[/subtype] -> n
  std::int64_t record_count = 0;

  nlohmann::json to_json() const {
    return {{"manifest_version", version}, {"config_hash", config_hash},       {"seed", seed},
            {"prompt_version", prompt_version}, {"task_counts", task_counts}, {"subtype_counts", subtype_counts},
            {"record_count", record_count}};
  }

  static ManifestHeader from_json(const nlohmann::json& j) {
    ManifestHeader h;
    try {
      h.version = j.at("manifest_version").get<int>();
      h.config_hash = j.at("config_hash").get<std::string>();
      h.seed = j.at("seed").get<std::uint64_t>();
      h.prompt_version = j.at("prompt_version").get<std::string>();
      h.task_counts = j.at("task_counts").get<std::map<std::string, std::int64_t>>();
      h.subtype_counts = j.at("subtype_counts").get<std::map<std::string, std::int64_t>>();
      h.record_count = j.at("record_count").get<std::int64_t>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kManifest, std::string("malformed manifest header: ") + e.what());
    }
    return h;
  }
};

// Header line followed by one record per line, sorted by record_id.
struct Manifest {
  ManifestHeader header;
  std::vector<InstructionRecord> records;

  static Manifest build(std::vector<InstructionRecord> records, std::string config_hash, std::uint64_t seed) {
    std::sort(records.begin(), records.end(),
              [](const InstructionRecord& a, const InstructionRecord& b) { return a.record_id < b.record_id; });
    Manifest m;
    m.header.config_hash = std::move(config_hash);
    m.header.seed = seed;
    for (const auto& task : {Task::kInteractive, Task::kReferring, Task::kReasoning})
      m.header.task_counts[std::string(to_string(task))] = 0;
    for (std::size_t i = 0; i < records.size(); ++i) {
      require(i == 0 || records[i - 1].record_id != records[i].record_id, ErrorCode::kManifest,
              "duplicate record_id " + records[i].record_id);
      records[i].validate();
      ++m.header.task_counts[std::string(to_string(records[i].task))];
      ++m.header.subtype_counts[count_key(records[i])];
    }
    m.header.record_count = static_cast<std::int64_t>(records.size());
    m.records = std::move(records);
    return m;
  }

  // Throws unless the header reconciles with the records.
  void validate() const {
    require(header.record_count == static_cast<std::int64_t>(records.size()), ErrorCode::kManifest,
            "manifest header says " + std::to_string(header.record_count) + " records, found " +
                std::to_string(records.size()));
    std::map<std::string, std::int64_t> tasks, subtypes;
    for (std::size_t i = 0; i < records.size(); ++i) {
      require(i == 0 || records[i - 1].record_id < records[i].record_id, ErrorCode::kManifest,
              "manifest records not strictly sorted at " + records[i].record_id);
      ++tasks[std::string(to_string(records[i].task))];
      ++subtypes[count_key(records[i])];
    }
    for (const auto& [task, n] : header.task_counts) {
      const auto it = tasks.find(task);
      require((it == tasks.end() ? 0 : it->second) == n, ErrorCode::kManifest,
              "manifest count mismatch for task " + task);
    }
    for (const auto& [task, n] : tasks)
      require(header.task_counts.count(task), ErrorCode::kManifest, "manifest header lacks task " + task);
    require(subtypes == header.subtype_counts, ErrorCode::kManifest, "manifest subtype counts do not reconcile");
  }

  std::string serialize() const {
    std::string out = header.to_json().dump() + "\n";
    for (const auto& r : records) out += to_json(r).dump() + "\n";
    return out;
  }

  static Manifest parse(std::istream& in) {
    Manifest m;
    std::string line;
    require(static_cast<bool>(std::getline(in, line)), ErrorCode::kManifest, "manifest is empty");
    try {
      m.header = ManifestHeader::from_json(nlohmann::json::parse(line));
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(ErrorCode::kManifest, std::string("manifest header: ") + e.what());
    }
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      try {
        m.records.push_back(record_from_json(nlohmann::json::parse(line)));
      } catch (const nlohmann::json::parse_error& e) {
        throw Error(ErrorCode::kManifest, "manifest line " + std::to_string(line_no) + ": " + e.what());
      }
    }
    m.validate();
    return m;
  }

  static Manifest load(const std::filesystem::path& path) {
    std::istringstream in(read_text(path));
    return parse(in);
  }

  void save(const std::filesystem::path& path) const { write_text_atomic(path, serialize()); }
};

}  // namespace geoseg
