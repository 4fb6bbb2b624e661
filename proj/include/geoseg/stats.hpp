// Copyright 2026 The GeoSeg Tools Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <sstream>
#include <string>

#include "json.hpp"

#include "geoseg/manifest.hpp"
#include "geoseg/rle.hpp"

namespace geoseg {

inline std::size_t word_count(std::string_view text) {
  std::size_t n = 0;
  bool in_word = false;
  for (char c : text) {
    const bool space = std::isspace(static_cast<unsigned char>(c)) != 0;
    if (!space && !in_word) ++n;
    in_word = !space;
  }
  return n;
}

inline std::string fixed2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

// Foreground pixels of a column-major RLE string (odd-indexed runs).
inline std::int64_t rle_foreground(const std::string& counts) {
  std::istringstream in(counts);
  std::int64_t run = 0, total = 0;
  for (std::size_t i = 0; in >> run; ++i)
    if (i % 2 == 1) total += run;
  return total;
}

struct DatasetStats {
  std::int64_t total = 0;
  std::map<Task, std::int64_t> task_counts;
  std::optional<double> avg_words;                     // absent when there are no records
  std::map<Task, std::optional<double>> avg_words_by_task;
  std::map<CategoryId, std::int64_t> category_histogram;
  std::int64_t points = 0, boxes = 0;
  std::int64_t attribute = 0, contextual = 0;
  std::optional<double> avg_mask_area;

  // "overall (ref/int/res)", two decimals; absent buckets print as n/a.
  std::string text_length_line() const {
    auto f = [](const std::optional<double>& v) { return v ? fixed2(*v) : std::string("n/a"); };
    auto task = [&](Task t) {
      auto it = avg_words_by_task.find(t);
      return it == avg_words_by_task.end() ? std::string("n/a") : f(it->second);
    };
    return f(avg_words) + " (" + task(Task::kReferring) + "/" + task(Task::kInteractive) + "/" +
           task(Task::kReasoning) + ")";
  }

  nlohmann::json to_json() const {
    using nlohmann::json;
    auto opt = [](const std::optional<double>& v) { return v ? json(std::stod(fixed2(*v))) : json(nullptr); };
    json j;
    j["total"] = total;
    json counts = json::object(), words = json::object();
    for (const auto& [t, n] : task_counts) counts[std::string(to_string(t))] = n;
    for (const auto& [t, v] : avg_words_by_task)
      if (v) words[std::string(to_string(t))] = opt(v);
    j["task_counts"] = counts;
    j["avg_words"] = opt(avg_words);
    j["avg_words_by_task"] = words;
    j["avg_text_length"] = text_length_line();
    json hist = json::object();
    for (const auto& [c, n] : category_histogram) hist[std::to_string(c)] = n;
    j["category_histogram"] = hist;
    j["interactive_split"] = {{"point", points}, {"box", boxes}};
    j["reasoning_split"] = {{"attribute", attribute}, {"contextual", contextual}};
    j["avg_mask_area"] = opt(avg_mask_area);
    return j;
  }
};

inline DatasetStats stats_report(const Manifest& manifest) {
  DatasetStats s;
  std::map<Task, std::pair<std::int64_t, std::int64_t>> words;  // task -> (sum, n)
  std::int64_t all_words = 0, mask_sum = 0;
  for (const auto& r : manifest.records) {
    const auto w = static_cast<std::int64_t>(word_count(r.text));
    ++s.total;
    ++s.task_counts[r.task];
    words[r.task].first += w;
    ++words[r.task].second;
    all_words += w;
    ++s.category_histogram[r.category];
    mask_sum += rle_foreground(r.mask_rle);
    if (r.subtype == Subtype::kPoint) ++s.points;
    if (r.subtype == Subtype::kBox) ++s.boxes;
    if (r.subtype == Subtype::kAttribute) ++s.attribute;
    if (r.subtype == Subtype::kContextual) ++s.contextual;
  }
  for (const auto t : {Task::kInteractive, Task::kReferring, Task::kReasoning}) {
    auto it = words.find(t);
    s.avg_words_by_task[t] = it == words.end() ? std::nullopt
                                               : std::optional<double>(static_cast<double>(it->second.first) /
                                                                       static_cast<double>(it->second.second));
  }
  if (s.total > 0) {
    s.avg_words = static_cast<double>(all_words) / static_cast<double>(s.total);
    s.avg_mask_area = static_cast<double>(mask_sum) / static_cast<double>(s.total);
  }
  return s;
}

}  // namespace geoseg
