// Copyright 2026 The GeoSeg Tools Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cctype>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "geoseg/error.hpp"
#include "geoseg/prompt_assets.hpp"
#include "geoseg/raster.hpp"

namespace geoseg::prompts {

inline constexpr std::string_view kVersion = prompt_assets::kVersion;

// Replaces every {name} with vars[name]. Unknown or unused placeholders are
// errors so template drift is caught in tests.
inline std::string render(std::string_view tmpl, const std::map<std::string, std::string>& vars) {
  std::string out;
  out.reserve(tmpl.size() + 64);
  std::map<std::string, bool> used;
  for (const auto& [k, v] : vars) used[k] = false;
  std::size_t i = 0;
  while (i < tmpl.size()) {
    if (tmpl[i] == '{') {
      const auto close = tmpl.find('}', i);
      require(close != std::string_view::npos, ErrorCode::kInvalidArgument, "template: unclosed '{'");
      const std::string name(tmpl.substr(i + 1, close - i - 1));
      auto it = vars.find(name);
      require(it != vars.end(), ErrorCode::kInvalidArgument, "template: no value for {" + name + "}");
      out += it->second;
      used[name] = true;
      i = close + 1;
    } else {
      out.push_back(tmpl[i++]);
    }
  }
  for (const auto& [k, u] : used)
    require(u, ErrorCode::kInvalidArgument, "template: value '" + k + "' has no placeholder");
  // Asset files end with a newline; requests do not.
  while (!out.empty() && (out.back() == '\n' || out.back() == ' ')) out.pop_back();
  return out;
}

// Markers that delimit sections of a model response.
inline const std::vector<std::string>& known_markers() {
  static const std::vector<std::string> markers = {"Question:", "Cues:", "Explanation:", "SCORES:",
                                                   "DECISION:"};
  return markers;
}

namespace detail {

inline bool starts_with_marker(std::string_view line) {
  const std::string t = trim(line);
  for (const auto& m : known_markers())
    if (t.rfind(m, 0) == 0) return true;
  return false;
}

}  // namespace detail

// Text after the first occurrence of `marker`, up to the next line that begins
// with any known marker. Whitespace-trimmed; nullopt if the marker is absent.
inline std::optional<std::string> extract_section(std::string_view response, std::string_view marker) {
  const auto at = response.find(marker);
  if (at == std::string_view::npos) return std::nullopt;
  std::string_view rest = response.substr(at + marker.size());
  std::size_t end = rest.size();
  std::size_t pos = rest.find('\n');
  while (pos != std::string_view::npos) {
    const std::size_t next = rest.find('\n', pos + 1);
    const std::string_view line = rest.substr(pos + 1, next == std::string_view::npos ? next : next - pos - 1);
    if (detail::starts_with_marker(line)) {
      end = pos;
      break;
    }
    pos = next;
  }
  return trim(rest.substr(0, end));
}

enum class Decision { kKeep, kDiscard };

// The last standalone KEEP or DISCARD token decides.
inline std::optional<Decision> parse_decision(std::string_view response) {
  std::optional<Decision> last;
  auto is_word = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; };
  for (std::size_t i = 0; i < response.size(); ++i) {
    if (i > 0 && is_word(response[i - 1])) continue;
    for (const auto& [token, d] : {std::pair<std::string_view, Decision>{"KEEP", Decision::kKeep},
                                   std::pair<std::string_view, Decision>{"DISCARD", Decision::kDiscard}}) {
      if (response.compare(i, token.size(), token) != 0) continue;
      const std::size_t after = i + token.size();
      if (after < response.size() && is_word(response[after])) continue;
      last = d;
    }
  }
  return last;
}

// Non-empty lines of the Cues section with list bullets removed.
inline std::vector<std::string> parse_cues(std::string_view response) {
  std::vector<std::string> cues;
  const auto section = extract_section(response, "Cues:");
  if (!section) return cues;
  std::istringstream in(*section);
  std::string line;
  while (std::getline(in, line)) {
    std::string t = trim(line);
    std::size_t skip = 0;
    while (skip < t.size() && (t[skip] == '-' || t[skip] == '*' || t[skip] == ' ')) ++skip;
    std::size_t digits = skip;
    while (digits < t.size() && std::isdigit(static_cast<unsigned char>(t[digits]))) ++digits;
    if (digits > skip && digits < t.size() && (t[digits] == '.' || t[digits] == ')')) skip = digits + 1;
    t = trim(std::string_view(t).substr(skip));
    if (!t.empty()) cues.push_back(t);
  }
  return cues;
}

// "name: value" lines of the SCORES section. Every expected dimension must be
// present with an integer in [1, 10]; other lines are ignored.
inline std::optional<std::map<std::string, int>> parse_scores(std::string_view response,
                                                              const std::vector<std::string>& dimensions) {
  const auto section = extract_section(response, "SCORES:");
  if (!section) return std::nullopt;
  std::map<std::string, int> scores;
  std::istringstream in(*section);
  std::string line;
  while (std::getline(in, line)) {
    const auto sep = line.find_first_of(":=");
    if (sep == std::string::npos) continue;
    std::string name = ascii_lower(trim(std::string_view(line).substr(0, sep)));
    while (!name.empty() && (name.front() == '-' || name.front() == '*' || name.front() == ' '))
      name.erase(name.begin());
    for (char& c : name)
      if (c == ' ') c = '_';
    if (std::find(dimensions.begin(), dimensions.end(), name) == dimensions.end()) continue;
    const std::string value = trim(std::string_view(line).substr(sep + 1));
    try {
      std::size_t used = 0;
      const int v = std::stoi(value, &used);
      if (used != value.size() || v < 1 || v > 10) return std::nullopt;
      scores[name] = v;
    } catch (const std::exception&) {
      return std::nullopt;
    }
  }
  std::map<std::string, int> out;
  for (const auto& d : dimensions) {
    auto it = scores.find(d);
    if (it == scores.end()) return std::nullopt;
    out[d] = it->second;
  }
  return out;
}

inline const std::vector<std::string>& reasoning_dimensions() {
  static const std::vector<std::string> dims = {"complexity", "consistency", "uniqueness",
                                                "mask_quality", "clarity", "conciseness"};
  return dims;
}

inline const std::vector<std::string>& referring_dimensions() {
  static const std::vector<std::string> dims = {"clarity", "grounding", "consistency", "uniqueness"};
  return dims;
}

}  // namespace geoseg::prompts
