// SPDX-License-Identifier: Apache-2.0
// Copyright (c) 2026 The mohge Authors.

#pragma once

#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "mohge/config.hpp"
#include "mohge/error.hpp"
#include "mohge/routing.hpp"

// Routing trace: one token per line, tab-separated
//   <token>\t<bucket>\t<g,g,...>\t<g:i:es;g:i:es;...>
// bucket is -1 when the stream carries no labels. ES values are printed with
// 17 significant digits so they read back exactly. A leading '#' line records
// the routing shape.

namespace mohge {

struct TraceEntry {
  std::size_t group;
  std::size_t index;
  double score;

  bool operator==(const TraceEntry&) const = default;
};

struct TraceRecord {
  std::size_t token = 0;
  int bucket = -1;
  std::vector<std::size_t> groups;
  std::vector<TraceEntry> experts;

  bool operator==(const TraceRecord&) const = default;
};

struct TraceHeader {
  std::size_t num_groups = 0;
  std::size_t experts_per_group = 0;
  std::size_t top_groups = 0;
  std::size_t top_experts = 0;
  std::uint64_t seed = 0;
};

template <typename T>
TraceRecord to_trace_record(std::size_t token, int bucket, const RoutingDecision<T>& d,
                            std::size_t experts_per_group) {
  TraceRecord r;
  r.token = token;
  r.bucket = bucket;
  r.groups = d.selected_groups;
  for (const auto& id : d.selected_experts)
    r.experts.push_back({id.group, id.index,
                         static_cast<double>(d.final_scores[id.group * experts_per_group + id.index])});
  return r;
}

inline void write_trace_header(std::ostream& os, const ModelConfig& c, std::uint64_t seed) {
  os << "# mohge-trace v1 groups=" << c.num_groups << " experts_per_group=" << c.experts_per_group
     << " top_groups=" << c.top_groups << " top_experts=" << c.top_experts << " seed=" << seed
     << "\n";
}

inline void write_trace_record(std::ostream& os, const TraceRecord& r) {
  os << r.token << '\t' << r.bucket << '\t';
  for (std::size_t k = 0; k < r.groups.size(); ++k) os << (k ? "," : "") << r.groups[k];
  os << '\t';
  char buf[64];
  for (std::size_t k = 0; k < r.experts.size(); ++k) {
    std::snprintf(buf, sizeof buf, "%.17g", r.experts[k].score);
    os << (k ? ";" : "") << r.experts[k].group << ':' << r.experts[k].index << ':' << buf;
  }
  os << '\n';
}

inline TraceRecord parse_trace_record(const std::string& line) {
  TraceRecord r;
  std::vector<std::string> cols;
  std::string cur;
  for (char ch : line) {
    if (ch == '\t') {
      cols.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  cols.push_back(cur);
  if (cols.size() != 4) throw ConfigError("trace: expected 4 columns in '" + line + "'");
  try {
    r.token = std::stoull(cols[0]);
    r.bucket = std::stoi(cols[1]);
    std::istringstream gs(cols[2]);
    std::string tok;
    while (std::getline(gs, tok, ','))
      if (!tok.empty()) r.groups.push_back(std::stoull(tok));
    std::istringstream es(cols[3]);
    while (std::getline(es, tok, ';')) {
      if (tok.empty()) continue;
      const auto a = tok.find(':'), b = tok.find(':', a + 1);
      if (a == std::string::npos || b == std::string::npos)
        throw ConfigError("trace: malformed expert entry '" + tok + "'");
      r.experts.push_back({std::stoull(tok.substr(0, a)), std::stoull(tok.substr(a + 1, b - a - 1)),
                           std::stod(tok.substr(b + 1))});
    }
  } catch (const std::logic_error&) {
    throw ConfigError("trace: malformed line '" + line + "'");
  }
  return r;
}

inline TraceHeader parse_trace_header(const std::string& line) {
  TraceHeader h;
  std::istringstream ss(line.substr(1));
  std::string tok;
  ss >> tok >> tok;
  while (ss >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
    if (key == "groups") h.num_groups = std::stoull(val);
    else if (key == "experts_per_group") h.experts_per_group = std::stoull(val);
    else if (key == "top_groups") h.top_groups = std::stoull(val);
    else if (key == "top_experts") h.top_experts = std::stoull(val);
    else if (key == "seed") h.seed = std::stoull(val);
  }
  return h;
}

// Streams records to `fn`; returns the header.
template <typename Fn>
TraceHeader read_trace(std::istream& is, Fn&& fn) {
  TraceHeader h;
  bool have_header = false;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      h = parse_trace_header(line);
      have_header = true;
      continue;
    }
    if (!have_header) throw ConfigError("trace: missing header line");
    fn(parse_trace_record(line));
  }
  if (!have_header) throw ConfigError("trace: missing header line");
  return h;
}

}  // namespace mohge
