#include "gradvac/formats.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <tuple>

#include "gradvac/errors.hpp"
#include "gradvac/numfmt.hpp"
#include "gradvac/version.hpp"
#include "json_util.hpp"

namespace gradvac {

using nlohmann::json;
namespace ju = jsonutil;

json parse_json_text(const std::string& text, const std::string& origin) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    std::size_t line = 1;
    const std::size_t stop = e.byte > 0 ? e.byte - 1 : 0;
    for (std::size_t k = 0; k < stop && k < text.size(); ++k) {
      if (text[k] == '\n') ++line;
    }
    throw ValidationError(origin + ":" + std::to_string(line) + ": " + e.what());
  }
}

void validate_identifier(const std::string& name, const std::string& what) {
  if (name.empty()) throw ValidationError(what + " must be non-empty");
  for (char c : name) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
                    (c >= '0' && c <= '9') || c == '_' || c == '.' ||
                    c == ':' || c == '-';
    if (!ok) {
      throw ValidationError(what + " '" + name + "' has characters outside" +
                            " [A-Za-z0-9_.:-]");
    }
  }
}

namespace {

const std::string& name_of(const std::map<int, std::string>& names, int id) {
  const auto it = names.find(id);
  if (it == names.end()) {
    throw ValidationError("no name registered for task id " + std::to_string(id));
  }
  return it->second;
}

int id_of(const std::map<std::string, int>& ids, const std::string& name,
          const std::string& where) {
  const auto it = ids.find(name);
  if (it == ids.end()) {
    throw ValidationError(where + ": unknown task name '" + name + "'");
  }
  return it->second;
}

void expect_kind(const json& j, const char* kind, const std::string& path) {
  if (ju::as_string(ju::member(j, "kind", path), path + ".kind") != kind) {
    ju::fail(path + ".kind", std::string("expected '") + kind + "'");
  }
  const auto version =
      ju::as_int(ju::member(j, "spec_version", path), path + ".spec_version");
  if (version != kSpecVersion) {
    ju::fail(path + ".spec_version",
             "unsupported version " + std::to_string(version));
  }
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

double parse_double_field(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size() || !std::isfinite(v)) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ValidationError(where + ": bad number '" + s + "'");
  }
}

std::int64_t parse_int_field(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ValidationError(where + ": bad integer '" + s + "'");
  }
}

bool parse_bool_field(const std::string& s, const std::string& where) {
  if (s == "0") return false;
  if (s == "1") return true;
  throw ValidationError(where + ": bad flag '" + s + "'");
}

// Lines of a CSV body, header verified. Blank trailing line tolerated.
std::vector<std::string> csv_rows(const std::string& text,
                                  const std::string& header,
                                  const std::string& origin) {
  std::vector<std::string> lines;
  std::string cur;
  for (char c : text) {
    if (c == '\n') {
      lines.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) lines.push_back(cur);
  if (lines.empty() || lines.front() != header) {
    throw ValidationError(origin + ": missing or wrong header");
  }
  lines.erase(lines.begin());
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  for (const auto& l : lines) {
    if (l.empty()) throw ValidationError(origin + ": blank row");
  }
  return lines;
}

}  // namespace

json ema_snapshot_to_json(const EmaStore& store) {
  json entries = json::array();
  for (const auto& e : store.entries()) {
    entries.push_back(json{{"i", e.i},
                           {"j", e.j},
                           {"group", e.group},
                           {"value", e.value}});
  }
  return json{{"kind", "gradvac.ema"},
              {"spec_version", kSpecVersion},
              {"beta", store.beta()},
              {"entries", std::move(entries)}};
}

EmaStore ema_snapshot_from_json(const json& j) {
  const std::string path = "ema";
  ju::check_keys(j, {"kind", "spec_version", "beta", "entries"}, path);
  expect_kind(j, "gradvac.ema", path);

  const double beta = ju::as_double(ju::member(j, "beta", path), path + ".beta");
  EmaStore store(beta);

  const json& entries =
      ju::as_array(ju::member(j, "entries", path), path + ".entries");
  std::set<std::tuple<int, int, std::string>> seen;
  std::size_t idx = 0;
  for (const auto& e : entries) {
    const std::string epath = path + ".entries[" + std::to_string(idx++) + "]";
    ju::check_keys(e, {"i", "j", "group", "value"}, epath);
    const int i = static_cast<int>(ju::as_int(ju::member(e, "i", epath), epath + ".i"));
    const int jj = static_cast<int>(ju::as_int(ju::member(e, "j", epath), epath + ".j"));
    const std::string group =
        ju::as_string(ju::member(e, "group", epath), epath + ".group");
    validate_identifier(group, epath + ".group");
    if (i == jj) ju::fail(epath, "self pair");
    if (!seen.insert({i, jj, group}).second) ju::fail(epath, "duplicate pair");
    const double value =
        ju::as_double(ju::member(e, "value", epath), epath + ".value");
    if (!(value >= -1.0 && value <= 1.0)) {
      ju::fail(epath + ".value", "outside [-1, 1]");
    }
    store.set(i, jj, group, value);
  }
  return store;
}

json dump_to_json(const GradientDump& dump) {
  json groups = json::array();
  for (const auto& g : dump.partition.groups) {
    groups.push_back(json{{"name", g.name}, {"length", g.length}});
  }

  json tasks = json::array();
  for (const auto& t : dump.tasks) {
    json per_group = json::object();
    const auto& bundle_groups = dump.bundle.per_task.at(t.id);
    for (const auto& g : dump.partition.groups) {
      per_group[g.name] = bundle_groups.at(g.name).values;
    }
    tasks.push_back(json{{"name", t.name},
                         {"size", dump.sizes.at(t.id)},
                         {"groups", std::move(per_group)}});
  }

  return json{{"kind", "gradvac.dump"},
              {"spec_version", kSpecVersion},
              {"step", dump.step},
              {"partition", json{{"granularity", dump.partition.granularity_label},
                                 {"groups", std::move(groups)}}},
              {"tasks", std::move(tasks)}};
}

GradientDump dump_from_json(const json& j) {
  const std::string path = "dump";
  ju::check_keys(j, {"kind", "spec_version", "step", "partition", "tasks"}, path);
  expect_kind(j, "gradvac.dump", path);

  GradientDump dump;
  dump.step = ju::as_int(ju::member(j, "step", path), path + ".step");

  const json& part = ju::member(j, "partition", path);
  ju::check_keys(part, {"granularity", "groups"}, path + ".partition");
  dump.partition.granularity_label = ju::as_string(
      ju::member(part, "granularity", path), path + ".partition.granularity");
  const json& groups = ju::as_array(ju::member(part, "groups", path),
                                    path + ".partition.groups");
  std::size_t offset = 0;
  std::size_t gidx = 0;
  for (const auto& g : groups) {
    const std::string gpath =
        path + ".partition.groups[" + std::to_string(gidx++) + "]";
    ju::check_keys(g, {"name", "length"}, gpath);
    const std::string name =
        ju::as_string(ju::member(g, "name", gpath), gpath + ".name");
    validate_identifier(name, gpath + ".name");
    const std::uint64_t length =
        ju::as_uint(ju::member(g, "length", gpath), gpath + ".length");
    if (length == 0) ju::fail(gpath + ".length", "must be >= 1");
    dump.partition.groups.push_back(
        {name, offset, static_cast<std::size_t>(length)});
    offset += static_cast<std::size_t>(length);
  }
  dump.partition.validate();

  const json& tasks = ju::as_array(ju::member(j, "tasks", path), path + ".tasks");
  if (tasks.empty()) ju::fail(path + ".tasks", "no tasks");
  std::set<std::string> names_seen;
  int id = 0;
  for (const auto& t : tasks) {
    const std::string tpath = path + ".tasks[" + std::to_string(id) + "]";
    ju::check_keys(t, {"name", "size", "groups"}, tpath);
    const std::string name =
        ju::as_string(ju::member(t, "name", tpath), tpath + ".name");
    validate_identifier(name, tpath + ".name");
    if (!names_seen.insert(name).second) {
      ju::fail(tpath + ".name", "duplicate task name '" + name + "'");
    }
    const std::uint64_t size =
        ju::as_uint(ju::member(t, "size", tpath), tpath + ".size");

    const json& per_group = ju::member(t, "groups", tpath);
    if (!per_group.is_object()) ju::fail(tpath + ".groups", "expected an object");
    std::map<std::string, GradVector> slot;
    for (const auto& g : dump.partition.groups) {
      const json* arr = ju::opt_member(per_group, g.name.c_str(), tpath + ".groups");
      if (arr == nullptr) {
        ju::fail(tpath + ".groups", "missing group '" + g.name + "'");
      }
      if (!arr->is_array() || arr->size() != g.length) {
        ju::fail(tpath + ".groups." + g.name,
                 "expected an array of length " + std::to_string(g.length));
      }
      std::vector<double> values;
      values.reserve(g.length);
      for (const auto& v : *arr) {
        values.push_back(ju::as_double(v, tpath + ".groups." + g.name));
      }
      slot.emplace(g.name, GradVector(std::move(values), g.name));
    }
    if (per_group.size() != dump.partition.groups.size()) {
      ju::fail(tpath + ".groups", "carries groups outside the partition");
    }

    dump.tasks.push_back({id, name});
    dump.sizes[id] = size;
    dump.bundle.per_task.emplace(id, std::move(slot));
    ++id;
  }
  dump.bundle.step = dump.step;
  dump.bundle.validate_against(dump.partition);
  return dump;
}

json report_to_json(const SurgeryReport& report,
                    const std::map<int, std::string>& names) {
  json entries = json::array();
  for (const auto& e : report.entries) {
    entries.push_back(json{{"task_i", name_of(names, e.task_i)},
                           {"task_j", name_of(names, e.task_j)},
                           {"group", e.group},
                           {"observed_phi", e.observed_phi},
                           {"ema_before", e.ema_before},
                           {"fired", e.fired},
                           {"skipped", e.skipped},
                           {"target_clamped", e.target_clamped}});
  }
  return json{{"kind", "gradvac.surgery_report"},
              {"spec_version", kSpecVersion},
              {"step", report.step},
              {"mode", to_string(report.mode)},
              {"fired_total", report.fired_total},
              {"eligible_total", report.eligible_total},
              {"entries", std::move(entries)}};
}

std::string loss_csv(const std::vector<double>& joint,
                     const std::vector<std::vector<double>>& per_task,
                     const std::vector<TaskId>& tasks) {
  if (per_task.size() != joint.size()) {
    throw ValidationError("loss table shape mismatch");
  }
  std::vector<TaskId> ordered = tasks;
  std::sort(ordered.begin(), ordered.end(),
            [](const TaskId& a, const TaskId& b) { return a.id < b.id; });

  std::string out = "step,joint";
  for (const auto& t : ordered) out += "," + t.name;
  out += "\n";
  for (std::size_t s = 0; s < joint.size(); ++s) {
    if (per_task[s].size() != ordered.size()) {
      throw ValidationError("loss table shape mismatch");
    }
    out += format_int(static_cast<std::int64_t>(s));
    out += "," + format_double(joint[s]);
    for (std::size_t k = 0; k < ordered.size(); ++k) {
      out += "," + format_double(per_task[s][k]);
    }
    out += "\n";
  }
  return out;
}

namespace {
const std::string kSimilarityHeader = "step,group,task_i,task_j,cosine";
const std::string kSurgeryHeader =
    "step,mode,group,task_i,task_j,observed_phi,ema_before,fired,skipped,"
    "target_clamped";
}  // namespace

std::string similarity_csv(const std::vector<SimilarityRecord>& records,
                           const std::map<int, std::string>& names) {
  std::string out = kSimilarityHeader + "\n";
  for (const auto& rec : records) {
    for (const auto& [group, m] : rec.per_group) {
      for (std::size_t r = 0; r < m.n(); ++r) {
        for (std::size_t c = r; c < m.n(); ++c) {
          if (m.missing(r, c)) continue;
          out += format_int(rec.step);
          out += "," + group;
          out += "," + name_of(names, m.task_ids[r]);
          out += "," + name_of(names, m.task_ids[c]);
          out += "," + format_double(m.at(r, c));
          out += "\n";
        }
      }
    }
  }
  return out;
}

std::vector<SimilarityRecord> parse_similarity_csv(
    const std::string& text, const std::map<std::string, int>& name_to_id) {
  const auto rows = csv_rows(text, kSimilarityHeader, "similarity.csv");

  // (step, group) -> sparse cells
  std::map<std::int64_t, std::map<std::string, std::vector<std::tuple<int, int, double>>>>
      cells;
  std::size_t line = 1;
  for (const auto& row : rows) {
    ++line;
    const std::string where = "similarity.csv:" + std::to_string(line);
    const auto f = split_fields(row);
    if (f.size() != 5) throw ValidationError(where + ": expected 5 fields");
    const std::int64_t step = parse_int_field(f[0], where);
    validate_identifier(f[1], where + " group");
    const int i = id_of(name_to_id, f[2], where);
    const int j = id_of(name_to_id, f[3], where);
    const double v = parse_double_field(f[4], where);
    if (!(v >= -1.0 && v <= 1.0)) {
      throw ValidationError(where + ": cosine outside [-1, 1]");
    }
    cells[step][f[1]].push_back({i, j, v});
  }

  std::vector<SimilarityRecord> records;
  for (const auto& [step, groups] : cells) {
    SimilarityRecord rec;
    rec.step = step;
    for (const auto& [group, entries] : groups) {
      std::set<int> ids;
      for (const auto& [i, j, _] : entries) {
        ids.insert(i);
        ids.insert(j);
      }
      TaskMatrix m(std::vector<int>(ids.begin(), ids.end()));
      for (const auto& [i, j, v] : entries) {
        const std::size_t r = m.index_of(i);
        const std::size_t c = m.index_of(j);
        m.put(r, c, v);
        m.put(c, r, v);
      }
      rec.per_group.emplace(group, std::move(m));
    }
    records.push_back(std::move(rec));
  }
  return records;
}

std::string surgery_csv(const std::vector<SurgeryReport>& reports,
                        const std::map<int, std::string>& names) {
  std::string out = kSurgeryHeader + "\n";
  for (const auto& rep : reports) {
    for (const auto& e : rep.entries) {
      out += format_int(rep.step);
      out += ",";
      out += to_string(rep.mode);
      out += "," + e.group;
      out += "," + name_of(names, e.task_i);
      out += "," + name_of(names, e.task_j);
      out += "," + format_double(e.observed_phi);
      out += "," + format_double(e.ema_before);
      out += e.fired ? ",1" : ",0";
      out += e.skipped ? ",1" : ",0";
      out += e.target_clamped ? ",1" : ",0";
      out += "\n";
    }
  }
  return out;
}

std::vector<SurgeryReport> parse_surgery_csv(
    const std::string& text, const std::map<std::string, int>& name_to_id) {
  const auto rows = csv_rows(text, kSurgeryHeader, "surgery.csv");

  std::map<std::int64_t, SurgeryReport> by_step;
  std::size_t line = 1;
  for (const auto& row : rows) {
    ++line;
    const std::string where = "surgery.csv:" + std::to_string(line);
    const auto f = split_fields(row);
    if (f.size() != 10) throw ValidationError(where + ": expected 10 fields");

    const std::int64_t step = parse_int_field(f[0], where);
    const SurgeryMode mode = surgery_mode_from_string(f[1]);
    validate_identifier(f[2], where + " group");

    SurgeryEntry e;
    e.group = f[2];
    e.task_i = id_of(name_to_id, f[3], where);
    e.task_j = id_of(name_to_id, f[4], where);
    e.observed_phi = parse_double_field(f[5], where);
    e.ema_before = parse_double_field(f[6], where);
    e.fired = parse_bool_field(f[7], where);
    e.skipped = parse_bool_field(f[8], where);
    e.target_clamped = parse_bool_field(f[9], where);

    auto [it, fresh] = by_step.try_emplace(step);
    SurgeryReport& rep = it->second;
    if (fresh) {
      rep.step = step;
      rep.mode = mode;
    } else if (rep.mode != mode) {
      throw ValidationError(where + ": mixed modes within one step");
    }
    if (e.fired) rep.fired_total++;
    if (!e.skipped) rep.eligible_total++;
    rep.entries.push_back(std::move(e));
  }

  std::vector<SurgeryReport> out;
  out.reserve(by_step.size());
  for (auto& [_, rep] : by_step) out.push_back(std::move(rep));
  return out;
}

std::string activity_csv(const std::map<std::string, ActivitySeries>& series) {
  std::string out = "step,mode,fired,windowed\n";
  for (const auto& [mode, s] : series) {
    for (std::size_t k = 0; k < s.steps.size(); ++k) {
      out += format_int(s.steps[k]);
      out += "," + mode;
      out += "," + format_int(s.fired[k]);
      out += "," + format_int(s.windowed[k]);
      out += "\n";
    }
  }
  return out;
}

std::string parameters_csv(const std::vector<Eigen::VectorXd>& snapshots) {
  if (snapshots.empty()) throw ValidationError("no parameter snapshots");
  std::string out = "step";
  for (Eigen::Index k = 0; k < snapshots.front().size(); ++k) {
    out += ",p" + format_int(k);
  }
  out += "\n";
  for (std::size_t s = 0; s < snapshots.size(); ++s) {
    if (snapshots[s].size() != snapshots.front().size()) {
      throw ValidationError("parameter snapshot dimensions disagree");
    }
    out += format_int(static_cast<std::int64_t>(s));
    for (Eigen::Index k = 0; k < snapshots[s].size(); ++k) {
      out += "," + format_double(snapshots[s](k));
    }
    out += "\n";
  }
  return out;
}

json task_matrix_to_json(const TaskMatrix& matrix,
                         const std::map<int, std::string>& names,
                         const std::string& label) {
  json task_names = json::array();
  for (int id : matrix.task_ids) task_names.push_back(name_of(names, id));

  json mean = json::array();
  json count = json::array();
  for (std::size_t r = 0; r < matrix.n(); ++r) {
    json mrow = json::array();
    json crow = json::array();
    for (std::size_t c = 0; c < matrix.n(); ++c) {
      if (matrix.missing(r, c)) {
        mrow.push_back(nullptr);
      } else {
        mrow.push_back(matrix.at(r, c));
      }
      crow.push_back(matrix.count_at(r, c));
    }
    mean.push_back(std::move(mrow));
    count.push_back(std::move(crow));
  }

  return json{{"kind", "gradvac.task_matrix"},
              {"spec_version", kSpecVersion},
              {"label", label},
              {"tasks", std::move(task_names)},
              {"task_ids", matrix.task_ids},
              {"mean", std::move(mean)},
              {"count", std::move(count)}};
}

json clustering_to_json(const std::map<std::string, ClusteringScore>& per_group) {
  json groups = json::object();
  for (const auto& [group, s] : per_group) {
    groups[group] = json{{"within_mean", s.within_mean},
                         {"cross_mean", s.cross_mean},
                         {"margin", s.margin},
                         {"within_cells", s.within_cells},
                         {"cross_cells", s.cross_cells}};
  }
  return json{{"kind", "gradvac.clustering"},
              {"spec_version", kSpecVersion},
              {"groups", std::move(groups)}};
}

}  // namespace gradvac
