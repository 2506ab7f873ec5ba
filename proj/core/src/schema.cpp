#include "speechsql/schema.hpp"

#include "speechsql/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

namespace speechsql {

using nlohmann::json;

std::string to_lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
  return out;
}

bool iequals(std::string_view a, std::string_view b) {
  return a.size() == b.size() &&
         std::equal(a.begin(), a.end(), b.begin(), [](unsigned char x, unsigned char y) {
           return std::tolower(x) == std::tolower(y);
         });
}

std::vector<std::string> split_identifier(std::string_view name) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(to_lower(cur));
    cur.clear();
  };
  for (std::size_t i = 0; i < name.size(); ++i) {
    const unsigned char c = static_cast<unsigned char>(name[i]);
    if (c == '_' || c == ' ' || c == '-') {
      flush();
      continue;
    }
    if (!cur.empty()) {
      const unsigned char p = static_cast<unsigned char>(cur.back());
      const bool digit_edge = std::isdigit(p) != std::isdigit(c);
      const bool case_edge = std::islower(p) && std::isupper(c);
      if (digit_edge || case_edge) flush();
    }
    cur.push_back(static_cast<char>(c));
  }
  flush();
  return out;
}

int Schema::table_index(std::string_view name) const {
  for (std::size_t i = 0; i < tables.size(); ++i)
    if (iequals(tables[i].name, name)) return static_cast<int>(i);
  return -1;
}

int Schema::column_index(int table, std::string_view name) const {
  if (table < 0 || table >= static_cast<int>(tables.size())) return -1;
  const auto& cols = tables[table].columns;
  for (std::size_t i = 0; i < cols.size(); ++i)
    if (iequals(cols[i].name, name)) return static_cast<int>(i);
  return -1;
}

SchemaCatalog::SchemaCatalog(const Schema& schema) {
  for (std::size_t t = 0; t < schema.tables.size(); ++t) {
    tables_.push_back(schema.tables[t].name);
    for (const auto& col : schema.tables[t].columns) {
      int c = find_column(col.name);
      if (c < 0) {
        c = static_cast<int>(columns_.size());
        columns_.push_back(col.name);
        tables_of_.emplace_back();
      }
      auto& owners = tables_of_[c];
      if (std::find(owners.begin(), owners.end(), static_cast<int>(t)) == owners.end())
        owners.push_back(static_cast<int>(t));
    }
  }
}

bool SchemaCatalog::table_has(int t, int c) const {
  if (c < 0 || c >= n_columns()) return false;
  const auto& owners = tables_of_[c];
  return std::find(owners.begin(), owners.end(), t) != owners.end();
}

int SchemaCatalog::find_column(std::string_view name) const {
  for (std::size_t i = 0; i < columns_.size(); ++i)
    if (iequals(columns_[i], name)) return static_cast<int>(i);
  return -1;
}

int SchemaCatalog::find_table(std::string_view name) const {
  for (std::size_t i = 0; i < tables_.size(); ++i)
    if (iequals(tables_[i], name)) return static_cast<int>(i);
  return -1;
}

void validate_schema(const Schema& s) {
  auto fail = [&](const std::string& where, const std::string& what) {
    throw Error(ErrorCode::kMalformedSchema, s.db_id + where + ": " + what);
  };
  if (s.db_id.empty()) fail("", "empty db_id");
  if (s.tables.empty()) fail(".tables", "schema has no tables");
  std::set<std::string> names;
  for (const auto& t : s.tables) {
    if (t.name.empty()) fail(".tables", "table with empty name");
    if (!names.insert(to_lower(t.name)).second) fail("." + t.name, "duplicate table name");
    if (t.columns.empty()) fail("." + t.name, "table has no columns");
    std::set<std::string> cols;
    for (const auto& c : t.columns) {
      if (c.name.empty()) fail("." + t.name, "column with empty name");
      if (!cols.insert(to_lower(c.name)).second) fail("." + t.name + "." + c.name, "duplicate column");
    }
  }
  auto check_ref = [&](const std::string& table, const std::string& column, const std::string& role) {
    const int ti = s.table_index(table);
    if (ti < 0) fail(".foreign_keys", role + " table " + table + " does not exist");
    if (s.column_index(ti, column) < 0)
      fail(".foreign_keys", role + " column " + table + "." + column + " does not exist");
  };
  for (const auto& fk : s.foreign_keys) {
    check_ref(fk.src_table, fk.src_column, "source");
    check_ref(fk.dst_table, fk.dst_column, "target");
  }
  for (const auto& pk : s.primary_keys) {
    const int ti = s.table_index(pk.table);
    if (ti < 0 || s.column_index(ti, pk.column) < 0)
      fail(".primary_keys", pk.table + "." + pk.column + " does not exist");
  }
}

namespace {

std::string get_string(const json& j, const char* key, const std::string& where) {
  if (!j.is_object() || !j.contains(key) || !j[key].is_string())
    throw Error(ErrorCode::kMalformedSchema, where + ": missing string field '" + key + "'");
  return j[key].get<std::string>();
}

Schema schema_from_json(const json& j, std::size_t position) {
  Schema s;
  s.db_id = get_string(j, "db_id", "databases[" + std::to_string(position) + "]");
  if (!j.contains("tables") || !j["tables"].is_array())
    throw Error(ErrorCode::kMalformedSchema, s.db_id + ".tables: missing array");
  for (const auto& jt : j["tables"]) {
    Table t;
    t.name = get_string(jt, "name", s.db_id + ".tables");
    if (!jt.contains("columns") || !jt["columns"].is_array())
      throw Error(ErrorCode::kMalformedSchema, s.db_id + "." + t.name + ".columns: missing array");
    for (const auto& jc : jt["columns"]) {
      Column c;
      if (jc.is_string()) {
        c.name = jc.get<std::string>();
      } else {
        c.name = get_string(jc, "name", s.db_id + "." + t.name);
        const std::string type = jc.value("type", "text");
        if (type == "number") c.type = ColumnType::kNumber;
        else if (type == "text") c.type = ColumnType::kText;
        else throw Error(ErrorCode::kMalformedSchema, s.db_id + "." + t.name + "." + c.name + ": unknown type " + type);
      }
      t.columns.push_back(std::move(c));
    }
    s.tables.push_back(std::move(t));
  }
  auto pair_list = [&](const char* key, std::size_t arity) {
    std::vector<std::vector<std::string>> out;
    if (!j.contains(key)) return out;
    for (const auto& e : j[key]) {
      if (!e.is_array() || e.size() != arity)
        throw Error(ErrorCode::kMalformedSchema, s.db_id + "." + key + ": expected arrays of " + std::to_string(arity));
      std::vector<std::string> row;
      for (const auto& x : e) row.push_back(x.get<std::string>());
      out.push_back(std::move(row));
    }
    return out;
  };
  for (auto& r : pair_list("primary_keys", 2)) s.primary_keys.push_back({r[0], r[1]});
  for (auto& r : pair_list("foreign_keys", 4)) s.foreign_keys.push_back({r[0], r[1], r[2], r[3]});
  if (j.contains("value_pool"))
    for (const auto& v : j["value_pool"]) s.value_pool.push_back(v.is_string() ? v.get<std::string>() : v.dump());
  validate_schema(s);
  return s;
}

}  // namespace

SchemaStore parse_schema_store(std::string_view json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kMalformedSchema, std::string("invalid JSON: ") + e.what());
  }
  if (!root.is_object() || !root.contains("databases") || !root["databases"].is_array())
    throw Error(ErrorCode::kMalformedSchema, "expected an object with a 'databases' array");
  SchemaStore store;
  std::size_t i = 0;
  for (const auto& jdb : root["databases"]) {
    Schema s = schema_from_json(jdb, i++);
    if (store.count(s.db_id)) throw Error(ErrorCode::kDuplicateDbId, s.db_id);
    store.emplace(s.db_id, std::move(s));
  }
  return store;
}

SchemaStore load_schema_store(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorCode::kIo, "cannot read schema store " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_schema_store(ss.str());
}

std::string schema_store_to_json(const SchemaStore& store) {
  json dbs = json::array();
  for (const auto& [id, s] : store) {
    json js;
    js["db_id"] = s.db_id;
    js["tables"] = json::array();
    for (const auto& t : s.tables) {
      json jt;
      jt["name"] = t.name;
      jt["columns"] = json::array();
      for (const auto& c : t.columns)
        jt["columns"].push_back({{"name", c.name}, {"type", c.type == ColumnType::kNumber ? "number" : "text"}});
      js["tables"].push_back(jt);
    }
    js["primary_keys"] = json::array();
    for (const auto& pk : s.primary_keys) js["primary_keys"].push_back({pk.table, pk.column});
    js["foreign_keys"] = json::array();
    for (const auto& fk : s.foreign_keys)
      js["foreign_keys"].push_back({fk.src_table, fk.src_column, fk.dst_table, fk.dst_column});
    js["value_pool"] = s.value_pool;
    dbs.push_back(js);
  }
  return json{{"databases", dbs}}.dump(2) + "\n";
}

}  // namespace speechsql
