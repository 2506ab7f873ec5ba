#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace speechsql {

enum class ColumnType { kText, kNumber };

struct Column {
  std::string name;
  ColumnType type = ColumnType::kText;
};

struct Table {
  std::string name;
  std::vector<Column> columns;
};

struct ColumnKey {
  std::string table;
  std::string column;
};

struct ForeignKey {
  std::string src_table;
  std::string src_column;
  std::string dst_table;
  std::string dst_column;
};

struct Schema {
  std::string db_id;
  std::vector<Table> tables;
  std::vector<ColumnKey> primary_keys;
  std::vector<ForeignKey> foreign_keys;
  /// Cell values available as distractor literals.
  std::vector<std::string> value_pool;

  /// Case-insensitive lookups; -1 when absent.
  int table_index(std::string_view name) const;
  int column_index(int table, std::string_view name) const;
};

/// Table list plus the merged column inventory: columns sharing a name
/// (case-insensitively) across tables are one entry.
class SchemaCatalog {
 public:
  explicit SchemaCatalog(const Schema& schema);

  int n_tables() const { return static_cast<int>(tables_.size()); }
  int n_columns() const { return static_cast<int>(columns_.size()); }
  const std::string& table_name(int t) const { return tables_[t]; }
  const std::string& column_name(int c) const { return columns_[c]; }
  /// Tables (ascending) that contain merged column c.
  const std::vector<int>& tables_of(int c) const { return tables_of_[c]; }
  bool table_has(int t, int c) const;
  int find_column(std::string_view name) const;  // -1 when absent
  int find_table(std::string_view name) const;   // -1 when absent

 private:
  std::vector<std::string> tables_;
  std::vector<std::string> columns_;
  std::vector<std::vector<int>> tables_of_;
};

using SchemaStore = std::map<std::string, Schema>;

/// Throws MalformedSchema naming the offending path.
void validate_schema(const Schema& schema);
SchemaStore parse_schema_store(std::string_view json_text);
SchemaStore load_schema_store(const std::filesystem::path& path);
std::string schema_store_to_json(const SchemaStore& store);

std::string to_lower(std::string_view s);
bool iequals(std::string_view a, std::string_view b);

/// Splits an identifier on '_', case changes and letter/digit boundaries,
/// lowercasing each piece ("Ref_Colors" -> ref colors).
std::vector<std::string> split_identifier(std::string_view name);

}  // namespace speechsql
