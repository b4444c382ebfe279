//! Tabular output as CSV (flattened columns) or JSON lines.

use serde::Serialize;
use serde_json::{Map, Value};

use crate::{CliError, Format};

/// Rows of nested JSON objects with a fixed top-level column order.
#[derive(Debug, Clone, Default)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Map<String, Value>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Table { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn from_serialize<T: Serialize>(columns: &[&str], items: &[T]) -> Self {
        let mut t = Table::new(columns);
        for item in items {
            match serde_json::to_value(item).expect("plain data serializes") {
                Value::Object(map) => t.push(map),
                other => panic!("expected an object row, got {other}"),
            }
        }
        t
    }

    /// Appends a row, keeping only the declared columns in their order.
    pub fn push(&mut self, mut row: Map<String, Value>) {
        let mut ordered = Map::new();
        for c in &self.columns {
            ordered.insert(c.clone(), row.remove(c).unwrap_or(Value::Null));
        }
        self.rows.push(ordered);
    }

    pub fn render(&self, format: Format) -> Result<String, CliError> {
        match format {
            Format::Jsonl => Ok(self.rows.iter().map(|r| serde_json::to_string(r).expect("json") + "\n").collect()),
            Format::Csv => self.csv(),
        }
    }

    fn csv(&self) -> Result<String, CliError> {
        let mut header = Vec::new();
        let template = self.rows.first();
        for c in &self.columns {
            let v = template.and_then(|r| r.get(c)).cloned().unwrap_or(Value::Null);
            flatten_keys(c, &v, &mut header);
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&header).map_err(csv_err)?;
        for row in &self.rows {
            let mut cells = Vec::new();
            for c in &self.columns {
                flatten_values(row.get(c).unwrap_or(&Value::Null), &mut cells);
            }
            if cells.len() != header.len() {
                return Err(CliError::Config("rows have inconsistent shapes".into()));
            }
            w.write_record(&cells).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Io(std::io::Error::other(e))
}

fn flatten_keys(prefix: &str, v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Array(items) => {
            for (i, item) in items.iter().enumerate() {
                flatten_keys(&format!("{prefix}_{i}"), item, out);
            }
        }
        Value::Object(map) => {
            for (k, item) in map {
                flatten_keys(&format!("{prefix}.{k}"), item, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

fn flatten_values(v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Array(items) => items.iter().for_each(|i| flatten_values(i, out)),
        Value::Object(map) => map.values().for_each(|i| flatten_values(i, out)),
        Value::Null => out.push(String::new()),
        Value::String(s) => out.push(s.clone()),
        other => out.push(other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn csv_flattens_nested_columns() {
        let mut t = Table::new(&["a", "b", "c"]);
        t.push(json!({"c": null, "b": [1, 2], "a": {"x": 0.5, "y": "s"}}).as_object().unwrap().clone());
        let text = t.render(Format::Csv).unwrap();
        assert_eq!(text, "a.x,a.y,b_0,b_1,c\n0.5,s,1,2,\n");
        let jl = t.render(Format::Jsonl).unwrap();
        assert_eq!(jl, "{\"a\":{\"x\":0.5,\"y\":\"s\"},\"b\":[1,2],\"c\":null}\n");
    }

    #[test]
    fn empty_table_has_header_only() {
        let t = Table::new(&["value", "m"]);
        assert_eq!(t.render(Format::Csv).unwrap(), "value,m\n");
        assert_eq!(t.render(Format::Jsonl).unwrap(), "");
    }
}
