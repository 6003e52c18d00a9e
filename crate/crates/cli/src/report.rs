use serde_json::Value;

/// Renders `v` as compact JSON, or as plain tables when `pretty`.
pub fn render(v: &Value, pretty: bool) -> String {
    if !pretty {
        return format!("{v}\n");
    }
    let mut out = String::new();
    pretty_value(&mut out, "", v);
    out
}

fn scalar(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => "-".into(),
        Value::Number(n) => match n.as_f64() {
            Some(f) if n.is_f64() => format!("{f:.4}"),
            _ => n.to_string(),
        },
        Value::Array(a) if a.iter().all(|x| !x.is_object() && !x.is_array()) => {
            a.iter().map(scalar).collect::<Vec<_>>().join(" ")
        }
        other => other.to_string(),
    }
}

fn pretty_value(out: &mut String, title: &str, v: &Value) {
    match v {
        Value::Object(map) => {
            let simple: Vec<_> = map.iter().filter(|(_, x)| !is_table(x)).collect();
            let width = simple.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
            for (k, x) in simple {
                out.push_str(&format!("{k:<width$}  {}\n", scalar(x)));
            }
            for (k, x) in map.iter().filter(|(_, x)| is_table(x)) {
                out.push('\n');
                pretty_value(out, k, x);
            }
        }
        Value::Array(rows) if is_table(v) => {
            if !title.is_empty() {
                out.push_str(&format!("{title}\n"));
            }
            if rows.is_empty() {
                out.push_str("(none)\n");
                return;
            }
            let cols: Vec<String> = rows[0].as_object().map(|m| m.keys().cloned().collect()).unwrap_or_default();
            let cells: Vec<Vec<String>> = rows
                .iter()
                .map(|r| cols.iter().map(|c| scalar(&r[c.as_str()])).collect())
                .collect();
            let widths: Vec<usize> = cols
                .iter()
                .enumerate()
                .map(|(i, c)| cells.iter().map(|r| r[i].len()).chain([c.len()]).max().unwrap_or(0))
                .collect();
            let line = |vals: &[String]| -> String {
                vals.iter()
                    .zip(&widths)
                    .map(|(v, w)| format!("{v:<w$}"))
                    .collect::<Vec<_>>()
                    .join("  ")
                    .trim_end()
                    .to_string()
                    + "\n"
            };
            out.push_str(&line(&cols));
            for r in &cells {
                out.push_str(&line(r));
            }
        }
        other => out.push_str(&format!("{}\n", scalar(other))),
    }
}

fn is_table(v: &Value) -> bool {
    match v {
        Value::Array(a) => a.is_empty() || a.iter().all(Value::is_object),
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn empty_results_render_as_empty_array() {
        assert_eq!(render(&json!({"results": []}), false), "{\"results\":[]}\n");
        assert!(render(&json!({"results": []}), true).contains("(none)"));
    }

    #[test]
    fn tables_align_columns() {
        let v = json!({"count": 2, "results": [{"name": "a", "votes": 10}, {"name": "long", "votes": 3}]});
        let text = render(&v, true);
        assert!(text.starts_with("count  2\n"));
        assert!(text.contains("name  votes\na     10\nlong  3\n"));
    }
}
