use serde_json::Value;

/// JSON on request, otherwise one `key: value` line per field with nested
/// arrays of records printed as indented rows.
pub fn emit(report: &Value, json: bool) {
    if json {
        println!("{}", serde_json::to_string_pretty(report).expect("values serialize"));
        return;
    }
    let Value::Object(map) = report else {
        println!("{report}");
        return;
    };
    for (k, v) in map {
        match v {
            Value::Array(items) if items.iter().all(Value::is_object) && !items.is_empty() => {
                println!("{k}:");
                for item in items {
                    let row: Vec<String> = item
                        .as_object()
                        .expect("checked")
                        .iter()
                        .map(|(k, v)| format!("{k}={}", scalar(v)))
                        .collect();
                    println!("  {}", row.join(" "));
                }
            }
            _ => println!("{k}: {}", scalar(v)),
        }
    }
}

fn scalar(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}
