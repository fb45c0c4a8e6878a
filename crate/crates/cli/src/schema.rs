//! Validator for the JSON Schema subset our shipped schemas use: `type`
//! (single or list), `properties` + `required` + boolean
//! `additionalProperties`, homogeneous `items`, `enum`, numeric bounds, and
//! array length bounds. Anything outside that subset in a schema is a
//! validator error, not a silent pass.

use serde_json::Value;

/// Validates `value` against `schema`, returning every violation found.
/// An empty vector means the document conforms.
pub fn validate(schema: &Value, value: &Value) -> Vec<String> {
    let mut errors = Vec::new();
    check(schema, value, "$", &mut errors);
    errors
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(n) => {
            if n.is_i64() || n.is_u64() {
                "integer"
            } else {
                "number"
            }
        }
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

fn matches_type(value: &Value, want: &str) -> bool {
    match want {
        // Every integer is a number; a float with zero fraction still
        // counts as an integer so that 2.0 round-tripped through f64 passes.
        "number" => matches!(value, Value::Number(_)),
        "integer" => match value {
            Value::Number(n) => {
                n.is_i64() || n.is_u64() || n.as_f64().is_some_and(|f| f.fract() == 0.0)
            }
            _ => false,
        },
        other => type_name(value) == other,
    }
}

fn check(schema: &Value, value: &Value, path: &str, errors: &mut Vec<String>) {
    let Value::Object(s) = schema else {
        errors.push(format!("{path}: schema node is not an object"));
        return;
    };

    for key in s.keys() {
        if !matches!(
            key.as_str(),
            "type"
                | "properties"
                | "required"
                | "additionalProperties"
                | "items"
                | "enum"
                | "minimum"
                | "maximum"
                | "minItems"
                | "maxItems"
                | "description"
                | "$schema"
                | "title"
        ) {
            errors.push(format!("{path}: schema keyword {key:?} is outside the supported subset"));
        }
    }

    if let Some(t) = s.get("type") {
        let allowed: Vec<&str> = match t {
            Value::String(one) => vec![one.as_str()],
            Value::Array(list) => list.iter().filter_map(Value::as_str).collect(),
            _ => {
                errors.push(format!("{path}: malformed type keyword"));
                return;
            }
        };
        if !allowed.iter().any(|want| matches_type(value, want)) {
            errors.push(format!(
                "{path}: expected type {allowed:?}, found {}",
                type_name(value)
            ));
            return;
        }
    }

    if let Some(Value::Array(options)) = s.get("enum") {
        if !options.contains(value) {
            errors.push(format!("{path}: value not in enum"));
        }
    }

    if let Some(min) = s.get("minimum").and_then(Value::as_f64) {
        if let Some(v) = value.as_f64() {
            if v < min {
                errors.push(format!("{path}: {v} below minimum {min}"));
            }
        }
    }
    if let Some(max) = s.get("maximum").and_then(Value::as_f64) {
        if let Some(v) = value.as_f64() {
            if v > max {
                errors.push(format!("{path}: {v} above maximum {max}"));
            }
        }
    }

    if let Value::Object(fields) = value {
        if let Some(Value::Array(required)) = s.get("required") {
            for name in required.iter().filter_map(Value::as_str) {
                if !fields.contains_key(name) {
                    errors.push(format!("{path}: missing required field {name:?}"));
                }
            }
        }
        let props = s.get("properties").and_then(Value::as_object);
        if let Some(props) = props {
            for (name, sub) in props {
                if let Some(v) = fields.get(name) {
                    check(sub, v, &format!("{path}.{name}"), errors);
                }
            }
        }
        if s.get("additionalProperties") == Some(&Value::Bool(false)) {
            for name in fields.keys() {
                if !props.is_some_and(|p| p.contains_key(name)) {
                    errors.push(format!("{path}: unexpected field {name:?}"));
                }
            }
        }
    }

    if let Value::Array(elems) = value {
        if let Some(min) = s.get("minItems").and_then(Value::as_u64) {
            if (elems.len() as u64) < min {
                errors.push(format!("{path}: {} items, fewer than {min}", elems.len()));
            }
        }
        if let Some(max) = s.get("maxItems").and_then(Value::as_u64) {
            if (elems.len() as u64) > max {
                errors.push(format!("{path}: {} items, more than {max}", elems.len()));
            }
        }
        if let Some(item_schema) = s.get("items") {
            for (i, elem) in elems.iter().enumerate() {
                check(item_schema, elem, &format!("{path}[{i}]"), errors);
            }
        }
    }
}

/// Loads the shipped schema for `command` (file `schemas/<command>.json`
/// next to the crate) and validates `value` against it.
pub fn validate_command_output(command: &str, value: &Value) -> Vec<String> {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("schemas")
        .join(format!("{command}.json"));
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) => return vec![format!("cannot read schema {}: {e}", path.display())],
    };
    let schema: Value = match serde_json::from_str(&text) {
        Ok(s) => s,
        Err(e) => return vec![format!("schema {} is not JSON: {e}", path.display())],
    };
    validate(&schema, value)
}
