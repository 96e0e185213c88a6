//! Named response schemas for structured completions.

use std::collections::BTreeMap;

use serde_json::{Map, Value};

/// Identifier of a registered schema.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SchemaRef(&'static str);

impl SchemaRef {
    pub const TOPICS: SchemaRef = SchemaRef("topics");
    pub const FILTER_VERDICT: SchemaRef = SchemaRef("filter_verdict");
    pub const FEATURES: SchemaRef = SchemaRef("features");
    pub const MERGE_DECISION: SchemaRef = SchemaRef("merge_decision");
    pub const FILTERING_NEED: SchemaRef = SchemaRef("filtering_need");
    pub const RULE_RELEVANCE: SchemaRef = SchemaRef("rule_relevance");
    pub const PREDICTION: SchemaRef = SchemaRef("prediction");

    pub const fn custom(name: &'static str) -> Self {
        SchemaRef(name)
    }

    pub fn name(&self) -> &'static str {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    String,
    Bool,
    Integer,
    StringList,
    /// String or JSON null.
    NullableString,
    /// Integer or JSON null.
    NullableInteger,
}

#[derive(Debug, Clone)]
pub struct Field {
    pub name: &'static str,
    pub kind: FieldKind,
    pub required: bool,
}

impl Field {
    pub const fn required(name: &'static str, kind: FieldKind) -> Self {
        Self { name, kind, required: true }
    }

    pub const fn optional(name: &'static str, kind: FieldKind) -> Self {
        Self { name, kind, required: false }
    }
}

/// A flat JSON-object schema. Unknown keys are tolerated.
#[derive(Debug, Clone)]
pub struct Schema {
    pub name: &'static str,
    pub fields: Vec<Field>,
    /// Shown to the model in correction prompts.
    pub format_hint: &'static str,
}

impl Schema {
    pub fn validate(&self, value: &Value) -> Result<(), String> {
        let obj = value.as_object().ok_or("expected a JSON object")?;
        for field in &self.fields {
            match obj.get(field.name) {
                None if field.required => return Err(format!("missing field `{}`", field.name)),
                None => {}
                Some(v) => check_kind(field, v)?,
            }
        }
        Ok(())
    }

    /// Extracts the JSON object from model output and validates it.
    pub fn parse(&self, text: &str) -> Result<Value, String> {
        let value = extract_json_object(text).ok_or("no JSON object found")?;
        self.validate(&value)?;
        Ok(value)
    }
}

fn check_kind(field: &Field, v: &Value) -> Result<(), String> {
    let ok = match field.kind {
        FieldKind::String => v.is_string(),
        FieldKind::Bool => v.is_boolean(),
        FieldKind::Integer => v.is_i64() || v.is_u64(),
        FieldKind::StringList => v.as_array().map(|items| items.iter().all(Value::is_string)).unwrap_or(false),
        FieldKind::NullableString => v.is_null() || v.is_string(),
        FieldKind::NullableInteger => v.is_null() || v.is_i64() || v.is_u64(),
    };
    if ok {
        Ok(())
    } else {
        Err(format!("field `{}` should be {:?}", field.name, field.kind))
    }
}

/// Finds the outermost `{ ... }` in `text`, tolerating code fences and
/// surrounding prose.
fn extract_json_object(text: &str) -> Option<Value> {
    let trimmed = text.trim();
    if let Ok(v @ Value::Object(_)) = serde_json::from_str::<Value>(trimmed) {
        return Some(v);
    }
    let start = trimmed.find('{')?;
    let end = trimmed.rfind('}')?;
    if end <= start {
        return None;
    }
    match serde_json::from_str::<Value>(&trimmed[start..=end]) {
        Ok(v @ Value::Object(_)) => Some(v),
        _ => None,
    }
}

#[derive(Debug, Clone, Default)]
pub struct SchemaRegistry {
    schemas: BTreeMap<&'static str, Schema>,
}

impl SchemaRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn builtin() -> Self {
        use FieldKind::*;
        let mut reg = Self::empty();
        reg.register(Schema {
            name: SchemaRef::TOPICS.name(),
            fields: vec![Field::required("topics", StringList)],
            format_hint: r#"{"topics": ["<topic>", ...]}"#,
        });
        reg.register(Schema {
            name: SchemaRef::FILTER_VERDICT.name(),
            fields: vec![Field::required("filter", Bool), Field::optional("reason", NullableString)],
            format_hint: r#"{"filter": true|false, "reason": "<one sentence>"}"#,
        });
        reg.register(Schema {
            name: SchemaRef::FEATURES.name(),
            fields: vec![Field::required("features", StringList)],
            format_hint: r#"{"features": ["<short feature>", ...]}"#,
        });
        reg.register(Schema {
            name: SchemaRef::MERGE_DECISION.name(),
            fields: vec![
                Field::required("merge", Bool),
                Field::optional("targets", StringList),
                Field::optional("merged_feature", NullableString),
            ],
            format_hint: r#"{"merge": true|false, "targets": ["<listed feature>", ...], "merged_feature": "<label>"|null}"#,
        });
        reg.register(Schema {
            name: SchemaRef::FILTERING_NEED.name(),
            fields: vec![Field::required("need", NullableString)],
            format_hint: r#"{"need": "<filtering rule>"|null}"#,
        });
        reg.register(Schema {
            name: SchemaRef::RULE_RELEVANCE.name(),
            fields: vec![
                Field::required("related_rule_id", NullableInteger),
                Field::optional("merged_text", NullableString),
            ],
            format_hint: r#"{"related_rule_id": <rule id>|null, "merged_text": "<updated rule>"|null}"#,
        });
        reg.register(Schema {
            name: SchemaRef::PREDICTION.name(),
            fields: vec![Field::required("index", Integer)],
            format_hint: r#"{"index": <candidate number>}"#,
        });
        reg
    }

    pub fn register(&mut self, schema: Schema) {
        self.schemas.insert(schema.name, schema);
    }

    pub fn get(&self, schema: SchemaRef) -> Option<&Schema> {
        self.schemas.get(schema.name())
    }
}

/// Convenience accessors for parsed payloads.
pub fn string_list(obj: &Map<String, Value>, key: &str) -> Vec<String> {
    obj.get(key)
        .and_then(Value::as_array)
        .map(|items| {
            items
                .iter()
                .filter_map(Value::as_str)
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect()
        })
        .unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn parses_fenced_json() {
        let reg = SchemaRegistry::builtin();
        let schema = reg.get(SchemaRef::TOPICS).unwrap();
        let v = schema.parse("Sure!\n```json\n{\"topics\": [\"horror\"]}\n```").unwrap();
        assert_eq!(v, json!({"topics": ["horror"]}));
    }

    #[test]
    fn rejects_wrong_kinds_and_missing_fields() {
        let reg = SchemaRegistry::builtin();
        let verdict = reg.get(SchemaRef::FILTER_VERDICT).unwrap();
        assert!(verdict.parse(r#"{"filter": "yes"}"#).is_err());
        assert!(verdict.parse(r#"{"reason": "x"}"#).is_err());
        assert!(verdict.parse(r#"{"filter": false, "reason": null}"#).is_ok());
        let need = reg.get(SchemaRef::FILTERING_NEED).unwrap();
        assert!(need.parse(r#"{"need": null}"#).is_ok());
        assert!(need.parse("[1,2]").is_err());
    }
}
