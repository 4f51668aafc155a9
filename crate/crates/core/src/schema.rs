//! Developer-defined mapping from decoded events to store records.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::fetcher::DecodedEvent;
use crate::types::{Millis, RecordKey, RegistrationId, SchemaId, Value, ValueType};

/// Columns every record carries regardless of its schema.
pub const BUILTIN_COLUMNS: [&str; 6] = [
    "chainId",
    "blockHeight",
    "txIndex",
    "logIndex",
    "blockTimestamp",
    "eventType",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    /// Column name differs from the source field; the value is untouched.
    Rename,
    ToString,
    ToInteger,
    /// Integer multiplication by the given factor.
    Scale(i64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FieldMapping {
    pub column: String,
    /// Name of the decoded payload field.
    pub source: String,
    #[serde(rename = "type")]
    pub target_type: ValueType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<Transform>,
    /// When set, a missing source field leaves the column absent.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub optional: bool,
}

impl FieldMapping {
    pub fn new(column: impl Into<String>, source: impl Into<String>, target_type: ValueType) -> Self {
        Self {
            column: column.into(),
            source: source.into(),
            target_type,
            transform: None,
            optional: false,
        }
    }

    pub fn with(mut self, transform: Transform) -> Self {
        self.transform = Some(transform);
        self
    }

    pub fn optional(mut self) -> Self {
        self.optional = true;
        self
    }
}

/// A schema may be shared by registrations on different chains so that
/// their records land in one uniform shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MappingSchema {
    pub schema_id: SchemaId,
    pub fields: Vec<FieldMapping>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SchemaError {
    #[error("schema {schema}: column {column} is defined twice")]
    DuplicateColumn { schema: SchemaId, column: String },
    #[error("schema {schema}: column {column} shadows a built-in column")]
    ReservedColumn { schema: SchemaId, column: String },
    #[error("schema {schema}: column name is empty")]
    EmptyColumn { schema: SchemaId },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MappingError {
    #[error("{key}: source field {source_path} not found for column {column}")]
    UnresolvedSource {
        key: RecordKey,
        column: String,
        source_path: String,
    },
    #[error("{key}: column {column} cannot hold {found} as {expected}")]
    Coercion {
        key: RecordKey,
        column: String,
        expected: ValueType,
        found: String,
    },
}

impl MappingSchema {
    pub fn new(schema_id: impl Into<SchemaId>, fields: Vec<FieldMapping>) -> Result<Self, SchemaError> {
        let schema = Self {
            schema_id: schema_id.into(),
            fields,
        };
        schema.validate()?;
        Ok(schema)
    }

    /// Maps every source field onto a column of the same name and type.
    pub fn identity(schema_id: impl Into<SchemaId>, fields: &[(&str, ValueType)]) -> Self {
        Self {
            schema_id: schema_id.into(),
            fields: fields
                .iter()
                .map(|(name, ty)| FieldMapping::new(*name, *name, *ty))
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        let mut seen = BTreeSet::new();
        for field in &self.fields {
            if field.column.is_empty() {
                return Err(SchemaError::EmptyColumn {
                    schema: self.schema_id.clone(),
                });
            }
            if BUILTIN_COLUMNS.contains(&field.column.as_str()) {
                return Err(SchemaError::ReservedColumn {
                    schema: self.schema_id.clone(),
                    column: field.column.clone(),
                });
            }
            if !seen.insert(field.column.as_str()) {
                return Err(SchemaError::DuplicateColumn {
                    schema: self.schema_id.clone(),
                    column: field.column.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn columns(&self) -> impl Iterator<Item = &str> {
        self.fields.iter().map(|f| f.column.as_str())
    }
}

/// A schema-shaped, timestamped event row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MappedRecord {
    pub key: RecordKey,
    pub event_type: RegistrationId,
    pub schema_id: SchemaId,
    pub columns: BTreeMap<String, Value>,
    /// On-chain time (seconds); the queryable time axis.
    pub block_timestamp: u64,
    /// Ingestion time; diagnostic only.
    pub stored_at: Millis,
}

impl MappedRecord {
    /// Value of a schema or built-in column.
    pub fn column(&self, name: &str) -> Option<Value> {
        match name {
            "chainId" => Some(Value::Str(self.key.chain_id.0.clone())),
            "blockHeight" => Some(Value::Int(self.key.block_height as i64)),
            "txIndex" => Some(Value::Int(self.key.tx_index as i64)),
            "logIndex" => Some(Value::Int(self.key.log_index as i64)),
            "blockTimestamp" => Some(Value::Int(self.block_timestamp as i64)),
            "eventType" => Some(Value::Str(self.event_type.0.clone())),
            _ => self.columns.get(name).cloned(),
        }
    }

    /// The record without its ingestion timestamp, for content comparison.
    pub fn content(&self) -> MappedRecord {
        MappedRecord {
            stored_at: 0,
            ..self.clone()
        }
    }
}

pub fn apply_schema(event: &DecodedEvent, schema: &MappingSchema, stored_at: Millis) -> Result<MappedRecord, MappingError> {
    let mut columns = BTreeMap::new();
    for mapping in &schema.fields {
        let Some((_, raw)) = event.fields.iter().find(|(name, _)| name == &mapping.source) else {
            if mapping.optional {
                continue;
            }
            return Err(MappingError::UnresolvedSource {
                key: event.key.clone(),
                column: mapping.column.clone(),
                source_path: mapping.source.clone(),
            });
        };
        let value = coerce(raw, mapping).ok_or_else(|| MappingError::Coercion {
            key: event.key.clone(),
            column: mapping.column.clone(),
            expected: mapping.target_type,
            found: format!("{} {raw}", raw.value_type()),
        })?;
        columns.insert(mapping.column.clone(), value);
    }
    Ok(MappedRecord {
        key: event.key.clone(),
        event_type: event.event_type.clone(),
        schema_id: schema.schema_id.clone(),
        columns,
        block_timestamp: event.block_timestamp,
        stored_at,
    })
}

fn coerce(raw: &Value, mapping: &FieldMapping) -> Option<Value> {
    let transformed = match mapping.transform {
        None | Some(Transform::Rename) => raw.clone(),
        Some(Transform::ToString) => Value::Str(raw.to_string()),
        Some(Transform::ToInteger) => match raw {
            Value::Int(i) => Value::Int(*i),
            Value::Bool(b) => Value::Int(i64::from(*b)),
            Value::Str(s) => Value::Int(s.trim().parse().ok()?),
            Value::Bytes(_) => return None,
        },
        Some(Transform::Scale(factor)) => Value::Int(raw.as_int()?.checked_mul(factor)?),
    };
    (transformed.value_type() == mapping.target_type).then_some(transformed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ChainId;

    fn event(chain: &str, fields: Vec<(&str, Value)>) -> DecodedEvent {
        DecodedEvent {
            key: RecordKey {
                chain_id: ChainId::from(chain),
                block_height: 10,
                tx_index: 1,
                log_index: 0,
            },
            event_type: RegistrationId::from("t"),
            block_timestamp: 99,
            fields: fields.into_iter().map(|(n, v)| (n.to_owned(), v)).collect(),
        }
    }

    #[test]
    fn identity_schema_copies_fields() {
        let e = event("eth", vec![("from", "0x1".into()), ("to", "0x2".into()), ("tokenId", Value::Int(42))]);
        let schema = MappingSchema::identity(
            "s",
            &[("from", ValueType::Str), ("to", ValueType::Str), ("tokenId", ValueType::Int)],
        );
        let rec = apply_schema(&e, &schema, 5).unwrap();
        let decoded: BTreeMap<String, Value> = e.fields.iter().cloned().collect();
        assert_eq!(rec.columns, decoded);
        assert_eq!(rec.block_timestamp, 99);
        assert_eq!(rec.column("blockTimestamp"), Some(Value::Int(99)));
    }

    #[test]
    fn heterogeneous_chains_share_a_shape() {
        let eth = event("eth", vec![("from", "0xa".into()), ("to", "0xb".into()), ("tokenId", Value::Int(7))]);
        let flow = event("flow", vec![("sender", "0xa".into()), ("recipient", "0xb".into()), ("id", "7".into())]);
        let eth_schema = MappingSchema::identity(
            "land",
            &[("from", ValueType::Str), ("to", ValueType::Str), ("tokenId", ValueType::Int)],
        );
        let flow_schema = MappingSchema::new(
            "land",
            vec![
                FieldMapping::new("from", "sender", ValueType::Str).with(Transform::Rename),
                FieldMapping::new("to", "recipient", ValueType::Str).with(Transform::Rename),
                FieldMapping::new("tokenId", "id", ValueType::Int).with(Transform::ToInteger),
            ],
        )
        .unwrap();
        let a = apply_schema(&eth, &eth_schema, 0).unwrap();
        let b = apply_schema(&flow, &flow_schema, 0).unwrap();
        assert_eq!(a.columns, b.columns);
        assert_ne!(a.key.chain_id, b.key.chain_id);
        assert_eq!(
            MappedRecord { key: b.key.clone(), ..a.clone() },
            b
        );
    }

    #[test]
    fn coercion_and_resolution_errors() {
        let e = event("eth", vec![("amount", "lots".into()), ("n", Value::Int(3))]);
        let bad_int = MappingSchema::new(
            "s",
            vec![FieldMapping::new("amount", "amount", ValueType::Int).with(Transform::ToInteger)],
        )
        .unwrap();
        assert!(matches!(apply_schema(&e, &bad_int, 0), Err(MappingError::Coercion { .. })));

        let missing = MappingSchema::identity("s", &[("nope", ValueType::Int)]);
        assert!(matches!(
            apply_schema(&e, &missing, 0),
            Err(MappingError::UnresolvedSource { .. })
        ));

        let optional = MappingSchema::new("s", vec![FieldMapping::new("nope", "nope", ValueType::Int).optional()]).unwrap();
        assert!(apply_schema(&e, &optional, 0).unwrap().columns.is_empty());

        let wrong_type = MappingSchema::identity("s", &[("n", ValueType::Str)]);
        assert!(matches!(apply_schema(&e, &wrong_type, 0), Err(MappingError::Coercion { .. })));

        let scaled = MappingSchema::new(
            "s",
            vec![
                FieldMapping::new("n", "n", ValueType::Int).with(Transform::Scale(1000)),
                FieldMapping::new("label", "n", ValueType::Str).with(Transform::ToString),
            ],
        )
        .unwrap();
        let rec = apply_schema(&e, &scaled, 0).unwrap();
        assert_eq!(rec.columns["n"], Value::Int(3000));
        assert_eq!(rec.columns["label"], Value::from("3"));
    }

    #[test]
    fn schema_validation() {
        let dup = MappingSchema::new(
            "s",
            vec![
                FieldMapping::new("a", "x", ValueType::Int),
                FieldMapping::new("a", "y", ValueType::Int),
            ],
        );
        assert!(matches!(dup, Err(SchemaError::DuplicateColumn { .. })));
        let reserved = MappingSchema::new("s", vec![FieldMapping::new("blockHeight", "x", ValueType::Int)]);
        assert!(matches!(reserved, Err(SchemaError::ReservedColumn { .. })));
    }

    #[test]
    fn schema_json_shape() {
        let schema = MappingSchema::new(
            "land",
            vec![
                FieldMapping::new("tokenId", "id", ValueType::Int).with(Transform::ToInteger),
                FieldMapping::new("wei", "amount", ValueType::Int).with(Transform::Scale(10)).optional(),
            ],
        )
        .unwrap();
        let json = serde_json::to_value(&schema).unwrap();
        assert_eq!(
            json,
            serde_json::json!({
                "schemaId": "land",
                "fields": [
                    {"column": "tokenId", "source": "id", "type": "int", "transform": "to_integer"},
                    {"column": "wei", "source": "amount", "type": "int", "transform": {"scale": 10}, "optional": true}
                ]
            })
        );
    }
}
