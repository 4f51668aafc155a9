//! JSON-over-HTTP API, version 1.

use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use syncer_core::integrity::AnalyticsQuery;
use syncer_core::registry::{NewRegistration, RegistryError};
use syncer_core::store::{QueryError, QuerySpec};
use syncer_core::types::{RegistrationId, SubscriptionId};

use crate::node::{Node, NodeError};

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    column: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            column: None,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.code, "message": self.message });
        if let Some(c) = self.column {
            body["column"] = json!(c);
        }
        (self.status, Json(body)).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "malformed_request", r.body_text())
    }
}

impl From<RegistryError> for ApiError {
    fn from(e: RegistryError) -> Self {
        let (status, code) = match &e {
            RegistryError::Duplicate(_) => (StatusCode::CONFLICT, "duplicate_registration"),
            RegistryError::DuplicateSubscription { .. } => (StatusCode::CONFLICT, "duplicate_subscription"),
            RegistryError::SchemaConflict(_) => (StatusCode::CONFLICT, "schema_conflict"),
            RegistryError::UnknownRegistration(_) => (StatusCode::NOT_FOUND, "unknown_registration"),
            RegistryError::UnknownSubscription(_) => (StatusCode::NOT_FOUND, "unknown_subscription"),
            RegistryError::Journal(_) => (StatusCode::INTERNAL_SERVER_ERROR, "journal"),
            _ => (StatusCode::BAD_REQUEST, "invalid_request"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<NodeError> for ApiError {
    fn from(e: NodeError) -> Self {
        match e {
            NodeError::Registry(r) => r.into(),
            NodeError::UnknownChain(_) => ApiError::new(StatusCode::BAD_REQUEST, "unknown_chain", e.to_string()),
            NodeError::ChainUnavailable { .. } => {
                ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "chain_unavailable", e.to_string())
            }
            NodeError::Open { .. } => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "storage", e.to_string()),
        }
    }
}

impl From<QueryError> for ApiError {
    fn from(e: QueryError) -> Self {
        let mut err = ApiError::new(StatusCode::BAD_REQUEST, "malformed_query", e.to_string());
        err.column = match &e {
            QueryError::UnknownColumn(c) | QueryError::NotNumeric(c) | QueryError::Overflow(c) => Some(c.clone()),
            _ => None,
        };
        err
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(node: Arc<Node>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/metrics", get(metrics))
        .route("/v1/registrations", get(list_registrations).post(create_registration))
        .route("/v1/registrations/{id}", get(get_registration))
        .route("/v1/backfill", get(backfill_status))
        .route("/v1/subscriptions", get(list_subscriptions).post(create_subscription))
        .route("/v1/subscriptions/{id}", delete(delete_subscription))
        .route("/v1/query", post(query))
        .route("/v1/checksums", get(checksums))
        .route("/v1/checksums/analytics", get(analytics))
        .route("/v1/alarms", get(alarms))
        .with_state(node)
}

async fn health(State(node): State<Arc<Node>>) -> impl IntoResponse {
    Json(json!({
        "status": "ok",
        "registrations": node.registry.list_registrations(None).len(),
        "storeRecords": node.store.len(),
    }))
}

async fn metrics(State(node): State<Arc<Node>>) -> impl IntoResponse {
    (
        [(header::CONTENT_TYPE, "text/plain; version=0.0.4")],
        node.metrics_text(),
    )
}

async fn list_registrations(State(node): State<Arc<Node>>) -> impl IntoResponse {
    Json(node.registry.list_registrations(None))
}

async fn get_registration(State(node): State<Arc<Node>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(node.registry.get(&RegistrationId::new(id))?))
}

async fn create_registration(
    State(node): State<Arc<Node>>,
    body: Result<Json<NewRegistration>, JsonRejection>,
) -> ApiResult<impl IntoResponse> {
    let Json(new) = body?;
    let reg = node.register(new)?;
    Ok((StatusCode::CREATED, Json(reg)))
}

async fn backfill_status(State(node): State<Arc<Node>>) -> impl IntoResponse {
    Json(node.backfill_status())
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct NewSubscription {
    pub registration_id: RegistrationId,
    pub url: String,
}

async fn list_subscriptions(State(node): State<Arc<Node>>) -> impl IntoResponse {
    // Secrets are only returned once, on creation.
    let subs: Vec<_> = node
        .registry
        .subscriptions()
        .into_iter()
        .map(|mut s| {
            s.secret.clear();
            s
        })
        .collect();
    Json(subs)
}

async fn create_subscription(
    State(node): State<Arc<Node>>,
    body: Result<Json<NewSubscription>, JsonRejection>,
) -> ApiResult<impl IntoResponse> {
    let Json(new) = body?;
    let sub = node.subscribe(&new.registration_id, &new.url)?;
    Ok((StatusCode::CREATED, Json(sub)))
}

async fn delete_subscription(State(node): State<Arc<Node>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let mut sub = node.unsubscribe(&SubscriptionId::new(id))?;
    sub.secret.clear();
    Ok(Json(sub))
}

async fn query(
    State(node): State<Arc<Node>>,
    body: Result<Json<QuerySpec>, JsonRejection>,
) -> ApiResult<impl IntoResponse> {
    let Json(spec) = body?;
    let store = node.store.clone();
    let page = tokio::task::spawn_blocking(move || store.query(&spec))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok(Json(page))
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase")]
struct ChecksumFilter {
    #[serde(default)]
    failed: bool,
}

async fn checksums(State(node): State<Arc<Node>>, Query(f): Query<ChecksumFilter>) -> impl IntoResponse {
    Json(if f.failed {
        node.integrity.failures()
    } else {
        node.integrity.records()
    })
}

async fn analytics(
    State(node): State<Arc<Node>>,
    q: Result<Query<AnalyticsQuery>, axum::extract::rejection::QueryRejection>,
) -> ApiResult<impl IntoResponse> {
    let Query(q) = q.map_err(|r| ApiError::new(StatusCode::BAD_REQUEST, "malformed_request", r.body_text()))?;
    Ok(Json(node.integrity.checksum_analytics(&q)))
}

async fn alarms(State(node): State<Arc<Node>>) -> impl IntoResponse {
    Json(node.alarms.all())
}
