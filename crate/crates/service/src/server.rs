//! axum transport over [`Service::route`].

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderMap, HeaderValue, Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::Router;
use tokio::net::TcpListener;

use crate::api::{ApiError, ApiRequest, HttpMethod, Service};

/// Header carrying the client's idempotency key.
pub const REQUEST_ID_HEADER: &str = "idempotency-key";

pub fn router(service: Arc<Service>) -> Router {
    Router::new().fallback(handle).with_state(service)
}

pub async fn serve(listener: TcpListener, service: Arc<Service>) -> std::io::Result<()> {
    axum::serve(listener, router(service))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

fn with_cors(mut response: Response) -> Response {
    let h = response.headers_mut();
    h.insert(header::ACCESS_CONTROL_ALLOW_ORIGIN, HeaderValue::from_static("*"));
    h.insert(header::ACCESS_CONTROL_ALLOW_METHODS, HeaderValue::from_static("GET, POST, PATCH, DELETE, OPTIONS"));
    h.insert(
        header::ACCESS_CONTROL_ALLOW_HEADERS,
        HeaderValue::from_static("authorization, content-type, idempotency-key"),
    );
    response
}

fn to_request(method: &Method, uri: &Uri, headers: &HeaderMap, body: Bytes) -> Result<ApiRequest, ApiError> {
    let method = HttpMethod::parse(method.as_str())
        .ok_or_else(|| ApiError::new(405, "method_not_allowed", format!("method {method} is not supported")))?;
    let path = uri.path_and_query().map_or_else(|| uri.path().to_string(), |pq| pq.as_str().to_string());
    let body =
        String::from_utf8(body.to_vec()).map_err(|_| ApiError::new(400, "invalid_request", "body is not UTF-8"))?;
    let text = |name: &str| headers.get(name).and_then(|v| v.to_str().ok()).map(str::to_string);
    let token = text(header::AUTHORIZATION.as_str()).and_then(|v| v.strip_prefix("Bearer ").map(str::to_string));
    Ok(ApiRequest { method, path, body, request_id: text(REQUEST_ID_HEADER), token })
}

async fn handle(
    State(service): State<Arc<Service>>,
    method: Method,
    uri: Uri,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    if method == Method::OPTIONS {
        return with_cors(StatusCode::NO_CONTENT.into_response());
    }
    let response = match to_request(&method, &uri, &headers, body) {
        Ok(request) => match tokio::task::spawn_blocking(move || service.route(&request)).await {
            Ok(r) => r,
            Err(e) => ApiError::new(500, "internal", format!("handler panicked: {e}")).into_response(),
        },
        Err(e) => e.into_response(),
    };
    let status = StatusCode::from_u16(response.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    with_cors((status, axum::Json(response.body)).into_response())
}
