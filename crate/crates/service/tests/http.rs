use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::sync::Arc;

use veil_core::clock::LogicalClock;
use veil_core::engine::{Engine, EngineConfig};
use veil_core::llm::Gateway;
use veil_service::config::bundled_stub;
use veil_service::{server, Service};

fn start(token: Option<&str>) -> SocketAddr {
    let engine = Engine::in_memory(
        Gateway::new(bundled_stub(0).unwrap()),
        Arc::new(LogicalClock::starting_2024()),
        EngineConfig::default(),
    );
    let service = Arc::new(Service::new(engine).with_token(token.map(str::to_string)));
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, server::router(service)).await.unwrap();
        });
    });
    rx.recv().unwrap()
}

/// Sends one request and returns (status, headers, body).
fn send(addr: SocketAddr, method: &str, path: &str, headers: &[(&str, &str)], body: &str) -> (u16, String, String) {
    let mut stream = TcpStream::connect(addr).unwrap();
    let mut req = format!(
        "{method} {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\nContent-Length: {}\r\n",
        body.len()
    );
    for (k, v) in headers {
        req.push_str(&format!("{k}: {v}\r\n"));
    }
    req.push_str("\r\n");
    req.push_str(body);
    stream.write_all(req.as_bytes()).unwrap();
    let mut raw = String::new();
    stream.read_to_string(&mut raw).unwrap();
    let (head, body) = raw.split_once("\r\n\r\n").unwrap();
    let status = head.split(' ').nth(1).unwrap().parse().unwrap();
    (status, head.to_ascii_lowercase(), body.to_string())
}

#[test]
fn json_round_trip_with_cors() {
    let addr = start(None);
    let json = [("content-type", "application/json")];
    let (status, head, body) = send(addr, "POST", "/rules", &json, r#"{"text": "No horror"}"#);
    assert_eq!(status, 201, "{body}");
    assert!(head.contains("access-control-allow-origin: *"));
    assert!(body.contains("\"text\":\"No horror\""));
    let (status, _, body) = send(addr, "GET", "/rules", &[], "");
    assert_eq!(status, 200);
    assert!(body.starts_with('['));
    let (status, _, body) = send(addr, "GET", "/nonexistent", &[], "");
    assert_eq!(status, 404);
    assert!(body.contains("\"error\""));
    let (status, head, _) = send(addr, "OPTIONS", "/rules", &[], "");
    assert_eq!(status, 204);
    assert!(head.contains("access-control-allow-methods"));
    let (status, _, _) = send(addr, "PUT", "/rules", &[], "");
    assert_eq!(status, 405);
}

#[test]
fn idempotency_header_and_bearer_token() {
    let addr = start(Some("s3cret"));
    assert_eq!(send(addr, "GET", "/rules", &[], "").0, 401);
    let auth = ("authorization", "Bearer s3cret");
    let hdrs = [auth, ("idempotency-key", "k1")];
    let a = send(addr, "POST", "/rules", &hdrs, r#"{"text": "No horror"}"#);
    let b = send(addr, "POST", "/rules", &hdrs, r#"{"text": "No horror"}"#);
    assert_eq!((a.0, &a.2), (b.0, &b.2));
    let (_, _, body) = send(addr, "GET", "/rules", &[auth], "");
    assert_eq!(body.matches("\"id\"").count(), 1);
}
