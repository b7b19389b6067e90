use refrank_core::synth::{generate, SynthConfig};
use refrank_service::{serve, AppState, SessionHistory};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};

async fn http(addr: std::net::SocketAddr, method: &str, path: &str, body: &str) -> String {
    let mut stream = TcpStream::connect(addr).await.unwrap();
    let req = format!(
        "{method} {path} HTTP/1.1\r\nhost: localhost\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
        body.len()
    );
    stream.write_all(req.as_bytes()).await.unwrap();
    let mut out = String::new();
    stream.read_to_string(&mut out).await.unwrap();
    out
}

#[tokio::test]
async fn serves_then_flushes_sessions_on_shutdown() {
    let store = generate(&SynthConfig { n_items: 30, n_clusters: 3, ..Default::default() }).unwrap();
    let state = AppState::new(store, None);
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("logs/sessions.json");
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let server = {
        let state = state.clone();
        let log = log.clone();
        tokio::spawn(async move {
            serve(listener, state, async { rx.await.ok(); }, Some(&log)).await
        })
    };

    let health = http(addr, "GET", "/healthz", "").await;
    assert!(health.starts_with("HTTP/1.1 200"), "{health}");
    assert!(health.contains("\"ok\""));
    for q in ["q00001_0", "q00002_0"] {
        let resp = http(addr, "POST", "/sessions", &format!(r#"{{"query_id":"{q}","strategy":"grf"}}"#)).await;
        assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    }
    let afs = http(addr, "POST", "/sessions", r#"{"query_id":"q00001_0","strategy":"afs"}"#).await;
    assert!(afs.starts_with("HTTP/1.1 409"), "{afs}");

    tx.send(()).unwrap();
    server.await.unwrap().unwrap();
    let flushed: Vec<SessionHistory> = serde_json::from_str(&std::fs::read_to_string(&log).unwrap()).unwrap();
    assert_eq!(flushed.len(), 2);
    assert!(flushed.iter().all(|h| h.turns.len() == 1));
}
