use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use futures::{SinkExt, StreamExt};
use http_body_util::BodyExt;
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message as Ws;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};
use tower::ServiceExt;

use cwbc_core::sim::calibration::prepare_resources;
use cwbc_core::sim::{Scenario, SimResources};
use cwbc_service::protocol::Ack;
use cwbc_service::{router, Message, Payload, Session, SessionConfig, SessionInfo, Snapshot};

type Client = WebSocketStream<MaybeTlsStream<TcpStream>>;

fn asset(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets").join(name)
}

async fn serve(session: Arc<Session>) -> SocketAddr {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(cwbc_service::serve(listener, router(session, None)));
    addr
}

async fn connect(addr: SocketAddr) -> Client {
    connect_async(format!("ws://{addr}/ws")).await.unwrap().0
}

async fn next(ws: &mut Client) -> Message {
    loop {
        let frame = tokio::time::timeout(Duration::from_secs(10), ws.next()).await.expect("frame in time").unwrap().unwrap();
        if let Ws::Text(t) = frame {
            return Message::parse(&t).unwrap();
        }
    }
}

async fn next_telemetry(ws: &mut Client) -> Snapshot {
    loop {
        if let Payload::Telemetry(s) = next(ws).await.payload {
            return *s;
        }
    }
}

async fn send(ws: &mut Client, text: String) {
    ws.send(Ws::Text(text.into())).await.unwrap();
}

fn cmd(kind: &str, seq: u64, payload: &str) -> String {
    format!(r#"{{"type":"{kind}","seq":{seq},"t":0,"version":1,"payload":{payload}}}"#)
}

fn idle_session(cfg: SessionConfig) -> Arc<Session> {
    Arc::new(Session::start(Scenario::idle(1e6), SimResources::default(), cfg).unwrap())
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn idle_stream_runs_at_the_configured_rate() {
    let session = idle_session(SessionConfig::default());
    let addr = serve(session.clone()).await;
    let mut ws = connect(addr).await;
    let first = next_telemetry(&mut ws).await;
    let start = Instant::now();
    let mut last = first.clone();
    let mut count = 0;
    while start.elapsed() < Duration::from_secs(1) {
        let s = next_telemetry(&mut ws).await;
        assert_eq!(s.tick, last.tick + 1);
        assert!(s.cmd.iter().all(|v| *v == 0.0), "idle command {:?}", s.cmd);
        assert!((0..3).all(|i| (s.ee[i] - first.ee[i]).abs() < 1e-9));
        last = s;
        count += 1;
    }
    assert!((30..=50).contains(&count), "{count} frames in 1 s");
    let info = session.info();
    assert_eq!(info.subscribers, 1);
    assert!(info.telemetry_hz <= 50.0);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn telemetry_rate_is_capped() {
    let session = idle_session(SessionConfig { telemetry_hz: 500.0, ..SessionConfig::default() });
    assert!(session.info().telemetry_hz <= 50.0);
    let slow = idle_session(SessionConfig { telemetry_hz: 10.0, ..SessionConfig::default() });
    assert_eq!(slow.info().telemetry_hz, 10.0);
    let mut rx = slow.subscribe();
    let a = Message::parse(&rx.recv().await.unwrap()).unwrap();
    let b = Message::parse(&rx.recv().await.unwrap()).unwrap();
    match (a.payload, b.payload) {
        (Payload::Telemetry(a), Payload::Telemetry(b)) => assert_eq!(b.tick - a.tick, 4),
        other => panic!("{other:?}"),
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn apply_wrench_shows_in_the_next_tick() {
    let session = idle_session(SessionConfig::default());
    let addr = serve(session).await;
    let mut ws = connect(addr).await;
    next_telemetry(&mut ws).await;
    send(&mut ws, cmd("apply_wrench", 1, r#"{"wrench":[10,0,0,0,0,0]}"#)).await;
    let mut frames = 0;
    let s = loop {
        let s = next_telemetry(&mut ws).await;
        frames += 1;
        if s.applied_wrench[0] == 10.0 {
            break s;
        }
        assert!(s.cmd[0] == 0.0);
    };
    assert!(frames <= 2, "took {frames} frames");
    assert!(s.cmd[0] > 0.4, "commanded x {}", s.cmd[0]);
    send(&mut ws, cmd("apply_wrench", 2, r#"{"wrench":[0,0,0,0,0,0]}"#)).await;
    let s = loop {
        let s = next_telemetry(&mut ws).await;
        if s.applied_wrench[0] == 0.0 {
            break s;
        }
    };
    assert_eq!(s.cmd[0], 0.0);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn commands_apply_in_receipt_order() {
    let session = idle_session(SessionConfig::default());
    let addr = serve(session.clone()).await;
    let mut ws = connect(addr).await;
    let n = 60u64;
    for seq in 1..=n {
        let text = match seq % 3 {
            0 => cmd("pause", seq, &format!(r#"{{"paused":{}}}"#, seq % 2 == 0)),
            1 => cmd("apply_wrench", seq, &format!(r#"{{"wrench":[{seq},0,0,0,0,0]}}"#)),
            _ => cmd("set_reference", seq, r#"{"position":[0.4,0,0.5],"rpy":[0,0,0]}"#),
        };
        send(&mut ws, text).await;
    }
    let mut acks = Vec::new();
    while acks.len() < n as usize {
        if let Payload::Ack(Ack { ack, .. }) = next(&mut ws).await.payload {
            acks.push(ack);
        }
    }
    assert_eq!(acks, (1..=n).collect::<Vec<_>>());
    send(&mut ws, cmd("pause", n + 1, r#"{"paused":false}"#)).await;
    let s = next_telemetry(&mut ws).await;
    assert_eq!(s.applied_wrench[0], 58.0);
    assert!(!session.info().paused);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn malformed_frames_get_error_frames_and_sessions_outlive_clients() {
    let session = idle_session(SessionConfig::default());
    let addr = serve(session.clone()).await;
    let mut ws = connect(addr).await;
    let bad = [
        ("{oops", "malformed", None),
        (r#"{"type":"reset","seq":4}"#, "missing_field", Some(4)),
        (r#"{"type":"reset","seq":5,"version":9}"#, "unsupported_version", Some(5)),
        (r#"{"type":"fly","seq":6,"version":1}"#, "unknown_type", Some(6)),
        (r#"{"type":"apply_wrench","seq":7,"version":1,"payload":{"wrench":"big"}}"#, "invalid_payload", Some(7)),
        (r#"{"type":"telemetry","seq":8,"version":1,"payload":{}}"#, "invalid_payload", Some(8)),
        (r#"{"type":"toggle_governor","seq":9,"version":1,"payload":{"enabled":true}}"#, "rejected", Some(9)),
    ];
    for (text, code, ack) in bad {
        send(&mut ws, text.to_string()).await;
        let e = loop {
            if let Payload::Error(e) = next(&mut ws).await.payload {
                break e;
            }
        };
        assert_eq!((e.code.as_str(), e.ack), (code, ack), "{text}: {}", e.message);
    }
    ws.send(Ws::Binary(vec![1, 2, 3].into())).await.unwrap();
    let e = loop {
        if let Payload::Error(e) = next(&mut ws).await.payload {
            break e;
        }
    };
    assert_eq!(e.code, "malformed");
    ws.close(None).await.unwrap();
    drop(ws);
    let before = session.info().tick;
    tokio::time::sleep(Duration::from_millis(300)).await;
    assert!(session.info().tick > before);
    let mut again = connect(addr).await;
    next_telemetry(&mut again).await;
    assert!(session.info().subscribers >= 1);
}

async fn wait_until(ws: &mut Client, f: impl Fn(&Snapshot) -> bool) -> Snapshot {
    loop {
        let s = next_telemetry(ws).await;
        if f(&s) {
            return s;
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn toggling_the_governor_starts_and_freezes_violations() {
    let s = Scenario::load(&asset("fig5_replica.json")).unwrap();
    let res = prepare_resources(&s, None, None).unwrap();
    let session = Arc::new(Session::start(s, res, SessionConfig { speed: 2.0, ..SessionConfig::default() }).unwrap());
    let addr = serve(session.clone()).await;
    let mut ws = connect(addr).await;
    let early = wait_until(&mut ws, |s| s.tick >= 20).await;
    assert!(early.governor);
    assert_eq!(early.violation_ticks, 0);
    send(&mut ws, cmd("toggle_governor", 1, r#"{"enabled":false}"#)).await;
    let open = wait_until(&mut ws, |s| s.violation_ticks >= 3).await;
    assert!(!open.governor);
    send(&mut ws, cmd("toggle_governor", 2, r#"{"enabled":true}"#)).await;
    let on = wait_until(&mut ws, |s| s.governor).await;
    let settled = wait_until(&mut ws, |s| s.tick >= on.tick + 2).await;
    let later = wait_until(&mut ws, |s| s.tick >= settled.tick + 60).await;
    assert_eq!(later.violation_ticks, settled.violation_ticks, "counter moved after re-enabling");
    assert!(later.violations.iter().all(|&m| m == 0));
}

fn strip(mut s: Snapshot) -> Snapshot {
    s.run = 0;
    s
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn reset_replays_the_run_bit_exactly() {
    let mut s = Scenario::load(&asset("multi_axis_25s.json")).unwrap();
    s.estimator.mode = "kf".into();
    let cfg = SessionConfig { speed: 4.0, start_paused: true, ..SessionConfig::default() };
    let session = Arc::new(Session::start(s, SimResources::default(), cfg).unwrap());
    let addr = serve(session.clone()).await;
    let mut ws = connect(addr).await;
    let collect = |n: u64| {
        let session = session.clone();
        async move {
            let mut rx = session.subscribe();
            session.command(cwbc_service::Command::Pause(cwbc_service::protocol::Pause { paused: false })).await.unwrap().unwrap();
            let mut out = Vec::new();
            while out.len() < n as usize {
                if let Payload::Telemetry(s) = Message::parse(&rx.recv().await.unwrap()).unwrap().payload {
                    out.push(strip(*s));
                }
            }
            session.command(cwbc_service::Command::Pause(cwbc_service::protocol::Pause { paused: true })).await.unwrap().unwrap();
            out
        }
    };
    let a = collect(40).await;
    send(&mut ws, cmd("apply_wrench", 1, r#"{"wrench":[3,1,0,0,0,0.2]}"#)).await;
    send(&mut ws, cmd("toggle_governor", 2, r#"{"enabled":false}"#)).await;
    let mut acks = 0;
    while acks < 2 {
        if let Payload::Ack(_) = next(&mut ws).await.payload {
            acks += 1;
        }
    }
    let reply = http_post(addr, "/session/reset").await;
    assert_eq!(reply.0, 200, "{}", reply.1);
    assert_eq!(session.info().run, 1);
    assert_eq!(session.info().tick, 0);
    let b = collect(40).await;
    assert_eq!(a[0].tick, 1);
    assert_eq!(a, b);
}

/// Minimal HTTP/1.1 POST over a raw socket.
async fn http_post(addr: SocketAddr, path: &str) -> (u16, String) {
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    let mut stream = TcpStream::connect(addr).await.unwrap();
    let req = format!("POST {path} HTTP/1.1\r\nHost: {addr}\r\nContent-Length: 0\r\nConnection: close\r\n\r\n");
    stream.write_all(req.as_bytes()).await.unwrap();
    let mut buf = String::new();
    stream.read_to_string(&mut buf).await.unwrap();
    let status = buf.split_whitespace().nth(1).unwrap().parse().unwrap();
    let body = buf.split("\r\n\r\n").nth(1).unwrap_or_default().to_string();
    (status, body)
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn stalled_subscribers_never_delay_the_loop() {
    let session = idle_session(SessionConfig { telemetry_buffer: 8, ..SessionConfig::default() });
    let addr = serve(session.clone()).await;
    let mut stalled_rx = session.subscribe();
    let mut stalled_ws = connect(addr).await;
    next_telemetry(&mut stalled_ws).await;
    let start_tick = session.info().tick;
    let start = Instant::now();
    tokio::time::sleep(Duration::from_secs(3)).await;
    let info = session.info();
    let period = session.control_period();
    let expected = start.elapsed().as_secs_f64() / period;
    let advanced = (info.tick - start_tick) as f64;
    assert!(advanced >= expected - 2.0, "advanced {advanced} ticks, expected {expected:.1}");
    assert!(info.max_jitter < period, "jitter {} >= period {period}", info.max_jitter);
    match stalled_rx.recv().await {
        Err(tokio::sync::broadcast::error::RecvError::Lagged(n)) => assert!(n > 0),
        other => panic!("expected the stalled receiver to lag, got {other:?}"),
    }
    drop(stalled_ws);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn http_routes() {
    let session = idle_session(SessionConfig::default());
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>ui</html>").unwrap();
    let app = router(session.clone(), Some(dir.path().to_path_buf()));
    let get = |uri: &str| Request::get(uri).body(Body::empty()).unwrap();
    let body = |r: axum::response::Response| async move { r.into_body().collect().await.unwrap().to_bytes() };

    let r = app.clone().oneshot(get("/healthz")).await.unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    let v: serde_json::Value = serde_json::from_slice(&body(r).await).unwrap();
    assert_eq!(v["status"], "ok");

    tokio::time::sleep(Duration::from_millis(200)).await;
    let r = app.clone().oneshot(get("/session")).await.unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    let info: SessionInfo = serde_json::from_slice(&body(r).await).unwrap();
    assert!(info.tick > 0 && info.latest.is_some());
    assert_eq!(info.scenario, "idle");

    let r = app.clone().oneshot(Request::post("/session/reset").body(Body::empty()).unwrap()).await.unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    assert_eq!(session.info().run, 1);

    let r = app.clone().oneshot(get("/index.html")).await.unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    assert_eq!(&body(r).await[..], b"<html>ui</html>");
    let r = app.oneshot(get("/missing.js")).await.unwrap();
    assert_eq!(r.status(), StatusCode::NOT_FOUND);
}
