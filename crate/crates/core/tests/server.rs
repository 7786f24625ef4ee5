use serde_json::{json, Value};
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::sync::Arc;
use std::time::{Duration, Instant};
use steerflow::hierarchy::LevelPlan;
use steerflow::scene::Scene;
use steerflow::steering::protocol::{decode, encode};
use steerflow::steering::{ClientMsg, ErrorCode, Server, ServerConfig, ServerMsg, Session, SessionConfig, TcpClient};
use tungstenite::{Message, WebSocket};

const TOKEN: &str = "s3cret";

fn start(static_dir: Option<std::path::PathBuf>) -> (Arc<Session>, Server) {
    let scene = Scene {
        plan: LevelPlan {
            base_resolution: [16, 16],
            max_level: 0,
            ..LevelPlan::default()
        },
        ..Scene::default()
    };
    let session = Session::start(scene, SessionConfig::default()).unwrap();
    let server = Server::start(
        Arc::clone(&session),
        ServerConfig {
            token: Some(TOKEN.into()),
            static_dir,
            ..ServerConfig::default()
        },
    )
    .unwrap();
    (session, server)
}

fn http_get(addr: SocketAddr, path: &str) -> (u16, String) {
    let mut s = TcpStream::connect(addr).unwrap();
    s.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
    write!(s, "GET {path} HTTP/1.1\r\nHost: localhost\r\n\r\n").unwrap();
    let mut reply = String::new();
    s.read_to_string(&mut reply).unwrap();
    let status = reply[9..12].parse().unwrap();
    let body = reply.split_once("\r\n\r\n").map_or("", |(_, b)| b).to_string();
    (status, body)
}

fn ws_connect(addr: SocketAddr, query: &str) -> WebSocket<TcpStream> {
    let stream = TcpStream::connect(addr).unwrap();
    stream.set_read_timeout(Some(Duration::from_secs(20))).unwrap();
    let (ws, resp) = tungstenite::client(format!("ws://{addr}/steer?{query}"), stream).unwrap();
    assert_eq!(resp.status(), 101);
    ws
}

/// Next framed server message whose header satisfies `pred`.
fn ws_until(ws: &mut WebSocket<TcpStream>, pred: impl Fn(&Value) -> bool) -> (Value, Vec<u8>) {
    let deadline = Instant::now() + Duration::from_secs(30);
    while Instant::now() < deadline {
        if let Message::Binary(buf) = ws.read().unwrap() {
            let (header, payload) = decode(&buf).unwrap();
            if pred(&header) {
                return (header, payload);
            }
        }
    }
    panic!("no matching message");
}

#[test]
fn websocket_session_streams_acks_and_frames() {
    let (_session, server) = start(None);
    let mut ws = ws_connect(server.ws_addr, &format!("token={TOKEN}"));
    ws.send(Message::binary(encode(&json!({"type": "subscribe"}), None))).unwrap();
    let (ack, _) = ws_until(&mut ws, |h| h["type"] == "scene_ack");
    assert_eq!(ack["version"], 1);

    // Text messages carry a bare header.
    let add = json!({"type": "add_geometry", "object": {"id": "c", "shape": "circle", "center": [0.5, 0.5], "size": 0.1}});
    ws.send(Message::text(add.to_string())).unwrap();
    let (ack, _) = ws_until(&mut ws, |h| h["type"] == "scene_ack" && h["version"] == 2);
    assert_eq!(ack["scene"]["objects"][0]["id"], "c");
    let (frame, payload) = ws_until(&mut ws, |h| h["type"] == "frame" && h["version"] == 2);
    assert_eq!(frame["level"], 0);
    let (w, h) = (frame["w"].as_u64().unwrap(), frame["h"].as_u64().unwrap());
    assert_eq!(payload.len() as u64, w * h * 4);
    assert_eq!(frame["payload_bytes"].as_u64().unwrap(), payload.len() as u64);
}

#[test]
fn websocket_rejects_bad_tokens_and_view_only_edits() {
    let (_session, server) = start(None);
    let (status, _) = {
        let mut s = TcpStream::connect(server.ws_addr).unwrap();
        s.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
        s.write_all(
            b"GET /steer HTTP/1.1\r\nHost: x\r\nUpgrade: websocket\r\nConnection: Upgrade\r\n\
              Sec-WebSocket-Key: dGhlIHNhbXBsZSBub25jZQ==\r\nSec-WebSocket-Version: 13\r\n\r\n",
        )
        .unwrap();
        let mut reply = String::new();
        s.read_to_string(&mut reply).unwrap();
        (reply[9..12].to_string(), reply)
    };
    assert_eq!(status, "401");

    let mut ws = ws_connect(server.ws_addr, &format!("token={TOKEN}&view=1"));
    ws.send(Message::text(json!({"type": "delete_geometry", "id": "x"}).to_string())).unwrap();
    let (err, _) = ws_until(&mut ws, |h| h["type"] == "error");
    assert_eq!(err["code"], "ViewOnly");
    ws.send(Message::text("{not json")).unwrap();
    let (err, _) = ws_until(&mut ws, |h| h["type"] == "error");
    assert_eq!(err["code"], "BadMessage");
}

#[test]
fn static_files_are_served_inside_the_root_only() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<p>ui</p>").unwrap();
    std::fs::write(dir.path().join("app.js"), "console.log(1)").unwrap();
    let (_session, server) = start(Some(dir.path().to_path_buf()));
    assert_eq!(http_get(server.ws_addr, "/"), (200, "<p>ui</p>".into()));
    assert_eq!(http_get(server.ws_addr, "/app.js"), (200, "console.log(1)".into()));
    assert_eq!(http_get(server.ws_addr, "/missing.css").0, 404);
    assert_eq!(http_get(server.ws_addr, "/../etc/passwd").0, 403);
    assert_eq!(http_get(server.ws_addr, "/%2e%2e/etc/passwd").0, 403);
    assert_eq!(http_get(server.ws_addr, "/steer").0, 400);
}

#[test]
fn tcp_requires_hello_when_a_token_is_set() {
    let (_session, server) = start(None);
    let mut anon = TcpClient::connect(server.tcp_addr, None).unwrap();
    anon.send(&ClientMsg::Subscribe {}).unwrap();
    let (msg, _) = anon.recv_timeout(Duration::from_secs(10)).unwrap().unwrap();
    assert!(matches!(msg, ServerMsg::Error { code: ErrorCode::Unauthorized, .. }), "{msg:?}");

    let mut client = TcpClient::connect(server.tcp_addr, Some(TOKEN)).unwrap();
    client.send(&ClientMsg::SetBudget { ms: 50 }).unwrap();
    let deadline = Instant::now() + Duration::from_secs(10);
    loop {
        assert!(Instant::now() < deadline);
        if let Some((ServerMsg::SceneAck { version, scene }, _)) = client.recv_timeout(Duration::from_millis(200)).unwrap() {
            if scene.plan.budget_ms == 50 {
                assert_eq!(version, 1);
                break;
            }
        }
    }
}
