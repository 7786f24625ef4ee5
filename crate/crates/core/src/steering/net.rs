//! TCP and WebSocket front ends for a [`Session`].
//!
//! The TCP port speaks the framing of [`super::protocol`] directly. The
//! WebSocket port carries one framed message per binary WebSocket message
//! at `/steer?token=…[&view=1]` and serves static files for every other
//! GET path.

use super::protocol::{self, ClientMsg, ErrorCode, Outgoing, ServerMsg};
use super::session::{Client, Session};
use std::collections::HashMap;
use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;
use tungstenite::handshake::derive_accept_key;
use tungstenite::protocol::Role;
use tungstenite::{Message, WebSocket};

const POLL: Duration = Duration::from_millis(20);
const MAX_REQUEST_HEAD: usize = 16 * 1024;

#[derive(Debug, Clone, Default)]
pub struct ServerConfig {
    pub port: u16,
    pub ws_port: u16,
    /// Shared secret; `None` disables the check.
    pub token: Option<String>,
    /// Root for static assets on the WebSocket port.
    pub static_dir: Option<PathBuf>,
    pub bind: Option<String>,
}

/// Running listeners. Dropping stops accepting and joins the accept loops.
pub struct Server {
    pub tcp_addr: SocketAddr,
    pub ws_addr: SocketAddr,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl Server {
    pub fn start(session: Arc<Session>, config: ServerConfig) -> io::Result<Self> {
        let host = config.bind.clone().unwrap_or_else(|| "127.0.0.1".into());
        let tcp = TcpListener::bind((host.as_str(), config.port))?;
        let ws = TcpListener::bind((host.as_str(), config.ws_port))?;
        let (tcp_addr, ws_addr) = (tcp.local_addr()?, ws.local_addr()?);
        tcp.set_nonblocking(true)?;
        ws.set_nonblocking(true)?;
        let stop = Arc::new(AtomicBool::new(false));
        let config = Arc::new(config);
        let threads = vec![
            spawn_accept("steer-tcp", tcp, Arc::clone(&stop), Arc::clone(&session), Arc::clone(&config), serve_tcp),
            spawn_accept("steer-ws", ws, Arc::clone(&stop), session, config, serve_ws),
        ];
        log::info!("steering on tcp {tcp_addr}, websocket/http {ws_addr}");
        Ok(Self {
            tcp_addr,
            ws_addr,
            stop,
            threads,
        })
    }

    pub fn stop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    /// Block until the accept loops end.
    pub fn wait(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.stop();
    }
}

type Handler = fn(TcpStream, Arc<Session>, Arc<ServerConfig>, Arc<AtomicBool>) -> io::Result<()>;

fn spawn_accept(
    name: &str,
    listener: TcpListener,
    stop: Arc<AtomicBool>,
    session: Arc<Session>,
    config: Arc<ServerConfig>,
    handler: Handler,
) -> JoinHandle<()> {
    thread::Builder::new()
        .name(name.into())
        .spawn(move || {
            while !stop.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((stream, peer)) => {
                        let (session, config, stop) = (Arc::clone(&session), Arc::clone(&config), Arc::clone(&stop));
                        thread::spawn(move || {
                            if let Err(e) = stream.set_nonblocking(false).and_then(|()| handler(stream, session, config, stop)) {
                                log::debug!("connection {peer}: {e}");
                            }
                        });
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(POLL),
                    Err(e) => log::warn!("accept: {e}"),
                }
            }
        })
        .expect("spawn accept loop")
}

fn token_ok(config: &ServerConfig, given: Option<&str>) -> bool {
    config.token.as_deref().is_none_or(|t| given == Some(t))
}

fn is_timeout(e: &io::Error) -> bool {
    matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut)
}

/// Raw TCP: with a token configured the first message must be `hello`.
fn serve_tcp(stream: TcpStream, session: Arc<Session>, config: Arc<ServerConfig>, stop: Arc<AtomicBool>) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = stream.try_clone()?;
    if config.token.is_some() {
        let (header, _) = protocol::read_message(&mut reader)?;
        let authorized = match serde_json::from_value::<ClientMsg>(header) {
            Ok(ClientMsg::Hello { token }) => token_ok(&config, Some(&token)),
            _ => false,
        };
        if !authorized {
            let err = ServerMsg::Error {
                code: ErrorCode::Unauthorized,
                text: "missing or wrong token".into(),
                version: 0,
            };
            protocol::write_message(&mut writer, &err, None)?;
            return Ok(());
        }
    }
    let client = Arc::new(session.connect(true));
    let writer_client = Arc::clone(&client);
    let writer_stop = Arc::clone(&stop);
    let write_loop = thread::spawn(move || -> io::Result<()> {
        while !writer_stop.load(Ordering::Relaxed) {
            if let Some(out) = writer_client.recv_timeout(POLL * 5) {
                writer.write_all(&out.encode())?;
                writer.flush()?;
            } else if writer_client.queue().is_closed() {
                break;
            }
        }
        let _ = writer.shutdown(std::net::Shutdown::Both);
        Ok(())
    });
    stream.set_read_timeout(Some(POLL * 5))?;
    let result = loop {
        if stop.load(Ordering::Relaxed) || write_loop.is_finished() {
            break Ok(());
        }
        // Wait for the first byte without consuming a partial frame.
        match reader.fill_buf() {
            Ok([]) => break Ok(()),
            Ok(_) => {}
            Err(e) if is_timeout(&e) => continue,
            Err(e) => break Err(e),
        }
        stream.set_read_timeout(None)?;
        match protocol::read_message(&mut reader) {
            Ok((header, _)) => client.send_header(header),
            Err(e) if e.kind() == io::ErrorKind::InvalidData => client.reject(e.to_string()),
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => break Ok(()),
            Err(e) => break Err(e),
        }
        stream.set_read_timeout(Some(POLL * 5))?;
    };
    client.queue().close();
    let _ = write_loop.join();
    result
}

struct Request {
    method: String,
    path: String,
    query: HashMap<String, String>,
    headers: HashMap<String, String>,
}

fn read_request(reader: &mut BufReader<TcpStream>) -> io::Result<Request> {
    let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let mut parts = line.split_whitespace();
    let (method, target) = match (parts.next(), parts.next()) {
        (Some(m), Some(t)) => (m.to_string(), t.to_string()),
        _ => return Err(bad("malformed request line")),
    };
    let mut headers = HashMap::new();
    let mut total = line.len();
    loop {
        let mut h = String::new();
        let n = reader.read_line(&mut h)?;
        total += n;
        if n == 0 || total > MAX_REQUEST_HEAD {
            return Err(bad("request head too long or truncated"));
        }
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            headers.insert(k.trim().to_ascii_lowercase(), v.trim().to_string());
        }
    }
    let (path, query) = target.split_once('?').unwrap_or((&target, ""));
    let query = query
        .split('&')
        .filter_map(|kv| kv.split_once('=').or(Some((kv, ""))))
        .filter(|(k, _)| !k.is_empty())
        .map(|(k, v)| (k.to_string(), percent_decode(v)))
        .collect();
    Ok(Request {
        method,
        path: percent_decode(path),
        query,
        headers,
    })
}

fn percent_decode(s: &str) -> String {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        let hex = |b: u8| (b as char).to_digit(16);
        match bytes[i] {
            b'%' if i + 2 < bytes.len() => {
                if let (Some(h), Some(l)) = (hex(bytes[i + 1]), hex(bytes[i + 2])) {
                    out.push((h * 16 + l) as u8);
                    i += 3;
                    continue;
                }
                out.push(b'%');
            }
            b'+' => out.push(b' '),
            b => out.push(b),
        }
        i += 1;
    }
    String::from_utf8_lossy(&out).into_owned()
}

fn respond(stream: &mut TcpStream, status: &str, content_type: &str, body: &[u8]) -> io::Result<()> {
    write!(
        stream,
        "HTTP/1.1 {status}\r\nContent-Type: {content_type}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        body.len()
    )?;
    stream.write_all(body)?;
    stream.flush()
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js" | "mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        Some("wasm") => "application/wasm",
        _ => "application/octet-stream",
    }
}

/// Map a URL path into `root`, refusing anything that escapes it.
pub fn resolve_static(root: &Path, url_path: &str) -> Option<PathBuf> {
    let rel = url_path.trim_start_matches('/');
    let rel = if rel.is_empty() { "index.html" } else { rel };
    let mut out = root.to_path_buf();
    for c in Path::new(rel).components() {
        match c {
            Component::Normal(part) => out.push(part),
            Component::CurDir => {}
            _ => return None,
        }
    }
    if out.is_dir() {
        out.push("index.html");
    }
    Some(out)
}

const FALLBACK_INDEX: &str = "<!doctype html><title>steerflow</title>\
<p>steerflow steering server. Connect a client to <code>/steer?token=...</code>.</p>";

fn serve_ws(stream: TcpStream, session: Arc<Session>, config: Arc<ServerConfig>, stop: Arc<AtomicBool>) -> io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let req = read_request(&mut reader)?;
    let mut stream = stream;
    if req.method != "GET" {
        return respond(&mut stream, "405 Method Not Allowed", "text/plain", b"GET only\n");
    }
    if req.path != "/steer" {
        return serve_static(&mut stream, &config, &req.path);
    }
    let upgrade = req.headers.get("upgrade").is_some_and(|v| v.eq_ignore_ascii_case("websocket"));
    let Some(key) = req.headers.get("sec-websocket-key").filter(|_| upgrade) else {
        return respond(&mut stream, "400 Bad Request", "text/plain", b"websocket upgrade required\n");
    };
    if !token_ok(&config, req.query.get("token").map(String::as_str)) {
        return respond(&mut stream, "401 Unauthorized", "text/plain", b"missing or wrong token\n");
    }
    write!(
        stream,
        "HTTP/1.1 101 Switching Protocols\r\nUpgrade: websocket\r\nConnection: Upgrade\r\nSec-WebSocket-Accept: {}\r\n\r\n",
        derive_accept_key(key.as_bytes())
    )?;
    stream.flush()?;
    // Nothing can follow the upgrade request before our response, so the
    // buffered reader holds no WebSocket bytes.
    debug_assert!(reader.buffer().is_empty());
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(POLL))?;
    let can_edit = req.query.get("view").is_none_or(|v| v != "1");
    let client = session.connect(can_edit);
    let mut ws = WebSocket::from_raw_socket(stream, Role::Server, None);
    let result = ws_loop(&mut ws, &client, &stop);
    let _ = ws.close(None);
    let _ = ws.flush();
    result
}

fn ws_loop(ws: &mut WebSocket<TcpStream>, client: &Client, stop: &AtomicBool) -> io::Result<()> {
    let to_io = |e: tungstenite::Error| io::Error::other(e.to_string());
    while !stop.load(Ordering::Relaxed) {
        while let Some(out) = client.recv_timeout(Duration::ZERO) {
            ws.send(Message::binary(Outgoing::encode(&out))).map_err(to_io)?;
        }
        if client.queue().is_closed() {
            return Ok(());
        }
        match ws.read() {
            Ok(Message::Binary(data)) => match protocol::decode(&data) {
                Ok((header, _)) => client.send_header(header),
                Err(e) => client.reject(e.to_string()),
            },
            // Text messages are accepted as a bare JSON header.
            Ok(Message::Text(text)) => match serde_json::from_str(text.as_str()) {
                Ok(header) => client.send_header(header),
                Err(e) => client.reject(e.to_string()),
            },
            Ok(Message::Close(_)) => return Ok(()),
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if is_timeout(&e) => {}
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(()),
            Err(e) => return Err(to_io(e)),
        }
    }
    Ok(())
}

fn serve_static(stream: &mut TcpStream, config: &ServerConfig, url_path: &str) -> io::Result<()> {
    let Some(root) = &config.static_dir else {
        return if url_path == "/" || url_path == "/index.html" {
            respond(stream, "200 OK", "text/html; charset=utf-8", FALLBACK_INDEX.as_bytes())
        } else {
            respond(stream, "404 Not Found", "text/plain", b"not found\n")
        };
    };
    let Some(path) = resolve_static(root, url_path) else {
        return respond(stream, "403 Forbidden", "text/plain", b"forbidden\n");
    };
    match std::fs::read(&path) {
        Ok(body) => respond(stream, "200 OK", content_type(&path), &body),
        Err(_) => respond(stream, "404 Not Found", "text/plain", b"not found\n"),
    }
}

/// Blocking client for the raw TCP port, used by tests and tools.
pub struct TcpClient {
    reader: BufReader<TcpStream>,
    writer: Mutex<TcpStream>,
}

impl TcpClient {
    pub fn connect(addr: SocketAddr, token: Option<&str>) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let client = Self {
            reader: BufReader::new(stream.try_clone()?),
            writer: Mutex::new(stream),
        };
        if let Some(token) = token {
            client.send(&ClientMsg::Hello { token: token.into() })?;
        }
        Ok(client)
    }

    pub fn send(&self, msg: &ClientMsg) -> io::Result<()> {
        protocol::write_message(&mut *self.writer.lock().unwrap(), msg, None)
    }

    /// Next message; `Ok(None)` on timeout.
    pub fn recv_timeout(&mut self, timeout: Duration) -> io::Result<Option<(ServerMsg, Vec<u8>)>> {
        self.reader.get_ref().set_read_timeout(Some(timeout))?;
        match self.reader.fill_buf() {
            Ok([]) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(_) => {}
            Err(e) if is_timeout(&e) => return Ok(None),
            Err(e) => return Err(e),
        }
        self.reader.get_ref().set_read_timeout(None)?;
        let (header, payload) = protocol::read_message(&mut self.reader)?;
        let msg = serde_json::from_value(header).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        Ok(Some((msg, payload)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_paths_stay_inside_the_root() {
        let root = Path::new("/srv/ui");
        assert_eq!(resolve_static(root, "/"), Some(root.join("index.html")));
        assert_eq!(resolve_static(root, "/app/main.js"), Some(root.join("app/main.js")));
        assert_eq!(resolve_static(root, "/../etc/passwd"), None);
        assert_eq!(resolve_static(root, "/a/../../b"), None);
    }

    #[test]
    fn percent_decoding() {
        assert_eq!(percent_decode("a%20b+c"), "a b c");
        assert_eq!(percent_decode("100%"), "100%");
        assert_eq!(percent_decode("%zz"), "%zz");
    }
}
