mod common;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::thread;

use common::{s, synth};
use serde_json::Value;

struct Server {
    child: Child,
    addr: String,
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn start(index: &std::path::Path) -> Server {
    let mut child = Command::new(env!("CARGO_BIN_EXE_cirank"))
        .args(["serve", "--index", s(index), "--addr", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line
        .trim()
        .strip_prefix("listening on http://")
        .unwrap_or_else(|| panic!("unexpected banner {line:?}"))
        .to_string();
    Server { child, addr }
}

/// Minimal HTTP/1.1 exchange; returns (status, body).
fn request(addr: &str, method: &str, path: &str, body: &str) -> (u16, String) {
    let mut stream = TcpStream::connect(addr).unwrap();
    write!(
        stream,
        "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut raw = String::new();
    stream.read_to_string(&mut raw).unwrap();
    let (head, rest) = raw.split_once("\r\n\r\n").unwrap();
    let status = head.split_whitespace().nth(1).unwrap().parse().unwrap();
    let body = if head.to_ascii_lowercase().contains("transfer-encoding: chunked") {
        dechunk(rest)
    } else {
        rest.to_string()
    };
    (status, body)
}

fn dechunk(mut s: &str) -> String {
    let mut out = String::new();
    loop {
        let (size, rest) = s.split_once("\r\n").unwrap();
        let n = usize::from_str_radix(size.trim(), 16).unwrap();
        if n == 0 {
            return out;
        }
        out.push_str(&rest[..n]);
        s = &rest[n + 2..];
    }
}

#[test]
fn serve_answers_retrieval_requests() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, index) = synth(tmp.path(), "self-retrieval", 5, 100);
    let server = start(&index);
    let addr = server.addr.clone();

    let (status, body) = request(&addr, "GET", "/healthz", "");
    assert_eq!(status, 200);
    assert_eq!(serde_json::from_str::<Value>(&body).unwrap()["status"], "ok");

    let req = r#"{"relative_text":"with a red hat","reference_image_id":"img_00003","k":5}"#;
    let (status, body) = request(&addr, "POST", "/v1/retrieve", req);
    assert_eq!(status, 200, "{body}");
    let list: Value = serde_json::from_str(&body).unwrap();
    assert_eq!(list["candidates"].as_array().unwrap().len(), 5);
    let single = body;

    let (status, body) = request(&addr, "POST", "/v1/retrieve", "{\"relative_text\": ");
    assert_eq!(status, 400);
    assert!(serde_json::from_str::<Value>(&body).unwrap()["error"].is_string());

    let (status, _) = request(&addr, "POST", "/v1/retrieve", r#"{"relative_text":"x"}"#);
    assert_eq!(status, 400);

    let bodies: Vec<String> = (0..8)
        .map(|_| {
            let addr = addr.clone();
            thread::spawn(move || request(&addr, "POST", "/v1/retrieve", req))
        })
        .collect::<Vec<_>>()
        .into_iter()
        .map(|h| {
            let (status, body) = h.join().unwrap();
            assert_eq!(status, 200);
            body
        })
        .collect();
    assert!(bodies.iter().all(|b| *b == single));
}
