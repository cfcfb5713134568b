//! Toy external detector: scores a text by its length in characters.
//!
//! Speaks the line protocol on stdin/stdout. Markers in the text trigger
//! faults: `<<error>>` replies with an error, `<<nan>>` with a NaN score,
//! `<<malformed>>` with a line that is not JSON.

use std::io::{BufRead, Write};

use serde_json::Value;

fn reply_error(id: &Value, message: &str) -> String {
    format!("{{\"id\":{},\"error\":{}}}", id, Value::from(message))
}

fn respond(line: &str) -> String {
    let Ok(req) = serde_json::from_str::<Value>(line) else {
        return reply_error(&Value::Null, "invalid request");
    };
    let id = req.get("id").cloned().unwrap_or(Value::Null);
    let method = req.get("method").and_then(Value::as_str).unwrap_or_default();
    if method != "score" {
        return reply_error(&id, &format!("unsupported method {method:?}"));
    }
    let Some(text) = req.get("text").and_then(Value::as_str) else {
        return reply_error(&id, "missing text");
    };
    if text.contains("<<error>>") {
        reply_error(&id, "injected error")
    } else if text.contains("<<nan>>") {
        format!("{{\"id\":{id},\"score\":NaN}}")
    } else if text.contains("<<malformed>>") {
        "not a json reply".to_string()
    } else {
        format!("{{\"id\":{id},\"score\":{}}}", text.chars().count())
    }
}

fn main() {
    let mut name = "toy-length".to_string();
    let mut sign = "higher_is_machine".to_string();
    let mut args = std::env::args().skip(1);
    while let Some(a) = args.next() {
        match a.as_str() {
            "--name" => name = args.next().unwrap_or(name),
            "--sign" => sign = args.next().unwrap_or(sign),
            other => {
                eprintln!("unknown argument {other}");
                std::process::exit(1);
            }
        }
    }
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let handshake = format!(
        "{{\"protocol\":\"forgeval/1\",\"name\":{},\"sign\":{}}}",
        Value::from(name.as_str()),
        Value::from(sign.as_str())
    );
    if writeln!(out, "{handshake}").and_then(|_| out.flush()).is_err() {
        return;
    }
    for line in std::io::stdin().lock().lines() {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        if writeln!(out, "{}", respond(&line)).and_then(|_| out.flush()).is_err() {
            break;
        }
    }
}
