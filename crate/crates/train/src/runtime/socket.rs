//! The evaluation service over a Unix socket. One JSON object per line in
//! each direction; a request line gets exactly one reply line, either an
//! `EvalResponse` or an `ErrorResponse`.

use std::io::{BufRead, BufReader, Write};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use crate::runtime::eval::{ErrorResponse, EvalError, EvalRequest, EvalResponse, Evaluator, LocalEvaluator};

/// Reply line for one request line.
pub fn handle_line(eval: &LocalEvaluator, line: &str) -> String {
    let reply = match serde_json::from_str::<EvalRequest>(line) {
        Err(e) => Err(ErrorResponse { id: None, error: EvalError::Malformed(e.to_string()).to_string() }),
        Ok(req) => eval
            .evaluate_one(&req)
            .map_err(|e| ErrorResponse { id: Some(req.id), error: e.to_string() }),
    };
    match reply {
        Ok(r) => serde_json::to_string(&r),
        Err(e) => serde_json::to_string(&e),
    }
    .expect("responses serialize")
}

fn serve_conn(eval: &LocalEvaluator, stream: UnixStream) -> std::io::Result<()> {
    let mut out = stream.try_clone()?;
    for line in BufReader::new(stream).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        writeln!(out, "{}", handle_line(eval, &line))?;
    }
    Ok(())
}

/// A running server; dropping it stops accepting and removes the socket file.
pub struct SocketServer {
    path: PathBuf,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl SocketServer {
    pub fn bind(path: impl AsRef<Path>, eval: LocalEvaluator) -> std::io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        let _ = std::fs::remove_file(&path);
        let listener = UnixListener::bind(&path)?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let eval = Arc::new(eval);
        let accept = std::thread::spawn(move || {
            for conn in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(conn) = conn else { continue };
                let eval = Arc::clone(&eval);
                std::thread::spawn(move || {
                    let _ = serve_conn(&eval, conn);
                });
            }
        });
        Ok(SocketServer { path, stop, accept: Some(accept) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Blocks until the accept loop ends (it only ends on shutdown).
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for SocketServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the accept loop
        let _ = UnixStream::connect(&self.path);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Client side; requests from one caller are pipelined on one connection.
pub struct SocketEvaluator {
    conn: Mutex<(UnixStream, BufReader<UnixStream>)>,
}

impl SocketEvaluator {
    pub fn connect(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let s = UnixStream::connect(path)?;
        let r = BufReader::new(s.try_clone()?);
        Ok(SocketEvaluator { conn: Mutex::new((s, r)) })
    }
}

fn transport(e: impl std::fmt::Display) -> EvalError {
    EvalError::Transport(e.to_string())
}

impl Evaluator for SocketEvaluator {
    fn evaluate(&self, reqs: &[EvalRequest]) -> Result<Vec<EvalResponse>, EvalError> {
        let mut guard = self.conn.lock().map_err(transport)?;
        let (w, r) = &mut *guard;
        let mut buf = Vec::new();
        for q in reqs {
            serde_json::to_writer(&mut buf, q).map_err(transport)?;
            buf.push(b'\n');
        }
        w.write_all(&buf).map_err(transport)?;
        let mut out = Vec::with_capacity(reqs.len());
        let mut failure = None;
        let mut line = String::new();
        // read every reply even after an error so the stream stays in step
        for _ in reqs {
            line.clear();
            if r.read_line(&mut line).map_err(transport)? == 0 {
                return Err(EvalError::Transport("connection closed".into()));
            }
            match serde_json::from_str::<EvalResponse>(&line) {
                Ok(resp) => out.push(resp),
                Err(_) => {
                    let e: ErrorResponse =
                        serde_json::from_str(&line).map_err(|e| EvalError::Malformed(e.to_string()))?;
                    failure.get_or_insert(EvalError::Transport(e.error));
                }
            }
        }
        if let Some(e) = failure {
            return Err(e);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use silo_core::datagen::{build_corpus, DatagenConfig};
    use silo_core::isa::tokenize;
    use silo_core::verify::VerifyConfig;

    #[test]
    fn wire_round_trip_matches_in_process() {
        let c = build_corpus(3, 1, 1, &DatagenConfig::default()).unwrap();
        let local = LocalEvaluator::new(&c.train, VerifyConfig::default());
        let dir = std::env::temp_dir().join(format!("silo-sock-{}", std::process::id()));
        let server = SocketServer::bind(&dir, local.clone()).unwrap();
        let client = SocketEvaluator::connect(server.path()).unwrap();
        let reqs: Vec<EvalRequest> = c
            .train
            .iter()
            .enumerate()
            .map(|(k, e)| EvalRequest::new(k as u64, &e.id, &tokenize(&e.f_ref).unwrap().0))
            .collect();
        assert_eq!(client.evaluate(&reqs).unwrap(), local.evaluate(&reqs).unwrap());

        let bad = handle_line(&local, "{not json");
        let e: ErrorResponse = serde_json::from_str(&bad).unwrap();
        assert!(e.id.is_none());
        // the connection survives an error reply
        assert!(client.evaluate(&[EvalRequest::new(9, "missing", &[])]).is_err());
        assert_eq!(client.evaluate(&reqs[..1]).unwrap().len(), 1);
    }
}
