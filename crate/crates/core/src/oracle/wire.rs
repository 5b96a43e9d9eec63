//! Newline-delimited JSON classifier protocol over TCP or stdio.
//!
//! ```text
//! -> {"op":"hello"}
//! <- {"op":"hello","num_classes":N,"input_shape":[C,H,W]}
//! -> {"op":"predict","id":7,"shape":[B,C,H,W],"data":[...]}
//! <- {"op":"probs","id":7,"probs":[[...N...], ...B...]}
//! <- {"op":"error","id":7,"message":"..."}
//! ```

use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Classifier, ProbVector};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Frame {
    Hello {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        num_classes: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        input_shape: Option<[usize; 3]>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        preprocessing: Option<String>,
    },
    Predict {
        id: u64,
        shape: [usize; 4],
        data: Vec<f32>,
    },
    Probs {
        id: u64,
        probs: Vec<Vec<f32>>,
    },
    Error {
        id: u64,
        message: String,
    },
}

impl Frame {
    pub fn client_hello() -> Self {
        Frame::Hello {
            num_classes: None,
            input_shape: None,
            preprocessing: None,
        }
    }

    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("frames always serialize");
        s.push('\n');
        s
    }
}

struct Connection {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
}

impl Connection {
    fn send(&mut self, frame: &Frame, request_id: u64) -> Result<()> {
        let transport = |e: io::Error| Error::Transport {
            request_id,
            message: format!("write failed: {e}"),
        };
        self.writer
            .write_all(frame.to_line().as_bytes())
            .map_err(transport)?;
        self.writer.flush().map_err(transport)
    }

    fn receive(&mut self, request_id: u64) -> Result<Frame> {
        let mut line = String::new();
        loop {
            line.clear();
            let n = self.reader.read_line(&mut line).map_err(|e| {
                let message = match e.kind() {
                    io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => {
                        format!("timed out waiting for response: {e}")
                    }
                    _ => format!("read failed: {e}"),
                };
                Error::Transport {
                    request_id,
                    message,
                }
            })?;
            if n == 0 {
                return Err(Error::Transport {
                    request_id,
                    message: "connection closed by server".into(),
                });
            }
            if !line.trim().is_empty() {
                break;
            }
        }
        serde_json::from_str(line.trim()).map_err(|e| Error::Protocol {
            request_id,
            message: format!("malformed frame: {e}"),
        })
    }
}

/// Client side of the protocol; a [`Classifier`] backed by a remote model.
pub struct RemoteOracle {
    conn: Mutex<Connection>,
    child: Option<Mutex<Child>>,
    num_classes: usize,
    input_shape: [usize; 3],
    preprocessing: Option<String>,
    next_id: AtomicU64,
    label: String,
}

impl RemoteOracle {
    pub fn connect(address: &str, timeout: Duration) -> Result<Self> {
        let transport = |message: String| Error::Transport {
            request_id: 0,
            message,
        };
        let addrs: Vec<_> = address
            .to_socket_addrs()
            .map_err(|e| transport(format!("cannot resolve {address}: {e}")))?
            .collect();
        let mut last_err = None;
        for addr in addrs {
            match TcpStream::connect_timeout(&addr, timeout) {
                Ok(stream) => {
                    stream
                        .set_read_timeout(Some(timeout))
                        .and_then(|_| stream.set_nodelay(true))
                        .map_err(|e| transport(e.to_string()))?;
                    let reader = BufReader::new(
                        stream.try_clone().map_err(|e| transport(e.to_string()))?,
                    );
                    return Self::handshake(
                        Box::new(reader),
                        Box::new(stream),
                        None,
                        format!("tcp://{address}"),
                    );
                }
                Err(e) => last_err = Some(e),
            }
        }
        Err(transport(format!(
            "cannot connect to {address}: {}",
            last_err.map_or("no addresses".to_string(), |e| e.to_string())
        )))
    }

    /// Spawns `program` and speaks the protocol over its stdin/stdout.
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Transport {
                request_id: 0,
                message: format!("cannot spawn `{program}`: {e}"),
            })?;
        let stdin = child.stdin.take().expect("piped");
        let stdout = child.stdout.take().expect("piped");
        Self::handshake(
            Box::new(BufReader::new(stdout)),
            Box::new(stdin),
            Some(child),
            format!("stdio://{program}"),
        )
    }

    /// Runs the handshake over arbitrary streams.
    pub fn from_streams(
        reader: impl BufRead + Send + 'static,
        writer: impl Write + Send + 'static,
    ) -> Result<Self> {
        Self::handshake(Box::new(reader), Box::new(writer), None, "streams".into())
    }

    fn handshake(
        reader: Box<dyn BufRead + Send>,
        writer: Box<dyn Write + Send>,
        child: Option<Child>,
        label: String,
    ) -> Result<Self> {
        let mut conn = Connection { reader, writer };
        conn.send(&Frame::client_hello(), 0)?;
        let (num_classes, input_shape, preprocessing) = match conn.receive(0)? {
            Frame::Hello {
                num_classes: Some(n),
                input_shape: Some(shape),
                preprocessing,
            } if n >= 1 && shape.iter().all(|&d| d >= 1) => (n, shape, preprocessing),
            Frame::Error { message, .. } => {
                return Err(Error::Protocol {
                    request_id: 0,
                    message: format!("server rejected hello: {message}"),
                })
            }
            other => {
                return Err(Error::Protocol {
                    request_id: 0,
                    message: format!("expected hello with num_classes and input_shape, got {other:?}"),
                })
            }
        };
        Ok(RemoteOracle {
            conn: Mutex::new(conn),
            child: child.map(Mutex::new),
            num_classes,
            input_shape,
            preprocessing,
            next_id: AtomicU64::new(1),
            label,
        })
    }

    pub fn preprocessing(&self) -> Option<&str> {
        self.preprocessing.as_deref()
    }

    /// Sends one predict frame and validates the matching response.
    pub fn remote_predict(&self, batch: &[&Image]) -> Result<Vec<ProbVector>> {
        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        let [c, h, w] = self.input_shape;
        let mut data = Vec::with_capacity(batch.len() * c * h * w);
        for img in batch {
            data.extend_from_slice(img.data());
        }
        let request = Frame::Predict {
            id,
            shape: [batch.len(), c, h, w],
            data,
        };
        let response = {
            let mut conn = self.conn.lock().unwrap_or_else(|p| p.into_inner());
            conn.send(&request, id)?;
            conn.receive(id)?
        };
        let protocol = |message: String| Error::Protocol {
            request_id: id,
            message,
        };
        match response {
            Frame::Probs { id: rid, probs } => {
                if rid != id {
                    return Err(protocol(format!("response id {rid} does not match request")));
                }
                if probs.len() != batch.len() {
                    return Err(protocol(format!(
                        "{} probability vectors for {} images",
                        probs.len(),
                        batch.len()
                    )));
                }
                probs
                    .into_iter()
                    .map(|p| {
                        if p.len() != self.num_classes {
                            return Err(protocol(format!(
                                "probability vector of length {}, expected {}",
                                p.len(),
                                self.num_classes
                            )));
                        }
                        ProbVector::new(p).map_err(|e| protocol(e.to_string()))
                    })
                    .collect()
            }
            Frame::Error { id: rid, message } => Err(protocol(format!("server error (id {rid}): {message}"))),
            other => Err(protocol(format!("unexpected frame {other:?}"))),
        }
    }
}

impl Classifier for RemoteOracle {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    fn classify(&self, batch: &[&Image]) -> Result<Vec<ProbVector>> {
        self.remote_predict(batch)
    }

    fn describe(&self) -> String {
        format!("remote({})", self.label)
    }
}

impl Drop for RemoteOracle {
    fn drop(&mut self) {
        if let Some(child) = &self.child {
            let mut child = child.lock().unwrap_or_else(|p| p.into_inner());
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// Returns `1/N` for every class. Used by the loopback stub.
#[derive(Debug, Clone)]
pub struct UniformClassifier {
    pub num_classes: usize,
    pub input_shape: [usize; 3],
}

impl Classifier for UniformClassifier {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    fn classify(&self, batch: &[&Image]) -> Result<Vec<ProbVector>> {
        let p = 1.0 / self.num_classes as f32;
        Ok(batch
            .iter()
            .map(|_| ProbVector::new(vec![p; self.num_classes]).expect("uniform is normalized"))
            .collect())
    }

    fn describe(&self) -> String {
        "uniform-stub".into()
    }
}

fn handle_frame(classifier: &dyn Classifier, max_batch: usize, line: &str) -> Frame {
    let frame: Frame = match serde_json::from_str(line) {
        Ok(f) => f,
        Err(e) => {
            let id = serde_json::from_str::<serde_json::Value>(line)
                .ok()
                .and_then(|v| v.get("id").and_then(|id| id.as_u64()))
                .unwrap_or(0);
            return Frame::Error {
                id,
                message: format!("malformed request: {e}"),
            };
        }
    };
    match frame {
        Frame::Hello { .. } => Frame::Hello {
            num_classes: Some(classifier.num_classes()),
            input_shape: Some(classifier.input_shape()),
            preprocessing: Some("none: raw [0,1] values".into()),
        },
        Frame::Predict { id, shape, data } => {
            let error = |message: String| Frame::Error { id, message };
            let [b, c, h, w] = shape;
            if [c, h, w] != classifier.input_shape() {
                return error(format!(
                    "image shape {:?} does not match model input {:?}",
                    [c, h, w],
                    classifier.input_shape()
                ));
            }
            if b == 0 || b > max_batch {
                return error(format!("batch size {b} outside [1, {max_batch}]"));
            }
            if data.len() != b * c * h * w {
                return error(format!("data has {} values, shape implies {}", data.len(), b * c * h * w));
            }
            let images: Result<Vec<Image>> = data
                .chunks_exact(c * h * w)
                .map(|chunk| Image::from_vec(c, h, w, chunk.to_vec()))
                .collect();
            let images = match images {
                Ok(images) => images,
                Err(e) => return error(e.to_string()),
            };
            let refs: Vec<&Image> = images.iter().collect();
            match classifier.classify(&refs) {
                Ok(probs) => Frame::Probs {
                    id,
                    probs: probs.into_iter().map(|p| p.probs().to_vec()).collect(),
                },
                Err(e) => error(e.to_string()),
            }
        }
        Frame::Probs { id, .. } | Frame::Error { id, .. } => Frame::Error {
            id,
            message: "servers only accept hello and predict".into(),
        },
    }
}

/// Answers frames until the reader hits end of input. Returns the number of
/// frames answered.
pub fn serve_connection(
    classifier: &dyn Classifier,
    reader: impl BufRead,
    mut writer: impl Write,
    max_batch: usize,
) -> Result<u64> {
    let mut answered = 0;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = handle_frame(classifier, max_batch, line.trim());
        writer.write_all(reply.to_line().as_bytes())?;
        writer.flush()?;
        answered += 1;
    }
    Ok(answered)
}

/// Accepts connections forever, one thread per connection.
pub fn serve_tcp(
    listener: TcpListener,
    classifier: Arc<dyn Classifier>,
    max_batch: usize,
) -> Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let classifier = Arc::clone(&classifier);
        thread::spawn(move || {
            let reader = match stream.try_clone() {
                Ok(s) => BufReader::new(s),
                Err(_) => return,
            };
            let _ = serve_connection(classifier.as_ref(), reader, stream, max_batch);
        });
    }
    Ok(())
}
