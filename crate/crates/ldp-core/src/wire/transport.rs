use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};

use super::{decode_envelope, encode_envelope, MessageEnvelope, TransportError};

pub const DEFAULT_MAX_MESSAGE_BYTES: usize = 16 * 1024 * 1024;
pub const MAX_MESSAGE_BYTES_ENV: &str = "LDP_MAX_MESSAGE_BYTES";

/// Size cap from `LDP_MAX_MESSAGE_BYTES`, else 16 MiB.
pub fn max_message_bytes() -> usize {
    std::env::var(MAX_MESSAGE_BYTES_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or(DEFAULT_MAX_MESSAGE_BYTES)
}

/// An ordered, bidirectional envelope channel.
///
/// Sends on one handle must be serialized by the caller. Delivery is FIFO.
pub trait Transport: Send {
    fn send(&mut self, envelope: &MessageEnvelope) -> Result<(), TransportError>;
    fn recv(&mut self) -> Result<MessageEnvelope, TransportError>;
    fn close(&mut self);
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn send(&mut self, envelope: &MessageEnvelope) -> Result<(), TransportError> {
        (**self).send(envelope)
    }

    fn recv(&mut self) -> Result<MessageEnvelope, TransportError> {
        (**self).recv()
    }

    fn close(&mut self) {
        (**self).close()
    }
}

fn check_size(bytes: &[u8], max: usize) -> Result<(), TransportError> {
    if bytes.len() > max {
        return Err(TransportError::TooLarge {
            size: bytes.len(),
            max,
        });
    }
    Ok(())
}

/// One end of an in-process connection. Carries the same encoded bytes as
/// the TCP transport.
#[derive(Debug)]
pub struct MemoryTransport {
    tx: Option<Sender<Vec<u8>>>,
    rx: Receiver<Vec<u8>>,
    max_bytes: usize,
}

pub fn memory_pair() -> (MemoryTransport, MemoryTransport) {
    memory_pair_with_limit(max_message_bytes())
}

pub fn memory_pair_with_limit(max_bytes: usize) -> (MemoryTransport, MemoryTransport) {
    let (a_tx, b_rx) = mpsc::channel();
    let (b_tx, a_rx) = mpsc::channel();
    (
        MemoryTransport {
            tx: Some(a_tx),
            rx: a_rx,
            max_bytes,
        },
        MemoryTransport {
            tx: Some(b_tx),
            rx: b_rx,
            max_bytes,
        },
    )
}

impl Transport for MemoryTransport {
    fn send(&mut self, envelope: &MessageEnvelope) -> Result<(), TransportError> {
        let tx = self.tx.as_ref().ok_or(TransportError::ConnectionClosed)?;
        let bytes = encode_envelope(envelope);
        check_size(&bytes, self.max_bytes)?;
        tx.send(bytes).map_err(|_| TransportError::ConnectionClosed)
    }

    fn recv(&mut self) -> Result<MessageEnvelope, TransportError> {
        if self.tx.is_none() {
            return Err(TransportError::ConnectionClosed);
        }
        let bytes = self
            .rx
            .recv()
            .map_err(|_| TransportError::ConnectionClosed)?;
        check_size(&bytes, self.max_bytes)?;
        Ok(decode_envelope(&bytes)?)
    }

    fn close(&mut self) {
        self.tx = None;
    }
}

/// Wraps a transport and keeps a copy of every encoded envelope sent.
pub struct RecordingTransport<T> {
    inner: T,
    sent: Arc<Mutex<Vec<Vec<u8>>>>,
}

impl<T: Transport> RecordingTransport<T> {
    pub fn new(inner: T) -> (Self, Arc<Mutex<Vec<Vec<u8>>>>) {
        let sent = Arc::new(Mutex::new(Vec::new()));
        (
            Self {
                inner,
                sent: sent.clone(),
            },
            sent,
        )
    }
}

impl<T: Transport> Transport for RecordingTransport<T> {
    fn send(&mut self, envelope: &MessageEnvelope) -> Result<(), TransportError> {
        self.inner.send(envelope)?;
        self.sent
            .lock()
            .expect("recording poisoned")
            .push(encode_envelope(envelope));
        Ok(())
    }

    fn recv(&mut self) -> Result<MessageEnvelope, TransportError> {
        self.inner.recv()
    }

    fn close(&mut self) {
        self.inner.close()
    }
}

#[cfg(feature = "net")]
mod tcp {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::{Shutdown, TcpStream, ToSocketAddrs};

    use super::*;

    /// Newline-delimited JSON envelopes over TCP.
    #[derive(Debug)]
    pub struct TcpTransport {
        reader: BufReader<TcpStream>,
        writer: TcpStream,
        max_bytes: usize,
        closed: bool,
    }

    impl TcpTransport {
        pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, TransportError> {
            Ok(Self::from_stream(TcpStream::connect(addr)?)?)
        }

        pub fn from_stream(stream: TcpStream) -> std::io::Result<Self> {
            Self::with_limit(stream, max_message_bytes())
        }

        pub fn with_limit(stream: TcpStream, max_bytes: usize) -> std::io::Result<Self> {
            stream.set_nodelay(true)?;
            Ok(Self {
                reader: BufReader::new(stream.try_clone()?),
                writer: stream,
                max_bytes,
                closed: false,
            })
        }

        pub fn peer_addr(&self) -> Option<std::net::SocketAddr> {
            self.writer.peer_addr().ok()
        }
    }

    impl Transport for TcpTransport {
        fn send(&mut self, envelope: &MessageEnvelope) -> Result<(), TransportError> {
            if self.closed {
                return Err(TransportError::ConnectionClosed);
            }
            let mut bytes = encode_envelope(envelope);
            check_size(&bytes, self.max_bytes)?;
            bytes.push(b'\n');
            self.writer.write_all(&bytes).map_err(|e| match e.kind() {
                std::io::ErrorKind::BrokenPipe | std::io::ErrorKind::ConnectionReset => {
                    TransportError::ConnectionClosed
                }
                _ => TransportError::Io(e),
            })
        }

        fn recv(&mut self) -> Result<MessageEnvelope, TransportError> {
            if self.closed {
                return Err(TransportError::ConnectionClosed);
            }
            loop {
                let mut line = Vec::new();
                let limit = self.max_bytes as u64 + 2;
                let n = (&mut self.reader)
                    .take(limit)
                    .read_until(b'\n', &mut line)
                    .map_err(|e| match e.kind() {
                        std::io::ErrorKind::ConnectionReset | std::io::ErrorKind::UnexpectedEof => {
                            TransportError::ConnectionClosed
                        }
                        _ => TransportError::Io(e),
                    })?;
                if n == 0 {
                    return Err(TransportError::ConnectionClosed);
                }
                if line.last() == Some(&b'\n') {
                    line.pop();
                    if line.last() == Some(&b'\r') {
                        line.pop();
                    }
                } else if line.len() > self.max_bytes {
                    return Err(TransportError::TooLarge {
                        size: line.len(),
                        max: self.max_bytes,
                    });
                } else {
                    // EOF mid-line.
                    return Err(TransportError::ConnectionClosed);
                }
                check_size(&line, self.max_bytes)?;
                if line.iter().all(u8::is_ascii_whitespace) {
                    continue;
                }
                return Ok(decode_envelope(&line)?);
            }
        }

        fn close(&mut self) {
            if !self.closed {
                self.closed = true;
                let _ = self.writer.shutdown(Shutdown::Both);
            }
        }
    }

    impl Drop for TcpTransport {
        fn drop(&mut self) {
            self.close();
        }
    }
}

#[cfg(feature = "net")]
pub use tcp::TcpTransport;
