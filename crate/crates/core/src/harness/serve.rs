use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::Arc;
use std::thread;

use tungstenite::{accept, Message};

use super::data::TrainingData;
use super::model::Model;
use super::session::Session;
use super::HarnessError;

/// WebSocket front end. Each connection owns one [`Session`]; messages of a
/// connection are handled in arrival order on its own thread.
pub struct Server {
    listener: TcpListener,
    model: Arc<Model>,
    data: Arc<TrainingData>,
    fov: f64,
}

impl Server {
    /// Binds without accepting yet. Port 0 picks a free port.
    pub fn bind(model: Model, data: TrainingData, host: &str, port: u16, fov: f64) -> Result<Self, HarnessError> {
        let listener = TcpListener::bind((host, port)).map_err(|e| HarnessError::Io {
            path: format!("{host}:{port}"),
            source: e,
        })?;
        // Fail now rather than on the first connection.
        if let Some(i) = data.identities.first() {
            i.neutral(model.surface())?;
        }
        Ok(Self {
            listener,
            model: Arc::new(model),
            data: Arc::new(data),
            fov,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound socket has an address")
    }

    /// Accepts connections until the listener fails.
    pub fn run(self) -> Result<(), HarnessError> {
        for stream in self.listener.incoming() {
            let stream = match stream {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("accept failed: {e}");
                    continue;
                }
            };
            let (model, data, fov) = (self.model.clone(), self.data.clone(), self.fov);
            thread::spawn(move || {
                if let Err(e) = handle(stream, model, data, fov) {
                    eprintln!("session ended: {e}");
                }
            });
        }
        Ok(())
    }

    /// Runs the accept loop on a background thread.
    pub fn spawn(self) -> SocketAddr {
        let addr = self.local_addr();
        thread::spawn(move || self.run());
        addr
    }
}

fn handle(stream: TcpStream, model: Arc<Model>, data: Arc<TrainingData>, fov: f64) -> Result<(), String> {
    stream.set_nodelay(true).ok();
    let mut ws = accept(stream).map_err(|e| e.to_string())?;
    let mut session = Session::new(model, data, fov).map_err(|e| e.to_string())?;
    ws.send(Message::text(session.frame().to_json())).map_err(|e| e.to_string())?;
    loop {
        let reply = match ws.read() {
            Ok(Message::Text(t)) => session.handle_text(t.as_str()),
            Ok(Message::Binary(_)) => super::session::ServerMessage::Error {
                message: "binary messages are not supported".into(),
            },
            // The close reply goes out on the next read, which then reports
            // ConnectionClosed.
            Ok(Message::Close(_)) | Ok(_) => continue,
            Err(tungstenite::Error::ConnectionClosed) => return Ok(()),
            Err(e) => return Err(e.to_string()),
        };
        ws.send(Message::text(reply.to_json())).map_err(|e| e.to_string())?;
    }
}
