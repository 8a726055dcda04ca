//! `/stream` WebSocket endpoint.
//!
//! Each connection gets a reader (parses messages into an [`Inbox`]), a
//! generation loop (one frame at a time on the blocking pool, behind a
//! server-wide lock) and a writer. Frames therefore never overlap, and camera
//! updates that arrive during generation collapse to the newest one.

use std::future::Future;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::Result;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use futures_util::{SinkExt, StreamExt};
use tokio::net::TcpListener;
use tokio::sync::{mpsc, watch, Mutex};

use crate::inbox::Inbox;
use crate::protocol::WireFrame;
use crate::session::{decode_client, error_frame, Session};

pub type SessionFactory = Arc<dyn Fn() -> Result<Session> + Send + Sync>;

#[derive(Clone, Copy, Debug, Default)]
pub struct ServerOptions {
    /// Upper bound on frames per second per connection.
    pub max_fps: Option<f64>,
}

struct Shared {
    factory: SessionFactory,
    generation: Arc<Mutex<()>>,
    min_interval: Option<Duration>,
    shutdown: watch::Receiver<bool>,
    // Held by every live connection so shutdown can wait for them.
    drain: mpsc::Sender<()>,
}

/// Serves until `shutdown` resolves, then lets every connection finish the
/// frame it is generating, closes it and returns.
pub async fn serve<F>(listener: TcpListener, factory: SessionFactory, options: ServerOptions, shutdown: F) -> std::io::Result<()>
where
    F: Future<Output = ()> + Send + 'static,
{
    let (stop_tx, stop_rx) = watch::channel(false);
    let (drain_tx, mut drain_rx) = mpsc::channel::<()>(1);
    let shared = Arc::new(Shared {
        factory,
        generation: Arc::new(Mutex::new(())),
        min_interval: options.max_fps.filter(|f| *f > 0.0).map(|f| Duration::from_secs_f64(1.0 / f)),
        shutdown: stop_rx.clone(),
        drain: drain_tx,
    });
    let app = Router::new().route("/stream", get(upgrade)).with_state(shared.clone());
    tokio::spawn(async move {
        shutdown.await;
        let _ = stop_tx.send(true);
    });
    let mut stop = stop_rx;
    axum::serve(listener, app)
        .with_graceful_shutdown(async move {
            let _ = stop.wait_for(|v| *v).await;
        })
        .await?;
    drop(shared);
    let _ = drain_rx.recv().await;
    Ok(())
}

async fn upgrade(ws: WebSocketUpgrade, State(shared): State<Arc<Shared>>) -> Response {
    ws.on_upgrade(move |socket| connection(socket, shared))
}

fn to_message(frame: WireFrame) -> Message {
    match frame {
        WireFrame::Text(t) => Message::Text(t),
        WireFrame::Binary(b) => Message::Binary(b),
    }
}

async fn connection(socket: WebSocket, shared: Arc<Shared>) {
    let _drain = shared.drain.clone();
    let mut shutdown = shared.shutdown.clone();
    let (mut sink, mut stream) = socket.split();
    // Whole replies go through the channel so a frame's header and payloads
    // are never split by an error message.
    let (out_tx, mut out_rx) = mpsc::unbounded_channel::<Vec<WireFrame>>();
    let writer = tokio::spawn(async move {
        while let Some(batch) = out_rx.recv().await {
            for frame in batch {
                if sink.send(to_message(frame)).await.is_err() {
                    return;
                }
            }
        }
        let _ = sink.send(Message::Close(None)).await;
    });

    let session = match (shared.factory)() {
        Ok(s) => s,
        Err(e) => {
            tracing::error!("session setup failed: {e:#}");
            let _ = out_tx.send(vec![error_frame(&format!("{e:#}"))]);
            drop(out_tx);
            let _ = writer.await;
            return;
        }
    };
    let inbox = Arc::new(Inbox::new());
    let generator = tokio::spawn(generate(session, inbox.clone(), out_tx.clone(), shared.clone()));

    loop {
        tokio::select! {
            msg = stream.next() => match msg {
                Some(Ok(Message::Text(text))) => match decode_client(&WireFrame::Text(text)) {
                    Ok(m) => inbox.push(m),
                    Err(reply) => {
                        let _ = out_tx.send(vec![reply]);
                    }
                },
                Some(Ok(Message::Binary(bytes))) => {
                    if let Err(reply) = decode_client(&WireFrame::Binary(bytes)) {
                        let _ = out_tx.send(vec![reply]);
                    }
                }
                Some(Ok(Message::Close(_))) | None => break,
                Some(Err(e)) => {
                    tracing::debug!("websocket read failed: {e}");
                    break;
                }
                Some(Ok(_)) => {}
            },
            _ = shutdown.wait_for(|v| *v) => break,
        }
    }
    inbox.close();
    let _ = generator.await;
    if inbox.dropped() > 0 {
        tracing::debug!("connection closed, {} camera updates superseded", inbox.dropped());
    }
    drop(out_tx);
    let _ = writer.await;
}

async fn generate(mut session: Session, inbox: Arc<Inbox>, out: mpsc::UnboundedSender<Vec<WireFrame>>, shared: Arc<Shared>) {
    let mut last: Option<Instant> = None;
    loop {
        if let (Some(interval), Some(t)) = (shared.min_interval, last) {
            tokio::time::sleep_until((t + interval).into()).await;
        }
        let Some(msg) = inbox.next().await else { break };
        let guard = shared.generation.clone().lock_owned().await;
        let joined = tokio::task::spawn_blocking(move || {
            let reply = session.handle(msg);
            (session, reply)
        })
        .await;
        drop(guard);
        let (s, reply) = match joined {
            Ok(r) => r,
            Err(e) => {
                tracing::error!("generation task failed: {e}");
                let _ = out.send(vec![error_frame("internal error")]);
                break;
            }
        };
        session = s;
        last = Some(Instant::now());
        if out.send(reply).is_err() {
            break;
        }
    }
}
