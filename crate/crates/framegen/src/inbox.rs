//! Latest-wins handoff between a connection's reader and its generation
//! loop. Control messages queue in order; a camera message replaces a
//! camera message still waiting directly ahead of it.

use std::collections::VecDeque;
use std::sync::Mutex;

use tokio::sync::Notify;

use crate::protocol::ClientMessage;

#[derive(Default)]
struct State {
    queue: VecDeque<ClientMessage>,
    dropped: u64,
    closed: bool,
}

#[derive(Default)]
pub struct Inbox {
    state: Mutex<State>,
    notify: Notify,
}

impl Inbox {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&self, msg: ClientMessage) {
        let mut s = self.state.lock().expect("inbox lock");
        let camera = matches!(msg, ClientMessage::Camera { .. });
        match s.queue.back_mut() {
            Some(last @ ClientMessage::Camera { .. }) if camera => {
                *last = msg;
                s.dropped += 1;
            }
            _ => s.queue.push_back(msg),
        }
        drop(s);
        self.notify.notify_one();
    }

    pub fn try_next(&self) -> Option<ClientMessage> {
        self.state.lock().expect("inbox lock").queue.pop_front()
    }

    /// Next message, or `None` once closed and drained.
    pub async fn next(&self) -> Option<ClientMessage> {
        loop {
            let notified = self.notify.notified();
            {
                let mut s = self.state.lock().expect("inbox lock");
                if let Some(m) = s.queue.pop_front() {
                    return Some(m);
                }
                if s.closed {
                    return None;
                }
            }
            notified.await;
        }
    }

    /// Drops anything still queued; `next` returns `None` from now on.
    pub fn close(&self) {
        let mut s = self.state.lock().expect("inbox lock");
        s.queue.clear();
        s.closed = true;
        drop(s);
        self.notify.notify_one();
    }

    /// Camera messages superseded before generation reached them.
    pub fn dropped(&self) -> u64 {
        self.state.lock().expect("inbox lock").dropped
    }

    pub fn pending(&self) -> usize {
        self.state.lock().expect("inbox lock").queue.len()
    }
}
