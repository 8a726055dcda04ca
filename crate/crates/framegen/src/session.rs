//! Per-connection protocol state machine, independent of the transport.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, bail};

use framegen_core::conditioning::compute_irradiance;
use framegen_core::denoiser::ModelBundle32;
use framegen_core::engine::{Engine, EngineOptions};
use framegen_core::scene::{render_frame, Camera, GBufferFrame, Scene, Vec3};
use framegen_core::Tensor32;

use crate::protocol::{
    pack_normals, parse_client, quantize, to_text, Channel, ClientMessage, Direction, FrameMessage, ServerMessage, Transcript,
    WireFrame,
};

pub struct EngineFrame {
    pub rgb: Tensor32,
    pub irradiance: Tensor32,
}

/// What a session needs from a frame generator.
pub trait FrameEngine: Send {
    fn resolution(&self) -> (usize, usize);
    fn is_initialized(&self) -> bool;
    fn reset(&mut self);
    fn init(&mut self, frame0: &GBufferFrame) -> anyhow::Result<()>;
    fn step(&mut self, gbuffer: &GBufferFrame) -> anyhow::Result<EngineFrame>;
    fn set_irradiance(&mut self, on: bool);
    fn select_checkpoint(&mut self, name: &str) -> anyhow::Result<()>;
}

/// The neural renderer, with named checkpoints to switch between.
pub struct NeuralEngine {
    engine: Engine,
    checkpoints: Arc<BTreeMap<String, Arc<ModelBundle32>>>,
}

impl NeuralEngine {
    pub fn new(checkpoints: Arc<BTreeMap<String, Arc<ModelBundle32>>>, default: &str, options: EngineOptions) -> anyhow::Result<Self> {
        let bundle = checkpoints.get(default).ok_or_else(|| anyhow!("unknown checkpoint `{default}`"))?.clone();
        Ok(Self { engine: Engine::new(bundle, options), checkpoints })
    }
}

impl FrameEngine for NeuralEngine {
    fn resolution(&self) -> (usize, usize) {
        (self.engine.bundle.config.width, self.engine.bundle.config.height)
    }

    fn is_initialized(&self) -> bool {
        self.engine.is_initialized()
    }

    fn reset(&mut self) {
        self.engine = Engine::new(self.engine.bundle.clone(), self.engine.options);
    }

    fn init(&mut self, frame0: &GBufferFrame) -> anyhow::Result<()> {
        Ok(self.engine.init(&frame0.rgb, &frame0.basecolor)?)
    }

    fn step(&mut self, gbuffer: &GBufferFrame) -> anyhow::Result<EngineFrame> {
        let out = self.engine.step(gbuffer)?;
        Ok(EngineFrame { irradiance: out.control.irradiance(), rgb: out.frame })
    }

    fn set_irradiance(&mut self, on: bool) {
        self.engine.options.irradiance = on;
    }

    fn select_checkpoint(&mut self, name: &str) -> anyhow::Result<()> {
        let bundle = self.checkpoints.get(name).ok_or_else(|| anyhow!("unknown checkpoint `{name}`"))?;
        let (w, h) = self.resolution();
        if (bundle.config.width, bundle.config.height) != (w, h) {
            bail!("checkpoint `{name}` is {}x{}, session is {w}x{h}", bundle.config.width, bundle.config.height);
        }
        self.engine.bundle = bundle.clone();
        Ok(())
    }
}

/// Returns the G-buffer basecolor as the frame. Used to test the protocol
/// without a model.
pub struct StubEngine {
    pub width: usize,
    pub height: usize,
    pub delay: std::time::Duration,
    prev: Option<(Tensor32, Tensor32)>,
    irradiance: bool,
}

impl StubEngine {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, delay: std::time::Duration::ZERO, prev: None, irradiance: true }
    }

    pub fn with_delay(mut self, delay: std::time::Duration) -> Self {
        self.delay = delay;
        self
    }
}

impl FrameEngine for StubEngine {
    fn resolution(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    fn is_initialized(&self) -> bool {
        self.prev.is_some()
    }

    fn reset(&mut self) {
        self.prev = None;
    }

    fn init(&mut self, frame0: &GBufferFrame) -> anyhow::Result<()> {
        self.prev = Some((frame0.rgb.clone(), frame0.basecolor.clone()));
        Ok(())
    }

    fn step(&mut self, gbuffer: &GBufferFrame) -> anyhow::Result<EngineFrame> {
        std::thread::sleep(self.delay);
        let (pf, pb) = self.prev.as_ref().ok_or_else(|| anyhow!("engine stepped before init"))?;
        let irradiance = if self.irradiance {
            compute_irradiance(pf, pb)?
        } else {
            Tensor32::zeros(&[1, self.height, self.width])
        };
        let rgb = gbuffer.basecolor.clone();
        self.prev = Some((rgb.clone(), gbuffer.basecolor.clone()));
        Ok(EngineFrame { rgb, irradiance })
    }

    fn set_irradiance(&mut self, on: bool) {
        self.irradiance = on;
    }

    fn select_checkpoint(&mut self, name: &str) -> anyhow::Result<()> {
        match name {
            "stub" => Ok(()),
            _ => bail!("unknown checkpoint `{name}`"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Timing {
    Measured,
    /// Reported in every header instead of the measured time.
    Fixed(f64),
}

pub struct Session {
    scene: Arc<Scene>,
    engine: Box<dyn FrameEngine>,
    last_seq: Option<u64>,
    channels: Vec<Channel>,
    irradiance: bool,
    checkpoint: String,
    timing: Timing,
}

impl Session {
    pub fn new(scene: Arc<Scene>, engine: Box<dyn FrameEngine>, checkpoint: impl Into<String>) -> Self {
        Self {
            scene,
            engine,
            last_seq: None,
            channels: vec![Channel::Rgb],
            irradiance: true,
            checkpoint: checkpoint.into(),
            timing: Timing::Measured,
        }
    }

    pub fn with_timing(mut self, timing: Timing) -> Self {
        self.timing = timing;
        self
    }

    /// Messages to send back, in order. Failures become an error message;
    /// the session stays usable.
    pub fn handle(&mut self, msg: ClientMessage) -> Vec<WireFrame> {
        let result = match msg {
            ClientMessage::Camera { seq, position, yaw, pitch } => self.camera(seq, position, yaw, pitch),
            ClientMessage::Reset { frame_source } => self.reset(&frame_source),
            ClientMessage::Config { irradiance, checkpoint, channels } => self.config(irradiance, checkpoint, channels),
        };
        result.unwrap_or_else(|e| vec![error_frame(&format!("{e:#}"))])
    }

    fn camera(&mut self, seq: u64, position: [f64; 3], yaw: f64, pitch: f64) -> anyhow::Result<Vec<WireFrame>> {
        if let Some(last) = self.last_seq {
            if seq <= last {
                bail!("camera seq {seq} not greater than previous {last}");
            }
        }
        let camera = Camera::new(Vec3(position), yaw, pitch);
        camera.validate()?;
        let (w, h) = self.engine.resolution();
        let start = Instant::now();
        let gbuffer = render_frame(&self.scene, &camera, w, h)?;
        if !self.engine.is_initialized() {
            self.engine.init(&gbuffer)?;
        }
        let out = self.engine.step(&gbuffer)?;
        self.last_seq = Some(seq);
        let millis = match self.timing {
            Timing::Measured => start.elapsed().as_secs_f64() * 1e3,
            Timing::Fixed(m) => m,
        };
        let planes = self
            .channels
            .iter()
            .map(|&c| {
                let t = match c {
                    Channel::Rgb => out.rgb.clone(),
                    Channel::Basecolor => gbuffer.basecolor.clone(),
                    Channel::Normal => pack_normals(&gbuffer.normal),
                    Channel::Depth => gbuffer.depth.clone(),
                    Channel::Roughness => gbuffer.roughness.clone(),
                    Channel::Metallic => gbuffer.metallic.clone(),
                    Channel::Irradiance => out.irradiance.clone(),
                };
                (c, quantize(&t))
            })
            .collect();
        Ok(encode_frame(&FrameMessage { seq, width: w, height: h, millis, planes }))
    }

    fn reset(&mut self, frame_source: &str) -> anyhow::Result<Vec<WireFrame>> {
        if frame_source != "ground_truth" {
            bail!("unsupported frame_source `{frame_source}`");
        }
        self.engine.reset();
        self.last_seq = None;
        Ok(Vec::new())
    }

    fn config(&mut self, irradiance: bool, checkpoint: String, channels: Option<Vec<Channel>>) -> anyhow::Result<Vec<WireFrame>> {
        if checkpoint != self.checkpoint {
            self.engine.select_checkpoint(&checkpoint)?;
            self.checkpoint = checkpoint;
        }
        self.engine.set_irradiance(irradiance);
        self.irradiance = irradiance;
        if let Some(requested) = channels {
            let mut list = vec![Channel::Rgb];
            for c in requested {
                if !list.contains(&c) {
                    list.push(c);
                }
            }
            self.channels = list;
        }
        let ack = ServerMessage::ConfigAck {
            irradiance: self.irradiance,
            checkpoint: self.checkpoint.clone(),
            channels: self.channels.clone(),
        };
        Ok(vec![WireFrame::Text(to_text(&ack))])
    }
}

pub fn encode_frame(frame: &FrameMessage) -> Vec<WireFrame> {
    let mut out = vec![WireFrame::Text(to_text(&frame.header()))];
    out.extend(frame.planes.iter().map(|(_, p)| WireFrame::Binary(p.clone())));
    out
}

pub fn error_frame(reason: &str) -> WireFrame {
    WireFrame::Text(to_text(&ServerMessage::Error { reason: reason.to_string() }))
}

/// Parses an incoming message; what cannot be parsed is answered with an
/// error message.
pub fn decode_client(frame: &WireFrame) -> Result<ClientMessage, WireFrame> {
    match frame {
        WireFrame::Text(text) => parse_client(text).map_err(|e| error_frame(&e.to_string())),
        WireFrame::Binary(_) => Err(error_frame("binary messages are not accepted")),
    }
}

/// Feeds the client side of `script` to `session` one message at a time
/// and records the exchange.
pub fn replay(session: &mut Session, script: &[WireFrame]) -> Transcript {
    let mut t = Transcript::default();
    for frame in script {
        t.push(Direction::ClientToServer, frame.clone());
        let reply = match decode_client(frame) {
            Ok(msg) => session.handle(msg),
            Err(e) => vec![e],
        };
        for r in reply {
            t.push(Direction::ServerToClient, r);
        }
    }
    t
}
