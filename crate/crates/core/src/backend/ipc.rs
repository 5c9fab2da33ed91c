//! Backend calls over the wire protocol: a client implementing
//! [`DenoiserBackend`] and a server loop exposing any backend.

use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::process::{Child, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::wire::{self, codes, dim, Message, Opcode, WireTensor};
use super::{
    AttentionOverride, BackendDescriptor, CapturedFeatures, Conditioning, DenoiserBackend, InpaintContext,
    LayerHook, MeaInjection, PredictRequest, Prediction,
};
use crate::attention::{AttentionBundle, MeaStats, TokenMask, TokenOrigin};
use crate::error::{Result, TryOnError};
use crate::tensor::{ImageGrid, Latent};

/// Command spawned for `ipc:stdio`, split on whitespace.
pub const ADAPTER_CMD_ENV: &str = "TRYON_ADAPTER_CMD";

struct Connection {
    reader: Box<dyn Read + Send>,
    writer: Box<dyn Write + Send>,
}

impl Connection {
    fn call(&mut self, msg: &Message) -> Result<Message> {
        wire::write_message(&mut self.writer, msg)?;
        wire::read_message(&mut self.reader)?.into_result()
    }
}

/// Client for an out-of-process backend.
pub struct IpcBackend {
    conn: Mutex<Connection>,
    child: Option<Mutex<Child>>,
    descriptor: BackendDescriptor,
}

impl IpcBackend {
    /// Connects to `tcp://host:port`, or spawns `$TRYON_ADAPTER_CMD` for
    /// `stdio`, and negotiates the protocol version.
    pub fn connect(endpoint: &str) -> Result<Self> {
        if let Some(addr) = endpoint.strip_prefix("tcp://") {
            let stream = TcpStream::connect(addr)
                .map_err(|e| TryOnError::capability(format!("cannot reach backend at {addr}: {e}")))?;
            stream.set_nodelay(true)?;
            let reader = BufReader::new(stream.try_clone()?);
            return Self::handshake(
                Connection {
                    reader: Box::new(reader),
                    writer: Box::new(BufWriter::new(stream)),
                },
                None,
            );
        }
        if endpoint == "stdio" {
            let cmd = std::env::var(ADAPTER_CMD_ENV).map_err(|_| {
                TryOnError::argument(format!("ipc:stdio needs the adapter command in ${ADAPTER_CMD_ENV}"))
            })?;
            let mut parts = cmd.split_whitespace();
            let program = parts
                .next()
                .ok_or_else(|| TryOnError::argument(format!("${ADAPTER_CMD_ENV} is empty")))?;
            let mut child = Command::new(program)
                .args(parts)
                .stdin(Stdio::piped())
                .stdout(Stdio::piped())
                .stderr(Stdio::inherit())
                .spawn()
                .map_err(|e| TryOnError::capability(format!("cannot start adapter {program:?}: {e}")))?;
            let stdin = child.stdin.take().expect("piped stdin");
            let stdout = child.stdout.take().expect("piped stdout");
            return Self::handshake(
                Connection {
                    reader: Box::new(BufReader::new(stdout)),
                    writer: Box::new(BufWriter::new(stdin)),
                },
                Some(child),
            );
        }
        Err(TryOnError::argument(format!(
            "unsupported endpoint {endpoint:?}; expected tcp://host:port or stdio"
        )))
    }

    /// Wraps already-open streams.
    pub fn from_streams(reader: impl Read + Send + 'static, writer: impl Write + Send + 'static) -> Result<Self> {
        Self::handshake(
            Connection {
                reader: Box::new(reader),
                writer: Box::new(writer),
            },
            None,
        )
    }

    fn handshake(mut conn: Connection, child: Option<Child>) -> Result<Self> {
        let reply = conn.call(&Message::new(Opcode::Describe, vec![], json!({ "version": wire::VERSION })))?;
        let version = reply.metadata.get("version").and_then(Value::as_u64);
        if version != Some(wire::VERSION as u64) {
            return Err(TryOnError::Protocol(format!(
                "server speaks protocol version {version:?}, expected {}",
                wire::VERSION
            )));
        }
        let descriptor: BackendDescriptor = field(&reply.metadata, "descriptor")?;
        descriptor.validate()?;
        Ok(IpcBackend {
            conn: Mutex::new(conn),
            child: child.map(Mutex::new),
            descriptor,
        })
    }

    fn call(&self, msg: &Message) -> Result<Message> {
        let mut conn = self.conn.lock().map_err(|_| TryOnError::Protocol("connection poisoned".into()))?;
        conn.call(msg)
    }
}

impl Drop for IpcBackend {
    fn drop(&mut self) {
        if let Some(child) = &self.child {
            if let Ok(mut child) = child.lock() {
                let _ = child.kill();
                let _ = child.wait();
            }
        }
    }
}

fn field<T: serde::de::DeserializeOwned>(meta: &Value, key: &str) -> Result<T> {
    let v = meta
        .get(key)
        .cloned()
        .ok_or_else(|| TryOnError::Protocol(format!("metadata lacks {key:?}")))?;
    serde_json::from_value(v).map_err(|e| TryOnError::Protocol(format!("bad {key:?} metadata: {e}")))
}

fn single_tensor(msg: &Message) -> Result<&WireTensor> {
    match msg.tensors.as_slice() {
        [t] => Ok(t),
        ts => Err(TryOnError::Protocol(format!("expected one tensor, got {}", ts.len()))),
    }
}

impl DenoiserBackend for IpcBackend {
    fn describe(&self) -> Result<BackendDescriptor> {
        Ok(self.descriptor.clone())
    }

    fn encode(&self, image: &ImageGrid) -> Result<Latent> {
        let reply = self.call(&Message::new(Opcode::Encode, vec![WireTensor::from_tensor3(image)?], json!({})))?;
        single_tensor(&reply)?.to_tensor3()
    }

    fn decode(&self, latent: &Latent) -> Result<ImageGrid> {
        let reply = self.call(&Message::new(Opcode::Decode, vec![WireTensor::from_tensor3(latent)?], json!({})))?;
        single_tensor(&reply)?.to_tensor3()
    }

    fn predict_noise(&self, request: &PredictRequest<'_>) -> Result<Prediction> {
        let reply = self.call(&encode_request(request)?)?;
        decode_prediction(&reply)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct HookMeta {
    layer: String,
    kind: String,
    beta: f64,
    heads: usize,
    head_dim: usize,
    reference_grid: (usize, usize),
    target_grid: (usize, usize),
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictMeta {
    timestep: usize,
    prompt: Option<String>,
    inpaint: bool,
    hooks: Vec<HookMeta>,
    capture_features: Vec<String>,
    capture_attention: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FeatureMeta {
    layer: String,
    stride: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct BundleMeta {
    layer: String,
    heads: usize,
    head_dim: usize,
    grid: (usize, usize),
}

#[derive(Debug, Serialize, Deserialize)]
struct StatsMeta {
    layer: String,
    stats: MeaStats,
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionMeta {
    features: Vec<FeatureMeta>,
    attention: Vec<BundleMeta>,
    mea_stats: Vec<StatsMeta>,
}

fn bundle_tensors(b: &AttentionBundle, out: &mut Vec<WireTensor>) -> Result<()> {
    let dims = vec![dim(b.heads())?, dim(b.tokens())?, dim(b.head_dim())?];
    for proj in [b.q(), b.k(), b.v()] {
        out.push(WireTensor::from_f64(dims.clone(), proj)?);
    }
    Ok(())
}

fn mask_tensor(m: &TokenMask) -> Result<WireTensor> {
    let (h, w) = m.grid();
    WireTensor::new(
        vec![dim(h)?, dim(w)?],
        m.flags().iter().map(|&f| if f { 1.0 } else { 0.0 }).collect(),
    )
}

struct Tensors<'a> {
    iter: std::slice::Iter<'a, WireTensor>,
}

impl<'a> Tensors<'a> {
    fn next(&mut self) -> Result<&'a WireTensor> {
        self.iter
            .next()
            .ok_or_else(|| TryOnError::Protocol("message has fewer tensors than its metadata declares".into()))
    }

    fn bundle(&mut self, heads: usize, head_dim: usize, grid: (usize, usize)) -> Result<AttentionBundle> {
        let q = self.next()?.to_f64();
        let k = self.next()?.to_f64();
        let v = self.next()?.to_f64();
        AttentionBundle::new(heads, head_dim, grid, q, k, v).map_err(|e| TryOnError::Protocol(e.to_string()))
    }

    fn mask(&mut self, grid: (usize, usize), origin: TokenOrigin) -> Result<TokenMask> {
        let t = self.next()?;
        TokenMask::new(grid, origin, t.data.iter().map(|&x| x > 0.5).collect())
            .map_err(|e| TryOnError::Protocol(e.to_string()))
    }

    fn finish(self) -> Result<()> {
        match self.iter.len() {
            0 => Ok(()),
            n => Err(TryOnError::Protocol(format!("{n} unexpected trailing tensors"))),
        }
    }
}

pub(crate) fn encode_request(req: &PredictRequest<'_>) -> Result<Message> {
    let mut tensors = vec![WireTensor::from_tensor3(req.latent)?];
    if let Some(ctx) = req.inpaint {
        tensors.push(WireTensor::from_tensor3(&ctx.mask)?);
        tensors.push(WireTensor::from_tensor3(&ctx.masked_latent)?);
    }
    let mut hooks = Vec::with_capacity(req.hooks.len());
    for hook in req.hooks {
        let AttentionOverride::Mea(mea) = &hook.hook else {
            return Err(TryOnError::capability(format!(
                "custom attention override on {} cannot be sent to a remote backend",
                hook.layer
            )));
        };
        bundle_tensors(&mea.reference, &mut tensors)?;
        tensors.push(mask_tensor(&mea.m_p)?);
        tensors.push(mask_tensor(&mea.m_g)?);
        hooks.push(HookMeta {
            layer: hook.layer.clone(),
            kind: "mea".into(),
            beta: mea.beta,
            heads: mea.reference.heads(),
            head_dim: mea.reference.head_dim(),
            reference_grid: mea.reference.grid(),
            target_grid: mea.m_p.grid(),
        });
    }
    let meta = PredictMeta {
        timestep: req.timestep,
        prompt: match req.conditioning {
            Conditioning::Unconditional => None,
            Conditioning::Prompt(p) => Some(p.clone()),
        },
        inpaint: req.inpaint.is_some(),
        hooks,
        capture_features: req.capture_features.to_vec(),
        capture_attention: req.capture_attention.to_vec(),
    };
    let meta = serde_json::to_value(meta).map_err(|e| TryOnError::Protocol(e.to_string()))?;
    Ok(Message::new(Opcode::PredictNoise, tensors, meta))
}

/// Owned form of a decoded [`PredictRequest`].
struct DecodedRequest {
    latent: Latent,
    timestep: usize,
    conditioning: Conditioning,
    inpaint: Option<InpaintContext>,
    hooks: Vec<LayerHook>,
    capture_features: Vec<String>,
    capture_attention: Vec<String>,
}

impl DecodedRequest {
    fn as_request(&self) -> PredictRequest<'_> {
        PredictRequest::new(&self.latent, self.timestep, &self.conditioning)
            .inpaint(self.inpaint.as_ref())
            .hooks(&self.hooks)
            .capture_features(&self.capture_features)
            .capture_attention(&self.capture_attention)
    }
}

fn decode_request(msg: &Message) -> Result<DecodedRequest> {
    let meta: PredictMeta =
        serde_json::from_value(msg.metadata.clone()).map_err(|e| TryOnError::Protocol(format!("bad request: {e}")))?;
    let mut ts = Tensors { iter: msg.tensors.iter() };
    let latent = ts.next()?.to_tensor3()?;
    let inpaint = if meta.inpaint {
        Some(InpaintContext {
            mask: ts.next()?.to_tensor3()?,
            masked_latent: ts.next()?.to_tensor3()?,
        })
    } else {
        None
    };
    let mut hooks = Vec::with_capacity(meta.hooks.len());
    for h in &meta.hooks {
        if h.kind != "mea" {
            return Err(TryOnError::capability(format!("unsupported hook kind {:?}", h.kind)));
        }
        let reference = ts.bundle(h.heads, h.head_dim, h.reference_grid)?;
        let m_p = ts.mask(h.target_grid, TokenOrigin::Target)?;
        let m_g = ts.mask(h.reference_grid, TokenOrigin::Reference)?;
        hooks.push(LayerHook {
            layer: h.layer.clone(),
            hook: AttentionOverride::Mea(MeaInjection {
                reference,
                m_p,
                m_g,
                beta: h.beta,
            }),
        });
    }
    ts.finish()?;
    Ok(DecodedRequest {
        latent,
        timestep: meta.timestep,
        conditioning: meta.prompt.map_or(Conditioning::Unconditional, Conditioning::Prompt),
        inpaint,
        hooks,
        capture_features: meta.capture_features,
        capture_attention: meta.capture_attention,
    })
}

fn encode_prediction(p: &Prediction) -> Result<Message> {
    let mut tensors = vec![WireTensor::from_tensor3(&p.eps)?];
    let mut features = Vec::new();
    for f in &p.features {
        tensors.push(WireTensor::from_tensor3(&f.values)?);
        features.push(FeatureMeta {
            layer: f.layer.clone(),
            stride: f.stride,
        });
    }
    let mut attention = Vec::new();
    for (layer, b) in &p.attention {
        bundle_tensors(b, &mut tensors)?;
        attention.push(BundleMeta {
            layer: layer.clone(),
            heads: b.heads(),
            head_dim: b.head_dim(),
            grid: b.grid(),
        });
    }
    let mea_stats = p
        .mea_stats
        .iter()
        .map(|(layer, stats)| StatsMeta {
            layer: layer.clone(),
            stats: *stats,
        })
        .collect();
    let meta = serde_json::to_value(PredictionMeta {
        features,
        attention,
        mea_stats,
    })
    .map_err(|e| TryOnError::Protocol(e.to_string()))?;
    Ok(Message::new(Opcode::PredictNoise, tensors, meta))
}

fn decode_prediction(msg: &Message) -> Result<Prediction> {
    let meta: PredictionMeta =
        serde_json::from_value(msg.metadata.clone()).map_err(|e| TryOnError::Protocol(format!("bad reply: {e}")))?;
    let mut ts = Tensors { iter: msg.tensors.iter() };
    let eps = ts.next()?.to_tensor3()?;
    let mut features = Vec::with_capacity(meta.features.len());
    for f in meta.features {
        features.push(CapturedFeatures {
            layer: f.layer,
            stride: f.stride,
            values: ts.next()?.to_tensor3()?,
        });
    }
    let mut attention = Vec::with_capacity(meta.attention.len());
    for b in meta.attention {
        let bundle = ts.bundle(b.heads, b.head_dim, b.grid)?;
        attention.push((b.layer, bundle));
    }
    ts.finish()?;
    Ok(Prediction {
        eps,
        features,
        attention,
        mea_stats: meta.mea_stats.into_iter().map(|s| (s.layer, s.stats)).collect(),
    })
}

fn handle(backend: &dyn DenoiserBackend, msg: &Message) -> Result<Message> {
    match msg.opcode {
        Opcode::Describe => {
            let descriptor = serde_json::to_value(backend.describe()?).map_err(|e| TryOnError::Protocol(e.to_string()))?;
            Ok(Message::new(
                Opcode::Describe,
                vec![],
                json!({ "version": wire::VERSION, "descriptor": descriptor }),
            ))
        }
        Opcode::Encode => {
            let image = single_tensor(msg)?.to_tensor3()?;
            Ok(Message::new(Opcode::Encode, vec![WireTensor::from_tensor3(&backend.encode(&image)?)?], json!({})))
        }
        Opcode::Decode => {
            let latent = single_tensor(msg)?.to_tensor3()?;
            Ok(Message::new(Opcode::Decode, vec![WireTensor::from_tensor3(&backend.decode(&latent)?)?], json!({})))
        }
        Opcode::PredictNoise => {
            let req = decode_request(msg)?;
            encode_prediction(&backend.predict_noise(&req.as_request())?)
        }
        Opcode::Error => Err(TryOnError::Protocol("clients may not send error frames".into())),
    }
}

fn error_reply(err: &TryOnError) -> Message {
    let code = match err.root() {
        TryOnError::Protocol(_) => codes::MALFORMED,
        _ => codes::BACKEND,
    };
    Message::error(code, err.to_string())
}

/// Answers requests on one connection until the peer closes it.
///
/// Bad frames and backend failures get an error reply and the connection
/// stays open; only an unreadable stream ends the loop with an error.
pub fn serve_connection(backend: &dyn DenoiserBackend, reader: &mut impl Read, writer: &mut impl Write) -> Result<()> {
    loop {
        let frame = match wire::read_frame(reader) {
            Ok(Some(f)) => f,
            Ok(None) => return Ok(()),
            Err(e) => {
                let _ = wire::write_message(writer, &error_reply(&e));
                return Err(e);
            }
        };
        let h = frame.header;
        let reply = if h.magic != wire::MAGIC {
            Message::error(codes::BAD_MAGIC, format!("bad magic {:?}", h.magic))
        } else if h.version != wire::VERSION {
            Message::error(codes::BAD_VERSION, format!("unsupported version {}", h.version))
        } else if Opcode::from_code(h.opcode).is_none() {
            Message::error(codes::UNKNOWN_OPCODE, format!("unknown opcode {}", h.opcode))
        } else {
            match frame.decode().and_then(|msg| handle(backend, &msg)) {
                Ok(reply) => reply,
                Err(e) => error_reply(&e),
            }
        };
        wire::write_message(writer, &reply)?;
    }
}

/// Serves each accepted TCP connection on its own thread.
pub fn serve_tcp(backend: &(dyn DenoiserBackend + Sync), listener: TcpListener) -> Result<()> {
    std::thread::scope(|scope| {
        for stream in listener.incoming() {
            let stream = stream?;
            scope.spawn(move || {
                let Ok(read_half) = stream.try_clone() else { return };
                let mut reader = BufReader::new(read_half);
                let mut writer = BufWriter::new(stream);
                let _ = serve_connection(backend, &mut reader, &mut writer);
            });
        }
        Ok(())
    })
}
