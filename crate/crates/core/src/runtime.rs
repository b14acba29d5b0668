//! Online inference: a session consumes one frame at a time, carries the
//! episodic memory between calls and can export per-step attention maps.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::embed::MultiViewFrame;
use crate::encoder::{extract_attention, AttentionExtract, Cemformer, MemoryMode, MemoryState, Prediction};
use crate::error::{Error, Result};
use crate::kernel::Tape;

#[derive(Clone, Debug)]
pub struct InferenceSession {
    model: Arc<Cemformer>,
    memory: MemoryState,
    history: Vec<Prediction>,
    record_attention: bool,
    attention: Vec<AttentionExtract>,
    poisoned: Option<String>,
}

impl InferenceSession {
    pub fn new(model: Arc<Cemformer>, record_attention: bool) -> Self {
        let memory = model.init_memory();
        InferenceSession {
            model,
            memory,
            history: Vec::new(),
            record_attention,
            attention: Vec::new(),
            poisoned: None,
        }
    }

    pub fn model(&self) -> &Cemformer {
        &self.model
    }

    /// Frames consumed since the last reset.
    pub fn t(&self) -> usize {
        self.memory.t
    }

    pub fn memory(&self) -> &MemoryState {
        &self.memory
    }

    pub fn history(&self) -> &[Prediction] {
        &self.history
    }

    /// Recorded attention, one entry per fed frame.
    pub fn attention(&self) -> &[AttentionExtract] {
        &self.attention
    }

    pub fn is_poisoned(&self) -> bool {
        self.poisoned.is_some()
    }

    /// Runs one timestep on `frame` and advances the session.
    pub fn feed(&mut self, frame: &MultiViewFrame) -> Result<Prediction> {
        if let Some(why) = &self.poisoned {
            return Err(Error::State(format!("session is poisoned after a numeric failure: {why}")));
        }
        self.model.check_frame(frame)?;
        match self.run_step(frame) {
            Ok(out) => Ok(out),
            Err(e) => {
                if e.is_numeric() {
                    self.poisoned = Some(e.to_string());
                }
                Err(e)
            }
        }
    }

    fn run_step(&mut self, frame: &MultiViewFrame) -> Result<Prediction> {
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape, |_| false);
        let memory = match self.model.config().memory_mode {
            MemoryMode::Carry if self.memory.t > 0 => tape.constant(self.memory.embeddings.clone()),
            _ => bound.memory,
        };
        let out = self
            .model
            .step(&mut tape, &bound, memory, frame, self.record_attention)
            .map_err(|e| e.within(&format!("step {}", self.memory.t + 1)))?;
        if self.record_attention {
            self.attention.push(extract_attention(&tape, &out, self.model.config())?);
        }
        let pred = Prediction::from_probs(tape.value(out.probs).data().to_vec());
        self.memory = MemoryState {
            embeddings: tape.value(out.memory_out).clone(),
            t: self.memory.t + 1,
        };
        self.history.push(pred.clone());
        Ok(pred)
    }

    /// Restores the learned initial memory and clears history, recorded
    /// attention and any poisoned state.
    pub fn reset(&mut self) {
        self.memory = self.model.init_memory();
        self.history.clear();
        self.attention.clear();
        self.poisoned = None;
    }
}

/// `attn_t<t>_l<layer>_v<view>.pgm` and `.csv` per recorded step, block and
/// view, plus `attn_t<t>_l<layer>_rows.csv` with the head-averaged query
/// rows the grids were pooled from (each row sums to one).
pub fn export_attention(session: &InferenceSession, dir: &Path) -> Result<Vec<PathBuf>> {
    if !session.record_attention {
        return Err(Error::State("attention recording was not enabled".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut write = |name: String, bytes: Vec<u8>| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(())
    };
    for (i, extract) in session.attention().iter().enumerate() {
        let t = i + 1;
        for (l, layer) in extract.layers.iter().enumerate() {
            for (v, grid) in layer.view_grids.iter().enumerate() {
                let (h, w) = (grid.rows(), grid.cols());
                write(format!("attn_t{t}_l{l}_v{v}.pgm"), pgm(grid.data(), h, w))?;
                write(format!("attn_t{t}_l{l}_v{v}.csv"), csv(grid.data(), w).into_bytes())?;
            }
            let q = &layer.query_rows;
            write(format!("attn_t{t}_l{l}_rows.csv"), csv(q.data(), q.cols()).into_bytes())?;
        }
    }
    Ok(written)
}

/// Binary greyscale raster, max-normalised to 255.
fn pgm(values: &[f64], h: usize, w: usize) -> Vec<u8> {
    let max = values.iter().copied().fold(0.0, f64::max);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if max > 0.0 {
            (v / max * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

fn csv(values: &[f64], cols: usize) -> String {
    let mut s = String::new();
    for row in values.chunks(cols.max(1)) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        s += &cells.join(",");
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct FpsReport {
    pub frames: usize,
    pub seconds: f64,
    pub fps: f64,
    pub mean_latency_ms: f64,
    pub p95_latency_ms: f64,
}

impl FpsReport {
    pub fn from_latencies(latencies: &[Duration]) -> Result<Self> {
        if latencies.is_empty() {
            return Err(Error::contract("fps report needs at least one frame"));
        }
        let mut ms: Vec<f64> = latencies.iter().map(|d| d.as_secs_f64() * 1e3).collect();
        let seconds = ms.iter().sum::<f64>() / 1e3;
        ms.sort_by(f64::total_cmp);
        let rank = ((0.95 * ms.len() as f64).ceil() as usize).clamp(1, ms.len());
        Ok(FpsReport {
            frames: ms.len(),
            seconds,
            fps: ms.len() as f64 / seconds.max(f64::MIN_POSITIVE),
            mean_latency_ms: ms.iter().sum::<f64>() / ms.len() as f64,
            p95_latency_ms: ms[rank - 1],
        })
    }
}

impl std::fmt::Display for FpsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "frames {}\tseconds {:.4}\tfps {:.2}\tmean_ms {:.3}\tp95_ms {:.3}",
            self.frames, self.seconds, self.fps, self.mean_latency_ms, self.p95_latency_ms
        )
    }
}

/// Streams `n` frames through a fresh session, cycling over `frames` and
/// resetting whenever the cycle restarts.
pub fn fps_report(model: Arc<Cemformer>, frames: &[MultiViewFrame], n: usize) -> Result<FpsReport> {
    if frames.is_empty() || n == 0 {
        return Err(Error::contract("fps report needs at least one frame"));
    }
    let mut session = InferenceSession::new(model, false);
    let mut latencies = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 && i % frames.len() == 0 {
            session.reset();
        }
        let start = Instant::now();
        session.feed(&frames[i % frames.len()])?;
        latencies.push(start.elapsed());
    }
    FpsReport::from_latencies(&latencies)
}
