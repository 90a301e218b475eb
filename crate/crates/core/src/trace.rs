//! Frame-size traces: parsing, statistics, and seeded synthesis.
//!
//! A [`FrameTrace`] is the ordered list of encoded frame sizes for one video
//! stream, together with its frame rate. Everything downstream (the smoother,
//! the metrics) consumes traces through this type, so the parser normalizes
//! all supported inputs into the same shape.

use rand::rngs::StdRng;
use rand::SeedableRng;
use rand_distr::{Distribution, LogNormal};

use crate::{Error, Result};

/// 16-frame stand-in for a G16B3 group of pictures, shared by tests across
/// the crate.
#[cfg(test)]
pub(crate) const GOP_16: &str = "IBBBPBBBBPBBBBPB";

/// Frame type tag carried through from the source trace.
///
/// Metadata only: the smoother never branches on it. It exists so synthetic
/// traces can assign per-kind sizes and so parsed traces stay inspectable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameKind {
    I,
    P,
    B,
    Unknown,
}

impl FrameKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FrameKind::I => "I",
            FrameKind::P => "P",
            FrameKind::B => "B",
            FrameKind::Unknown => "U",
        }
    }

    /// Lenient: any token that is not an I/P/B marker maps to `Unknown`.
    pub fn parse(s: &str) -> FrameKind {
        match s.trim() {
            "I" | "i" => FrameKind::I,
            "P" | "p" => FrameKind::P,
            "B" | "b" => FrameKind::B,
            _ => FrameKind::Unknown,
        }
    }
}

/// One encoded video frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    /// Position in the trace, 0-based and dense.
    pub index: u64,
    pub kind: FrameKind,
    pub size_bytes: u64,
}

/// An ordered, validated frame-size trace.
///
/// Invariants (enforced at construction): at least one frame, indices are
/// exactly `0..n`, and `fps > 0`. Frame `k` arrives at `k / fps` seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTrace {
    frames: Vec<Frame>,
    fps: f64,
    name: String,
}

impl FrameTrace {
    pub fn new(frames: Vec<Frame>, fps: f64, name: impl Into<String>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::invalid("trace has no frames"));
        }
        if !(fps > 0.0) || !fps.is_finite() {
            return Err(Error::invalid(format!("fps must be positive, got {fps}")));
        }
        for (k, f) in frames.iter().enumerate() {
            if f.index != k as u64 {
                return Err(Error::invalid(format!(
                    "frame indices must be dense from 0: position {k} has index {}",
                    f.index
                )));
            }
        }
        Ok(FrameTrace {
            frames,
            fps,
            name: name.into(),
        })
    }

    /// Convenience constructor: sizes only, kinds unknown.
    pub fn from_sizes(sizes: &[u64], fps: f64, name: impl Into<String>) -> Result<Self> {
        let frames = sizes
            .iter()
            .enumerate()
            .map(|(k, &s)| Frame {
                index: k as u64,
                kind: FrameKind::Unknown,
                size_bytes: s,
            })
            .collect();
        FrameTrace::new(frames, fps, name)
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Frame period in seconds, computed as exactly `1 / fps` rather than a
    /// rounded constant so long runs do not accumulate clock drift.
    pub fn tf(&self) -> f64 {
        1.0 / self.fps
    }

    /// Arrival time of frame `k` on the stream clock.
    pub fn frame_time(&self, k: usize) -> f64 {
        k as f64 / self.fps
    }

    pub fn total_bytes(&self) -> u64 {
        self.frames.iter().map(|f| f.size_bytes).sum()
    }

    pub fn max_bytes(&self) -> u64 {
        self.frames.iter().map(|f| f.size_bytes).max().unwrap_or(0)
    }
}

/// Summary rates of a trace.
///
/// `cer` is the mean encoding bit rate (total bits over stream duration),
/// `per` the peak rate (largest frame, sustained for one frame period).
/// Both are in bits/second. `per >= cer` always, with equality exactly when
/// every frame has the same size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceStats {
    pub cer: f64,
    pub per: f64,
    pub n_frames: usize,
    pub mean_frame_bytes: f64,
    pub fps: f64,
}

/// Computes [`TraceStats`].
///
/// `cer = mean_frame_bytes * 8 * fps`, which equals total bits divided by the
/// stream duration `n / fps`. `per = max_frame_bytes * 8 * fps`. The
/// mean-based form keeps `cer == per` bit-exact for constant traces.
pub fn trace_stats(t: &FrameTrace) -> TraceStats {
    let n = t.len();
    let mean_frame_bytes = t.total_bytes() as f64 / n as f64;
    TraceStats {
        cer: mean_frame_bytes * 8.0 * t.fps(),
        per: t.max_bytes() as f64 * 8.0 * t.fps(),
        n_frames: n,
        mean_frame_bytes,
        fps: t.fps(),
    }
}

/// Input layouts accepted by [`parse_trace`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceFormat {
    /// `index,kind,size_bytes` with a mandatory header line. Optional
    /// `#fps=` and `#name=` directives before the header.
    Csv,
    /// Whitespace-separated columns. A `#cols index=<i> size=<j>
    /// unit={bits|bytes}` directive must precede the data; other `#` lines
    /// are ignored. Frames are re-indexed densely from 0; the file's own
    /// index column only has to be strictly increasing.
    Asu,
}

/// Parses a trace from text. Line numbers in errors are 1-based.
pub fn parse_trace(text: &str, format: TraceFormat) -> Result<FrameTrace> {
    match format {
        TraceFormat::Csv => parse_csv(text),
        TraceFormat::Asu => parse_asu(text),
    }
}

const CSV_HEADER: &str = "index,kind,size_bytes";

fn parse_size_field(field: &str, lno: usize) -> Result<u64> {
    let field = field.trim();
    if field.starts_with('-') {
        return Err(Error::invalid(format!(
            "negative frame size {field:?} at line {lno}"
        )));
    }
    field
        .parse::<u64>()
        .map_err(|e| Error::parse(lno, format!("bad size field {field:?}: {e}")))
}

fn parse_csv(text: &str) -> Result<FrameTrace> {
    let mut fps = 30.0;
    let mut name = String::new();
    let mut header_seen = false;
    let mut frames: Vec<Frame> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let lno = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(v) = rest.strip_prefix("fps=") {
                fps = v
                    .trim()
                    .parse()
                    .map_err(|e| Error::parse(lno, format!("bad fps directive: {e}")))?;
            } else if let Some(v) = rest.strip_prefix("name=") {
                name = v.to_string();
            }
            continue;
        }
        if !header_seen {
            if line.trim() != CSV_HEADER {
                return Err(Error::parse(
                    lno,
                    format!("expected header {CSV_HEADER:?}, got {line:?}"),
                ));
            }
            header_seen = true;
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::parse(
                lno,
                format!("expected 3 comma-separated fields, got {}", parts.len()),
            ));
        }
        let index: u64 = parts[0]
            .trim()
            .parse()
            .map_err(|e| Error::parse(lno, format!("bad index field {:?}: {e}", parts[0])))?;
        if index != frames.len() as u64 {
            return Err(Error::parse(
                lno,
                format!("index {index} out of order (expected {})", frames.len()),
            ));
        }
        let kind = FrameKind::parse(parts[1]);
        let size_bytes = parse_size_field(parts[2], lno)?;
        frames.push(Frame {
            index,
            kind,
            size_bytes,
        });
    }

    if frames.is_empty() {
        return Err(Error::parse(0, "empty input: no frame records"));
    }
    FrameTrace::new(frames, fps, name)
}

struct AsuCols {
    index: usize,
    size: usize,
    bits: bool,
}

fn parse_asu_directive(rest: &str, lno: usize) -> Result<AsuCols> {
    let mut index = None;
    let mut size = None;
    let mut bits = None;
    for tok in rest.split_whitespace().skip(1) {
        let (key, val) = tok
            .split_once('=')
            .ok_or_else(|| Error::parse(lno, format!("bad #cols token {tok:?}")))?;
        match key {
            "index" => {
                index = Some(val.parse::<usize>().map_err(|e| {
                    Error::parse(lno, format!("bad #cols index value {val:?}: {e}"))
                })?)
            }
            "size" => {
                size = Some(val.parse::<usize>().map_err(|e| {
                    Error::parse(lno, format!("bad #cols size value {val:?}: {e}"))
                })?)
            }
            "unit" => {
                bits = Some(match val {
                    "bits" => true,
                    "bytes" => false,
                    _ => {
                        return Err(Error::parse(
                            lno,
                            format!("bad #cols unit {val:?} (want bits or bytes)"),
                        ))
                    }
                })
            }
            _ => return Err(Error::parse(lno, format!("unknown #cols key {key:?}"))),
        }
    }
    match (index, size, bits) {
        (Some(index), Some(size), Some(bits)) => Ok(AsuCols { index, size, bits }),
        _ => Err(Error::parse(
            lno,
            "#cols directive needs index=, size= and unit=",
        )),
    }
}

fn parse_asu(text: &str) -> Result<FrameTrace> {
    let mut fps = 30.0;
    let mut name = String::new();
    let mut cols: Option<AsuCols> = None;
    let mut frames: Vec<Frame> = Vec::new();
    let mut prev_file_index: Option<u64> = None;

    for (i, raw) in text.lines().enumerate() {
        let lno = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let rest = rest.trim_start();
            if rest.starts_with("cols") {
                cols = Some(parse_asu_directive(rest, lno)?);
            } else if let Some(v) = rest.strip_prefix("fps=") {
                fps = v
                    .trim()
                    .parse()
                    .map_err(|e| Error::parse(lno, format!("bad fps directive: {e}")))?;
            } else if let Some(v) = rest.strip_prefix("name=") {
                name = v.to_string();
            }
            continue;
        }
        let cols = cols
            .as_ref()
            .ok_or_else(|| Error::parse(lno, "data before #cols directive"))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        let need = cols.index.max(cols.size) + 1;
        if fields.len() < need {
            return Err(Error::parse(
                lno,
                format!("expected at least {need} columns, got {}", fields.len()),
            ));
        }
        let file_index: u64 = fields[cols.index].parse().map_err(|e| {
            Error::parse(lno, format!("bad index field {:?}: {e}", fields[cols.index]))
        })?;
        if let Some(prev) = prev_file_index {
            if file_index <= prev {
                return Err(Error::parse(
                    lno,
                    format!("file index {file_index} not increasing (previous {prev})"),
                ));
            }
        }
        prev_file_index = Some(file_index);
        let size_field = fields[cols.size];
        if size_field.starts_with('-') {
            return Err(Error::invalid(format!(
                "negative frame size {size_field:?} at line {lno}"
            )));
        }
        let raw_size: f64 = size_field
            .parse()
            .map_err(|e| Error::parse(lno, format!("bad size field {size_field:?}: {e}")))?;
        let size_bytes = if cols.bits {
            (raw_size / 8.0).round()
        } else {
            raw_size.round()
        } as u64;
        frames.push(Frame {
            index: frames.len() as u64,
            kind: FrameKind::Unknown,
            size_bytes,
        });
    }

    if frames.is_empty() {
        return Err(Error::parse(0, "empty input: no frame records"));
    }
    FrameTrace::new(frames, fps, name)
}

/// Serializes a trace in the CSV layout, including the `#fps=` and `#name=`
/// directives, so `parse_trace(to_csv(t), Csv) == t`.
pub fn to_csv(t: &FrameTrace) -> String {
    let mut out = String::new();
    out.push_str(&format!("#fps={}\n", t.fps()));
    out.push_str(&format!("#name={}\n", t.name()));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for f in t.frames() {
        out.push_str(&format!("{},{},{}\n", f.index, f.kind.as_str(), f.size_bytes));
    }
    out
}

/// Per-kind values for synthesis, in (I, P, B) order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KindParams {
    pub i: f64,
    pub p: f64,
    pub b: f64,
}

impl KindParams {
    pub fn uniform(v: f64) -> Self {
        KindParams { i: v, p: v, b: v }
    }

    fn get(&self, kind: FrameKind) -> f64 {
        match kind {
            FrameKind::I => self.i,
            FrameKind::P => self.p,
            FrameKind::B => self.b,
            FrameKind::Unknown => unreachable!("synthesis patterns only use I/P/B"),
        }
    }
}

/// Generates a GOP-patterned trace with lognormal frame sizes.
///
/// Frame `k` takes its kind from `pattern[k mod len]`. For each kind the
/// lognormal is parameterized so its mean is `mean_sizes` and its relative
/// standard deviation is `jitter`; sizes are rounded and clamped to >= 1
/// byte. Zero jitter degenerates to the constant mean. Deterministic for a
/// fixed seed.
pub fn synth_trace(
    pattern: &str,
    mean_sizes: KindParams,
    jitter: KindParams,
    n_frames: usize,
    fps: f64,
    seed: u64,
    name: impl Into<String>,
) -> Result<FrameTrace> {
    if pattern.is_empty() {
        return Err(Error::invalid("GOP pattern must be nonempty"));
    }
    let kinds: Vec<FrameKind> = pattern
        .chars()
        .map(|c| match c {
            'I' | 'i' => Ok(FrameKind::I),
            'P' | 'p' => Ok(FrameKind::P),
            'B' | 'b' => Ok(FrameKind::B),
            _ => Err(Error::invalid(format!(
                "GOP pattern may only contain I, P or B, got {c:?}"
            ))),
        })
        .collect::<Result<_>>()?;
    if n_frames == 0 {
        return Err(Error::invalid("n_frames must be positive"));
    }
    for (label, v) in [("I", mean_sizes.i), ("P", mean_sizes.p), ("B", mean_sizes.b)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::invalid(format!("mean size for {label} must be positive")));
        }
    }
    for (label, v) in [("I", jitter.i), ("P", jitter.p), ("B", jitter.b)] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::invalid(format!("jitter for {label} must be >= 0")));
        }
    }

    let mut rng = StdRng::seed_from_u64(seed);
    let mut frames = Vec::with_capacity(n_frames);
    for k in 0..n_frames {
        let kind = kinds[k % kinds.len()];
        let mean = mean_sizes.get(kind);
        let j = jitter.get(kind);
        let size = if j == 0.0 {
            mean.round().max(1.0)
        } else {
            // Lognormal with mean m and relative stddev j:
            // sigma^2 = ln(1 + j^2), mu = ln(m) - sigma^2 / 2.
            let sigma2 = (1.0 + j * j).ln();
            let dist = LogNormal::new(mean.ln() - sigma2 / 2.0, sigma2.sqrt())
                .map_err(|e| Error::invalid(format!("bad lognormal parameters: {e}")))?;
            dist.sample(&mut rng).round().max(1.0)
        };
        frames.push(Frame {
            index: k as u64,
            kind,
            size_bytes: size as u64,
        });
    }
    FrameTrace::new(frames, fps, name)
}
