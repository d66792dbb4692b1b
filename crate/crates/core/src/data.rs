//! Stream ingestion and preparation: CSV loading, shingling of scalar series,
//! history-fit standardization, the historical/stream split, and a seeded
//! synthetic generator for drifting streams with labeled anomalies.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MeterError, Result};

static LABEL_READS: AtomicU64 = AtomicU64::new(0);

/// Number of times any `Instance::label` accessor has been called. Training
/// and inference paths must leave this untouched unless label injection is
/// explicitly enabled; the leakage test pins that down.
pub fn label_reads() -> u64 {
    LABEL_READS.load(Ordering::Relaxed)
}

/// One feature vector from the stream. The ground-truth label exists for
/// evaluation only and is read through an access-counting accessor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    features: Vec<f64>,
    label: Option<u8>,
    t: usize,
}

impl Instance {
    pub fn new(features: Vec<f64>, label: Option<u8>, t: usize) -> Self {
        Instance { features, label, t }
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn label(&self) -> Option<u8> {
        LABEL_READS.fetch_add(1, Ordering::Relaxed);
        self.label
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }
}

/// Loads a CSV stream: header mandatory, a column named `label` (holding 0/1)
/// is split off when present, everything else is a feature column. Row order
/// is stream order.
pub fn load_csv(path: &Path) -> Result<Vec<Instance>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| MeterError::Data(format!("{}: {e}", path.display())))?;
    parse_csv(&text)
}

pub fn parse_csv(text: &str) -> Result<Vec<Instance>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| MeterError::Data("empty CSV: header row required".into()))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    if columns.is_empty() || columns.iter().all(|c| c.is_empty()) {
        return Err(MeterError::Data("empty CSV header".into()));
    }
    let label_col = columns.iter().position(|c| *c == "label");
    let n_features = columns.len() - label_col.map_or(0, |_| 1);
    if n_features == 0 {
        return Err(MeterError::Data("CSV has no feature columns".into()));
    }

    let mut out = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let row = lineno + 1; // 1-based file line
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != columns.len() {
            return Err(MeterError::Parse {
                row,
                col: cells.len(),
                msg: format!("expected {} cells, got {}", columns.len(), cells.len()),
            });
        }
        let mut features = Vec::with_capacity(n_features);
        let mut label = None;
        for (col, cell) in cells.iter().enumerate() {
            let value: f64 = cell.parse().map_err(|_| MeterError::Parse {
                row,
                col: col + 1,
                msg: format!("not a number: {cell:?}"),
            })?;
            if Some(col) == label_col {
                label = Some(match value {
                    v if v == 0.0 => 0u8,
                    v if v == 1.0 => 1u8,
                    _ => {
                        return Err(MeterError::Parse {
                            row,
                            col: col + 1,
                            msg: format!("label must be 0 or 1, got {cell:?}"),
                        })
                    }
                });
            } else {
                if !value.is_finite() {
                    return Err(MeterError::Parse {
                        row,
                        col: col + 1,
                        msg: format!("non-finite value: {cell:?}"),
                    });
                }
                features.push(value);
            }
        }
        let t = out.len();
        out.push(Instance { features, label, t });
    }
    Ok(out)
}

/// Writes instances as CSV with `f0..f{d-1}` feature headers and a trailing
/// `label` column when any instance carries one.
pub fn write_csv(path: &Path, instances: &[Instance]) -> Result<()> {
    use std::io::Write;
    let with_label = instances.iter().any(|i| i.label.is_some());
    let d = instances.first().map_or(0, Instance::dim);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header: Vec<String> = (0..d).map(|i| format!("f{i}")).collect();
    if with_label {
        header.push("label".into());
    }
    writeln!(f, "{}", header.join(","))?;
    for inst in instances {
        let mut cells: Vec<String> = inst.features.iter().map(|v| format!("{v}")).collect();
        if with_label {
            cells.push(inst.label.unwrap_or(0).to_string());
        }
        writeln!(f, "{}", cells.join(","))?;
    }
    Ok(())
}

/// Leading ⌈h_r·N⌉ instances become the historical split, the rest stream.
pub fn split_history(instances: &[Instance], h_r: f64) -> Result<(&[Instance], &[Instance])> {
    if !(h_r > 0.0 && h_r < 1.0) {
        return Err(MeterError::Config(format!(
            "historical ratio must lie in (0, 1), got {h_r}"
        )));
    }
    let n = instances.len();
    let cut = ((h_r * n as f64).ceil() as usize).min(n);
    Ok(instances.split_at(cut))
}

/// Lifts a scalar series into overlapping width-sized windows; instance t
/// holds (s_t, …, s_{t+width−1}).
pub fn shingle(series: &[f64], width: usize) -> Result<Vec<Instance>> {
    if width == 0 {
        return Err(MeterError::Contract("shingle width must be ≥ 1".into()));
    }
    if series.len() < width {
        return Err(MeterError::Contract(format!(
            "series of length {} is shorter than shingle width {width}",
            series.len()
        )));
    }
    Ok(series
        .windows(width)
        .enumerate()
        .map(|(t, w)| Instance::new(w.to_vec(), None, t))
        .collect())
}

/// Per-feature affine map fit on the historical split only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Transform {
    pub fn fit(history: &[Instance]) -> Result<Transform> {
        if history.is_empty() {
            return Err(MeterError::Contract(
                "standardization needs a nonempty history".into(),
            ));
        }
        let d = history[0].dim();
        let n = history.len() as f64;
        let mut mean = vec![0.0; d];
        for inst in history {
            for (m, v) in mean.iter_mut().zip(&inst.features) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; d];
        for inst in history {
            for ((s, v), m) in var.iter_mut().zip(&inst.features).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd < 1e-12 {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(Transform { mean, std })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn apply_instance(&self, inst: &Instance) -> Instance {
        Instance {
            features: self.apply(&inst.features),
            label: inst.label,
            t: inst.t,
        }
    }
}

/// Fits on the history, applies to both splits.
pub fn standardize(
    history: &[Instance],
    stream: &[Instance],
) -> Result<(Vec<Instance>, Vec<Instance>, Transform)> {
    let transform = Transform::fit(history)?;
    let h = history.iter().map(|i| transform.apply_instance(i)).collect();
    let s = stream.iter().map(|i| transform.apply_instance(i)).collect();
    Ok((h, s, transform))
}

/// How a segment's concept comes in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DriftIn {
    /// Hard switch at the segment boundary.
    Abrupt,
    /// Probabilistic mixing with the previous concept over the given steps.
    Gradual(usize),
    /// Linear interpolation of the concept mean across the segment.
    Incremental,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    /// Concept id; repeating an id replays that concept (recurrence).
    pub generator: usize,
    pub len: usize,
    pub drift: DriftIn,
    pub anomaly_rate: f64,
}

/// Script for a synthetic drifting stream built from Gaussian mixtures.
/// Concept g centers `concept_sep·g` along the alternating-sign axis — the
/// same axis anomalies are displaced on by `anomaly_offset`, so drift walks
/// toward regions the static detector flags — and mixes a per-concept random
/// low-rank factor structure with isotropic noise, so drift can change
/// correlations as well as means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftScript {
    pub dim: usize,
    pub segments: Vec<Segment>,
    pub concept_sep: f64,
    pub anomaly_offset: f64,
    pub component_spread: f64,
    pub noise: f64,
    /// Per-generator covariance growth: concept g samples with noise scale
    /// `noise·(1 + noise_growth·g)`, so drift widens the cloud as well as
    /// shifting it. Zero keeps a pure mean shift.
    pub noise_growth: f64,
    /// Rank of each concept's factor structure; 0 defaults to half the dim.
    pub latent_rank: usize,
    /// How many factor directions change between concepts; 0 replaces the
    /// whole structure, smaller values give milder drift.
    pub drift_rank: usize,
}

impl DriftScript {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(MeterError::Config("script dim must be ≥ 1".into()));
        }
        if self.segments.is_empty() {
            return Err(MeterError::Config("script needs at least one segment".into()));
        }
        for (i, seg) in self.segments.iter().enumerate() {
            if seg.len == 0 {
                return Err(MeterError::Config(format!("segment {i} has zero length")));
            }
            if !(0.0..0.5).contains(&seg.anomaly_rate) {
                return Err(MeterError::Config(format!(
                    "segment {i}: anomaly rate must lie in [0, 0.5), got {}",
                    seg.anomaly_rate
                )));
            }
        }
        Ok(())
    }

    pub fn total_len(&self) -> usize {
        self.segments.iter().map(|s| s.len).sum()
    }

    /// Stream offsets where each segment after the first begins.
    pub fn onsets(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut acc = 0;
        for seg in &self.segments[..self.segments.len() - 1] {
            acc += seg.len;
            out.push(acc);
        }
        out
    }

    /// Parses the dotted-key script format:
    /// `dim=8`, `segment.0.generator=0`, `segment.0.drift=gradual:500`, …
    pub fn parse(text: &str) -> Result<DriftScript> {
        let mut dim = None;
        let mut concept_sep = 4.0;
        let mut anomaly_offset = 6.0;
        let mut component_spread = 1.0;
        let mut noise = 1.0;
        let mut noise_growth = 0.0;
        let mut latent_rank = 0usize;
        let mut drift_rank = 0usize;
        let mut segs: Vec<Option<Segment>> = Vec::new();

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                MeterError::Config(format!("script line {}: expected key=value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| MeterError::Config(format!("invalid {what}: {value}"));
            match key {
                "dim" => dim = Some(value.parse().map_err(|_| bad("dim"))?),
                "concept_sep" => concept_sep = value.parse().map_err(|_| bad("concept_sep"))?,
                "anomaly_offset" => {
                    anomaly_offset = value.parse().map_err(|_| bad("anomaly_offset"))?
                }
                "component_spread" => {
                    component_spread = value.parse().map_err(|_| bad("component_spread"))?
                }
                "noise" => noise = value.parse().map_err(|_| bad("noise"))?,
                "noise_growth" => {
                    noise_growth = value.parse().map_err(|_| bad("noise_growth"))?
                }
                "latent_rank" => {
                    latent_rank = value.parse().map_err(|_| bad("latent_rank"))?
                }
                "drift_rank" => {
                    drift_rank = value.parse().map_err(|_| bad("drift_rank"))?
                }
                _ => {
                    let rest = key.strip_prefix("segment.").ok_or_else(|| {
                        MeterError::Config(format!("unknown script key: {key}"))
                    })?;
                    let (idx, field) = rest.split_once('.').ok_or_else(|| {
                        MeterError::Config(format!("malformed segment key: {key}"))
                    })?;
                    let idx: usize = idx
                        .parse()
                        .map_err(|_| MeterError::Config(format!("bad segment index in {key}")))?;
                    if idx >= segs.len() {
                        segs.resize(idx + 1, None);
                    }
                    let seg = segs[idx].get_or_insert(Segment {
                        generator: idx,
                        len: 0,
                        drift: DriftIn::Abrupt,
                        anomaly_rate: 0.0,
                    });
                    match field {
                        "generator" => {
                            seg.generator = value.parse().map_err(|_| bad("generator"))?
                        }
                        "len" => seg.len = value.parse().map_err(|_| bad("len"))?,
                        "rate" => seg.anomaly_rate = value.parse().map_err(|_| bad("rate"))?,
                        "drift" => {
                            seg.drift = match value {
                                "abrupt" => DriftIn::Abrupt,
                                "incremental" => DriftIn::Incremental,
                                v => {
                                    let k = v.strip_prefix("gradual:").ok_or_else(|| {
                                        bad("drift (abrupt|gradual:<k>|incremental)")
                                    })?;
                                    DriftIn::Gradual(k.parse().map_err(|_| bad("gradual steps"))?)
                                }
                            }
                        }
                        other => {
                            return Err(MeterError::Config(format!(
                                "unknown segment field: {other}"
                            )))
                        }
                    }
                }
            }
        }

        let script = DriftScript {
            dim: dim.ok_or_else(|| MeterError::Config("script is missing dim=".into()))?,
            segments: segs
                .into_iter()
                .enumerate()
                .map(|(i, s)| {
                    s.ok_or_else(|| MeterError::Config(format!("segment {i} is missing")))
                })
                .collect::<Result<Vec<_>>>()?,
            concept_sep,
            anomaly_offset,
            component_spread,
            noise,
            noise_growth,
            latent_rank,
            drift_rank,
        };
        script.validate()?;
        Ok(script)
    }

    pub fn from_file(path: &Path) -> Result<DriftScript> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MeterError::Data(format!("{}: {e}", path.display())))?;
        DriftScript::parse(&text)
    }
}

fn gauss<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Concept parameters derived deterministically from (seed, generator id),
/// so a repeated generator id replays the same concept.
struct Concept {
    center: Vec<f64>,
    /// (dim × rank) factor loadings; columns span this concept's subspace.
    mixing: Vec<Vec<f64>>,
    noise_scale: f64,
}

fn alternating_axis(dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })
        .collect()
}

fn concept(script: &DriftScript, seed: u64, generator: usize) -> Concept {
    let axis = alternating_axis(script.dim);
    let center: Vec<f64> = axis
        .iter()
        .map(|a| script.concept_sep * generator as f64 * a)
        .collect();
    let rank = if script.latent_rank == 0 {
        script.dim.div_ceil(2)
    } else {
        script.latent_rank.min(script.dim)
    };
    let scale = script.component_spread / (rank as f64).sqrt();

    // shared base structure, then the generator re-draws its own factors
    let mut base_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x517cc1b727220a95);
    let mut mixing: Vec<Vec<f64>> = (0..script.dim)
        .map(|_| (0..rank).map(|_| scale * gauss(&mut base_rng)).collect())
        .collect();
    let replaced = if script.drift_rank == 0 || script.drift_rank >= rank {
        rank
    } else {
        script.drift_rank
    };
    if generator > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(
            seed ^ (0x9e3779b97f4a7c15u64.wrapping_mul(generator as u64 + 1)),
        );
        for l in 0..replaced {
            let col = (generator * replaced + l) % rank;
            for row in mixing.iter_mut() {
                row[col] = scale * gauss(&mut rng);
            }
        }
    }
    let noise_scale = script.noise * (1.0 + script.noise_growth * generator as f64);
    Concept {
        center,
        mixing,
        noise_scale,
    }
}

/// Generates the labeled stream described by the script. Sampling is fully
/// determined by the seed.
pub fn generate_drift_stream(script: &DriftScript, seed: u64) -> Result<Vec<Instance>> {
    script.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let anomaly_dir = alternating_axis(script.dim);

    let mut out = Vec::with_capacity(script.total_len());
    let mut t = 0usize;
    for (si, seg) in script.segments.iter().enumerate() {
        let cur = concept(script, seed, seg.generator);
        let prev = si
            .checked_sub(1)
            .map(|p| concept(script, seed, script.segments[p].generator));

        for i in 0..seg.len {
            // choose the active concept for this step
            // active concept: abrupt switches at the boundary, gradual mixes
            // samples of old and new, incremental interpolates the center
            let (center, mixing, noise_scale): (Vec<f64>, &Vec<Vec<f64>>, f64) =
                match (seg.drift, &prev) {
                    (DriftIn::Abrupt, _) | (_, None) => {
                        (cur.center.clone(), &cur.mixing, cur.noise_scale)
                    }
                    (DriftIn::Gradual(k), Some(p)) => {
                        let take_new = i >= k || {
                            let p_new = (i + 1) as f64 / (k + 1) as f64;
                            rng.gen_range(0.0..1.0) < p_new
                        };
                        if take_new {
                            (cur.center.clone(), &cur.mixing, cur.noise_scale)
                        } else {
                            (p.center.clone(), &p.mixing, p.noise_scale)
                        }
                    }
                    (DriftIn::Incremental, Some(p)) => {
                        let frac = (i + 1) as f64 / seg.len as f64;
                        let c = p
                            .center
                            .iter()
                            .zip(&cur.center)
                            .map(|(a, b)| a + frac * (b - a))
                            .collect();
                        let ns = p.noise_scale + frac * (cur.noise_scale - p.noise_scale);
                        (c, &cur.mixing, ns)
                    }
                };

            let rank = mixing.first().map_or(0, |row| row.len());
            let factors: Vec<f64> = (0..rank).map(|_| gauss(&mut rng)).collect();
            let is_anomaly = rng.gen_range(0.0..1.0) < seg.anomaly_rate;
            let features: Vec<f64> = (0..script.dim)
                .map(|j| {
                    let structured: f64 = mixing[j]
                        .iter()
                        .zip(&factors)
                        .map(|(m, z)| m * z)
                        .sum();
                    let mut v = center[j] + structured + noise_scale * gauss(&mut rng);
                    if is_anomaly {
                        v += script.anomaly_offset * anomaly_dir[j];
                    }
                    v
                })
                .collect();
            out.push(Instance::new(features, Some(u8::from(is_anomaly)), t));
            t += 1;
        }
    }
    Ok(out)
}
