//! Memory-window selection: the four memory modes, timepoint-of-interest
//! positional ids, and UNKNOWN-token augmentation.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scene::SceneGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemoryMode {
    All,
    Short,
    Long,
    LongShort,
}

impl std::str::FromStr for MemoryMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "all" => Ok(MemoryMode::All),
            "short" => Ok(MemoryMode::Short),
            "long" => Ok(MemoryMode::Long),
            "longshort" => Ok(MemoryMode::LongShort),
            other => Err(format!("unknown memory mode '{other}'")),
        }
    }
}

/// Where the "every S-th timepoint" stride of Long memory is anchored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LongAnchor {
    /// Indices T-S, T-2S, ... (stationary relative to the query).
    #[default]
    Toi,
    /// Indices 0, S, 2S, ... < T.
    Start,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryConfig {
    pub mode: MemoryMode,
    /// Stride S: window size of Short, stride of Long. Must be >= 1.
    pub stride: usize,
    #[serde(default)]
    pub long_anchor: LongAnchor,
}

impl MemoryConfig {
    pub fn new(mode: MemoryMode, stride: usize) -> Self {
        assert!(stride >= 1, "stride S must be >= 1, got {stride}");
        MemoryConfig {
            mode,
            stride,
            long_anchor: LongAnchor::Toi,
        }
    }
}

/// Memory payload: a scene graph from the past or the UNKNOWN placeholder.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Graph(SceneGraph),
    Unknown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowEntry {
    pub t: usize,
    pub payload: Payload,
    /// Distance T - t to the timepoint of interest; always positive.
    pub toi_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryWindow {
    pub toi: usize,
    pub entries: Vec<WindowEntry>,
}

/// Selects which prior timepoints enter the memory window for timepoint T.
pub fn select_memory_indices(cfg: &MemoryConfig, t: usize) -> Vec<usize> {
    assert!(cfg.stride >= 1, "stride S must be >= 1");
    let s = cfg.stride;
    let mut indices: Vec<usize> = match cfg.mode {
        MemoryMode::All => (0..t).collect(),
        MemoryMode::Short => (t.saturating_sub(s)..t).collect(),
        MemoryMode::Long => long_indices(cfg, t),
        MemoryMode::LongShort => {
            let mut set: std::collections::BTreeSet<usize> =
                (t.saturating_sub(s)..t).collect();
            set.extend(long_indices(cfg, t));
            set.into_iter().collect()
        }
    };
    indices.sort_unstable();
    indices
}

fn long_indices(cfg: &MemoryConfig, t: usize) -> Vec<usize> {
    let s = cfg.stride;
    match cfg.long_anchor {
        LongAnchor::Toi => {
            let mut v: Vec<usize> = (1..)
                .map(|k| t as i64 - (k * s) as i64)
                .take_while(|&i| i >= 0)
                .map(|i| i as usize)
                .collect();
            v.reverse();
            v
        }
        LongAnchor::Start => (0..t).step_by(s).collect(),
    }
}

/// Builds the window for timepoint `t` from a store of prior graphs.
pub fn build_window(
    graphs: &BTreeMap<usize, SceneGraph>,
    cfg: &MemoryConfig,
    t: usize,
) -> Result<MemoryWindow, String> {
    let mut entries = Vec::new();
    for idx in select_memory_indices(cfg, t) {
        let graph = graphs
            .get(&idx)
            .ok_or_else(|| format!("missing graph at selected index {idx}"))?;
        entries.push(WindowEntry {
            t: idx,
            payload: Payload::Graph(graph.clone()),
            toi_id: t - idx,
        });
    }
    Ok(MemoryWindow { toi: t, entries })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    /// Probability that a training sample gets augmented at all.
    pub p_apply: f64,
    /// Fraction of the short segment replaced when it is chosen.
    pub short_fraction: f64,
    /// Fraction of the long segment replaced when it is chosen.
    pub long_fraction: f64,
    /// ToI distance separating short-term from long-term entries.
    pub boundary: usize,
    /// Replace a contiguous block instead of a uniform subset.
    #[serde(default)]
    pub contiguous: bool,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            p_apply: 0.5,
            short_fraction: 0.5,
            long_fraction: 0.5,
            boundary: 5,
            contiguous: false,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("p_apply", self.p_apply),
            ("short_fraction", self.short_fraction),
            ("long_fraction", self.long_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} must be in [0,1], got {v}"));
            }
        }
        if self.boundary < 1 {
            return Err("boundary must be >= 1".into());
        }
        Ok(())
    }
}

/// Training-time augmentation: with probability `p_apply` replaces part of
/// either the short-term or the long-term segment with UNKNOWN payloads.
/// Timepoints, ordering and toi_ids are untouched.
pub fn augment_window<R: Rng>(
    mut window: MemoryWindow,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> MemoryWindow {
    if window.entries.is_empty() || rng.gen::<f64>() >= cfg.p_apply {
        return window;
    }
    let pick_short = rng.gen::<bool>();
    let (segment, fraction): (Vec<usize>, f64) = if pick_short {
        (
            (0..window.entries.len())
                .filter(|&i| window.entries[i].toi_id <= cfg.boundary)
                .collect(),
            cfg.short_fraction,
        )
    } else {
        (
            (0..window.entries.len())
                .filter(|&i| window.entries[i].toi_id > cfg.boundary)
                .collect(),
            cfg.long_fraction,
        )
    };
    if segment.is_empty() {
        return window;
    }
    let count = ((segment.len() as f64) * fraction).round() as usize;
    let count = count.min(segment.len());
    if count == 0 {
        return window;
    }
    let chosen: Vec<usize> = if cfg.contiguous {
        let start = rng.gen_range(0..=segment.len() - count);
        segment[start..start + count].to_vec()
    } else {
        // partial Fisher-Yates over segment positions
        let mut pool = segment.clone();
        for i in 0..count {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
        }
        pool.truncate(count);
        pool
    };
    for i in chosen {
        window.entries[i].payload = Payload::Unknown;
    }
    window
}
