//! Posterior draws container and its on-disk formats.
//!
//! Binary layout (all integers and floats little-endian):
//!
//! ```text
//! offset  size  field
//!      0     4  magic "NSUM"
//!      4     4  version (u32, currently 1)
//!      8     4  chains (u32)
//!     12     4  kept draws per chain (u32)
//!     16     4  dim (u32)
//!     20     4  groups K (u32, 0 when the draws carry no model layout)
//!     24     4  municipalities M (u32)
//!     28     4  respondents R (u32)
//!     32     8  seed (u64)
//!     40     4  length L of the JSON sampler config (u32)
//!     44     L  sampler config, UTF-8 JSON
//!   44+L  8·C·D draws (f64), chain-major, then iteration, then parameter
//!      …  8·C     warmup divergences per chain (u64)
//!      …  8·5·C·N per-iteration stats (f64): accept_stat, step_size,
//!                 n_leapfrog, divergent (0/1), log_density
//! ```
//!
//! where `N` is kept draws per chain and `D = N · dim`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::SamplerConfig;
use crate::model::Layout;

const MAGIC: &[u8; 4] = b"NSUM";
const VERSION: u32 = 1;

fn read_u32<R: Read>(r: &mut R) -> Result<u32, DrawsIoError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[derive(Debug, Error)]
pub enum DrawsIoError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("bad draws file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterStats {
    pub accept_stat: f64,
    pub step_size: f64,
    pub n_leapfrog: u32,
    pub divergent: bool,
    pub log_density: f64,
}

/// Kept draws of every chain, on the constrained scale.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    names: Vec<String>,
    layout: Option<Layout>,
    config: SamplerConfig,
    chains: usize,
    kept: usize,
    dim: usize,
    values: Vec<f64>,
    stats: Vec<IterStats>,
    warmup_divergences: Vec<usize>,
}

impl PosteriorDraws {
    pub fn new(
        names: Vec<String>,
        layout: Option<Layout>,
        config: SamplerConfig,
        values: Vec<f64>,
        stats: Vec<IterStats>,
        warmup_divergences: Vec<usize>,
    ) -> Self {
        let dim = names.len();
        let chains = config.chains;
        let kept = config.kept();
        assert_eq!(values.len(), chains * kept * dim, "draws shape mismatch");
        assert_eq!(stats.len(), chains * kept, "stats shape mismatch");
        Self {
            names,
            layout,
            config,
            chains,
            kept,
            dim,
            values,
            stats,
            warmup_divergences,
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
    pub fn layout(&self) -> Option<Layout> {
        self.layout
    }
    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }
    pub fn chains(&self) -> usize {
        self.chains
    }
    pub fn kept(&self) -> usize {
        self.kept
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn n_draws(&self) -> usize {
        self.chains * self.kept
    }
    pub fn stats(&self) -> &[IterStats] {
        &self.stats
    }
    pub fn warmup_divergences(&self) -> &[usize] {
        &self.warmup_divergences
    }

    pub fn draw(&self, chain: usize, iter: usize) -> &[f64] {
        let start = (chain * self.kept + iter) * self.dim;
        &self.values[start..start + self.dim]
    }

    /// All draws pooled in chain order.
    pub fn iter_draws(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.dim.max(1))
    }

    /// Parameter `j` split by chain.
    pub fn param_chains(&self, j: usize) -> Vec<Vec<f64>> {
        (0..self.chains)
            .map(|c| (0..self.kept).map(|t| self.draw(c, t)[j]).collect())
            .collect()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn divergences(&self) -> usize {
        self.stats.iter().filter(|s| s.divergent).count()
    }

    pub fn mean_accept_stat(&self) -> f64 {
        self.stats.iter().map(|s| s.accept_stat).sum::<f64>() / self.stats.len().max(1) as f64
    }

    /// One row per draw: `chain,iter,<parameter names...>`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DrawsIoError> {
        let mut wtr = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        let mut header = vec!["chain".to_string(), "iter".to_string()];
        header.extend(self.names.iter().cloned());
        wtr.write_record(&header)?;
        let mut rec = Vec::with_capacity(self.dim + 2);
        for c in 0..self.chains {
            for t in 0..self.kept {
                rec.clear();
                rec.push(c.to_string());
                rec.push(t.to_string());
                rec.extend(self.draw(c, t).iter().map(f64::to_string));
                wtr.write_record(&rec)?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    /// Per-iteration sampler statistics as CSV.
    pub fn write_stats_csv<W: Write>(&self, writer: W) -> Result<(), DrawsIoError> {
        let mut wtr = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        wtr.write_record([
            "chain",
            "iter",
            "accept_stat",
            "step_size",
            "n_leapfrog",
            "divergent",
            "log_density",
        ])?;
        for c in 0..self.chains {
            for t in 0..self.kept {
                let s = &self.stats[c * self.kept + t];
                wtr.write_record([
                    c.to_string(),
                    t.to_string(),
                    s.accept_stat.to_string(),
                    s.step_size.to_string(),
                    s.n_leapfrog.to_string(),
                    (s.divergent as u8).to_string(),
                    s.log_density.to_string(),
                ])?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<(), DrawsIoError> {
        let as_u32 = |v: usize, what: &str| {
            u32::try_from(v).map_err(|_| DrawsIoError::Format(format!("{what} exceeds u32")))
        };
        let layout = self.layout.unwrap_or(Layout::new(0, 0, 0));
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for (v, what) in [
            (self.chains, "chains"),
            (self.kept, "kept"),
            (self.dim, "dim"),
            (layout.groups, "groups"),
            (layout.munis, "municipalities"),
            (layout.respondents, "respondents"),
        ] {
            w.write_all(&as_u32(v, what)?.to_le_bytes())?;
        }
        w.write_all(&self.config.seed.to_le_bytes())?;
        let cfg = serde_json::to_vec(&self.config)
            .map_err(|e| DrawsIoError::Format(e.to_string()))?;
        w.write_all(&as_u32(cfg.len(), "config")?.to_le_bytes())?;
        w.write_all(&cfg)?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        for &d in &self.warmup_divergences {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for s in &self.stats {
            for v in [
                s.accept_stat,
                s.step_size,
                s.n_leapfrog as f64,
                if s.divergent { 1.0 } else { 0.0 },
                s.log_density,
            ] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self, DrawsIoError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(DrawsIoError::Format("missing NSUM magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(DrawsIoError::Format(format!("unsupported version {version}")));
        }
        let chains = read_u32(&mut r)? as usize;
        let kept = read_u32(&mut r)? as usize;
        let dim = read_u32(&mut r)? as usize;
        let groups = read_u32(&mut r)? as usize;
        let munis = read_u32(&mut r)? as usize;
        let respondents = read_u32(&mut r)? as usize;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let seed = u64::from_le_bytes(b8);
        let cfg_len = read_u32(&mut r)? as usize;
        let mut cfg_bytes = vec![0u8; cfg_len];
        r.read_exact(&mut cfg_bytes)?;
        let config: SamplerConfig = serde_json::from_slice(&cfg_bytes)
            .map_err(|e| DrawsIoError::Format(format!("config block: {e}")))?;
        if config.seed != seed || config.chains != chains || config.kept() != kept {
            return Err(DrawsIoError::Format("header disagrees with config block".into()));
        }
        let layout = (groups > 0).then(|| Layout::new(groups, munis, respondents));
        if let Some(l) = layout {
            if l.dim() != dim {
                return Err(DrawsIoError::Format(format!(
                    "layout implies dim {} but header says {dim}",
                    l.dim()
                )));
            }
        }
        let mut read_f64s = |n: usize| -> Result<Vec<f64>, DrawsIoError> {
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf)?;
            Ok(buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect())
        };
        let values = read_f64s(chains * kept * dim)?;
        let warmup_divergences = read_f64s(chains)?
            .into_iter()
            .map(|v| v.to_bits() as usize)
            .collect();
        let raw_stats = read_f64s(chains * kept * 5)?;
        let stats = raw_stats
            .chunks_exact(5)
            .map(|s| IterStats {
                accept_stat: s[0],
                step_size: s[1],
                n_leapfrog: s[2] as u32,
                divergent: s[3] != 0.0,
                log_density: s[4],
            })
            .collect();
        let names = match layout {
            Some(l) => l.param_names(),
            None => (0..dim).map(|j| format!("theta[{j}]")).collect(),
        };
        Ok(Self {
            names,
            layout,
            config,
            chains,
            kept,
            dim,
            values,
            stats,
            warmup_divergences,
        })
    }
}
