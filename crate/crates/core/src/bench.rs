//! Wall-clock scaling of the chunked selective scan in sequence length.

use std::fmt::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssm::{selective_scan, ScanInputs, DEFAULT_CHUNK};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanBenchCfg {
    pub batch: usize,
    pub channels: usize,
    pub state: usize,
    pub lengths: Vec<usize>,
    /// Timed repetitions per length; the fastest is reported.
    pub repeats: usize,
    pub chunk: usize,
    pub seed: u64,
}

impl Default for ScanBenchCfg {
    fn default() -> Self {
        Self {
            batch: 1,
            channels: 32,
            state: 16,
            lengths: vec![512, 1024, 2048, 4096],
            repeats: 7,
            chunk: DEFAULT_CHUNK,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanTiming {
    pub len: usize,
    pub seconds: f64,
    /// Time relative to the first (shortest) length.
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingTable {
    pub cfg: ScanBenchCfg,
    pub rows: Vec<ScanTiming>,
}

impl ScalingTable {
    /// Ratio between two measured lengths.
    pub fn ratio(&self, long: usize, short: usize) -> Option<f64> {
        let t = |l| self.rows.iter().find(|r| r.len == l).map(|r| r.seconds);
        Some(t(long)? / t(short)?)
    }

    pub fn to_text(&self) -> String {
        let c = &self.cfg;
        let mut out = format!("# scan\tbatch={}\tchannels={}\tstate={}\tchunk={}\n", c.batch, c.channels, c.state, c.chunk);
        out.push_str("len\tseconds\tratio\n");
        for r in &self.rows {
            writeln!(out, "{}\t{:.6e}\t{:.3}", r.len, r.seconds, r.ratio).expect("write to string");
        }
        out
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi) as f32).collect()).expect("shape")
}

/// Times the forward scan at each length with fixed batch, channels and state size.
pub fn bench_scan(cfg: &ScanBenchCfg) -> Result<ScalingTable> {
    if cfg.lengths.is_empty() || cfg.repeats == 0 {
        return Err(Error::contract("bench_scan", "need at least one length and one repeat"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (b, c, n) = (cfg.batch, cfg.channels, cfg.state);
    let a = random(&mut rng, &[c, n], -2.0, -0.5);
    let d = random(&mut rng, &[c], -1.0, 1.0);
    let mut rows: Vec<ScanTiming> = Vec::new();
    for &len in &cfg.lengths {
        let u = random(&mut rng, &[b, len, c], -1.0, 1.0);
        let delta = random(&mut rng, &[b, len, c], 1e-3, 0.1);
        let bm = random(&mut rng, &[b, len, n], -1.0, 1.0);
        let cm = random(&mut rng, &[b, len, n], -1.0, 1.0);
        let inputs = ScanInputs {
            u: &u,
            delta: &delta,
            a: &a,
            b: &bm,
            c: &cm,
            d: &d,
        };
        // warm-up
        std::hint::black_box(selective_scan(&inputs, cfg.chunk)?);
        let mut best = f64::INFINITY;
        for _ in 0..cfg.repeats {
            let t = Instant::now();
            std::hint::black_box(selective_scan(&inputs, cfg.chunk)?);
            best = best.min(t.elapsed().as_secs_f64());
        }
        let ratio = rows.first().map_or(1.0, |r| best / r.seconds);
        rows.push(ScanTiming {
            len,
            seconds: best,
            ratio,
        });
    }
    Ok(ScalingTable {
        cfg: cfg.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_has_one_row_per_length() {
        let cfg = ScanBenchCfg {
            lengths: vec![16, 64],
            repeats: 2,
            channels: 4,
            state: 4,
            ..ScanBenchCfg::default()
        };
        let t = bench_scan(&cfg).unwrap();
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.rows[0].ratio, 1.0);
        assert!(t.ratio(64, 16).unwrap() > 0.0);
        assert_eq!(t.to_text().lines().count(), 4);
        assert!(bench_scan(&ScanBenchCfg { repeats: 0, ..cfg }).is_err());
    }
}
