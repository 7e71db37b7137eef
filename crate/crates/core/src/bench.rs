//! Memory and runtime scaling of the Φ pipeline on carbon chains.
//!
//! Memory is measured with [`CountingAllocator`], which the measuring binary
//! installs as its global allocator.

use std::alloc::{GlobalAlloc, Layout, System};
use std::fmt::Write as _;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::datagen::gen_carbyne_chain;
use crate::eigensolver::{lobpcg, LobpcgOptions, SpectralBasis};
use crate::molgraph::{build_radius_graph, build_weighted_laplacian};
use crate::phi::{accumulate_on_tape, alpha_net_forward, phi_terms, AlphaNetParams, PhiConfig, SpectralContext};
use crate::sparse::CsrMatrix;
use crate::tensor::{Tape, Tensor};

/// System allocator wrapper tracking live and peak bytes.
pub struct CountingAllocator {
    current: AtomicUsize,
    peak: AtomicUsize,
}

impl CountingAllocator {
    pub const fn new() -> Self {
        Self { current: AtomicUsize::new(0), peak: AtomicUsize::new(0) }
    }

    pub fn current(&self) -> usize {
        self.current.load(Ordering::Relaxed)
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::Relaxed)
    }

    /// Restarts peak tracking from the current live size.
    pub fn reset_peak(&self) {
        self.peak.store(self.current(), Ordering::Relaxed);
    }

    fn add(&self, n: usize) {
        let now = self.current.fetch_add(n, Ordering::Relaxed) + n;
        self.peak.fetch_max(now, Ordering::Relaxed);
    }

    fn sub(&self, n: usize) {
        self.current.fetch_sub(n, Ordering::Relaxed);
    }
}

impl Default for CountingAllocator {
    fn default() -> Self {
        Self::new()
    }
}

unsafe impl GlobalAlloc for CountingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            self.add(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        self.sub(layout.size());
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc_zeroed(layout);
        if !p.is_null() {
            self.add(layout.size());
        }
        p
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            self.sub(layout.size());
            self.add(new_size);
        }
        p
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid sweep: {0}")]
    Config(String),
    #[error("no allocations were counted; install CountingAllocator as the global allocator")]
    AllocatorNotInstalled,
    #[error("{0}")]
    Pipeline(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    Laplacian,
    Eigensolve,
    Forward,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Laplacian => "laplacian",
            Phase::Eigensolve => "eigensolve",
            Phase::Forward => "forward",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Ok,
    /// The eigensolver stopped at its iteration cap above tolerance.
    Unconverged,
    /// The estimated footprint exceeded the memory budget; the phase was skipped.
    Oom,
}

impl Status {
    pub fn name(self) -> &'static str {
        match self {
            Status::Ok => "ok",
            Status::Unconverged => "unconverged",
            Status::Oom => "oom",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub n_atoms: usize,
    pub k: usize,
    pub phase: Phase,
    /// Peak bytes allocated by the phase above the live size at its start.
    pub peak_bytes: usize,
    /// Median over repetitions.
    pub wall_seconds: f64,
    pub status: Status,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub n_list: Vec<usize>,
    pub k_list: Vec<usize>,
    /// Carbon-carbon spacing, Å.
    pub spacing: f64,
    /// Graph cutoff, Å.
    pub cutoff: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub repetitions: usize,
    /// Node feature width of the forward phase.
    pub features: usize,
    /// Skip phases whose estimated footprint exceeds this many bytes.
    pub memory_budget: Option<usize>,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            n_list: vec![1_000, 10_000, 100_000],
            k_list: vec![8],
            spacing: 1.3,
            cutoff: 3.0,
            max_iter: 50,
            tol: 1e-8,
            repetitions: 3,
            features: 16,
            memory_budget: None,
            seed: 0,
        }
    }
}

/// Upper estimate of a phase's footprint in bytes, used for the budget check.
pub fn estimated_bytes(phase: Phase, n: usize, k: usize, features: usize, cutoff: f64, spacing: f64) -> usize {
    let degree = 2 * (cutoff / spacing).floor() as usize + 1;
    let f = 8;
    match phase {
        Phase::Laplacian => n * degree * 4 * (f + 8),
        // Block iterate, residuals, directions and their products, plus Rayleigh-Ritz work.
        Phase::Eigensolve => 12 * n * k * f + 64 * (3 * k) * (3 * k) * f,
        Phase::Forward => n * (4 * features + 6 * k) * f * 4,
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Runs `f` `reps` times; returns the first result, the peak bytes of the first run and the median time.
fn measure<T>(alloc: &CountingAllocator, reps: usize, mut f: impl FnMut() -> T) -> (T, usize, f64) {
    let base = alloc.current();
    alloc.reset_peak();
    let t = Instant::now();
    let first = f();
    let mut times = vec![t.elapsed().as_secs_f64()];
    let peak = alloc.peak().saturating_sub(base);
    for _ in 1..reps {
        let t = Instant::now();
        drop(f());
        times.push(t.elapsed().as_secs_f64());
    }
    (first, peak, median(times))
}

/// Φ forward pass with random host features on one graph; returns the electrostatic energy.
pub fn phi_forward(l: &CsrMatrix, basis: &SpectralBasis, k: usize, features: usize, seed: u64) -> Result<f64, BenchError> {
    let n = basis.n;
    let err = |e: &dyn std::fmt::Display| BenchError::Pipeline(e.to_string());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = PhiConfig { k, ..PhiConfig::default() };
    let params = AlphaNetParams::init(&mut rng, features, &cfg, 1.0);
    let h: Vec<f64> = (0..n * features).map(|_| StandardNormal.sample(&mut rng)).collect();
    let ctx = SpectralContext::new(std::slice::from_ref(basis), &[l], &[0..n], k);
    let tape = Tape::new();
    let vars = params.register(&tape, false).map_err(|e| err(&e))?;
    let h = tape.constant(Tensor::matrix(n, features, h).map_err(|e| err(&e))?).map_err(|e| err(&e))?;
    let graph_index: Rc<[usize]> = vec![0; n].into();
    let segments: Rc<[std::ops::Range<usize>]> = vec![0..n].into();
    let (a_phi, a_rho) = alpha_net_forward(&tape, &vars, h, segments, graph_index.clone(), 1).map_err(|e| err(&e))?;
    let state = accumulate_on_tape(&tape, &ctx, None, a_phi, a_rho).map_err(|e| err(&e))?;
    let terms = phi_terms(&tape, &ctx, &state, graph_index, 1).map_err(|e| err(&e))?;
    Ok(tape.item(terms.electrostatic))
}

/// Instrumented chain → Laplacian → eigensolve → Φ forward for every `(n, k)`.
pub fn scale_sweep(cfg: &SweepConfig, alloc: &CountingAllocator) -> Result<Vec<BenchRecord>, BenchError> {
    if cfg.n_list.is_empty() || cfg.k_list.is_empty() || cfg.repetitions == 0 {
        return Err(BenchError::Config("n_list, k_list and repetitions must be non-empty".into()));
    }
    if !cfg.n_list.windows(2).all(|w| w[0] < w[1]) || !cfg.k_list.windows(2).all(|w| w[0] < w[1]) {
        return Err(BenchError::Config("n_list and k_list must be strictly increasing".into()));
    }
    if let Some(&k) = cfg.k_list.iter().find(|&&k| k == 0 || k > cfg.n_list[0]) {
        return Err(BenchError::Config(format!("k = {k} is outside 1..=n")));
    }
    let over = |phase, n, k| {
        cfg.memory_budget
            .is_some_and(|b| estimated_bytes(phase, n, k, cfg.features, cfg.cutoff, cfg.spacing) > b)
    };
    let mut out = Vec::new();
    for &n in &cfg.n_list {
        let chain = gen_carbyne_chain(n, cfg.spacing).map_err(|e| BenchError::Pipeline(e.to_string()))?;
        for &k in &cfg.k_list {
            let mut record = |phase, peak_bytes, wall_seconds, status| {
                out.push(BenchRecord { n_atoms: n, k, phase, peak_bytes, wall_seconds, status });
            };
            if over(Phase::Laplacian, n, k) {
                for phase in [Phase::Laplacian, Phase::Eigensolve, Phase::Forward] {
                    record(phase, 0, 0.0, Status::Oom);
                }
                continue;
            }
            let (l, peak, wall) = measure(alloc, cfg.repetitions, || {
                build_weighted_laplacian(&build_radius_graph(&chain, cfg.cutoff, usize::MAX))
            });
            let l = l.map_err(|e| BenchError::Pipeline(e.to_string()))?;
            record(Phase::Laplacian, peak, wall, Status::Ok);
            if over(Phase::Eigensolve, n, k) {
                record(Phase::Eigensolve, 0, 0.0, Status::Oom);
                record(Phase::Forward, 0, 0.0, Status::Oom);
                continue;
            }
            let opts = LobpcgOptions { tol: cfg.tol, max_iter: cfg.max_iter, seed: cfg.seed, ..Default::default() };
            let (basis, peak, wall) = measure(alloc, cfg.repetitions, || lobpcg(&l, k, &opts));
            let basis = basis.map_err(|e| BenchError::Pipeline(e.to_string()))?;
            let status = if basis.max_residual() <= cfg.tol { Status::Ok } else { Status::Unconverged };
            record(Phase::Eigensolve, peak, wall, status);
            if over(Phase::Forward, n, k) {
                record(Phase::Forward, 0, 0.0, Status::Oom);
                continue;
            }
            let (es, peak, wall) = measure(alloc, cfg.repetitions, || phi_forward(&l, &basis, k, cfg.features, cfg.seed));
            es?;
            record(Phase::Forward, peak, wall, Status::Ok);
        }
    }
    if out.iter().any(|r| r.status != Status::Oom && r.peak_bytes == 0) {
        return Err(BenchError::AllocatorNotInstalled);
    }
    Ok(out)
}

/// `n,k,phase,peak_bytes,wall_s,status`.
pub fn bench_csv(records: &[BenchRecord]) -> String {
    let mut out = String::from("n,k,phase,peak_bytes,wall_s,status\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{:e},{}",
            r.n_atoms,
            r.k,
            r.phase.name(),
            r.peak_bytes,
            r.wall_seconds,
            r.status.name()
        );
    }
    out
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> =
        points.iter().filter(|(x, y)| *x > 0.0 && *y > 0.0).map(|(x, y)| (x.ln(), y.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let m = pts.len() as f64;
    let xm = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let ym = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = pts.iter().map(|p| (p.0 - xm).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - xm) * (p.1 - ym)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Memory-vs-n exponent of one phase at fixed `k`, over non-OOM rows.
pub fn memory_exponent(records: &[BenchRecord], phase: Phase, k: usize) -> Option<f64> {
    let pts: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.phase == phase && r.k == k && r.status != Status::Oom)
        .map(|r| (r.n_atoms as f64, r.peak_bytes as f64))
        .collect();
    loglog_slope(&pts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_laws() {
        let pts: Vec<(f64, f64)> = [1e3, 1e4, 1e5].iter().map(|&n| (n, 3.0 * n)).collect();
        assert!((loglog_slope(&pts).unwrap() - 1.0).abs() < 1e-12);
        let pts: Vec<(f64, f64)> = [2.0, 4.0, 8.0].iter().map(|&n: &f64| (n, n.powi(2))).collect();
        assert!((loglog_slope(&pts).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(loglog_slope(&[(1.0, 1.0)]), None);
    }

    #[test]
    fn csv_has_header_without_rows() {
        assert_eq!(bench_csv(&[]), "n,k,phase,peak_bytes,wall_s,status\n");
    }

    #[test]
    fn sweep_validation_and_budget() {
        let alloc = CountingAllocator::new();
        let bad = SweepConfig { n_list: vec![100, 50], ..SweepConfig::default() };
        assert!(matches!(scale_sweep(&bad, &alloc), Err(BenchError::Config(_))));
        let tiny_budget = SweepConfig { n_list: vec![50], k_list: vec![4], memory_budget: Some(1), ..SweepConfig::default() };
        let rows = scale_sweep(&tiny_budget, &alloc).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.status == Status::Oom));
        // Not installed as the global allocator here, so nothing is counted.
        let small = SweepConfig { n_list: vec![50], k_list: vec![4], repetitions: 1, ..SweepConfig::default() };
        assert!(matches!(scale_sweep(&small, &alloc), Err(BenchError::AllocatorNotInstalled)));
    }

    #[test]
    fn counting_allocator_tracks_peak() {
        let a = CountingAllocator::new();
        let layout = Layout::from_size_align(1024, 8).unwrap();
        unsafe {
            let p = a.alloc(layout);
            let q = a.realloc(p, layout, 4096);
            assert_eq!(a.current(), 4096);
            a.dealloc(q, Layout::from_size_align(4096, 8).unwrap());
        }
        assert_eq!(a.current(), 0);
        assert_eq!(a.peak(), 4096);
        a.reset_peak();
        assert_eq!(a.peak(), 0);
    }
}
