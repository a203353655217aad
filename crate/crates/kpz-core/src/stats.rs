use crate::error::{Error, Result};
use crate::measure::sample_stationary;
use crate::params::ModelParameters;
use crate::rng::SeedSpec;
use crate::sde::Stepper;
use rayon::prelude::*;
use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Window factor for ring second moments: sums run over `|j| <= L` with
/// `L ~ WINDOW_FACTOR * sqrt(Var)`. Truncation bias of a Gaussian-shaped
/// profile at 3 sigma is ~1.6% of Var, far below the statistical resolution
/// here, while the noise of the full-ring sum would swamp the signal.
pub const WINDOW_FACTOR: f64 = 3.0;
/// Additive margin on top of `WINDOW_FACTOR * sqrt(Var)`.
pub const WINDOW_MARGIN: usize = 8;
/// Smallest window on the ladder.
pub const WINDOW_MIN: usize = 12;

/// Per-replica accumulation is done in fixed chunks of this many replicas and
/// the chunk partials are merged in index order, so results are bit-identical
/// for any worker count.
pub const DEFAULT_CHUNK: usize = 256;

/// Model metadata carried by a correlation series; lets the exclusion-process
/// runs share the estimator and output schemas with the slope-field runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeriesMeta {
    pub model: String,
    pub ring_size: usize,
    /// Theoretical susceptibility of the sampled initial measure.
    pub chi_theory: f64,
    /// Mean subtracted in the conserved-mode packet.
    pub rho: f64,
    pub nu0: f64,
    pub lambda0: f64,
}

impl SeriesMeta {
    pub fn kpz(p: &ModelParameters) -> Self {
        Self {
            model: "kpz".into(),
            ring_size: p.ring_size,
            chi_theory: p.chi(),
            rho: p.rho,
            nu0: p.nu0,
            lambda0: p.lambda0,
        }
    }
}

/// Stationary two-point function estimate on the checkpoint grid.
///
/// Rows hold the translation-averaged circular cross-correlation of the
/// mean-removed initial field with the mean-removed field at time `t`, plus
/// the exact `chi/N` compensation for the conserved zero mode (whose ensemble
/// expectation is known exactly because the initial measure is sampled
/// exactly and `sum_j u_j` is conserved). `chi_hat` carries the statistical
/// content of the conservation sum rule: it is the replica average of
/// `(sum_j (u_j(0) - rho))^2 / N`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrelationSeries {
    pub times: Vec<f64>,
    /// Minimal-image offsets aligned with the columns of `s` / `stderr`:
    /// `offsets[i] = i` for `i < N/2`, else `i - N`.
    pub offsets: Vec<i64>,
    pub s: Vec<Vec<f64>>,
    pub stderr: Vec<Vec<f64>>,
    pub chi_hat: f64,
    pub chi_hat_se: f64,
    /// Raw second moment `(1/N) sum_j u_j(0)^2` across replicas.
    pub u2_mean: f64,
    pub replicas: usize,
    pub blowup_rate: f64,
    pub meta: SeriesMeta,
    /// Window ladder used for the moment packets below.
    pub ladder: Vec<usize>,
    /// `[t][ladder]`: mean and standard error of `sum_{|j|<=L} j^2 S_rep(j)`.
    pub m2: Vec<Vec<(f64, f64)>>,
    /// `[t][ladder]`: mean and standard error of `sum_{|j|<=L} j S_rep(j)`.
    pub m1: Vec<Vec<(f64, f64)>>,
    /// Space-summed nonlinear current autocorrelation `C(s)` on a uniform
    /// grid, when recorded: `C(s) = (1/N) Cov(W(0), W(s))`.
    pub current: Option<CurrentCorrelation>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurrentCorrelation {
    pub times: Vec<f64>,
    pub c: Vec<f64>,
}

/// Configuration of a stationary two-point Monte Carlo run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub params: ModelParameters,
    pub dt: f64,
    pub check_times: Vec<f64>,
    pub replicas: usize,
    pub seed: SeedSpec,
    /// Record the space-summed nonlinear current every `current_stride` steps
    /// (0 disables recording).
    pub current_stride: usize,
    pub chunk_size: usize,
}

impl EnsembleConfig {
    pub fn new(
        params: ModelParameters,
        dt: f64,
        check_times: Vec<f64>,
        replicas: usize,
        seed: SeedSpec,
    ) -> Self {
        Self {
            params,
            dt,
            check_times,
            replicas,
            seed,
            current_stride: 0,
            chunk_size: DEFAULT_CHUNK,
        }
    }
}

/// Window ladder for ring size `n`: geometric from `WINDOW_MIN` up to `n/2-1`.
pub fn window_ladder(n: usize) -> Vec<usize> {
    let cap = n / 2 - 1;
    let mut out = vec![WINDOW_MIN.min(cap)];
    loop {
        let last = *out.last().unwrap();
        if last >= cap {
            break;
        }
        let next = ((last as f64 * 1.32).ceil() as usize).min(cap);
        out.push(next.max(last + 1));
    }
    out.dedup();
    out
}

/// Minimal-image offset for FFT index `i` on a ring of `n` sites.
fn offset_of(i: usize, n: usize) -> i64 {
    if i < n / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

struct ChunkAcc {
    n: usize,
    times: usize,
    ladder: Vec<usize>,
    sum_s: Vec<f64>,
    sumsq_s: Vec<f64>,
    m2_sum: Vec<f64>,
    m2_sumsq: Vec<f64>,
    m1_sum: Vec<f64>,
    m1_sumsq: Vec<f64>,
    chi_sum: f64,
    chi_sumsq: f64,
    u2_sum: f64,
    w_len: usize,
    w0w_sum: Vec<f64>,
    w_sum: Vec<f64>,
    w0_sum: f64,
    count: usize,
    blowups: usize,
}

impl ChunkAcc {
    fn new(n: usize, times: usize, ladder: Vec<usize>, w_len: usize) -> Self {
        let nl = ladder.len();
        Self {
            n,
            times,
            ladder,
            sum_s: vec![0.0; times * n],
            sumsq_s: vec![0.0; times * n],
            m2_sum: vec![0.0; times * nl],
            m2_sumsq: vec![0.0; times * nl],
            m1_sum: vec![0.0; times * nl],
            m1_sumsq: vec![0.0; times * nl],
            chi_sum: 0.0,
            chi_sumsq: 0.0,
            u2_sum: 0.0,
            w_len,
            w0w_sum: vec![0.0; w_len],
            w_sum: vec![0.0; w_len],
            w0_sum: 0.0,
            count: 0,
            blowups: 0,
        }
    }

    fn merge(&mut self, other: &ChunkAcc) {
        for (a, b) in self.sum_s.iter_mut().zip(&other.sum_s) {
            *a += b;
        }
        for (a, b) in self.sumsq_s.iter_mut().zip(&other.sumsq_s) {
            *a += b;
        }
        for (a, b) in self.m2_sum.iter_mut().zip(&other.m2_sum) {
            *a += b;
        }
        for (a, b) in self.m2_sumsq.iter_mut().zip(&other.m2_sumsq) {
            *a += b;
        }
        for (a, b) in self.m1_sum.iter_mut().zip(&other.m1_sum) {
            *a += b;
        }
        for (a, b) in self.m1_sumsq.iter_mut().zip(&other.m1_sumsq) {
            *a += b;
        }
        self.chi_sum += other.chi_sum;
        self.chi_sumsq += other.chi_sumsq;
        self.u2_sum += other.u2_sum;
        for (a, b) in self.w0w_sum.iter_mut().zip(&other.w0w_sum) {
            *a += b;
        }
        for (a, b) in self.w_sum.iter_mut().zip(&other.w_sum) {
            *a += b;
        }
        self.w0_sum += other.w0_sum;
        self.count += other.count;
        self.blowups += other.blowups;
    }
}

/// FFT workspace for circular cross-correlations within one chunk.
struct CorrWorkspace {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    f0: Vec<Complex<f64>>,
    buf: Vec<Complex<f64>>,
    row: Vec<f64>,
    compensation: f64,
}

impl CorrWorkspace {
    fn new(n: usize, compensation: f64) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
            f0: vec![Complex::default(); n],
            buf: vec![Complex::default(); n],
            row: vec![0.0; n],
            compensation,
        }
    }

    /// Load the reference (time-zero) field; values are mean-removed here.
    fn set_reference(&mut self, u0: &[f64]) {
        let m = u0.iter().sum::<f64>() / self.n as f64;
        for (c, &v) in self.f0.iter_mut().zip(u0) {
            *c = Complex::new(v - m, 0.0);
        }
        self.fwd.process(&mut self.f0);
    }

    /// Mean-removed circular cross-correlation of the reference with `ut`,
    /// plus the zero-mode compensation:
    /// `row[j] = (1/N) sum_i du0_i dut_{i+j} + chi/N`.
    fn correlate(&mut self, ut: &[f64]) -> &[f64] {
        let m = ut.iter().sum::<f64>() / self.n as f64;
        for (c, &v) in self.buf.iter_mut().zip(ut) {
            *c = Complex::new(v - m, 0.0);
        }
        self.fwd.process(&mut self.buf);
        for (b, f) in self.buf.iter_mut().zip(&self.f0) {
            *b = f.conj() * *b;
        }
        self.inv.process(&mut self.buf);
        let scale = 1.0 / (self.n as f64 * self.n as f64);
        for (r, b) in self.row.iter_mut().zip(&self.buf) {
            *r = b.re * scale + self.compensation;
        }
        &self.row
    }
}

/// One replica's hook into the accumulator.
struct ReplicaRecorder<'a> {
    ws: &'a mut CorrWorkspace,
    acc: &'a mut ChunkAcc,
    rows_done: usize,
}

impl ReplicaRecorder<'_> {
    fn set_initial(&mut self, u0: &[f64], rho: f64) {
        self.ws.set_reference(u0);
        let n = u0.len() as f64;
        let dsum: f64 = u0.iter().map(|&v| v - rho).sum();
        let chi_packet = dsum * dsum / n;
        self.acc.chi_sum += chi_packet;
        self.acc.chi_sumsq += chi_packet * chi_packet;
        self.acc.u2_sum += u0.iter().map(|&v| v * v).sum::<f64>() / n;
    }

    fn record_time(&mut self, t_index: usize, ut: &[f64]) {
        let n = self.ws.n;
        let ladder = self.acc.ladder.clone();
        let row = self.ws.correlate(ut);
        let base = t_index * n;
        for (j, &v) in row.iter().enumerate() {
            self.acc.sum_s[base + j] += v;
            self.acc.sumsq_s[base + j] += v * v;
        }
        // cumulative moment packets on the window ladder
        let nl = ladder.len();
        let lbase = t_index * nl;
        let mut li = 0usize;
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        // walk |offset| from 0 outwards: offsets 0, ±1, ±2, ...
        m1 += 0.0;
        m2 += 0.0;
        let mut radius = 1usize;
        while li < nl {
            let lmax = ladder[li];
            while radius <= lmax {
                let jpos = radius;
                let jneg = n - radius;
                let o = radius as f64;
                m1 += o * row[jpos] - o * row[jneg];
                m2 += o * o * (row[jpos] + row[jneg]);
                radius += 1;
            }
            self.acc.m1_sum[lbase + li] += m1;
            self.acc.m1_sumsq[lbase + li] += m1 * m1;
            self.acc.m2_sum[lbase + li] += m2;
            self.acc.m2_sumsq[lbase + li] += m2 * m2;
            li += 1;
        }
        self.rows_done += 1;
    }

    fn record_current_series(&mut self, w: &[f64]) {
        debug_assert_eq!(w.len(), self.acc.w_len);
        let w0 = w[0];
        self.acc.w0_sum += w0;
        for (k, &wk) in w.iter().enumerate() {
            self.acc.w_sum[k] += wk;
            self.acc.w0w_sum[k] += w0 * wk;
        }
    }

    fn commit(&mut self) {
        self.acc.count += 1;
    }
}

const MAX_BLOWUP_RETRIES: usize = 4;

/// Estimate the stationary two-point function of the slope field by
/// translation averaging (circular cross-correlation) and ensemble averaging;
/// standard errors come from replica scatter.
pub fn estimate_two_point(cfg: &EnsembleConfig) -> Result<CorrelationSeries> {
    if cfg.replicas < 10 {
        return Err(Error::TooFewReplicas {
            got: cfg.replicas,
            need: 10,
        });
    }
    let p = cfg.params;
    let n = p.ring_size;
    let steps = crate::sde::checkpoint_steps(
        *cfg.check_times.last().unwrap_or(&0.0),
        cfg.dt,
        &cfg.check_times,
    )?;
    let step_list: Vec<u64> = steps.iter().copied().collect();
    let total_steps = *step_list.last().unwrap_or(&0);
    let w_len = if cfg.current_stride > 0 {
        (total_steps as usize) / cfg.current_stride + 1
    } else {
        0
    };
    let ladder = window_ladder(n);
    let times = cfg.check_times.clone();
    let chunk = cfg.chunk_size.max(1);
    let nchunks = cfg.replicas.div_ceil(chunk);
    let compensation = p.chi() / n as f64;

    let partials: Vec<Result<ChunkAcc>> = (0..nchunks)
        .into_par_iter()
        .map(|ci| {
            let lo = ci * chunk;
            let hi = (lo + chunk).min(cfg.replicas);
            let mut acc = ChunkAcc::new(n, times.len(), ladder.clone(), w_len);
            let mut ws = CorrWorkspace::new(n, compensation);
            let mut u = vec![0.0; n];
            let mut wseries = vec![0.0; w_len];
            for r in lo..hi {
                let mut attempt = 0usize;
                'attempts: loop {
                    let base = 2 * (r as u64 + attempt as u64 * cfg.replicas as u64);
                    let u0 = sample_stationary(&p, cfg.seed.stream(base))?;
                    u.copy_from_slice(u0.values());
                    let mut rng = cfg.seed.stream(base + 1).rng();
                    let mut stepper = Stepper::new(&p, cfg.dt)?;
                    let mut rec = ReplicaRecorder {
                        ws: &mut ws,
                        acc: &mut acc,
                        rows_done: 0,
                    };
                    rec.set_initial(&u, p.rho);
                    let mut t_index = 0usize;
                    if step_list.first() == Some(&0) {
                        rec.record_time(0, &u);
                        t_index = 1;
                    }
                    if cfg.current_stride > 0 {
                        wseries[0] = stepper.nonlinear_current_sum(&u);
                    }
                    let mut ok = true;
                    for s in 1..=total_steps {
                        if let Err(e) = stepper.step(&mut u, &mut rng, s as f64 * cfg.dt) {
                            match e {
                                Error::BlowUp { .. } => {
                                    acc.blowups += 1;
                                    attempt += 1;
                                    if attempt > MAX_BLOWUP_RETRIES {
                                        return Err(Error::InvalidInput(format!(
                                            "replica {r} blew up {attempt} times in a row"
                                        )));
                                    }
                                    ok = false;
                                    break;
                                }
                                other => return Err(other),
                            }
                        }
                        if cfg.current_stride > 0 && s as usize % cfg.current_stride == 0 {
                            wseries[s as usize / cfg.current_stride] =
                                stepper.nonlinear_current_sum(&u);
                        }
                        if t_index < step_list.len() && step_list[t_index] == s {
                            rec.record_time(t_index, &u);
                            t_index += 1;
                        }
                    }
                    if ok {
                        if cfg.current_stride > 0 {
                            rec.record_current_series(&wseries);
                        }
                        rec.commit();
                        break 'attempts;
                    }
                    // discarded replica: reset reference and retry
                }
            }
            Ok(acc)
        })
        .collect();

    let mut total = ChunkAcc::new(n, times.len(), ladder.clone(), w_len);
    for part in partials {
        total.merge(&part?);
    }
    let current_dt = cfg.dt * cfg.current_stride as f64;
    finish_series(total, times, SeriesMeta::kpz(&p), current_dt)
}

/// Build a correlation series from arbitrary snapshot trajectories (used by
/// the exclusion-process module). `sim` receives the master seed and the
/// replica's stream base and must return one row of site values per
/// checkpoint time, the first row being the time-zero state.
pub fn estimate_two_point_snapshots<F>(
    meta: SeriesMeta,
    check_times: &[f64],
    replicas: usize,
    seed: SeedSpec,
    chunk_size: usize,
    sim: F,
) -> Result<CorrelationSeries>
where
    F: Fn(SeedSpec, u64) -> Result<Vec<Vec<f64>>> + Sync,
{
    if replicas < 10 {
        return Err(Error::TooFewReplicas {
            got: replicas,
            need: 10,
        });
    }
    let n = meta.ring_size;
    let ladder = window_ladder(n);
    let chunk = chunk_size.max(1);
    let nchunks = replicas.div_ceil(chunk);
    let compensation = meta.chi_theory / n as f64;
    let rho = meta.rho;
    let partials: Vec<Result<ChunkAcc>> = (0..nchunks)
        .into_par_iter()
        .map(|ci| {
            let lo = ci * chunk;
            let hi = (lo + chunk).min(replicas);
            let mut acc = ChunkAcc::new(n, check_times.len(), ladder.clone(), 0);
            let mut ws = CorrWorkspace::new(n, compensation);
            for r in lo..hi {
                let rows = sim(seed, 2 * r as u64)?;
                if rows.len() != check_times.len() {
                    return Err(Error::InvalidInput(format!(
                        "snapshot count {} != checkpoint count {}",
                        rows.len(),
                        check_times.len()
                    )));
                }
                let mut rec = ReplicaRecorder {
                    ws: &mut ws,
                    acc: &mut acc,
                    rows_done: 0,
                };
                rec.set_initial(&rows[0], rho);
                for (ti, row) in rows.iter().enumerate() {
                    rec.record_time(ti, row);
                }
                rec.commit();
            }
            Ok(acc)
        })
        .collect();
    let mut total = ChunkAcc::new(n, check_times.len(), ladder, 0);
    for part in partials {
        total.merge(&part?);
    }
    finish_series(total, check_times.to_vec(), meta, 0.0)
}

fn finish_series(
    acc: ChunkAcc,
    times: Vec<f64>,
    meta: SeriesMeta,
    current_dt: f64,
) -> Result<CorrelationSeries> {
    let n = acc.n;
    let r = acc.count as f64;
    if acc.count < 2 {
        return Err(Error::TooFewReplicas {
            got: acc.count,
            need: 2,
        });
    }
    let se = |sum: f64, sumsq: f64| -> f64 {
        let mean = sum / r;
        let var = (sumsq / r - mean * mean).max(0.0) * r / (r - 1.0);
        (var / r).sqrt()
    };
    let mut s = Vec::with_capacity(acc.times);
    let mut stderr = Vec::with_capacity(acc.times);
    for t in 0..acc.times {
        let mut row = Vec::with_capacity(n);
        let mut erow = Vec::with_capacity(n);
        for j in 0..n {
            let idx = t * n + j;
            row.push(acc.sum_s[idx] / r);
            erow.push(se(acc.sum_s[idx], acc.sumsq_s[idx]));
        }
        s.push(row);
        stderr.push(erow);
    }
    let nl = acc.ladder.len();
    let mut m2 = Vec::with_capacity(acc.times);
    let mut m1 = Vec::with_capacity(acc.times);
    for t in 0..acc.times {
        let mut row2 = Vec::with_capacity(nl);
        let mut row1 = Vec::with_capacity(nl);
        for l in 0..nl {
            let idx = t * nl + l;
            row2.push((acc.m2_sum[idx] / r, se(acc.m2_sum[idx], acc.m2_sumsq[idx])));
            row1.push((acc.m1_sum[idx] / r, se(acc.m1_sum[idx], acc.m1_sumsq[idx])));
        }
        m2.push(row2);
        m1.push(row1);
    }
    let current = if acc.w_len > 0 {
        let w0_mean = acc.w0_sum / r;
        let mut c = Vec::with_capacity(acc.w_len);
        let mut ctimes = Vec::with_capacity(acc.w_len);
        for k in 0..acc.w_len {
            let wk_mean = acc.w_sum[k] / r;
            let cov = (acc.w0w_sum[k] / r - w0_mean * wk_mean) * r / (r - 1.0);
            c.push(cov / n as f64);
            ctimes.push(k as f64 * current_dt);
        }
        Some(CurrentCorrelation { times: ctimes, c })
    } else {
        None
    };
    Ok(CorrelationSeries {
        times,
        offsets: (0..n).map(|i| offset_of(i, n)).collect(),
        s,
        stderr,
        chi_hat: acc.chi_sum / r,
        chi_hat_se: se(acc.chi_sum, acc.chi_sumsq),
        u2_mean: acc.u2_sum / r,
        replicas: acc.count,
        blowup_rate: acc.blowups as f64 / (acc.count + acc.blowups) as f64,
        meta,
        ladder: acc.ladder,
        m2,
        m1,
        current,
    })
}

/// Normalized variance of the two-point function on the checkpoint grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarianceSeries {
    pub times: Vec<f64>,
    pub var: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Window `L(t)` actually used for each time.
    pub window: Vec<usize>,
    /// Times dropped by the `sqrt(Var) < N/8` spread guard, if any.
    pub truncated_at: Option<f64>,
    pub chi_used: f64,
}

/// `Var(t) = chi_hat^{-1} sum_{|j| <= L(t)} j^2 S(j,t)` with the window grown
/// monotonically in `t` along the ladder until self-consistent with
/// `L ~ WINDOW_FACTOR sqrt(Var)`. Reported standard errors combine the
/// replica scatter of the windowed moment with the `chi_hat` uncertainty.
pub fn variance_series(c: &CorrelationSeries) -> Result<VarianceSeries> {
    let n = c.meta.ring_size;
    let chi = c.chi_hat;
    if !(chi > 0.0) {
        return Err(Error::InvalidInput(format!("chi_hat must be > 0, got {chi}")));
    }
    let guard = n as f64 / 8.0;
    let mut times = Vec::new();
    let mut var = Vec::new();
    let mut stderr = Vec::new();
    let mut window = Vec::new();
    let mut truncated_at = None;
    let mut li_prev = 0usize;
    for (ti, &t) in c.times.iter().enumerate() {
        let mut li = li_prev;
        for _ in 0..c.ladder.len() + 2 {
            let (m2, _) = c.m2[ti][li];
            let v = (m2 / chi).max(0.0);
            let want = (WINDOW_FACTOR * v.sqrt()).ceil() as usize + WINDOW_MARGIN;
            let next = c
                .ladder
                .iter()
                .position(|&l| l >= want)
                .unwrap_or(c.ladder.len() - 1)
                .max(li);
            if next == li {
                break;
            }
            li = next;
        }
        let (m2, m2_se) = c.m2[ti][li];
        let v = m2 / chi;
        let spread = v.max(0.0).sqrt();
        let window_capped = li == c.ladder.len() - 1
            && (WINDOW_FACTOR * spread).ceil() as usize + WINDOW_MARGIN > c.ladder[li];
        if spread >= guard || window_capped {
            truncated_at = Some(t);
            break;
        }
        let se = ((m2_se / chi).powi(2) + (v * c.chi_hat_se / chi).powi(2)).sqrt();
        times.push(t);
        var.push(v);
        stderr.push(se);
        window.push(c.ladder[li]);
        li_prev = li;
    }
    if times.is_empty() {
        return Err(Error::SpreadExceedsRing {
            time: *c.times.first().unwrap_or(&0.0),
            spread: guard,
            limit: guard,
        });
    }
    Ok(VarianceSeries {
        times,
        var,
        stderr,
        window,
        truncated_at,
        chi_used: chi,
    })
}

/// First-moment sum `sum_{|j|<=L} j S(j,t)` with the same windows as
/// [`variance_series`]; vanishes within errors at `rho = 0`.
pub fn odd_moment_series(c: &CorrelationSeries, v: &VarianceSeries) -> Vec<(f64, f64, f64)> {
    let mut out = Vec::new();
    for (ti, &t) in c.times.iter().enumerate() {
        if ti >= v.window.len() {
            break;
        }
        let li = c.ladder.iter().position(|&l| l == v.window[ti]).unwrap();
        let (m1, m1_se) = c.m1[ti][li];
        out.push((t, m1, m1_se));
    }
    out
}

/// Weighted least-squares fit of `log Var` vs `log t` over `window`.
/// Returns `(exponent, stderr)`.
pub fn fit_exponent(
    series: &[(f64, f64, f64)],
    window: (f64, f64),
) -> Result<(f64, f64)> {
    let pts: Vec<(f64, f64, f64)> = series
        .iter()
        .filter(|(t, v, _)| *t >= window.0 && *t <= window.1 && *v > 0.0)
        .copied()
        .collect();
    if pts.len() < 8 {
        return Err(Error::FitWindow(format!(
            "need >= 8 points in [{}, {}], got {}",
            window.0,
            window.1,
            pts.len()
        )));
    }
    let span = pts.last().unwrap().0 / pts.first().unwrap().0;
    if span < 10.0 {
        return Err(Error::FitWindow(format!(
            "window spans factor {span:.2} in t, need >= 10"
        )));
    }
    let mut sw = 0.0;
    let mut sx = 0.0;
    let mut sy = 0.0;
    for &(t, v, se) in &pts {
        let sigma = if se > 0.0 { se / v } else { 1e-6 };
        let w = 1.0 / (sigma * sigma);
        sw += w;
        sx += w * t.ln();
        sy += w * v.ln();
    }
    let xm = sx / sw;
    let ym = sy / sw;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for &(t, v, se) in &pts {
        let sigma = if se > 0.0 { se / v } else { 1e-6 };
        let w = 1.0 / (sigma * sigma);
        let dx = t.ln() - xm;
        sxx += w * dx * dx;
        sxy += w * dx * (v.ln() - ym);
    }
    if sxx <= 0.0 {
        return Err(Error::FitWindow("degenerate abscissa".into()));
    }
    Ok((sxy / sxx, (1.0 / sxx).sqrt()))
}

/// Reconstruct `Var(t)` from the Green-Kubo route:
/// `chi Var(t) = 2 t nu0 <u0^2> + 2 int_0^t int_0^s C(s') ds' ds`
/// with `C` the space-summed current autocorrelation recorded in `c`.
/// Evaluated at the checkpoint times by trapezoidal double quadrature.
pub fn variance_via_current(c: &CorrelationSeries) -> Result<Vec<(f64, f64)>> {
    let cur = c
        .current
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("no current series recorded".into()))?;
    let chi = c.chi_hat;
    let nu0 = c.meta.nu0;
    let u2 = c.u2_mean;
    let dt = if cur.times.len() >= 2 {
        cur.times[1] - cur.times[0]
    } else {
        return Err(Error::InvalidInput("current series too short".into()));
    };
    // F(s) = int_0^s C, G(t) = int_0^t F by trapezoid
    let mut f = vec![0.0; cur.c.len()];
    for k in 1..cur.c.len() {
        f[k] = f[k - 1] + 0.5 * dt * (cur.c[k - 1] + cur.c[k]);
    }
    let mut g = vec![0.0; cur.c.len()];
    for k in 1..f.len() {
        g[k] = g[k - 1] + 0.5 * dt * (f[k - 1] + f[k]);
    }
    let mut out = Vec::with_capacity(c.times.len());
    for &t in &c.times {
        let pos = t / dt;
        let k = pos.round() as usize;
        if (pos - k as f64).abs() > 1e-6 || k >= g.len() {
            return Err(Error::TimeGrid(format!(
                "checkpoint {t} not on the current-series grid (dt = {dt})"
            )));
        }
        out.push((t, (2.0 * t * nu0 * u2 + 2.0 * g[k]) / chi));
    }
    Ok(out)
}

/// One row of the scaling collapse table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CollapseRow {
    pub t: f64,
    pub x: f64,
    pub f: f64,
    pub f_se: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CollapseSummary {
    pub t: f64,
    /// `sum_x f(x) dx` over the window; 1 within errors by the sum rule.
    pub integral: f64,
    /// Second moment of the rescaled profile; compares to 0.510523.
    pub second_moment: f64,
    pub second_moment_se: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CollapseTable {
    pub rows: Vec<CollapseRow>,
    pub per_time: Vec<CollapseSummary>,
    /// L1 distances between consecutive rescaled profiles.
    pub residuals: Vec<(f64, f64, f64)>,
}

/// Rescale profiles by the KPZ similarity variables:
/// `x = (2 lambda0^2 chi t^2)^{-1/3} j`, `f = (2 lambda0^2 chi t^2)^{1/3} S(j,t)/chi`.
pub fn scaling_collapse(c: &CorrelationSeries, v: &VarianceSeries) -> Result<CollapseTable> {
    let lambda0 = c.meta.lambda0;
    if lambda0 == 0.0 {
        return Err(Error::InvalidInput(
            "scaling collapse needs lambda0 != 0".into(),
        ));
    }
    let chi = c.chi_hat;
    let mut rows = Vec::new();
    let mut per_time = Vec::new();
    let mut profiles: Vec<(f64, Vec<(f64, f64)>)> = Vec::new();
    for (ti, &t) in c.times.iter().enumerate() {
        if t <= 0.0 || ti >= v.window.len() {
            continue;
        }
        let scale = (2.0 * p.lambda0 * p.lambda0 * chi * t * t).cbrt();
        let window = v.window[ti];
        let mut profile = Vec::new();
        let mut integral = 0.0;
        let li = c.ladder.iter().position(|&l| l == window).unwrap();
        let (m2, m2_se) = c.m2[ti][li];
        for (col, &o) in c.offsets.iter().enumerate() {
            if o.unsigned_abs() as usize > window {
                continue;
            }
            let x = o as f64 / scale;
            let f = scale * c.s[ti][col] / chi;
            let f_se = scale * c.stderr[ti][col] / chi;
            rows.push(CollapseRow { t, x, f, f_se });
            profile.push((x, f));
            integral += f / scale;
        }
        profile.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let sm = m2 / chi / (scale * scale);
        let sm_se = m2_se / chi / (scale * scale);
        per_time.push(CollapseSummary {
            t,
            integral,
            second_moment: sm,
            second_moment_se: sm_se,
        });
        profiles.push((t, profile));
        let _ = n;
    }
    if profiles.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "need at least 3 collapse times, got {}",
            profiles.len()
        )));
    }
    let mut residuals = Vec::new();
    for pair in profiles.windows(2) {
        let (ta, pa) = &pair[0];
        let (tb, pb) = &pair[1];
        residuals.push((*ta, *tb, l1_distance(pa, pb)));
    }
    Ok(CollapseTable {
        rows,
        per_time,
        residuals,
    })
}

/// L1 distance between two piecewise-linear profiles on their overlapping
/// support, via a merged grid.
fn l1_distance(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let lo = a.first().unwrap().0.max(b.first().unwrap().0);
    let hi = a.last().unwrap().0.min(b.last().unwrap().0);
    if hi <= lo {
        return f64::NAN;
    }
    let mut xs: Vec<f64> = a
        .iter()
        .chain(b.iter())
        .map(|&(x, _)| x)
        .filter(|&x| x >= lo && x <= hi)
        .collect();
    xs.sort_by(|p, q| p.partial_cmp(q).unwrap());
    xs.dedup();
    let interp = |pts: &[(f64, f64)], x: f64| -> f64 {
        let i = pts.partition_point(|&(px, _)| px < x);
        if i == 0 {
            return pts[0].1;
        }
        if i >= pts.len() {
            return pts[pts.len() - 1].1;
        }
        let (x0, y0) = pts[i - 1];
        let (x1, y1) = pts[i];
        if x1 == x0 {
            y0
        } else {
            y0 + (y1 - y0) * (x - x0) / (x1 - x0)
        }
    };
    let mut acc = 0.0;
    for w in xs.windows(2) {
        let (x0, x1) = (w[0], w[1]);
        let d0 = (interp(a, x0) - interp(b, x0)).abs();
        let d1 = (interp(a, x1) - interp(b, x1)).abs();
        acc += 0.5 * (d0 + d1) * (x1 - x0);
    }
    acc
}

/// Exact two-point function of the linear (`lambda0 = 0`) equation on the
/// ring: `S(j,t) = chi (1/N) sum_m cos(2 pi m j / N) exp(-nu0 omega(m/N) t)`.
pub fn ring_heat_kernel(n: usize, nu0: f64, chi: f64, t: f64) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (j, o) in out.iter_mut().enumerate() {
        let mut s = 0.0;
        for m in 0..n {
            let k = m as f64 / n as f64;
            let omega = 2.0 * (1.0 - (2.0 * std::f64::consts::PI * k).cos());
            s += (2.0 * std::f64::consts::PI * k * j as f64).cos() * (-nu0 * omega * t).exp();
        }
        *o = chi * s / n as f64;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn ladder_monotone_and_capped() {
        let l = window_ladder(1024);
        assert_eq!(*l.first().unwrap(), 12);
        assert_eq!(*l.last().unwrap(), 511);
        assert!(l.windows(2).all(|w| w[0] < w[1]));
        let l = window_ladder(32);
        assert_eq!(*l.last().unwrap(), 15);
    }

    #[test]
    fn fit_exponent_exact_power_laws() {
        let series: Vec<(f64, f64, f64)> = (0..20)
            .map(|i| {
                let t = 1.0 * 1.45_f64.powi(i);
                (t, 2.0 * t, 0.001 * 2.0 * t)
            })
            .collect();
        let (e, se) = fit_exponent(&series, (1.0, 1e4)).unwrap();
        assert_relative_eq!(e, 1.0, epsilon = 1e-3);
        assert!(se < 1e-3);

        let series: Vec<(f64, f64, f64)> = (0..20)
            .map(|i| {
                let t = 1.0 * 1.45_f64.powi(i);
                (t, t.powf(4.0 / 3.0), 0.001 * t.powf(4.0 / 3.0))
            })
            .collect();
        let (e, _) = fit_exponent(&series, (1.0, 1e4)).unwrap();
        assert_relative_eq!(e, 4.0 / 3.0, epsilon = 1e-3);
    }

    #[test]
    fn fit_exponent_rejects_narrow_window() {
        let series: Vec<(f64, f64, f64)> =
            (0..10).map(|i| (1.0 + i as f64 * 0.1, 1.0, 0.1)).collect();
        assert!(fit_exponent(&series, (1.0, 2.0)).is_err());
    }

    #[test]
    fn heat_kernel_delta_at_zero_time() {
        let k = ring_heat_kernel(16, 1.0, 0.5, 0.0);
        assert_relative_eq!(k[0], 0.5, epsilon = 1e-12);
        for &v in &k[1..] {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn heat_kernel_second_moment_is_diffusive() {
        let n = 256;
        let t = 10.0;
        let k = ring_heat_kernel(n, 1.0, 0.5, t);
        let mut m2 = 0.0;
        for (i, &v) in k.iter().enumerate() {
            let o = offset_of(i, n) as f64;
            m2 += o * o * v;
        }
        assert_relative_eq!(m2 / 0.5, 2.0 * t, max_relative = 1e-10);
    }

    #[test]
    fn small_ensemble_end_to_end() {
        // smoke test: tiny linear run; chi_hat near chi, S(j,0) near delta
        let p = ModelParameters::new(0.0, 1.0, 1.0, 0.0, 64).unwrap();
        let cfg = EnsembleConfig::new(
            p,
            0.01,
            vec![0.0, 0.5],
            64,
            SeedSpec::new(1234, 0),
        );
        let c = estimate_two_point(&cfg).unwrap();
        assert_eq!(c.replicas, 64);
        assert!((c.chi_hat - 0.5).abs() < 5.0 * c.chi_hat_se.max(0.02));
        // S(0,0) = chi within errors
        assert!((c.s[0][0] - 0.5).abs() < 6.0 * c.stderr[0][0]);
        // row sums are exactly chi by construction of the compensated estimator
        let sum: f64 = c.s[0].iter().sum();
        assert_relative_eq!(sum, 0.5, epsilon = 1e-9);
    }

    #[test]
    fn estimator_deterministic_and_chunk_sensitive_only_to_config() {
        let p = ModelParameters::new(1.0, 1.0, 1.0, 0.0, 32).unwrap();
        let cfg = EnsembleConfig::new(p, 0.01, vec![0.0, 0.2], 32, SeedSpec::new(5, 0));
        let a = estimate_two_point(&cfg).unwrap();
        let b = estimate_two_point(&cfg).unwrap();
        assert_eq!(a.s, b.s);
        assert_eq!(a.chi_hat, b.chi_hat);
    }
}
