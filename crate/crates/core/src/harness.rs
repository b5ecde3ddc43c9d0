//! Equivalence verification, regret metrics, benchmark runs and artifacts.

pub mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envs::{
    cell_grid, instance_seed, rollout_qlearning, sample_expert_stream, sample_mdp, Cell, ExpertStream, Regime,
};
use crate::error::{Error, Result};
use crate::protocol::{self, MwWrapper, ProtocolSpec, RemoteEndpointConfig, RemotePredictor, ScriptedAlwaysOne};
use crate::qlearn_circuit::{self, QCircuitConfig, QContext, Selection};
use crate::reference::{baseline_predict, mwu_step_log, Baseline, History};
use crate::wma_circuit::{self, ExpertLogWeights, WmaConfig, WmaDecode, WmaRound};

pub use plot::{emit_plot, PlotSeries};

/// Cumulative regret against the best expert on each prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretTrace {
    pub loss: Vec<u8>,
    pub cum_loss: Vec<u32>,
    /// `expert_cum_loss[t][i]`.
    pub expert_cum_loss: Vec<Vec<u32>>,
    pub best_expert_cum_loss: Vec<u32>,
    pub regret: Vec<i64>,
}

impl RegretTrace {
    pub fn final_regret(&self) -> Option<i64> {
        self.regret.last().copied()
    }
}

pub fn regret(predictions: &[u8], stream: &ExpertStream) -> Result<RegretTrace> {
    if predictions.len() != stream.horizon() {
        return Err(Error::Shape(format!(
            "{} predictions for a stream of {} rounds",
            predictions.len(),
            stream.horizon()
        )));
    }
    let t = predictions.len();
    let mut trace = RegretTrace {
        loss: Vec::with_capacity(t),
        cum_loss: Vec::with_capacity(t),
        expert_cum_loss: Vec::with_capacity(t),
        best_expert_cum_loss: Vec::with_capacity(t),
        regret: Vec::with_capacity(t),
    };
    let mut cum = 0u32;
    let mut experts = vec![0u32; stream.n];
    for ((&p, &y), advice) in predictions.iter().zip(&stream.labels).zip(&stream.advice) {
        let l = u8::from(p != y);
        cum += u32::from(l);
        for (e, &a) in experts.iter_mut().zip(advice) {
            *e += u32::from(a != y);
        }
        let best = experts.iter().copied().min().unwrap_or(0);
        trace.loss.push(l);
        trace.cum_loss.push(cum);
        trace.expert_cum_loss.push(experts.clone());
        trace.best_expert_cum_loss.push(best);
        trace.regret.push(i64::from(cum) - i64::from(best));
    }
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Bound on the carried state (log-weights or Q-values).
    pub state: f64,
    /// Bound on the per-round output (weighted vote).
    pub output: f64,
}

impl Tolerances {
    pub const WMA: Tolerances = Tolerances { state: 1e-8, output: 1e-9 };
    pub const QLEARN: Tolerances = Tolerances { state: 1e-9, output: 1e-9 };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub episode: usize,
    pub seed: u64,
    /// 1-based round or step.
    pub step: usize,
    pub delta: f64,
    /// True when the discrete decision also disagreed.
    pub decision: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub kind: String,
    pub episodes: usize,
    pub steps: usize,
    pub seeds: Vec<u64>,
    pub tolerances: Tolerances,
    pub max_state_delta: f64,
    pub max_output_delta: f64,
    pub agreement: f64,
    /// Q circuit only: every entry other than the updated one kept its bits.
    pub untouched_bitwise: bool,
    pub first_divergence: Option<Divergence>,
}

impl EquivalenceReport {
    pub fn passed(&self) -> bool {
        self.first_divergence.is_none()
            && self.max_state_delta <= self.tolerances.state
            && self.max_output_delta <= self.tolerances.output
            && self.agreement == 1.0
            && self.untouched_bitwise
    }
}

/// Injected circuit-only fault for sanity checks of the verifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fault {
    /// Added to the discount (Q) or to `gamma` (WMA) of the circuit only.
    pub gamma_delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    VerifyWma,
    VerifyQlearn,
    BenchExperts,
    BenchQlearn,
    ProtocolRun,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WmaParams {
    /// Fixed `gamma`; when absent, verification draws `gamma` from
    /// `U[1.05, 3]` and benchmarks use `e^eta` of the MW baseline.
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default = "default_decode")]
    pub decode: WmaDecode,
}

fn default_decode() -> WmaDecode {
    WmaDecode::Threshold { theta: 0.5 }
}

impl Default for WmaParams {
    fn default() -> Self {
        Self { gamma: None, decode: default_decode() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QParams {
    #[serde(default = "default_selection")]
    pub selection: Selection,
    /// Cells to cycle through; empty means the full grid.
    #[serde(default)]
    pub cells: Vec<Cell>,
}

fn default_selection() -> Selection {
    Selection::Hard
}

impl Default for QParams {
    fn default() -> Self {
        Self { selection: Selection::Hard, cells: Vec::new() }
    }
}

/// Run configuration. Every field except `mode` has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_instances")]
    pub instances: usize,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_regime")]
    pub regime: Regime,
    /// Expert count; verification draws `n` from `1..=experts` per episode.
    #[serde(default = "default_experts")]
    pub experts: usize,
    #[serde(default)]
    pub wma: WmaParams,
    #[serde(default)]
    pub qlearn: QParams,
    #[serde(default)]
    pub tolerances: Option<Tolerances>,
    #[serde(default)]
    pub fault: Option<Fault>,
    #[serde(default)]
    pub protocol: ProtocolSpec,
    #[serde(default = "default_predictor")]
    pub predictor: String,
    #[serde(default)]
    pub remote: Option<RemoteEndpointConfig>,
    /// Output location; not part of the serialized config or its hash.
    #[serde(default = "default_out", skip_serializing)]
    pub out_dir: PathBuf,
}

fn default_instances() -> usize {
    100
}
fn default_horizon() -> usize {
    100
}
fn default_regime() -> Regime {
    Regime::Stratified
}
fn default_experts() -> usize {
    4
}
fn default_predictor() -> String {
    "mw".into()
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    pub fn new(mode: Mode) -> Self {
        let mut cfg: RunConfig =
            serde_json::from_value(serde_json::json!({ "mode": mode })).expect("defaults deserialize");
        if mode == Mode::VerifyWma {
            cfg.experts = 8;
        }
        cfg
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.experts == 0 {
            return bad("experts must be positive".into());
        }
        if self.regime != Regime::Uniform && self.experts != 4 && self.mode == Mode::BenchExperts {
            return bad(format!("{} regime needs 4 experts, got {}", self.regime.name(), self.experts));
        }
        if self.mode == Mode::VerifyWma && 2 * self.experts + 5 > 64 {
            return bad(format!("{} experts do not fit the positional codec", self.experts));
        }
        if let Some(g) = self.wma.gamma {
            if !(g > 1.0 && g.is_finite()) {
                return bad(format!("wma.gamma must exceed 1, got {g}"));
            }
        }
        if let WmaDecode::Threshold { theta } = self.wma.decode {
            if !(0.0..=1.0).contains(&theta) {
                return bad(format!("threshold must lie in [0, 1], got {theta}"));
            }
        }
        if let Selection::Softmax { beta } = self.qlearn.selection {
            if !(beta > 0.0 && beta.is_finite()) {
                return bad("qlearn.selection beta must be positive".into());
            }
        }
        for c in &self.qlearn.cells {
            if !(c.kappa > 0.0) {
                return bad("cell kappa must be positive".into());
            }
        }
        if let Some(t) = self.tolerances {
            if !(t.state >= 0.0 && t.output >= 0.0) {
                return bad("tolerances must be nonnegative".into());
            }
        }
        if let Some(r) = &self.remote {
            r.validate()?;
        }
        if !["mw", "always_one", "counter_note", "remote"].contains(&self.predictor.as_str()) {
            return bad(format!("unknown predictor `{}`", self.predictor));
        }
        if self.predictor == "remote" && self.remote.is_none() {
            return bad("predictor `remote` needs a `remote` section".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn instance_seeds(&self) -> Vec<u64> {
        (0..self.instances as u64).map(|i| instance_seed(self.seed, i)).collect()
    }
}

/// Map `f` over `0..n` on all available cores, returning results in index order.
fn par_map<T: Send, F: Fn(usize) -> T + Sync>(n: usize, f: F) -> Vec<T> {
    let workers = std::thread::available_parallelism().map_or(1, |w| w.get()).min(n.max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let out = f(i);
                slots.lock().expect("no poisoned slot")[i] = Some(out);
            });
        }
    });
    slots.into_inner().expect("no poisoned slot").into_iter().map(|s| s.expect("every slot filled")).collect()
}

struct EpisodeCheck {
    steps: usize,
    max_state: f64,
    max_output: f64,
    agreed: usize,
    untouched: bool,
    divergence: Option<Divergence>,
}

fn wma_episode(cfg: &RunConfig, episode: usize, seed: u64, tol: Tolerances) -> Result<EpisodeCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=cfg.experts);
    let gamma = cfg.wma.gamma.unwrap_or_else(|| rng.random_range(1.05..=3.0));
    let stream = sample_expert_stream(Regime::Uniform, n, cfg.horizon, seed)?;
    let circuit_gamma = gamma + cfg.fault.map_or(0.0, |f| f.gamma_delta);
    let circuit = wma_circuit::build_default(WmaConfig::new(n, circuit_gamma, cfg.horizon, cfg.wma.decode)?)?;
    let mut check =
        EpisodeCheck { steps: 0, max_state: 0.0, max_output: 0.0, agreed: 0, untouched: true, divergence: None };
    let mut lam_c = ExpertLogWeights::zeros(n);
    let mut lam_r = vec![0.0; n];
    for (t, (preds, &y)) in stream.advice.iter().zip(&stream.labels).enumerate() {
        let round = WmaRound { preds: preds.clone(), y };
        let (p_c, next_c) = circuit.run_round(&lam_c, &round)?;
        let (p_r, next_r) = mwu_step_log(&lam_r, preds, y, gamma)?;
        let d_out = (p_c - p_r).abs();
        let d_state = next_c.lambda.iter().zip(&next_r).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let u: f64 = rng.random();
        let agree = circuit.decide(p_c, u) == circuit.decide(p_r, u);
        check.steps += 1;
        check.agreed += usize::from(agree);
        check.max_output = check.max_output.max(d_out);
        check.max_state = check.max_state.max(d_state);
        if check.divergence.is_none() && (d_out > tol.output || d_state > tol.state || !agree) {
            check.divergence =
                Some(Divergence { episode, seed, step: t + 1, delta: d_state.max(d_out), decision: !agree });
        }
        lam_c = next_c;
        lam_r = next_r;
    }
    Ok(check)
}

fn cells(cfg: &RunConfig) -> Vec<Cell> {
    if cfg.qlearn.cells.is_empty() {
        cell_grid()
    } else {
        cfg.qlearn.cells.clone()
    }
}

fn q_episode(cfg: &RunConfig, episode: usize, seed: u64, tol: Tolerances) -> Result<(EpisodeCheck, QEpisodeRows)> {
    let grid = cells(cfg);
    let cell = grid[episode % grid.len()];
    let mdp = sample_mdp(cell, seed)?;
    let traj = rollout_qlearning(&mdp, seed.wrapping_add(1))?;
    let mut qcfg = QCircuitConfig::new(
        mdp.states,
        mdp.actions,
        mdp.alpha,
        mdp.gamma_disc,
        cfg.qlearn.selection,
        mdp.horizon,
    )?;
    if let Some(f) = cfg.fault {
        qcfg.gamma_disc = (mdp.gamma_disc + f.gamma_delta).clamp(0.0, 0.999);
        qcfg.q_bound = 1.0 / (1.0 - qcfg.gamma_disc);
    }
    let circuit = qlearn_circuit::build_default(qcfg)?;
    let mut check =
        EpisodeCheck { steps: 0, max_state: 0.0, max_output: 0.0, agreed: 0, untouched: true, divergence: None };
    let mut rows = QEpisodeRows { cell, rewards: Vec::new(), max_dq: Vec::new(), agree: Vec::new() };
    let mut ctx = QContext::from_table(&crate::reference::QTable::zeros(mdp.states, mdp.actions));
    for (t, st) in traj.steps.iter().enumerate() {
        let before = ctx.to_table();
        let out = circuit.run_step(&ctx, &st.transition())?;
        let after = out.context.to_table();
        let dq = after.q.iter().zip(&st.q_after.q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let untouched = (0..mdp.states).all(|s| {
            (0..mdp.actions)
                .all(|a| (s, a) == (st.s, st.a) || after.get(s, a).to_bits() == before.get(s, a).to_bits())
        });
        let agree = out.a_star == st.a_star_pre && after.greedy(st.s_next) == st.a_star;
        check.steps += 1;
        check.agreed += usize::from(agree);
        check.max_state = check.max_state.max(dq);
        check.untouched &= untouched;
        if check.divergence.is_none() && (dq > tol.state || !agree || !untouched) {
            check.divergence = Some(Divergence { episode, seed, step: t + 1, delta: dq, decision: !agree });
        }
        rows.rewards.push(st.r);
        rows.max_dq.push(dq);
        rows.agree.push(agree);
        ctx = out.context;
    }
    Ok((check, rows))
}

fn assemble(kind: &str, cfg: &RunConfig, tol: Tolerances, checks: Vec<EpisodeCheck>) -> EquivalenceReport {
    let steps: usize = checks.iter().map(|c| c.steps).sum();
    let agreed: usize = checks.iter().map(|c| c.agreed).sum();
    EquivalenceReport {
        kind: kind.into(),
        episodes: checks.len(),
        steps,
        seeds: cfg.instance_seeds(),
        tolerances: tol,
        max_state_delta: checks.iter().map(|c| c.max_state).fold(0.0, f64::max),
        max_output_delta: checks.iter().map(|c| c.max_output).fold(0.0, f64::max),
        agreement: if steps == 0 { 1.0 } else { agreed as f64 / steps as f64 },
        untouched_bitwise: checks.iter().all(|c| c.untouched),
        first_divergence: checks.iter().find_map(|c| c.divergence),
    }
}

/// Run the WMA circuit and the log-domain reference on identical streams.
pub fn verify_wma(cfg: &RunConfig) -> Result<EquivalenceReport> {
    let tol = cfg.tolerances.unwrap_or(Tolerances::WMA);
    let seeds = cfg.instance_seeds();
    let checks = par_map(seeds.len(), |i| wma_episode(cfg, i, seeds[i], tol)).into_iter().collect::<Result<_>>()?;
    Ok(assemble("wma", cfg, tol, checks))
}

/// Run the Q circuit along reference Q-learning rollouts over the cell grid.
pub fn verify_qlearn(cfg: &RunConfig) -> Result<EquivalenceReport> {
    let tol = cfg.tolerances.unwrap_or(Tolerances::QLEARN);
    let seeds = cfg.instance_seeds();
    let checks = par_map(seeds.len(), |i| q_episode(cfg, i, seeds[i], tol).map(|(c, _)| c))
        .into_iter()
        .collect::<Result<_>>()?;
    Ok(assemble("qlearn", cfg, tol, checks))
}

/// Mean and sample standard deviation; zero spread for fewer than two values.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: String,
    pub instances: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub config_sha256: String,
    pub seeds: Vec<u64>,
    pub config: RunConfig,
    /// Final regret for expert runs, final cumulative reward for Q runs.
    pub metric: String,
    pub strategies: Vec<StrategySummary>,
    /// Q runs only: largest circuit deviation over all steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_abs_dq: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOutputs {
    pub csv: PathBuf,
    pub summary_path: PathBuf,
    pub plot: Option<PathBuf>,
    pub summary: BenchSummary,
    pub warnings: Vec<String>,
}

/// Per-instance regret traces for one expert instance, in strategy order.
pub fn expert_instance(cfg: &RunConfig, seed: u64) -> Result<Vec<(String, RegretTrace)>> {
    let stream = sample_expert_stream(cfg.regime, cfg.experts, cfg.horizon, seed)?;
    let mut inst = ChaCha8Rng::seed_from_u64(seed);
    inst.set_stream(1);
    let eta = inst.random_range(0.05..=0.5);
    let strategy_rng = |k: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(2 + k);
        r
    };
    let baselines = [
        Baseline::MultiplicativeWeights { eta },
        Baseline::FollowTheLeader,
        Baseline::FollowPreviousWinners,
        Baseline::Majority,
        Baseline::Random,
    ];
    let mut out = Vec::new();
    for (k, b) in baselines.iter().enumerate() {
        let mut rng = strategy_rng(k as u64);
        let mut history = History::default();
        let mut preds = Vec::with_capacity(stream.horizon());
        for (advice, &y) in stream.advice.iter().zip(&stream.labels) {
            preds.push(baseline_predict(*b, &history, advice, &mut rng));
            history.push(advice.clone(), y);
        }
        out.push((b.name().to_string(), regret(&preds, &stream)?));
    }

    let gamma = cfg.wma.gamma.unwrap_or(eta.exp());
    let circuit = wma_circuit::build_default(WmaConfig::new(stream.n, gamma, stream.horizon(), cfg.wma.decode)?)?;
    let rounds: Vec<WmaRound> =
        stream.advice.iter().zip(&stream.labels).map(|(p, &y)| WmaRound { preds: p.clone(), y }).collect();
    let steps = wma_circuit::run_episode(&circuit, &rounds, seed)?;
    let preds: Vec<u8> = steps.iter().map(|s| s.prediction).collect();
    out.push(("wma_circuit".into(), regret(&preds, &stream)?));

    if stream.n != protocol::PROTOCOL_EXPERTS {
        return Ok(out);
    }
    let spec = cfg.protocol;
    let mut mw = MwWrapper::new(eta, strategy_rng(0));
    out.push(("protocol_mw".into(), protocol::run_protocol_episode(&spec, &mut mw, &stream)?.regret));
    let mut one = ScriptedAlwaysOne;
    out.push(("protocol_always_one".into(), protocol::run_protocol_episode(&spec, &mut one, &stream)?.regret));
    if let Some(remote) = &cfg.remote {
        let mut p = RemotePredictor::from_env(remote.clone())?;
        out.push(("remote".into(), protocol::run_protocol_episode(&spec, &mut p, &stream)?.regret));
    }
    Ok(out)
}

fn artifact_header(cfg: &RunConfig) -> String {
    let seeds: Vec<String> = cfg.instance_seeds().iter().map(u64::to_string).collect();
    format!("# config_sha256={} seeds={}\n", cfg.hash(), seeds.join(","))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn csv_bytes<R: Serialize>(header: &str, rows: &[R], columns: &[&str]) -> Result<Vec<u8>> {
    let mut buf = header.as_bytes().to_vec();
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(&mut buf);
    w.write_record(columns)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv buffer>", e))?;
    drop(w);
    Ok(buf)
}

pub const EXPERT_COLUMNS: [&str; 7] =
    ["instance", "round", "strategy", "loss", "cum_loss", "best_expert_cum_loss", "regret"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertRow {
    pub instance: usize,
    pub round: usize,
    pub strategy: String,
    pub loss: u8,
    pub cum_loss: u32,
    pub best_expert_cum_loss: u32,
    pub regret: i64,
}

/// Parse a benchmark CSV, skipping the metadata comment.
pub fn read_expert_csv(path: &Path) -> Result<Vec<ExpertRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

fn summarize(names: &[String], finals: &[Vec<f64>]) -> Vec<StrategySummary> {
    names
        .iter()
        .zip(finals)
        .map(|(name, xs)| {
            let (mean, std) = mean_std(xs);
            StrategySummary { strategy: name.clone(), instances: xs.len(), mean, std }
        })
        .collect()
}

fn band(series: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let len = series.iter().map(Vec::len).max().unwrap_or(0);
    (0..len)
        .map(|t| {
            let xs: Vec<f64> = series.iter().filter_map(|s| s.get(t).copied()).collect();
            mean_std(&xs)
        })
        .unzip()
}

fn bench_experts(cfg: &RunConfig) -> Result<BenchOutputs> {
    let seeds = cfg.instance_seeds();
    let runs: Vec<Vec<(String, RegretTrace)>> =
        par_map(seeds.len(), |i| expert_instance(cfg, seeds[i])).into_iter().collect::<Result<_>>()?;
    let names: Vec<String> = runs.first().map(|r| r.iter().map(|(n, _)| n.clone()).collect()).unwrap_or_default();
    let mut rows = Vec::new();
    let mut finals = vec![Vec::new(); names.len()];
    let mut curves = vec![Vec::new(); names.len()];
    for (i, run) in runs.iter().enumerate() {
        for (k, (name, tr)) in run.iter().enumerate() {
            for t in 0..tr.loss.len() {
                rows.push(ExpertRow {
                    instance: i,
                    round: t + 1,
                    strategy: name.clone(),
                    loss: tr.loss[t],
                    cum_loss: tr.cum_loss[t],
                    best_expert_cum_loss: tr.best_expert_cum_loss[t],
                    regret: tr.regret[t],
                });
            }
            if let Some(r) = tr.final_regret() {
                finals[k].push(r as f64);
            }
            curves[k].push(tr.regret.iter().map(|&r| r as f64).collect::<Vec<_>>());
        }
    }
    let stem = format!("experts_{}", cfg.regime.name());
    let series: Vec<PlotSeries> = names
        .iter()
        .zip(&curves)
        .map(|(name, c)| {
            let (mean, std) = band(c);
            PlotSeries { name: name.clone(), mean, std }
        })
        .collect();
    let summary = BenchSummary {
        config_sha256: cfg.hash(),
        seeds: seeds.clone(),
        config: cfg.clone(),
        metric: "final_regret".into(),
        strategies: summarize(&names, &finals),
        max_abs_dq: None,
    };
    let csv = csv_bytes(&artifact_header(cfg), &rows, &EXPERT_COLUMNS)?;
    finish(cfg, &stem, csv, summary, series, "Cumulative regret", "round", "regret")
}

#[derive(Debug, Clone, PartialEq)]
struct QEpisodeRows {
    cell: Cell,
    rewards: Vec<f64>,
    max_dq: Vec<f64>,
    agree: Vec<bool>,
}

pub const QLEARN_COLUMNS: [&str; 8] =
    ["instance", "step", "family", "kappa", "reward", "cum_reward", "max_abs_dq", "greedy_agree"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QRow {
    pub instance: usize,
    pub step: usize,
    pub family: String,
    pub kappa: f64,
    pub reward: f64,
    pub cum_reward: f64,
    pub max_abs_dq: f64,
    pub greedy_agree: bool,
}

fn bench_qlearn(cfg: &RunConfig) -> Result<BenchOutputs> {
    let seeds = cfg.instance_seeds();
    let tol = cfg.tolerances.unwrap_or(Tolerances::QLEARN);
    let runs: Vec<QEpisodeRows> = par_map(seeds.len(), |i| q_episode(cfg, i, seeds[i], tol).map(|(_, r)| r))
        .into_iter()
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    let mut names: Vec<String> = Vec::new();
    let mut finals: Vec<Vec<f64>> = Vec::new();
    let mut curves: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut max_dq = 0.0f64;
    for (i, run) in runs.iter().enumerate() {
        let name = run.cell.family.name().to_string();
        let k = names.iter().position(|n| *n == name).unwrap_or_else(|| {
            names.push(name.clone());
            finals.push(Vec::new());
            curves.push(Vec::new());
            names.len() - 1
        });
        let mut cum = 0.0;
        let mut curve = Vec::with_capacity(run.rewards.len());
        for t in 0..run.rewards.len() {
            cum += run.rewards[t];
            curve.push(cum);
            max_dq = max_dq.max(run.max_dq[t]);
            rows.push(QRow {
                instance: i,
                step: t + 1,
                family: name.clone(),
                kappa: run.cell.kappa,
                reward: run.rewards[t],
                cum_reward: cum,
                max_abs_dq: run.max_dq[t],
                greedy_agree: run.agree[t],
            });
        }
        finals[k].push(cum);
        curves[k].push(curve);
    }
    let series: Vec<PlotSeries> = names
        .iter()
        .zip(&curves)
        .map(|(name, c)| {
            let (mean, std) = band(c);
            PlotSeries { name: name.clone(), mean, std }
        })
        .collect();
    let summary = BenchSummary {
        config_sha256: cfg.hash(),
        seeds: seeds.clone(),
        config: cfg.clone(),
        metric: "final_cum_reward".into(),
        strategies: summarize(&names, &finals),
        max_abs_dq: Some(max_dq),
    };
    let csv = csv_bytes(&artifact_header(cfg), &rows, &QLEARN_COLUMNS)?;
    finish(cfg, "qlearn", csv, summary, series, "Cumulative reward of the Q circuit", "step", "reward")
}

#[allow(clippy::too_many_arguments)]
fn finish(
    cfg: &RunConfig,
    stem: &str,
    csv: Vec<u8>,
    summary: BenchSummary,
    series: Vec<PlotSeries>,
    title: &str,
    x_label: &str,
    y_label: &str,
) -> Result<BenchOutputs> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let csv_path = cfg.out_dir.join(format!("{stem}.csv"));
    let summary_path = cfg.out_dir.join(format!("{stem}_summary.json"));
    write_file(&csv_path, &csv)?;
    let mut json = serde_json::to_string_pretty(&summary)?;
    json.push('\n');
    write_file(&summary_path, json.as_bytes())?;
    let mut warnings = Vec::new();
    let plot = if series.iter().any(|s| !s.mean.is_empty()) {
        let path = cfg.out_dir.join(format!("{stem}.svg"));
        let meta = artifact_header(cfg).trim_start_matches("# ").trim_end().to_string();
        write_file(&path, emit_plot(&series, title, x_label, y_label, &meta).as_bytes())?;
        Some(path)
    } else {
        warnings.push("no instances were run; outputs are empty".to_string());
        None
    };
    Ok(BenchOutputs { csv: csv_path, summary_path, plot, summary, warnings })
}

/// Run the benchmark selected by `cfg.mode` and write its artifacts.
pub fn run_benchmark(cfg: &RunConfig) -> Result<BenchOutputs> {
    cfg.validate()?;
    match cfg.mode {
        Mode::BenchExperts => bench_experts(cfg),
        Mode::BenchQlearn => bench_qlearn(cfg),
        other => Err(Error::Config(format!("{other:?} is not a benchmark mode"))),
    }
}

/// Run the configured protocol predictor over `cfg.instances` streams,
/// writing one JSON-lines trace per instance next to the regret artifacts.
pub fn run_protocol_batch(cfg: &RunConfig) -> Result<BenchOutputs> {
    cfg.validate()?;
    protocol::render_prompt(&cfg.protocol)?;
    let seeds = cfg.instance_seeds();
    let mut rows = Vec::new();
    let mut finals = Vec::new();
    let mut curves = Vec::new();
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    for (i, &seed) in seeds.iter().enumerate() {
        let stream = sample_expert_stream(cfg.regime, cfg.experts, cfg.horizon, seed)?;
        let mut inst = ChaCha8Rng::seed_from_u64(seed);
        inst.set_stream(1);
        let eta = inst.random_range(0.05..=0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let episode = match cfg.predictor.as_str() {
            "mw" => protocol::run_protocol_episode(&cfg.protocol, &mut MwWrapper::new(eta, rng), &stream)?,
            "always_one" => protocol::run_protocol_episode(&cfg.protocol, &mut ScriptedAlwaysOne, &stream)?,
            "counter_note" => protocol::run_protocol_episode(&cfg.protocol, &mut protocol::CounterNote, &stream)?,
            _ => {
                let remote = cfg.remote.clone().ok_or_else(|| Error::Config("missing `remote` section".into()))?;
                let mut p = RemotePredictor::from_env(remote)?;
                protocol::run_protocol_episode(&cfg.protocol, &mut p, &stream)?
            }
        };
        protocol::write_traces(&cfg.out_dir.join(format!("protocol_{i}.jsonl")), &episode.turns)?;
        let tr = &episode.regret;
        for t in 0..tr.loss.len() {
            rows.push(ExpertRow {
                instance: i,
                round: t + 1,
                strategy: cfg.predictor.clone(),
                loss: tr.loss[t],
                cum_loss: tr.cum_loss[t],
                best_expert_cum_loss: tr.best_expert_cum_loss[t],
                regret: tr.regret[t],
            });
        }
        finals.extend(tr.final_regret().map(|r| r as f64));
        curves.push(tr.regret.iter().map(|&r| r as f64).collect::<Vec<_>>());
    }
    let names = vec![cfg.predictor.clone()];
    let (mean, std) = band(&curves);
    let series = vec![PlotSeries { name: cfg.predictor.clone(), mean, std }];
    let summary = BenchSummary {
        config_sha256: cfg.hash(),
        seeds,
        config: cfg.clone(),
        metric: "final_regret".into(),
        strategies: summarize(&names, &[finals]),
        max_abs_dq: None,
    };
    let csv = csv_bytes(&artifact_header(cfg), &rows, &EXPERT_COLUMNS)?;
    finish(cfg, "protocol", csv, summary, series, "Cumulative regret", "round", "regret")
}

/// Write a verification report as pretty JSON under `cfg.out_dir`.
pub fn write_report(cfg: &RunConfig, report: &EquivalenceReport) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let path = cfg.out_dir.join(format!("verify_{}.json", report.kind));
    let body = serde_json::json!({
        "config_sha256": cfg.hash(),
        "config": cfg,
        "report": report,
    });
    let mut text = serde_json::to_string_pretty(&body)?;
    text.push('\n');
    write_file(&path, text.as_bytes())?;
    Ok(path)
}
