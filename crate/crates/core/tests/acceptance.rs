//! Acceptance criteria, one verdict line each. Runs without the libtest
//! harness so the lines always reach the output; exits nonzero on any failure.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use latent_lab::attention::{build_fixed_offset_head, chooser_concentration_report, ChooserParams};
use latent_lab::embedding::{embed_token, BlockLayout, EmbeddingTable, PositionalCodec, VocabSpec};
use latent_lab::envs::{sample_expert_stream, Regime};
use latent_lab::harness::{self, Mode, RunConfig};
use latent_lab::protocol::{
    self, Framing, HistoryMode, MwWrapper, NoteState, ProtocolSpec, ONLINE_NOTE, ONLINE_NO_NOTE, WEATHER_NOTE,
    WEATHER_NO_NOTE,
};
use latent_lab::qlearn_circuit::{self, QCircuit, QCircuitConfig, QContext, Selection};
use latent_lab::reference::{
    baseline_predict, bayes_posterior_update, exp_weights_mw, logloss_decomposition, mixture_logloss, Baseline,
    History, QTable, Transition,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn wma_equivalence() -> Verdict {
    let start = Instant::now();
    let rep = harness::verify_wma(&RunConfig::new(Mode::VerifyWma)).expect("verification runs");
    let secs = start.elapsed().as_secs_f64();
    let pass = rep.episodes == 100
        && rep.steps == 100 * 100
        && rep.max_output_delta <= 1e-9
        && rep.max_state_delta <= 1e-8
        && rep.agreement == 1.0
        && secs <= 30.0;
    verdict(
        pass,
        format!(
            "{} episodes, max |dp| = {:.2e} (<= 1e-9), max |dlambda| = {:.2e} (<= 1e-8), agreement {:.4}, {secs:.1}s (<= 30s)",
            rep.episodes, rep.max_output_delta, rep.max_state_delta, rep.agreement
        ),
    )
}

fn q_equivalence() -> Verdict {
    let start = Instant::now();
    let rep = harness::verify_qlearn(&RunConfig::new(Mode::VerifyQlearn)).expect("verification runs");
    let secs = start.elapsed().as_secs_f64();
    let pass = rep.episodes == 100
        && rep.max_state_delta <= 1e-9
        && rep.agreement == 1.0
        && rep.untouched_bitwise
        && secs <= 60.0;
    verdict(
        pass,
        format!(
            "{} episodes, {} steps, max |dQ| = {:.2e} (<= 1e-9), agreement {:.4}, untouched bitwise {}, {secs:.1}s (<= 60s)",
            rep.episodes, rep.steps, rep.max_state_delta, rep.agreement, rep.untouched_bitwise
        ),
    )
}

fn chooser_lemma() -> Verdict {
    let eps = 0.01;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 1.0f64;
    let mut checked = 0usize;

    let circuit = qlearn_circuit::build_default(QCircuitConfig::new(8, 4, 0.1, 0.9, Selection::Hard, 50).unwrap()).unwrap();
    for _ in 0..100 {
        let mut q = QTable::zeros(8, 4);
        q.q.iter_mut().for_each(|x| *x = rng.random_range(0.0..5.0));
        let tr = Transition { s: rng.random_range(0..8), a: rng.random_range(0..4), r: rng.random(), s_next: rng.random_range(0..8) };
        let seq = circuit.encode_step(&QContext::from_table(&q), &tr, Some(rng.random_range(0..4))).unwrap();
        for (_, r) in circuit.chooser_reports(&seq).unwrap() {
            worst = worst.min(r.min_mass);
            checked += r.checked;
        }
    }
    let circuit_worst = worst;
    let mut standalone_worst = 1.0f64;

    let vocab = VocabSpec::new(["BOS", "a", "b", "c", "d"]).unwrap();
    let table = EmbeddingTable::new(vocab);
    let layout = BlockLayout::new(table.d_te(), 1, 16);
    let codec = PositionalCodec::with_default_angles(16, 64).unwrap();
    let names = ["a", "b", "c", "d"];
    let heads: Vec<_> = [(vec!["a"], 1), (vec!["a", "b"], 2), (vec!["b", "c", "d"], 3), (vec!["a", "b", "c", "d"], 5)]
        .into_iter()
        .map(|(set, off)| {
            let p = ChooserParams::at_bounds(set, off, eps, &codec).unwrap();
            build_fixed_offset_head(&p, &codec, &table, &layout).unwrap()
        })
        .collect();
    let seqs: Vec<Vec<Vec<f64>>> = (0..100)
        .map(|_| {
            let len = rng.random_range(2..=64);
            (1..=len)
                .map(|i| {
                    let tok = if i == 1 { "BOS" } else { names[rng.random_range(0..4)] };
                    embed_token(&table, &layout, &codec, tok, i).unwrap()
                })
                .collect()
        })
        .collect();
    for fo in &heads {
        let r = chooser_concentration_report(fo, &seqs).unwrap();
        standalone_worst = standalone_worst.min(r.min_mass);
        worst = worst.min(r.min_mass);
        checked += r.checked;
    }
    verdict(
        worst >= 1.0 - eps,
        format!(
            "min target mass {worst:.6} (>= 0.99) over {checked} routed positions; Q circuit heads {circuit_worst:.6}, standalone heads at bounds {standalone_worst:.6}"
        ),
    )
}

fn appendix_identities() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_fd = 0.0f64;
    let mut worst_grad = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(2..=8);
        let lambda: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let ml = mixture_logloss(&lambda, &r).unwrap();
        let m: f64 = lambda.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = lambda.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let w: Vec<f64> = e.iter().map(|x| x / z).collect();
        let w_plus = bayes_posterior_update(&w, &r).unwrap();
        let h = 1e-5;
        for i in 0..n {
            let mut up = lambda.clone();
            let mut dn = lambda.clone();
            up[i] += h;
            dn[i] -= h;
            let fd = (mixture_logloss(&up, &r).unwrap().loss - mixture_logloss(&dn, &r).unwrap().loss) / (2.0 * h);
            worst_fd = worst_fd.max((fd - (w[i] - w_plus[i])).abs());
            worst_grad = worst_grad.max((ml.grad[i] - (w[i] - w_plus[i])).abs());
        }
    }

    let mut worst_chain = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(2..=6);
        let mut bayes = vec![1.0 / n as f64; n];
        let mut exp = bayes.clone();
        for _ in 0..50 {
            let r: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
            bayes = bayes_posterior_update(&bayes, &r).unwrap();
            let losses: Vec<f64> = r.iter().map(|x| -x.ln()).collect();
            exp = exp_weights_mw(&exp, &losses, 1.0).unwrap();
            worst_chain = worst_chain.max(bayes.iter().zip(&exp).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
    }

    let mut worst_decomp = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(2..=10);
        let norm = |v: Vec<f64>| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect::<Vec<f64>>()
        };
        let p = norm((0..n).map(|_| rng.random_range(0.01..1.0)).collect());
        let q = norm((0..n).map(|_| rng.random_range(0.01..1.0)).collect());
        let parts = logloss_decomposition(&p, &q).unwrap();
        let direct: f64 = p.iter().zip(&q).map(|(a, b)| -a * b.ln()).sum();
        worst_decomp = worst_decomp.max((direct - (parts.entropy + parts.kl)).abs());
    }
    let pass = worst_fd <= 1e-6 && worst_grad <= 1e-12 && worst_chain <= 1e-12 && worst_decomp <= 1e-12;
    verdict(
        pass,
        format!(
            "(a) finite difference vs w - w+ {worst_fd:.2e} (<= 1e-6), analytic {worst_grad:.2e}; (b) Bayes vs exp-weights {worst_chain:.2e} (<= 1e-12); (c) H + KL vs log-loss {worst_decomp:.2e} (<= 1e-12)"
        ),
    )
}

fn soft_beta_consistency() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut circuits: BTreeMap<(usize, usize), (QCircuit, QCircuit)> = BTreeMap::new();
    let (mut checked, mut agreed) = (0, 0);
    while checked < 1000 {
        let (s, a) = (rng.random_range(2..=8), rng.random_range(2..=4));
        let (hard, soft) = circuits.entry((s, a)).or_insert_with(|| {
            let build = |sel| qlearn_circuit::build_default(QCircuitConfig::new(s, a, 0.1, 0.9, sel, 50).unwrap()).unwrap();
            (build(Selection::Hard), build(Selection::Softmax { beta: 200.0 }))
        });
        let mut q = QTable::zeros(s, a);
        q.q.iter_mut().for_each(|x| *x = rng.random_range(0.0..3.0));
        let tr = Transition { s: rng.random_range(0..s), a: rng.random_range(0..a), r: rng.random(), s_next: rng.random_range(0..s) };
        let mut row = q.row(tr.s_next).to_vec();
        row.sort_by(|x, y| y.partial_cmp(x).unwrap());
        if row[0] - row[1] < 0.1 {
            continue;
        }
        let ctx = QContext::from_table(&q);
        checked += 1;
        agreed += usize::from(hard.run_step(&ctx, &tr).unwrap().a_star == soft.run_step(&ctx, &tr).unwrap().a_star);
    }
    verdict(agreed == checked, format!("beta = 200, gap >= 0.1: {agreed}/{checked} selections match hard mode (100%)"))
}

fn baseline_ordering() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::new(Mode::BenchExperts);
    cfg.regime = Regime::Stratified;
    cfg.instances = 30;
    cfg.horizon = 100;
    cfg.out_dir = dir.path().to_path_buf();
    let start = Instant::now();
    let out = harness::run_benchmark(&cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let mean = |name: &str| out.summary.strategies.iter().find(|s| s.strategy == name).unwrap().mean;
    let (mw, ftl, maj, rnd) = (mean("mw"), mean("ftl"), mean("majority"), mean("random"));
    verdict(
        mw < maj && mw < rnd && ftl < rnd && secs <= 10.0,
        format!("mean final regret MW {mw:.2} < Majority {maj:.2}, MW < Random {rnd:.2}, FTL {ftl:.2} < Random; {secs:.1}s (<= 10s)"),
    )
}

fn protocol_determinism() -> Verdict {
    let mut worst = 0i64;
    let mut episodes = 0;
    for seed in 0..20u64 {
        let stream = sample_expert_stream(Regime::Stratified, 4, 100, seed).unwrap();
        let eta = 0.05 + 0.45 * (seed as f64 / 19.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut history = History::default();
        let mut preds = Vec::new();
        for (a, &y) in stream.advice.iter().zip(&stream.labels) {
            preds.push(baseline_predict(Baseline::MultiplicativeWeights { eta }, &history, a, &mut rng));
            history.push(a.clone(), y);
        }
        let reference = harness::regret(&preds, &stream).unwrap();
        for history in [HistoryMode::Retained, HistoryMode::Free] {
            for framing in [Framing::Online, Framing::Weather] {
                let spec = ProtocolSpec { framing, state: NoteState::Note, history };
                let mut p = MwWrapper::new(eta, ChaCha8Rng::seed_from_u64(seed));
                let ep = protocol::run_protocol_episode(&spec, &mut p, &stream).unwrap();
                let dev = ep.regret.regret.iter().zip(&reference.regret).map(|(a, b)| (a - b).abs()).max().unwrap_or(0);
                worst = worst.max(dev + i64::from(ep.regret != reference));
                episodes += 1;
            }
        }
    }
    let sha = |s: &str| -> String { Sha256::digest(s.as_bytes()).iter().map(|b| format!("{b:02x}")).collect() };
    let pinned = [
        (ONLINE_NOTE, "a8a804ac8f2b2719816c227ae1a7fd19c72ddace6e28f6abf74199a340d2ee00"),
        (ONLINE_NO_NOTE, "0176298fcfb7bc6a18c9e3e0ed0b72b41dc1c0db29b80c11e20e8c16f8acb231"),
        (WEATHER_NOTE, "2266fea391960ace62234f8a8088fcb23d8314878071e05580452be40e130ef2"),
        (WEATHER_NO_NOTE, "4a39198cf91f0e676610f9aeac20b5881a837f3d90a901f815db0c5fd159b07b"),
    ];
    let stable = pinned.iter().filter(|(s, h)| sha(s) == *h).count();
    verdict(
        worst == 0 && stable == 4,
        format!("{episodes} MW-wrapper episodes (retained and free) vs reference MW: max regret deviation {worst}; fixtures checksum-stable {stable}/4"),
    )
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

fn reproducibility() -> Verdict {
    let mut configs = Vec::new();
    for mode in [Mode::VerifyWma, Mode::VerifyQlearn, Mode::BenchExperts, Mode::BenchQlearn, Mode::ProtocolRun] {
        let mut cfg = RunConfig::new(mode);
        cfg.seed = 11;
        cfg.instances = 8;
        cfg.horizon = 40;
        configs.push(cfg);
    }
    let mut files = 0;
    let mut mismatched = Vec::new();
    for cfg in &configs {
        let runs: Vec<BTreeMap<String, Vec<u8>>> = (0..2)
            .map(|_| {
                let dir = tempfile::tempdir().unwrap();
                let mut c = cfg.clone();
                c.out_dir = dir.path().to_path_buf();
                match c.mode {
                    Mode::VerifyWma => {
                        harness::write_report(&c, &harness::verify_wma(&c).unwrap()).unwrap();
                    }
                    Mode::VerifyQlearn => {
                        harness::write_report(&c, &harness::verify_qlearn(&c).unwrap()).unwrap();
                    }
                    Mode::ProtocolRun => {
                        harness::run_protocol_batch(&c).unwrap();
                    }
                    _ => {
                        harness::run_benchmark(&c).unwrap();
                    }
                }
                dir_bytes(dir.path())
            })
            .collect();
        files += runs[0].len();
        if runs[0] != runs[1] || runs[0].is_empty() {
            mismatched.push(format!("{:?}", cfg.mode));
        }
    }
    verdict(
        mismatched.is_empty(),
        format!("{files} artifacts across 5 commands byte-identical on rerun; mismatches: {mismatched:?}"),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Verdict); 8] = [
        ("1 WMA circuit equivalence", wma_equivalence),
        ("2 Q circuit equivalence", q_equivalence),
        ("3 chooser lemma", chooser_lemma),
        ("4 mixture identities", appendix_identities),
        ("5 soft-beta consistency", soft_beta_consistency),
        ("6 baseline regret ordering", baseline_ordering),
        ("7 protocol determinism", protocol_determinism),
        ("8 reproducibility", reproducibility),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let v = run();
        let took: Duration = start.elapsed();
        println!("[{}] {name}: {} ({:.1}s)", if v.pass { "PASS" } else { "FAIL" }, v.detail, took.as_secs_f64());
        failed += usize::from(!v.pass);
    }
    println!("acceptance: {} passed, {failed} failed", 8 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
