//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Run with `cargo test -p mutransfer-core --test acceptance`. Passing
//! criterion numbers after `--` restricts the run to those criteria.
//!
//! Criterion 6 trains 45 runs. Finished cells are cached under
//! `target/tmp/desk`, so only the first invocation pays for them.
//!
//! FAIL lines are reported but do not fail the target unless
//! `ACCEPTANCE_STRICT=1` is set.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mutransfer_core::data::{synth_corpus, write_shards, ShardSet, TokenStream};
use mutransfer_core::harness::{
    coord_check, desk_run, desk_sweep, lr_sweep, render_text, train, transfer_report, CellStore,
    CheckpointPolicy, DeskScale, PlanSpec, ProbeMetric, RunConfig, SweepOptions, SweepRecord,
    TransferVerdict, WidthVerdict, DESK_PROXY_WIDTH,
};
use mutransfer_core::model::{
    bind_params, build_model, forward, AttnScaleMode, ForwardOptions, MlpActivation, ModelConfig, NormParams,
    ParamRole, TokenBatch,
};
use mutransfer_core::optim::{
    batch_lr_multiplier, schedule_value, DecayMode, OptimizerConfig, OptimizerKind, ScheduleKind,
};
use mutransfer_core::param::{make_param_plan, Init, PlanEntry, PlanOverrides};
use mutransfer_core::tensor::{grad_check, CoordSelection, DiffTensor, Graph, Var};
use mutransfer_core::{OptimizerState, ParamPlan, ParamSet, Parameterization, Result};

// Pinned tolerances and thresholds.
const GRAD_REL_TOL: f64 = 1e-3;
const GRAD_STEP: f64 = 1e-5;
const OPTIM_TOL: f64 = 1e-6;
const COORD_MUP_MAX_RATIO: f64 = 3.0;
const COORD_STP_FACTOR: f64 = 2.0;
const COORD_WIDTHS: [usize; 2] = [64, 256];
const COORD_STEPS: u64 = 8;
const TRANSFER_TOLERANCE_CELLS: usize = 0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn tmp_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR"))
}

// ---------------------------------------------------------------- 1

fn criterion_1() -> Outcome {
    let p = 128usize;
    let alpha_log2 = -6i32;
    let alpha = 2f64.powi(alpha_log2);
    let d = 128usize;
    let mut failures = Vec::new();
    let mut checked = 0;
    for m_log2 in [7i32, 9, 11, 13] {
        let m = 1usize << m_log2;
        let cfg = ModelConfig::new(256, 64, 2, m, d);
        let plan = match make_param_plan(&cfg, Parameterization::MupRelative, alpha, p, PlanOverrides::default()) {
            Ok(plan) => plan,
            Err(e) => return outcome(false, format!("M={m}: {e}")),
        };
        // Every expected value is a power of two, so equality is exact.
        let pow = |e: i32| 2f64.powi(e);
        let hidden_lr = pow(alpha_log2 + 7 - m_log2);
        if plan.attn_scale != pow(-7) {
            failures.push(format!("M={m} attention scale {}", plan.attn_scale));
        }
        for e in &plan.entries {
            let (want_lr, want_var) = match e.role {
                ParamRole::Embedding => (Some(alpha), Some(1.0)),
                ParamRole::Query | ParamRole::Key | ParamRole::Value | ParamRole::AttnOut | ParamRole::MlpIn => {
                    (Some(hidden_lr), Some(pow(-m_log2)))
                }
                ParamRole::MlpOut => (Some(hidden_lr), Some(pow(-2 - m_log2))),
                ParamRole::Unembedding => (Some(hidden_lr), Some(pow(-2 * m_log2))),
                ParamRole::Bias | ParamRole::Gain => (None, None),
            };
            if let Some(lr) = want_lr {
                checked += 1;
                if e.lr != lr {
                    failures.push(format!("M={m} {} lr {} != {lr}", e.name, e.lr));
                }
            }
            if let Some(var) = want_var {
                checked += 1;
                match e.init {
                    Init::Normal { var: got } if got == var => {}
                    other => failures.push(format!("M={m} {} init {other:?} != var {var}", e.name)),
                }
            }
        }
    }
    if failures.is_empty() {
        outcome(true, format!("{checked} exact values over M in 128..8192"))
    } else {
        outcome(false, failures.join("; "))
    }
}

// ---------------------------------------------------------------- 2

fn tiny_batch(cfg: &ModelConfig, seed: u64) -> TokenBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, t) = (2, cfg.context_len);
    let n = b * t;
    let inputs = (0..n).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
    let targets = (0..n).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
    let mask = (0..n).map(|i| i % 7 != 4).collect();
    TokenBatch::new(b, t, inputs, targets, mask).unwrap()
}

fn randomize<T: mutransfer_core::tensor::Scalar>(params: &mut ParamSet<T>, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in params.tensors_mut() {
        for v in t.values_mut() {
            *v = T::narrow(rng.gen_range(-scale..scale));
        }
    }
}

fn criterion_2() -> Outcome {
    let mut worst = (0.0f64, String::new());
    let mut combos = 0;
    let mut coords = 0;
    for (ai, act) in [MlpActivation::Relu, MlpActivation::SquaredRelu, MlpActivation::Swiglu]
        .into_iter()
        .enumerate()
    {
        for (ni, norm) in [NormParams::None, NormParams::Vector, NormParams::Scalar]
            .into_iter()
            .enumerate()
        {
            for biases in [false, true] {
                for mqa in [false, true] {
                    let mut cfg = ModelConfig::new(11, 8, 2, 16, 8)
                        .with_activation(act)
                        .with_norm_params(norm)
                        .with_biases(biases);
                    if mqa {
                        cfg = cfg.with_multi_query();
                    }
                    let label = format!("{act:?}/{norm:?}/biases={biases}/mqa={mqa}");
                    let seed = (ai * 100 + ni * 10 + biases as usize * 2 + mqa as usize) as u64;
                    let mut params = build_model::<f64>(&cfg).unwrap();
                    randomize(&mut params, seed, 0.5);
                    let batch = tiny_batch(&cfg, seed + 1);
                    let template = params.clone();
                    let mut tensors: Vec<DiffTensor<f64>> = params.tensors().to_vec();
                    let report = grad_check(
                        |g: &mut Graph<f64>, vars: &[Var]| {
                            Ok(forward(g, &template, vars, &batch, ForwardOptions::default())?.loss)
                        },
                        &mut tensors,
                        GRAD_STEP,
                        CoordSelection::All,
                    );
                    match report {
                        Ok(r) => {
                            combos += 1;
                            coords += r.checked;
                            if r.max_rel_error > worst.0 || worst.1.is_empty() {
                                worst = (r.max_rel_error, label);
                            }
                        }
                        Err(e) => return outcome(false, format!("{label}: {e}")),
                    }
                }
            }
        }
    }
    outcome(
        combos == 36 && worst.0 < GRAD_REL_TOL,
        format!(
            "{combos} configs, {coords} coordinates, max rel error {:.2e} ({}) < {GRAD_REL_TOL:.0e}",
            worst.0, worst.1
        ),
    )
}

// ---------------------------------------------------------------- 3

fn two_tensor_plan(eta: f64) -> ParamPlan {
    let entry = |name: &str, lr: f64| PlanEntry {
        name: name.into(),
        shape: vec![1],
        role: ParamRole::MlpIn,
        init: Init::Zeros,
        lr,
        decay_eligible: true,
    };
    ParamPlan {
        mode: Parameterization::MupRelative,
        proxy_width: 1,
        alpha: eta,
        entries: vec![entry("a", eta), entry("b", eta / 4.0)],
        attn_scale: 1.0,
        overrides: PlanOverrides::default(),
    }
}

// Gradient of 1.5 a² + a b + b².
fn quad_grad(a: f64, b: f64) -> [f64; 2] {
    [3.0 * a + b, a + 2.0 * b]
}

fn oracle_schedule(t: u64, warmup: u64, total: u64) -> f64 {
    if t <= warmup {
        t as f64 / warmup as f64
    } else {
        1.0 - (t - warmup) as f64 / (total - warmup) as f64
    }
}

/// Textbook scalar AdamW or Lion over three steps.
fn oracle_trajectory(cfg: &OptimizerConfig, lrs: [f64; 2], start: [f64; 2]) -> Vec<[f64; 2]> {
    let mut theta = start;
    let mut m = [0.0; 2];
    let mut v = [0.0; 2];
    let mut out = Vec::new();
    for t in 1..=3u64 {
        let s = oracle_schedule(t, cfg.warmup_steps, cfg.total_steps);
        let g = quad_grad(theta[0], theta[1]);
        for i in 0..2 {
            let decay = match cfg.decay_mode {
                DecayMode::Coupled => lrs[i] * s * cfg.weight_decay,
                DecayMode::Independent => cfg.weight_decay * s,
                DecayMode::Off => 0.0,
            };
            let old = theta[i];
            match cfg.kind {
                OptimizerKind::Adamw => {
                    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                    let mh = m[i] / (1.0 - cfg.beta1.powi(t as i32));
                    let vh = v[i] / (1.0 - cfg.beta2.powi(t as i32));
                    theta[i] = old - lrs[i] * s * mh / (vh.sqrt() + cfg.eps) - decay * old;
                }
                OptimizerKind::Lion => {
                    let c = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                    let sign = if c > 0.0 { 1.0 } else if c < 0.0 { -1.0 } else { 0.0 };
                    theta[i] = old - lrs[i] * s * sign - decay * old;
                    m[i] = cfg.beta2 * m[i] + (1.0 - cfg.beta2) * g[i];
                }
            }
        }
        out.push(theta);
    }
    out
}

fn engine_trajectory(cfg: &OptimizerConfig, plan: &ParamPlan, start: [f64; 2]) -> Result<Vec<[f64; 2]>> {
    let mut params = vec![
        DiffTensor::<f64>::new(vec![1], vec![start[0]])?,
        DiffTensor::<f64>::new(vec![1], vec![start[1]])?,
    ];
    let mut state = OptimizerState::new(cfg, &params);
    let mut out = Vec::new();
    for _ in 0..3 {
        let g = quad_grad(params[0].values()[0], params[1].values()[0]);
        state.step(cfg, plan, &mut params, &[vec![g[0]], vec![g[1]]])?;
        out.push([params[0].values()[0], params[1].values()[0]]);
    }
    Ok(out)
}

fn criterion_3() -> Outcome {
    let eta = 0.01;
    let plan = two_tensor_plan(eta);
    let base = OptimizerConfig {
        eps: 1e-8,
        clip_norm: None,
        warmup_steps: 2,
        total_steps: 10,
        weight_decay: 0.1,
        ..OptimizerConfig::adamw()
    };
    let cases = [
        ("adamw coupled", OptimizerConfig { decay_mode: DecayMode::Coupled, ..base.clone() }),
        ("adamw independent", OptimizerConfig { decay_mode: DecayMode::Independent, ..base.clone() }),
        (
            "lion coupled",
            OptimizerConfig { decay_mode: DecayMode::Coupled, ..OptimizerConfig { kind: OptimizerKind::Lion, beta2: 0.99, ..base.clone() } },
        ),
        (
            "lion independent",
            OptimizerConfig { decay_mode: DecayMode::Independent, ..OptimizerConfig { kind: OptimizerKind::Lion, beta2: 0.99, ..base.clone() } },
        ),
    ];
    let start = [0.8, -0.3];
    let mut worst: f64 = 0.0;
    for (name, cfg) in &cases {
        let want = oracle_trajectory(cfg, [eta, eta / 4.0], start);
        let got = match engine_trajectory(cfg, &plan, start) {
            Ok(g) => g,
            Err(e) => return outcome(false, format!("{name}: {e}")),
        };
        for (w, g) in want.iter().zip(&got) {
            for i in 0..2 {
                worst = worst.max((w[i] - g[i]).abs());
            }
        }
    }

    // Decay coefficients with dyadic values, so products are exact.
    let (eta, lambda) = (2f64.powi(-6), 2f64.powi(-3));
    let plan = two_tensor_plan(eta);
    let mut decay_ok = true;
    let mut notes = Vec::new();
    for mode in [DecayMode::Coupled, DecayMode::Independent] {
        let cfg = OptimizerConfig {
            decay_mode: mode,
            weight_decay: lambda,
            clip_norm: None,
            warmup_steps: 2,
            total_steps: 10,
            ..OptimizerConfig::adamw()
        };
        let s = 0.5; // step 1 of a 2-step warmup
        let lrs = [eta, eta / 4.0];
        let expected: Vec<f64> = lrs
            .iter()
            .map(|&lr| match mode {
                DecayMode::Coupled => lr * lambda * s,
                _ => lambda * s,
            })
            .collect();
        for (lr, want) in lrs.iter().zip(&expected) {
            if cfg.decay_coefficient(*lr, s) != *want {
                decay_ok = false;
                notes.push(format!("{mode:?} coefficient at lr {lr}"));
            }
        }
        // One step with zero gradients leaves only the decay term.
        let theta = [0.75, -1.5];
        let mut params = vec![
            DiffTensor::<f64>::new(vec![1], vec![theta[0]]).unwrap(),
            DiffTensor::<f64>::new(vec![1], vec![theta[1]]).unwrap(),
        ];
        let mut state = OptimizerState::new(&cfg, &params);
        if let Err(e) = state.step(&cfg, &plan, &mut params, &[vec![0.0], vec![0.0]]) {
            return outcome(false, format!("zero-gradient step: {e}"));
        }
        for i in 0..2 {
            if params[i].values()[0] != theta[i] - expected[i] * theta[i] {
                decay_ok = false;
                notes.push(format!("{mode:?} decayed value of tensor {i}"));
            }
        }
    }
    outcome(
        worst < OPTIM_TOL && decay_ok,
        format!(
            "max trajectory deviation {worst:.2e} < {OPTIM_TOL:.0e}; decay coefficients {}{}",
            if decay_ok { "exact" } else { "WRONG" },
            if notes.is_empty() { String::new() } else { format!(" ({})", notes.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let mut failures = Vec::new();
    for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
        let cfg = OptimizerConfig {
            schedule: kind,
            warmup_steps: 10_000,
            total_steps: 125_000,
            ..OptimizerConfig::adamw()
        };
        for (t, want) in [(5_000, 0.5), (10_000, 1.0), (67_500, 0.5), (125_000, 0.0)] {
            match schedule_value(&cfg, t) {
                Ok(s) if s == want => {}
                other => failures.push(format!("{kind:?} s({t}) = {other:?}, want {want}")),
            }
        }
    }
    for (ratio, want) in [(0.25, 0.5), (4.0, 2.0), (1.0, 1.0)] {
        let got = batch_lr_multiplier(ratio);
        if got != want {
            failures.push(format!("batch multiplier({ratio}) = {got}"));
        }
    }
    if failures.is_empty() {
        outcome(true, "warmup midpoint, peak, decay midpoint and end exact for both schedules; sqrt batch rule exact")
    } else {
        outcome(false, failures.join("; "))
    }
}

// ---------------------------------------------------------------- 5 and 6

fn desk_data() -> Result<PathBuf> {
    let dir = tmp_dir().join("desk").join("data");
    if !dir.join("manifest.toml").exists() {
        let stream = synth_corpus(0, 2_000_000, 256)?;
        write_shards(&stream, 64, &dir, 8192)?;
    }
    Ok(dir)
}

fn desk_sweep_record() -> Result<SweepRecord> {
    let data = desk_data()?;
    let shards = ShardSet::open(&data)?;
    let cfg = desk_sweep(&data, DeskScale::REDUCED);
    let store = CellStore::new(tmp_dir().join("desk").join("sweep").join("cells"));
    lr_sweep(
        &cfg,
        &shards,
        &store,
        SweepOptions {
            workers: 1,
            progress: true,
        },
    )
}

fn criterion_6(record: &Result<SweepRecord>) -> Outcome {
    let record = match record {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("sweep failed: {e}")),
    };
    let verdict = match transfer_report(record, TRANSFER_TOLERANCE_CELLS) {
        Ok(v) => v,
        Err(e) => return outcome(false, e.to_string()),
    };
    eprint!("{}", render_text(record));
    let argmins: Vec<String> = verdict
        .per_width
        .iter()
        .map(|(w, v)| match v {
            WidthVerdict::Argmin { alpha, .. } => format!("M={w}: 2^{}", alpha.log2()),
            WidthVerdict::Indeterminate => format!("M={w}: none"),
        })
        .collect();
    outcome(
        verdict.overall == TransferVerdict::Transfers,
        format!("argmins {} -> {:?}", argmins.join(", "), verdict.overall),
    )
}

fn criterion_5(record: &Result<SweepRecord>) -> Outcome {
    let record = match record {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("no proxy optimum, sweep failed: {e}")),
    };
    let proxy_row = match record.widths.iter().position(|&w| w == DESK_PROXY_WIDTH) {
        Some(i) => i,
        None => return outcome(false, "sweep has no proxy-width row"),
    };
    let Some(best) = record.argmins()[proxy_row] else {
        return outcome(false, "proxy-width row has no finite cell");
    };
    let alpha = record.alphas[best];
    let run = || -> Result<(f64, f64)> {
        let data = desk_data()?;
        let shards = ShardSet::open(&data)?;
        // Same preset as the sweep that located the optimum.
        let mut mup = desk_run(&data, DeskScale::REDUCED);
        mup.plan.alpha = alpha;
        let mut stp = mup.clone();
        stp.model = stp.model.with_attn_scale(AttnScaleMode::Standard);
        stp.plan.mode = Parameterization::Stp;
        let probe = |cfg: &RunConfig| -> Result<f64> {
            let report = coord_check(cfg, &COORD_WIDTHS, COORD_STEPS, &shards)?;
            eprint!("{}", report.to_text());
            Ok(report
                .row("stream")
                .expect("stream probe is always recorded")
                .ratio(ProbeMetric::Delta))
        };
        Ok((probe(&mup)?, probe(&stp)?))
    };
    match run() {
        Ok((mup, stp)) => outcome(
            mup <= COORD_MUP_MAX_RATIO && stp >= COORD_STP_FACTOR * mup,
            format!(
                "alpha 2^{}: muP stream ratio {mup:.3} <= {COORD_MUP_MAX_RATIO}; STP ratio {stp:.3} = {:.2}x muP (need >= {COORD_STP_FACTOR}x)",
                alpha.log2(),
                stp / mup
            ),
        ),
        Err(e) => outcome(false, e.to_string()),
    }
}

// ---------------------------------------------------------------- 7

const GRID: [i32; 5] = [-10, -8, -6, -4, -2];

/// Ablation name, published checkmark, and the 128/512/2048 rows.
const TABLE2: [(&str, bool, [[f64; 5]; 3]); 16] = [
    ("Our Baseline muP", true, [
        [3.846, 3.743, 3.695, 3.884, 4.143],
        [3.114, 2.993, 2.953, 3.221, 3.506],
        [2.711, 2.553, 2.511, 2.563, 3.244],
    ]),
    ("Projection Biases", true, [
        [3.838, 3.735, 3.705, 3.911, 4.269],
        [3.108, 2.986, 2.947, 2.970, 3.557],
        [2.710, 2.552, 2.529, 2.672, 3.418],
    ]),
    ("Vector RMSNorm Params", false, [
        [3.842, 3.744, 3.689, 3.670, 3.681],
        [3.101, 2.992, 2.951, 2.950, 3.412],
        [2.692, 2.553, 2.609, 2.605, 3.169],
    ]),
    ("Scalar RMSNorm Params", false, [
        [3.843, 3.749, 3.692, 3.670, 4.471],
        [3.106, 3.000, 2.961, 2.959, 3.515],
        [2.704, 2.570, 2.525, 2.542, 3.334],
    ]),
    ("Zero Query Init", true, [
        [3.836, 3.743, 3.694, 3.877, 4.167],
        [3.115, 2.992, 2.949, 3.135, 3.532],
        [2.711, 2.553, 2.510, 2.551, 3.272],
    ]),
    ("Standard Attention Scale", false, [
        [3.836, 3.758, 3.905, 4.140, 4.597],
        [3.104, 2.993, 2.962, 3.449, 4.184],
        [2.706, 2.555, 2.525, 3.306, 7.280],
    ]),
    ("Standard Unembedding Init", true, [
        [3.861, 3.765, 3.699, 3.896, 4.161],
        [3.119, 2.990, 2.951, 3.265, 3.582],
        [2.716, 2.554, 2.509, 2.564, 7.471],
    ]),
    ("Cosine Schedule", true, [
        [3.846, 3.743, 3.695, 3.906, 4.143],
        [3.114, 2.995, 2.955, 3.225, 3.506],
        [2.712, 2.558, 2.518, 2.572, 3.244],
    ]),
    ("Weight Decay", false, [
        [3.760, 3.679, 3.694, 3.741, 4.011],
        [3.057, 2.963, 2.957, 3.139, 3.373],
        [2.686, 2.535, 2.502, 3.123, 6.594],
    ]),
    ("Embedding Normalization", true, [
        [3.834, 3.743, 3.693, 4.012, 4.120],
        [3.115, 2.993, 2.954, 3.028, 3.506],
        [2.710, 2.553, 2.512, 2.564, 7.316],
    ]),
    ("SwiGLU", true, [
        [3.800, 3.740, 3.715, 4.090, 7.024],
        [3.070, 2.975, 2.953, 3.175, 6.863],
        [2.677, 2.536, 2.505, 2.553, 4.571],
    ]),
    ("Squared ReLU", true, [
        [3.808, 3.735, 3.686, 3.999, 4.484],
        [3.071, 2.964, 2.929, 3.184, 7.299],
        [2.666, 2.516, 2.482, 2.532, 3.259],
    ]),
    ("Lion", false, [
        [3.708, 3.736, 4.057, 4.344, 10.380],
        [2.952, 2.947, 3.416, 3.961, 10.285],
        [2.519, 2.511, 3.151, 10.377, 10.377],
    ]),
    ("Multi-Query Attention", true, [
        [3.811, 3.708, 3.667, 3.881, 4.121],
        [3.101, 2.979, 2.940, 3.187, 3.518],
        [2.715, 2.564, 2.521, 2.546, 3.257],
    ]),
    ("4x Smaller Batch", true, [
        [3.855, 3.774, 3.736, 3.945, 4.104],
        [3.120, 3.011, 2.977, 3.024, 3.521],
        [2.714, 2.568, 2.527, 2.549, 3.223],
    ]),
    ("4x Larger Batch", true, [
        [3.844, 3.735, 3.697, 3.716, 10.380],
        [3.141, 2.990, 2.965, 3.305, 10.373],
        [2.745, 2.556, 2.541, 2.697, 7.197],
    ]),
];

/// Weight decay 0.1 with the finer grid 2^-8..2^-4 and four widths.
const DECAY_GRID: [f64; 5] = [-8.0, -7.0, -6.0, -5.0, -4.0];
const DECAY_TABLE: [[f64; 5]; 4] = [
    [3.791, 3.768, 3.766, 3.773, 3.814],
    [3.016, 2.996, 2.983, 2.985, 3.004],
    [2.513, 2.477, 2.459, 2.456, 2.466],
    [2.238, 2.190, 2.167, 2.161, 2.169],
];

fn fixture(widths: &[usize], log2_alphas: &[f64], rows: &[[f64; 5]]) -> SweepRecord {
    let alphas: Vec<f64> = log2_alphas.iter().map(|&l| 2f64.powf(l)).collect();
    let means: Vec<Vec<Option<f64>>> = rows.iter().map(|r| r.iter().map(|&v| Some(v)).collect()).collect();
    SweepRecord::from_means(widths, &alphas, &means).unwrap()
}

fn criterion_7() -> Outcome {
    let required = [
        "Our Baseline muP",
        "Zero Query Init",
        "Cosine Schedule",
        "SwiGLU",
        "Vector RMSNorm Params",
        "Standard Attention Scale",
        "Weight Decay",
        "Lion",
    ];
    let grid: Vec<f64> = GRID.iter().map(|&g| g as f64).collect();
    let mut mismatches = Vec::new();
    let mut required_seen = 0;
    for (name, mark, rows) in TABLE2.iter() {
        let record = fixture(&[128, 512, 2048], &grid, rows);
        let got = transfer_report(&record, 0).unwrap().overall.transfers();
        if required.contains(name) {
            required_seen += 1;
        }
        if got != Some(*mark) {
            mismatches.push(format!("{name}: {got:?} vs published {mark}"));
        }
    }
    let decay = fixture(&[128, 512, 2048, 8192], &DECAY_GRID, &DECAY_TABLE);
    let tol0 = transfer_report(&decay, 0).unwrap().overall;
    let tol1 = transfer_report(&decay, 1).unwrap().overall;
    if tol0 != TransferVerdict::DoesNotTransfer || tol1 != TransferVerdict::Transfers {
        mismatches.push(format!("decay grid: tolerance 0 {tol0:?}, tolerance 1 {tol1:?}"));
    }
    outcome(
        mismatches.is_empty() && required_seen == required.len(),
        if mismatches.is_empty() {
            format!("{} published rows reproduced ({} required); finer decay grid transfers only within 1 cell", TABLE2.len(), required.len())
        } else {
            mismatches.join("; ")
        },
    )
}

// ---------------------------------------------------------------- 8

fn small_run(data: &Path, seed: u64) -> RunConfig {
    let mut optimizer = OptimizerConfig::adamw();
    optimizer.warmup_steps = 5;
    optimizer.total_steps = 30;
    RunConfig {
        model: ModelConfig::new(64, 16, 2, 32, 8),
        plan: PlanSpec {
            mode: Parameterization::MupRelative,
            alpha: 2f64.powi(-6),
            proxy_width: 32,
            overrides: PlanOverrides::default(),
        },
        optimizer,
        data: data.to_path_buf(),
        batch_size: 4,
        seed,
        eval_interval: 10,
        eval_sequences: 8,
        max_steps: None,
        checkpoint: CheckpointPolicy {
            interval: Some(10),
            final_checkpoint: true,
        },
    }
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn criterion_8() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    // A whole number of 17-token records, so nothing is dropped.
    let stream = synth_corpus(5, 17 * 2350, 64).unwrap();
    let data = root.path().join("data");
    write_shards(&stream, 16, &data, 500).unwrap();
    let shards = ShardSet::open(&data).unwrap();

    let mut notes = Vec::new();
    let cfg = small_run(&data, 11);
    let a = train(&cfg, &shards, Some(&root.path().join("a"))).unwrap();
    let b = train(&cfg, &shards, Some(&root.path().join("b"))).unwrap();
    let bits = |v: &[(u64, f64)]| v.iter().map(|&(s, l)| (s, l.to_bits())).collect::<Vec<_>>();
    let curves_equal = bits(&a.losses) == bits(&b.losses) && bits(&a.evals) == bits(&b.evals);
    if !curves_equal {
        notes.push("loss curves differ".to_string());
    }
    let ca = read_dir_bytes(&root.path().join("a").join("checkpoints"));
    let cb = read_dir_bytes(&root.path().join("b").join("checkpoints"));
    let ckpt_equal = !ca.is_empty() && ca == cb;
    if !ckpt_equal {
        notes.push("checkpoints differ".to_string());
    }
    let other = train(&small_run(&data, 12), &shards, None).unwrap();
    if bits(&other.losses) == bits(&a.losses) {
        notes.push("another seed gave the same curve".to_string());
    }

    // Shards: the packed tokens are the stream prefix, and rewriting them
    // reproduces every file byte for byte.
    let packed = shards.packed_tokens();
    let prefix_ok = packed == &stream.tokens[..packed.len()];
    let again = root.path().join("data2");
    let replay = TokenStream {
        vocab_size: stream.vocab_size,
        tokens: packed.to_vec(),
        doc_starts: stream.doc_starts.clone(),
    };
    write_shards(&replay, 16, &again, 500).unwrap();
    let shard_bytes_equal = read_dir_bytes(&data) == read_dir_bytes(&again);
    if !prefix_ok || !shard_bytes_equal {
        notes.push("shard round trip not byte-exact".to_string());
    }
    outcome(
        notes.is_empty(),
        if notes.is_empty() {
            format!(
                "{} losses, {} evals, {} checkpoint files bitwise equal; {} shard files byte-exact",
                a.losses.len(),
                a.evals.len(),
                ca.len(),
                read_dir_bytes(&data).len()
            )
        } else {
            notes.join("; ")
        },
    )
}

// ---------------------------------------------------------------- 9

fn logits_bits(params: &ParamSet<f32>, batch: &TokenBatch) -> Vec<u32> {
    let mut g = Graph::<f32>::new();
    let vars = bind_params(&mut g, params);
    let out = forward(&mut g, params, &vars, batch, ForwardOptions::default()).unwrap();
    let mut bits: Vec<u32> = g.value(out.logits).values().iter().map(|v| v.to_bits()).collect();
    bits.push((g.scalar(out.loss) as f32).to_bits());
    bits
}

/// Copies every tensor of `from` into the same-named, same-shaped tensor of `to`.
fn copy_shared(from: &ParamSet<f32>, to: &mut ParamSet<f32>) {
    let names: Vec<String> = to.specs().iter().map(|s| s.name.clone()).collect();
    for name in names {
        if let Some(src) = from.get(&name) {
            let dst = to.get_mut(&name).unwrap();
            if dst.shape() == src.shape() {
                *dst = src.clone();
            }
        }
    }
}

fn criterion_9() -> Outcome {
    let base = ModelConfig::new(32, 8, 2, 32, 8);
    let batch = tiny_batch(&base, 3);
    let mut reference = build_model::<f32>(&base).unwrap();
    randomize(&mut reference, 17, 0.6);
    let want = logits_bits(&reference, &batch);
    let mut results = Vec::new();

    for norm in [NormParams::Vector, NormParams::Scalar] {
        let mut gained = build_model::<f32>(&base.clone().with_norm_params(norm)).unwrap();
        for t in gained.tensors_mut() {
            t.values_mut().fill(1.0);
        }
        copy_shared(&reference, &mut gained);
        results.push((format!("{norm:?} gains = 1"), logits_bits(&gained, &batch) == want));
    }

    let mut biased = build_model::<f32>(&base.clone().with_biases(true)).unwrap();
    copy_shared(&reference, &mut biased);
    results.push(("biases = 0".to_string(), logits_bits(&biased, &batch) == want));

    // One head: MQA and MHA have the same layout and must agree.
    let one = ModelConfig::new(32, 8, 2, 8, 8);
    let mut mqa = build_model::<f32>(&one.clone().with_multi_query()).unwrap();
    let mut mha_wide = build_model::<f32>(&ModelConfig { mlp_width: 5 * 8, ..one.clone() }).unwrap();
    randomize(&mut mha_wide, 23, 0.6);
    copy_shared(&mha_wide, &mut mqa);
    results.push((
        "MQA(H=1) = MHA(H=1)".to_string(),
        logits_bits(&mqa, &batch) == logits_bits(&mha_wide, &batch),
    ));

    // Four heads: MHA with every key/value head a copy of the shared one.
    let four = ModelConfig::new(32, 8, 2, 32, 8).with_multi_query();
    let mut shared = build_model::<f32>(&four).unwrap();
    randomize(&mut shared, 29, 0.6);
    let mut replicated = build_model::<f32>(&ModelConfig { kv_heads: 4, ..four.clone() }).unwrap();
    copy_shared(&shared, &mut replicated);
    for l in 0..four.depth {
        for part in ["key", "value"] {
            let name = format!("layers.{l}.attn.{part}.weight");
            let src = shared.get(&name).unwrap().values().to_vec();
            let d = four.head_dim;
            let dst = replicated.get_mut(&name).unwrap();
            for row in 0..four.width {
                for h in 0..4 {
                    for j in 0..d {
                        dst.values_mut()[row * 4 * d + h * d + j] = src[row * d + j];
                    }
                }
            }
        }
    }
    results.push((
        "MQA(H=4) = MHA with copied KV heads".to_string(),
        logits_bits(&shared, &batch) == logits_bits(&replicated, &batch),
    ));

    let failed: Vec<&str> = results.iter().filter(|(_, ok)| !ok).map(|(n, _)| n.as_str()).collect();
    outcome(
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} equivalences bitwise", results.len())
        } else {
            format!("not bitwise: {}", failed.join(", "))
        },
    )
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: u32| selected.is_empty() || selected.contains(&n);
    let names = [
        "parameterization oracle",
        "gradient correctness",
        "optimizer oracles",
        "schedule and batch rule",
        "coordinate check",
        "desk-scale LR transfer",
        "published verdicts",
        "determinism",
        "equivalence invariants",
    ];
    let sweep = if wanted(5) || wanted(6) {
        Some(desk_sweep_record())
    } else {
        None
    };
    let mut all_pass = true;
    let (mut ran, mut passed) = (0, 0);
    for n in 1..=9u32 {
        if !wanted(n) {
            continue;
        }
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| match n {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(sweep.as_ref().unwrap()),
            6 => criterion_6(sweep.as_ref().unwrap()),
            7 => criterion_7(),
            8 => criterion_8(),
            _ => criterion_9(),
        }));
        let o = result.unwrap_or_else(|_| outcome(false, "panicked"));
        all_pass &= o.pass;
        ran += 1;
        passed += o.pass as u32;
        println!(
            "[{}] {n}. {}: {} ({:.1}s)",
            if o.pass { "PASS" } else { "FAIL" },
            names[n as usize - 1],
            o.detail,
            started.elapsed().as_secs_f64()
        );
    }
    println!("{passed}/{ran} criteria passed");
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if all_pass || !strict {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
