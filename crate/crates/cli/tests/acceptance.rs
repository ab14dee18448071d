//! Acceptance suite: one PASS/FAIL line per criterion, exits non-zero when any
//! criterion fails. Criterion 7 trains ten models and takes several minutes.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use ndarray::{Array1, Array2};
use pathdiff::datasets::{generate, generate_with, DatasetKind, DatasetSpec};
use pathdiff::denoiser::{Architecture, Denoiser, EpsilonModel, MlpSpec, PerfectPredictor, Trainable};
use pathdiff::diffusion::{ddim_step, estimate_x0, forward_noise};
use pathdiff::losses::{objective, LossVariant, ObjectiveInputs, RelaxTargets};
use pathdiff::metrics::{mmd_rbf, projection_directions, sliced_wasserstein, sliced_wasserstein_with};
use pathdiff::oracle::{exact_shortest, relaxation_fixpoint, self_test, StepGraph, SweepOrder};
use pathdiff::residual::{dist, edge_weight, evaluate_edge, initial_residual};
use pathdiff::rng::{standard_normal, stream_rng, Stream};
use pathdiff::sampler::{make_step_schedule, sample, StepStrategy};
use pathdiff::schedule::{make_linear_schedule, NoiseSchedule, ScheduleParams};
use pathdiff::trainer::{
    ema_update, run_training, run_training_with, OptimizerKind, StepRule, TrainConfig, TrainState,
};
use pathdiff::Result;
use rand::Rng;

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

fn norm(a: &Array2<f64>) -> f64 {
    a.mapv(|v| v * v).sum().sqrt()
}

fn rel(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    norm(&(a - b)) / norm(b).max(1e-300)
}

fn max_abs(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn mlp(input: usize, hidden: Vec<usize>, embed: usize) -> Architecture {
    Architecture::Mlp(MlpSpec {
        input_dim: input,
        hidden_dims: hidden,
        embed_dim: embed,
    })
}

fn algebraic_identities() -> Result<Outcome> {
    let s = ScheduleParams::default().build()?;
    let mut rng = stream_rng(1, Stream::Dataset);
    let (mut coef_err, mut trip_err, mut pair_err) = (0.0f64, 0.0f64, 0.0f64);
    for draw in 0..1000u64 {
        let t = rng.random_range(1..=s.timesteps());
        let x0 = standard_normal(&mut rng, 4, 3);
        let eps = standard_normal(&mut rng, 4, 3);
        let model = Denoiser::new(mlp(3, vec![8], 4), draw)?;
        let x_t = forward_noise(x0.view(), eps.view(), t, &s)?;

        let direct = initial_residual(x0.view(), x_t.view(), t, &model, &s)?;
        let eps_hat = model.predict(x_t.view(), t)?;
        let ab = s.alpha_bar(t)?;
        let via_coef = (&eps_hat - &eps) * ((1.0 - ab).sqrt() / ab.sqrt());
        coef_err = coef_err.max(rel(&direct, &via_coef));

        let back = estimate_x0(x_t.view(), eps.view(), t, &s)?;
        trip_err = trip_err.max(rel(&back, &x0));

        let stepped = ddim_step(x0.view(), eps.view(), t, 0.0, &s, None)?;
        let recovered = estimate_x0(stepped.view(), eps.view(), t, &s)?;
        pair_err = pair_err.max(rel(&stepped, &x_t)).max(rel(&recovered, &x0));
    }
    let worst = coef_err.max(trip_err).max(pair_err);
    Ok(outcome(
        worst <= 1e-6,
        format!(
            "1000 draws; coefficient form {coef_err:.1e}, round trip {trip_err:.1e}, inverse pair {pair_err:.1e} (tol 1e-6)"
        ),
    ))
}

fn perfect_predictor() -> Result<Outcome> {
    let s = ScheduleParams::default().build()?;
    let mut rng = stream_rng(2, Stream::Dataset);
    let x0 = standard_normal(&mut rng, 32, 2);
    let eps = standard_normal(&mut rng, 32, 2);
    let p = PerfectPredictor::new(x0.view(), &s);
    let mut worst = 0.0f64;
    let mut pairs = 0;
    for t in [1, 2, 5, 10, 50, 100, 250, 500, 750, 999, 1000] {
        let x_t = forward_noise(x0.view(), eps.view(), t, &s)?;
        worst = worst.max(max_abs(&initial_residual(x0.view(), x_t.view(), t, &p, &s)?));
        worst = worst.max(max_abs(&dist(x0.view(), x_t.view(), t, &p, &s)?));
        for k in [0, 1, t / 2, t - 1] {
            if k < t {
                worst = worst.max(max_abs(&edge_weight(x0.view(), x_t.view(), t, k, &p, &s)?));
                pairs += 1;
            }
        }
    }
    Ok(outcome(
        worst <= 1e-7,
        format!("{pairs} (t,k) pairs; max |residual|, |dist|, |edge| = {worst:.1e} (tol 1e-7)"),
    ))
}

fn discrete_oracle() -> Result<Outcome> {
    let st = self_test(1000, 50, 3, 1e-12)?;
    let mismatches = st.graphs - st.matched;

    // Two-hop chain first, then the longer one on top of it.
    let mut g = StepGraph::new();
    g.add_node(2, 0.5)?;
    g.add_node(10, 2.0)?;
    g.add_edge(2, 10, 0.25)?;
    let short = relaxation_fixpoint(&g, SweepOrder::Topological, 8)?;
    let chain_a = short.dist[&10] == 0.5 + 0.25
        && exact_shortest(&g).path_to_clean(10) == Some(vec![10, 2, 0]);
    g.add_node(100, 4.0)?;
    g.add_edge(10, 100, 0.125)?;
    g.add_edge(2, 100, 3.0)?;
    let long = relaxation_fixpoint(&g, SweepOrder::Topological, 8)?;
    let chain_b = long.dist[&100] == 0.5 + 0.25 + 0.125
        && long.dist[&10] == 0.5 + 0.25
        && exact_shortest(&g).path_to_clean(100) == Some(vec![100, 10, 2, 0]);
    Ok(outcome(
        mismatches == 0 && chain_a && chain_b,
        format!(
            "{}/{} random graphs matched (max |diff| {:.1e}); chain 10->2->0 {}, chain 100->10->2->0 {}",
            st.matched,
            st.graphs,
            st.max_abs_diff,
            if chain_a { "ok" } else { "wrong" },
            if chain_b { "ok" } else { "wrong" }
        ),
    ))
}

fn ddim_degeneration() -> Result<Outcome> {
    let s = make_linear_schedule(200, 1e-4, 0.05)?;
    let data = generate(&DatasetSpec::synthetic(DatasetKind::GaussianMixture8, 4096, 1))?.data;
    let cfg = TrainConfig {
        total_iterations: 1000,
        batch_size: 64,
        relax_enabled: false,
        optimizer: OptimizerKind::Adam,
        graph_sync_interval: 50,
        seed: 4,
        ..TrainConfig::default()
    };
    let arch = mlp(2, vec![32, 32], 16);
    let mut a = TrainState::new(arch.clone(), &cfg)?;
    let mut b = TrainState::new(arch, &cfg)?;
    run_training_with(&mut a, data.view(), &cfg, &s, StepRule::MultiState, |_, _| Ok(()))?;
    run_training_with(&mut b, data.view(), &cfg, &s, StepRule::DdimOnly, |_, _| Ok(()))?;
    let same_log = a.log.len() == 1000
        && a.log
            .iter()
            .zip(&b.log)
            .all(|(x, y)| format!("{x:?}") == format!("{y:?}") && x.total.to_bits() == y.total.to_bits());
    let same_params = a.triplet.base.params().bit_eq(b.triplet.base.params())
        && a.triplet.ema.params().bit_eq(b.triplet.ema.params());
    Ok(outcome(
        same_log && same_params,
        format!(
            "1000 iterations; logs bitwise equal: {same_log}, parameters bitwise equal: {same_params}"
        ),
    ))
}

fn multi_state_mechanics() -> Result<Outcome> {
    let arch = mlp(2, vec![8], 4);
    let start = Denoiser::new(arch.clone(), 5)?;
    let frozen = start.params().zeros_like();
    let mut ema = start.params().clone();
    for _ in 0..100 {
        ema_update(&mut ema, &frozen, 0.999)?;
    }
    let factor = 0.999f64.powi(100);
    let ema_err = ema
        .to_flat()
        .iter()
        .zip(start.params().to_flat())
        .map(|(e, s0)| (e - factor * s0).abs())
        .fold(0.0, f64::max);

    let s = make_linear_schedule(100, 1e-3, 0.05)?;
    let data = generate(&DatasetSpec::synthetic(DatasetKind::TwoMoons, 1024, 1))?.data;
    let cfg = TrainConfig {
        total_iterations: 60,
        batch_size: 32,
        graph_sync_interval: 7,
        seed: 5,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(arch, &cfg)?;
    let mut syncs = 0;
    let mut sync_ok = true;
    run_training_with(&mut state, data.view(), &cfg, &s, StepRule::MultiState, |st, rec| {
        if rec.iteration % cfg.graph_sync_interval == 0 {
            syncs += 1;
            sync_ok &= st.triplet.graph.params().bit_eq(st.triplet.ema.params());
        }
        Ok(())
    })?;
    Ok(outcome(
        ema_err <= 1e-9 && sync_ok && syncs == 8,
        format!(
            "0.999^100 = {factor:.6}, max deviation {ema_err:.1e} (tol 1e-9); graph == ema after {syncs} syncs: {sync_ok}"
        ),
    ))
}

fn gradient_check() -> Result<Outcome> {
    let s = make_linear_schedule(100, 1e-3, 0.05)?;
    let arch = mlp(2, vec![16, 16], 8);
    let mut base = Denoiser::new(arch.clone(), 6)?;
    let n_params = base.params().num_scalars();
    let ema = Denoiser::new(arch.clone(), 7)?;
    let graph = Denoiser::new(arch, 8)?;
    let mut rng = stream_rng(6, Stream::Dataset);
    let x0 = standard_normal(&mut rng, 24, 2);
    let eps = standard_normal(&mut rng, 24, 2);
    let (t, k) = (40, 15);
    let x_t = forward_noise(x0.view(), eps.view(), t, &s)?;
    let ev = evaluate_edge(x0.view(), x_t.view(), t, k, &base, &ema, &graph, &s)?;
    let inputs = ObjectiveInputs {
        x0: x0.view(),
        eps: eps.view(),
        x_t: x_t.view(),
        t,
        lambda: 1.0,
        variant: LossVariant::L2norm,
        relax: Some(RelaxTargets {
            dist_k: ev.dist_k.view(),
            edge: ev.edge.view(),
        }),
    };
    let eval = |m: &Denoiser| -> Result<(f64, Array2<f64>, usize)> {
        let v = objective(m.predict(x_t.view(), t)?.view(), &inputs, &s)?;
        Ok((v.breakdown.total, v.grad_eps_hat, v.cond.iter().filter(|&&c| c).count()))
    };
    let (_, g_out, fired) = eval(&base)?;
    let analytic = base.backward(x_t.view(), t, g_out.view())?.to_flat();
    let theta = base.params().to_flat();
    let h = 1e-5;
    let mut numeric = vec![0.0; theta.len()];
    for i in 0..theta.len() {
        let mut p = theta.clone();
        p[i] += h;
        base.params_mut().set_flat(&p)?;
        let up = eval(&base)?.0;
        p[i] = theta[i] - h;
        base.params_mut().set_flat(&p)?;
        let down = eval(&base)?.0;
        numeric[i] = (up - down) / (2.0 * h);
    }
    base.params_mut().set_flat(&theta)?;
    let mut worst = 0.0f64;
    let mut offset = 0;
    for (_, arr) in base.params().iter() {
        let n = arr.len();
        let (a, b) = (&analytic[offset..offset + n], &numeric[offset..offset + n]);
        let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
        worst = worst.max(diff / scale);
        offset += n;
    }
    Ok(outcome(
        worst <= 1e-4 && n_params <= 1000 && fired > 0,
        format!(
            "{n_params} parameters, relaxation fired on {fired}/24 rows; worst per-array relative error {worst:.1e} (tol 1e-4)"
        ),
    ))
}

const TREND_SEEDS: u64 = 5;
const TREND_NFE: [usize; 5] = [1, 2, 5, 10, 50];

fn sweep_for(state: &TrainState, s: &NoiseSchedule, reference: &Array2<f64>, seed: u64) -> Result<Vec<f64>> {
    TREND_NFE
        .iter()
        .map(|&nfe| {
            let path = make_step_schedule(s.timesteps(), nfe, StepStrategy::Uniform)?;
            let x = sample(&state.triplet.ema, s, &path, 2000, 2, 0.0, 100 + seed)?;
            sliced_wasserstein(x.view(), reference.view(), 64, 0)
        })
        .collect()
}

fn few_step_trend() -> Result<Outcome> {
    let s = ScheduleParams::default().build()?;
    let train = generate(&DatasetSpec::synthetic(DatasetKind::GaussianMixture8, 10_000, 1))?;
    let reference = generate_with(
        &DatasetSpec::synthetic(DatasetKind::GaussianMixture8, 2000, 2),
        &train.normalization,
    )?
    .data;
    let (mut wins, mut near) = (0, 0);
    let start = Instant::now();
    for seed in 0..TREND_SEEDS {
        let mut rows = Vec::new();
        for relax in [true, false] {
            let cfg = TrainConfig {
                total_iterations: 4000,
                batch_size: 256,
                seed,
                optimizer: OptimizerKind::Adam,
                relax_enabled: relax,
                ..TrainConfig::default()
            };
            let mut state = TrainState::new(mlp(2, vec![128, 128, 128], 32), &cfg)?;
            run_training(&mut state, train.data.view(), &cfg, &s)?;
            rows.push(sweep_for(&state, &s, &reference, seed)?);
        }
        let (short, ddim) = (&rows[0], &rows[1]);
        if short[1] < ddim[1] {
            wins += 1;
        }
        if short[1] <= 1.1 * ddim[3] {
            near += 1;
        }
        let fmt = |r: &[f64]| r.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" ");
        println!("    seed {seed}: relaxation sw@nfe{TREND_NFE:?} = {}", fmt(short));
        println!("    seed {seed}: ablation   sw@nfe{TREND_NFE:?} = {}", fmt(ddim));
        let monotone = |r: &[f64]| r.windows(2).all(|w| w[1] <= w[0]);
        println!(
            "    seed {seed}: non-increasing in NFE: relaxation {}, ablation {}",
            monotone(short),
            monotone(ddim)
        );
    }
    Ok(outcome(
        wins >= 4 && near >= 3,
        format!(
            "relaxation beats ablation at NFE 2 in {wins}/{TREND_SEEDS} seeds (need 4); within 1.1x of ablation at NFE 10 in {near}/{TREND_SEEDS} (need 3); {:.0} s",
            start.elapsed().as_secs_f64()
        ),
    ))
}

fn cli(args: &[&str]) -> std::result::Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_pathdiff"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(String::from_utf8_lossy(&out.stderr).into_owned());
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn determinism() -> std::result::Result<Outcome, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let cfg = root.join("run.toml");
    fs::write(
        &cfg,
        "seed = 7\niterations = 40\nbatch_size = 32\ntimesteps = 100\nbeta_end = 0.05\ndataset_size = 1024\nhidden_dims = [32, 32]\nembed_dim = 8\ngraph_sync_interval = 10\n",
    )
    .map_err(|e| e.to_string())?;
    let p = |x: &Path| x.to_str().unwrap().to_string();
    let read = |x: &Path| fs::read(x).map_err(|e| format!("{}: {e}", x.display()));

    let mut results: Vec<(&str, bool)> = Vec::new();
    let mut outputs = Vec::new();
    for tag in ["a", "b"] {
        let out = root.join(tag);
        let ck = cli(&["train", "--config", &p(&cfg), "--out", &p(&out)])?;
        let ck = std::path::PathBuf::from(ck.lines().last().unwrap_or("").trim());
        let run = ck.parent().unwrap().to_path_buf();
        let samples = root.join(format!("{tag}.pdsm"));
        let sample_out = cli(&["sample", "--checkpoint", &p(&ck), "--nfe", "4", "--seed", "3", "--batch", "256", "--out", &p(&samples)])?;
        let eval_dir = root.join(format!("{tag}-eval"));
        cli(&["eval", "--checkpoint", &p(&ck), "--nfe", "1,2,5", "--batch", "300", "--reference-size", "300", "--out", &p(&eval_dir)])?;
        let diag = cli(&["diagnose", "--checkpoint", &p(&ck), "--pairs", "4", "--batch", "64", "--oracle-graphs", "50"])?;
        let csv = fs::read_to_string(eval_dir.join("sweep.csv")).map_err(|e| e.to_string())?;
        // the last column is wall time per evaluation
        let metric_cols: Vec<String> = csv
            .lines()
            .map(|l| l.rsplit_once(',').map(|(a, _)| a.to_string()).unwrap_or_default())
            .collect();
        outputs.push((
            read(&run.join("train_log.jsonl"))?,
            read(&ck)?,
            read(&samples)?,
            read(&samples.with_extension("txt"))?,
            sample_out.lines().filter(|l| !l.ends_with(".pdsm")).collect::<Vec<_>>().join("\n"),
            metric_cols,
            diag,
        ));
    }
    let (a, b) = (&outputs[0], &outputs[1]);
    results.push(("train log", a.0 == b.0));
    results.push(("checkpoint", a.1 == b.1));
    results.push(("sample file", a.2 == b.2 && a.3 == b.3));
    results.push(("sample report", a.4 == b.4));
    results.push(("eval metrics", a.5 == b.5));
    results.push(("diagnose report", a.6 == b.6));
    let pass = results.iter().all(|r| r.1);
    let detail = results
        .iter()
        .map(|(n, ok)| format!("{n} {}", if *ok { "identical" } else { "DIFFERS" }))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(outcome(pass, detail))
}

fn brute_mmd(x: &Array2<f64>, y: &Array2<f64>, bandwidths: &[f64]) -> f64 {
    let kern = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>, h: f64| {
        let d2: f64 = a.iter().zip(b.iter()).map(|(p, q)| (p - q) * (p - q)).sum();
        (-d2 / (2.0 * h * h)).exp()
    };
    let (n, m) = (x.nrows(), y.nrows());
    let mut acc = 0.0;
    for &h in bandwidths {
        let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    sxx += kern(x.row(i), x.row(j), h);
                }
            }
            for j in 0..m {
                sxy += kern(x.row(i), y.row(j), h);
            }
        }
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    syy += kern(y.row(i), y.row(j), h);
                }
            }
        }
        acc += sxx / (n * (n - 1)) as f64 + syy / (m * (m - 1)) as f64 - 2.0 * sxy / (n * m) as f64;
    }
    (acc / bandwidths.len() as f64).max(0.0)
}

fn brute_sw(x: &Array2<f64>, y: &Array2<f64>, dirs: &Array2<f64>) -> f64 {
    let n = x.nrows();
    let mut acc = 0.0;
    for d in dirs.rows() {
        let proj = |m: &Array2<f64>| {
            let mut v: Vec<f64> = m
                .rows()
                .into_iter()
                .map(|r| r.iter().zip(d.iter()).map(|(a, b)| a * b).sum())
                .collect();
            v.sort_by(f64::total_cmp);
            v
        };
        let (a, b) = (proj(x), proj(y));
        acc += (a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / n as f64).sqrt();
    }
    acc / dirs.nrows() as f64
}

fn metric_oracles() -> Result<Outcome> {
    let mut worst_mmd = 0.0f64;
    let mut worst_sw = 0.0f64;
    for (case, n) in [(0u64, 50usize), (1, 120), (2, 200)] {
        let mut rng = stream_rng(10 + case, Stream::Dataset);
        let x = standard_normal(&mut rng, n, 2);
        let shift = Array1::from(vec![0.7, -0.3]);
        let y = standard_normal(&mut rng, n, 2) + &shift;
        let bw = [0.1, 0.2, 0.5, 1.0, 2.0];
        worst_mmd = worst_mmd.max((mmd_rbf(x.view(), y.view(), &bw)? - brute_mmd(&x, &y, &bw)).abs());
        let dirs = projection_directions(64, 2, case);
        let fast = sliced_wasserstein_with(x.view(), y.view(), dirs.view(), case)?;
        worst_sw = worst_sw.max((fast - brute_sw(&x, &y, &dirs)).abs());
    }
    Ok(outcome(
        worst_mmd <= 1e-9 && worst_sw <= 1e-9,
        format!("n <= 200; |mmd - oracle| {worst_mmd:.1e}, |sw - oracle| {worst_sw:.1e} (tol 1e-9)"),
    ))
}

fn main() -> ExitCode {
    type Check = Box<dyn Fn() -> std::result::Result<Outcome, String>>;
    let lift = |f: fn() -> Result<Outcome>| -> Check { Box::new(move || f().map_err(|e| e.to_string())) };
    let checks: Vec<(&str, Check)> = vec![
        ("algebraic identities", lift(algebraic_identities)),
        ("perfect-predictor annihilation", lift(perfect_predictor)),
        ("discrete oracle equivalence", lift(discrete_oracle)),
        ("ddim degeneration", lift(ddim_degeneration)),
        ("multi-state mechanics", lift(multi_state_mechanics)),
        ("gradient correctness", lift(gradient_check)),
        ("few-step trend", lift(few_step_trend)),
        ("determinism", Box::new(determinism)),
        ("metric oracles", lift(metric_oracles)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let start = Instant::now();
        let result = check().unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        if !result.pass {
            failed += 1;
        }
        println!(
            "criterion {}: {} {name}: {} [{:.1} s]",
            i + 1,
            if result.pass { "PASS" } else { "FAIL" },
            result.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
