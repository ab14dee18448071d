use ndarray::Array2;
use pathdiff::datasets::{generate, generate_with};
use pathdiff::denoiser::{Denoiser, EpsilonModel, PerfectPredictor};
use pathdiff::diffusion::forward_noise;
use pathdiff::oracle::{exact_shortest, relaxation_fixpoint, self_test, StepGraph, SweepOrder};
use pathdiff::persistence::{Checkpoint, RunConfig};
use pathdiff::residual::{evaluate_edge, path_residual_report};
use pathdiff::rng::{standard_normal, stream_rng, Stream};
use pathdiff::schedule::NoiseSchedule;
use pathdiff::trainer::{sample_step_pair, BatchCursor, ModelTriplet};
use pathdiff::{Error, Result};

use crate::DiagnoseArgs;

const ORACLE_MAX_NODES: usize = 50;
const ORACLE_TOL: f64 = 1e-12;

fn mean_abs(a: &Array2<f64>) -> f64 {
    a.mapv(f64::abs).mean().unwrap_or(0.0)
}

struct PairStats {
    initial: f64,
    edge: f64,
    dist_k: f64,
    cond_rate: f64,
    path_lhs: f64,
    path_gap: f64,
}

fn pair_stats<B, E, G>(
    x0: &Array2<f64>,
    eps: &Array2<f64>,
    t: usize,
    k: usize,
    models: (&B, &E, &G),
    s: &NoiseSchedule,
) -> Result<PairStats>
where
    B: EpsilonModel + ?Sized,
    E: EpsilonModel + ?Sized,
    G: EpsilonModel + ?Sized,
{
    let (base, ema, graph) = models;
    let x_t = forward_noise(x0.view(), eps.view(), t, s)?;
    let ev = evaluate_edge(x0.view(), x_t.view(), t, k, base, ema, graph, s)?;
    let report = path_residual_report(x0.view(), &[t, k], base, s, eps.view())?;
    let summary = report.summary();
    Ok(PairStats {
        initial: summary.mean_abs_initial,
        edge: mean_abs(&ev.edge),
        dist_k: mean_abs(&ev.dist_k),
        cond_rate: ev.cond_rate(),
        path_lhs: summary.mean_abs_lhs,
        path_gap: summary.max_gap,
    })
}

fn solve_graph_file(path: &std::path::Path) -> Result<()> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let graph = StepGraph::parse(&text)?;
    let exact = exact_shortest(&graph);
    let fix = relaxation_fixpoint(&graph, SweepOrder::Topological, graph.edge_count() + 2)?;
    println!(
        "graph {}: {} nodes, {} edges, relaxation settled after {} sweeps ({} updates)",
        path.display(),
        graph.node_count(),
        graph.edge_count(),
        fix.sweeps,
        fix.updates.len()
    );
    for (t, d) in &exact.dist {
        let route = exact.path_to_clean(*t).unwrap_or_default();
        println!(
            "  node {t:>5}  shortest {d:>12.6}  relaxed {:>12.6}  path {route:?}",
            fix.dist[t]
        );
    }
    Ok(())
}

pub fn run(args: &DiagnoseArgs) -> Result<()> {
    let (cfg, triplet, normalization) = match &args.checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            (ck.config.clone(), Some(ck.state.triplet), Some(ck.normalization))
        }
        None => {
            let cfg = match &args.config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            (cfg, None, None)
        }
    };
    let s = cfg.schedule_params().build()?;
    let dataset = match &normalization {
        Some(n) => generate_with(&cfg.dataset_spec(), n)?,
        None => generate(&cfg.dataset_spec())?,
    };
    let triplet = match triplet {
        Some(t) => t,
        None => {
            let arch = cfg.architecture_for(dataset.dims(), dataset.image_shape)?;
            ModelTriplet::new(Denoiser::new(arch, cfg.seed)?)
        }
    };

    let mut pairs_rng = stream_rng(args.seed, Stream::Pairs);
    let mut noise_rng = stream_rng(args.seed, Stream::Noise);
    let mut cursor = BatchCursor::default();
    let mode = if args.perfect_predictor { "perfect predictor" } else { "model" };
    println!("residual diagnostics ({mode}, batch {})", args.batch);
    println!(
        "{:>5} {:>5}  {:>12} {:>12} {:>12} {:>9} {:>12} {:>10}",
        "t", "k", "|R(t,0)|", "edge(k,t)", "dist_k", "cond_rate", "|path res|", "gap"
    );
    let mut totals = (0.0, 0.0, 0.0);
    for _ in 0..args.pairs {
        let (t, k) = sample_step_pair(&mut pairs_rng, s.timesteps())?;
        let x0 = cursor.next_batch(dataset.data.view(), args.batch, args.seed)?;
        let eps = standard_normal(&mut noise_rng, x0.nrows(), x0.ncols());
        let st = if args.perfect_predictor {
            let p = PerfectPredictor::new(x0.view(), &s);
            pair_stats(&x0, &eps, t, k, (&p, &p, &p), &s)?
        } else {
            pair_stats(
                &x0,
                &eps,
                t,
                k,
                (&triplet.base, &triplet.ema, &triplet.graph),
                &s,
            )?
        };
        println!(
            "{t:>5} {k:>5}  {:>12.6e} {:>12.6e} {:>12.6e} {:>9.3} {:>12.6e} {:>10.3e}",
            st.initial, st.edge, st.dist_k, st.cond_rate, st.path_lhs, st.path_gap
        );
        totals.0 += st.initial;
        totals.1 += st.edge;
        totals.2 += st.cond_rate;
    }
    if args.pairs > 0 {
        let n = args.pairs as f64;
        println!(
            "mean |R(t,0)| {:.6e}  mean edge {:.6e}  cond firing rate {:.3}",
            totals.0 / n,
            totals.1 / n,
            totals.2 / n
        );
    }

    if let Some(path) = &args.graph {
        solve_graph_file(path)?;
    }
    if args.oracle_graphs > 0 {
        let st = self_test(args.oracle_graphs, ORACLE_MAX_NODES, args.seed, ORACLE_TOL)?;
        println!(
            "oracle self-test: {}/{} graphs matched (max |diff| {:.1e})",
            st.matched, st.graphs, st.max_abs_diff
        );
        if st.matched != st.graphs {
            return Err(Error::Domain("relaxation disagreed with the exact solver".into()));
        }
    }
    Ok(())
}
