use ndarray::Array2;
use pathdiff::denoiser::{Architecture, Denoiser, EpsilonModel, MlpSpec, Trainable};
use pathdiff::diffusion::forward_noise;
use pathdiff::losses::{objective, LossVariant, ObjectiveInputs, RelaxTargets};
use pathdiff::residual::evaluate_edge;
use pathdiff::rng::{standard_normal, stream_rng, Stream};
use pathdiff::schedule::{make_linear_schedule, NoiseSchedule};

struct Case {
    x0: Array2<f64>,
    eps: Array2<f64>,
    x_t: Array2<f64>,
    t: usize,
    dist_k: Array2<f64>,
    edge: Array2<f64>,
}

fn total(model: &Denoiser, c: &Case, s: &NoiseSchedule, variant: LossVariant) -> (f64, Array2<f64>, usize) {
    let inputs = ObjectiveInputs {
        x0: c.x0.view(),
        eps: c.eps.view(),
        x_t: c.x_t.view(),
        t: c.t,
        lambda: 0.7,
        variant,
        relax: Some(RelaxTargets {
            dist_k: c.dist_k.view(),
            edge: c.edge.view(),
        }),
    };
    let eps_hat = model.predict(c.x_t.view(), c.t).unwrap();
    let v = objective(eps_hat.view(), &inputs, s).unwrap();
    let fired = v.cond.iter().filter(|&&f| f).count();
    (v.breakdown.total, v.grad_eps_hat, fired)
}

fn check(variant: LossVariant) {
    let s = make_linear_schedule(100, 1e-3, 0.05).unwrap();
    let arch = Architecture::Mlp(MlpSpec {
        input_dim: 2,
        hidden_dims: vec![12, 12],
        embed_dim: 6,
    });
    let mut base = Denoiser::new(arch.clone(), 1).unwrap();
    assert!(base.params().num_scalars() <= 1000);
    let ema = Denoiser::new(arch.clone(), 2).unwrap();
    let graph = Denoiser::new(arch, 3).unwrap();

    let mut rng = stream_rng(4, Stream::Dataset);
    let x0 = standard_normal(&mut rng, 16, 2);
    let eps = standard_normal(&mut rng, 16, 2);
    let (t, k) = (30, 12);
    let x_t = forward_noise(x0.view(), eps.view(), t, &s).unwrap();
    let ev = evaluate_edge(x0.view(), x_t.view(), t, k, &base, &ema, &graph, &s).unwrap();
    let case = Case {
        x0,
        eps,
        x_t,
        t,
        dist_k: ev.dist_k,
        edge: ev.edge,
    };

    let (_, grad_out, fired) = total(&base, &case, &s, variant);
    assert!(fired > 0 && fired < 16, "want a mix of fired rows, got {fired}");
    let analytic = base.backward(case.x_t.view(), t, grad_out.view()).unwrap().to_flat();

    let h = 1e-5;
    let theta = base.params().to_flat();
    let mut numeric = vec![0.0; theta.len()];
    for i in 0..theta.len() {
        let mut p = theta.clone();
        p[i] = theta[i] + h;
        base.params_mut().set_flat(&p).unwrap();
        let (up, _, _) = total(&base, &case, &s, variant);
        p[i] = theta[i] - h;
        base.params_mut().set_flat(&p).unwrap();
        let (down, _, _) = total(&base, &case, &s, variant);
        numeric[i] = (up - down) / (2.0 * h);
    }
    base.params_mut().set_flat(&theta).unwrap();

    let mut offset = 0;
    for (name, arr) in base.params().iter() {
        let n = arr.len();
        let a = &analytic[offset..offset + n];
        let b = &numeric[offset..offset + n];
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-8);
        assert!(diff / scale < 1e-4, "{name}: relative error {}", diff / scale);
        offset += n;
    }
}

#[test]
fn l2norm_objective_gradient_matches_central_differences() {
    check(LossVariant::L2norm);
}

#[test]
fn mse_objective_gradient_matches_central_differences() {
    check(LossVariant::Mse);
}
