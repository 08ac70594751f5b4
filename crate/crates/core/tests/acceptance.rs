//! Acceptance criteria. Each test writes one `criterion N: PASS|FAIL` line to
//! stderr (outside the capture) and then asserts.

use std::io::Write as _;
use std::sync::OnceLock;

use depthlaw_core::ammup::{solve_eta_star, transfer_eta, TransferRule};
use depthlaw_core::arch::{Branch, NormPlacement};
use depthlaw_core::graphdepth::PaddingMode;
use depthlaw_core::nncore::{Activation, Model};
use depthlaw_core::oracles::run_suite;
use depthlaw_core::rng;
use depthlaw_core::sensitivity::{
    ab_decomposition, batch_loss, delta_z_linearized, gaussian_batch, jvp_preactivations,
    layer_energy, loss_gradient, Batch, EnergyConfig, LossSpec, ParamVector, Targets,
};
use depthlaw_core::sweep::{
    grid_argmin, optimum_per_depth, run_sweep, wls_fit, Optimizer, SweepPlan, SweepRecord,
};
use depthlaw_core::{ArchSpec, Tensor};

const ABS_FLOOR: f64 = 1e-12;

fn report(n: usize, pass: bool, detail: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n}: {verdict} {detail}");
}

fn ols_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn log_slope(depths: &[usize], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = depths.iter().map(|&l| (l as f64).ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    ols_slope(&lx, &ly)
}

/// One small instance of every template and placement.
fn zoo() -> Vec<ArchSpec> {
    let mut v = Vec::new();
    let mut mlp = ArchSpec::mlp(3, 8);
    mlp.input_dim = 6;
    v.push(mlp);
    for padding in [PaddingMode::Circular, PaddingMode::Zero] {
        let mut c = ArchSpec::cnn1d(3, 4, 6);
        c.input_dim = 2;
        c.padding = padding;
        v.push(c);
    }
    let mut c2 = ArchSpec::cnn1d(2, 3, 4);
    c2.family = "cnn2d".parse().unwrap();
    c2.grid = vec![3, 4];
    c2.kernel = vec![3, 3];
    c2.input_dim = 2;
    v.push(c2);
    for branch in [Branch::Dense, Branch::Conv] {
        let mut r = ArchSpec::resnet(2, 3, 6);
        r.branch = branch;
        r.channels = 3;
        r.grid = vec![5];
        r.kernel = vec![3];
        r.input_dim = 3;
        v.push(r);
    }
    for placement in [NormPlacement::Pre, NormPlacement::Post] {
        let mut t = ArchSpec::transformer(2, 1, 8);
        t.heads = 2;
        t.tokens = 3;
        t.input_dim = 4;
        t.ffn_mult = 2;
        t.norm_placement = placement;
        v.push(t);
    }
    for s in &mut v {
        s.outputs = 3;
    }
    v
}

#[test]
fn criterion_1_eta_squared_scaling() {
    let cfg = EnergyConfig {
        n_init: 4,
        n_data: 2,
        batch: 8,
        seed: 11,
        ..Default::default()
    };
    let mut worst = 0.0f64;
    for spec in zoo() {
        for loss in [LossSpec::mse(3, 1.0), LossSpec::cross_entropy(3)] {
            let a = layer_energy::<f64>(&spec, &loss, 0.37, &cfg).unwrap();
            let b = layer_energy::<f64>(&spec, &loss, 0.74, &cfg).unwrap();
            worst = worst.max((b.s_bar / a.s_bar - 4.0).abs() / 4.0);
            for (x, y) in a.layers.iter().zip(&b.layers) {
                worst = worst.max((y.s - 4.0 * x.s).abs() / (4.0 * x.s + ABS_FLOOR));
            }
        }
    }
    let pass = worst <= 1e-9;
    report(
        1,
        pass,
        format!("max relative deviation of S(2eta)/S(eta) from 4: {worst:.2e} (tol 1e-9)"),
    );
    assert!(pass);
}

fn energy_slope_mlp() -> (Vec<f64>, f64) {
    let depths = [4, 8, 16, 32];
    let base = ArchSpec::mlp(4, 64);
    let loss = LossSpec::mse(base.outputs, 1.0);
    let cfg = EnergyConfig {
        n_init: 200,
        ..Default::default()
    };
    let s: Vec<f64> = depths
        .iter()
        .map(|&l| {
            layer_energy::<f64>(&base.with_depth(l).unwrap(), &loss, 1.0, &cfg)
                .unwrap()
                .s_bar
        })
        .collect();
    let slope = log_slope(&depths, &s);
    (s, slope)
}

#[test]
fn criterion_2_depth_cubed_energy() {
    let (s, slope) = energy_slope_mlp();
    let pass = (slope - 3.0).abs() <= 0.3;
    report(
        2,
        pass,
        format!("slope of log S_bar(1) vs log L = {slope:.3} (want 3.0 +- 0.3); S_bar = {s:.4?}"),
    );
    assert!(pass);
}

#[test]
fn criterion_3_eta_star_slope() {
    let depths = [4, 8, 16, 32];
    let mut mlp = ArchSpec::mlp(4, 32);
    mlp.outputs = 10;
    let mut cnn = ArchSpec::cnn1d(4, 32, 8);
    cnn.padding = PaddingMode::Circular;
    let cfg = EnergyConfig::default();
    let mut lines = Vec::new();
    let mut pass = true;
    for base in [mlp, cnn] {
        let loss = LossSpec::mse(base.outputs, 1.0);
        let eta: Vec<f64> = depths
            .iter()
            .map(|&l| {
                solve_eta_star::<f64>(&base.with_depth(l).unwrap(), &loss, &cfg)
                    .unwrap()
                    .value
            })
            .collect();
        let slope = log_slope(&depths, &eta);
        pass &= (slope + 1.5).abs() <= 0.15;
        lines.push(format!("{} {slope:.3}", base.tag()));
    }
    report(
        3,
        pass,
        format!("eta* slopes (want -1.5 +- 0.15): {}", lines.join(", ")),
    );
    assert!(pass);
}

fn sweep_templates() -> Vec<ArchSpec> {
    let mut resnet = ArchSpec::resnet(1, 1, 64);
    resnet.branch = Branch::Dense;
    vec![ArchSpec::mlp(2, 64), ArchSpec::cnn1d(2, 32, 8), resnet]
}

fn sweep_fit(arch: &ArchSpec, optimizer: Optimizer) -> f64 {
    let mut plan = SweepPlan::new(arch.clone(), vec![2, 4, 8, 16], vec![0, 1, 2]);
    plan.optimizer = optimizer;
    let records = run_sweep(&plan, None).unwrap();
    wls_fit(&optimum_per_depth(&records)).unwrap().alpha
}

/// Fitted slopes for each template, `(tag, sgd, adam)`; shared by criteria 4 and 8.
fn ablation() -> &'static Vec<(String, f64, f64)> {
    static CELL: OnceLock<Vec<(String, f64, f64)>> = OnceLock::new();
    CELL.get_or_init(|| {
        sweep_templates()
            .iter()
            .map(|a| {
                (
                    a.tag(),
                    sweep_fit(a, Optimizer::Sgd),
                    sweep_fit(a, Optimizer::adam()),
                )
            })
            .collect()
    })
}

#[test]
fn criterion_4_sweep_slope() {
    let fits = ablation();
    let pass = fits.iter().all(|(_, sgd, _)| (-1.8..=-1.1).contains(sgd));
    let s: Vec<String> = fits.iter().map(|(t, a, _)| format!("{t} {a:.3}")).collect();
    report(
        4,
        pass,
        format!("SGD fitted alpha (want in [-1.8, -1.1]): {}", s.join(", ")),
    );
    assert!(pass);
}

#[test]
fn criterion_5_zero_shot_transfer() {
    let (l0, l) = (4, 16);
    let plan = SweepPlan::new(ArchSpec::mlp(l0, 64), vec![l0, l], (0..10).collect());
    let grid = plan.grid();
    let step = (grid[1] / grid[0]).ln();
    let records = run_sweep(&plan, None).unwrap();
    let argmin = |depth: usize, seed: u64| {
        let rows: Vec<(f64, f64)> = records
            .iter()
            .filter(|r: &&SweepRecord| r.depth == depth && r.seed == seed)
            .map(|r| (r.eta, r.final_loss))
            .collect();
        grid_argmin(&rows)
    };
    let mut hits = 0;
    for seed in 0..10 {
        if let (Some(e0), Some(e1)) = (argmin(l0, seed), argmin(l, seed)) {
            let moved = transfer_eta(&TransferRule::new(e0, l0).unwrap(), l).unwrap();
            if (moved.ln() - e1.ln()).abs() <= step * (1.0 + 1e-9) {
                hits += 1;
            }
        }
    }
    let pass = hits >= 7;
    report(
        5,
        pass,
        format!("transfer 4 -> 16 within one grid step in {hits}/10 seeds (want >= 7)"),
    );
    assert!(pass);
}

#[test]
fn criterion_6_oracle_suite() {
    let reports = run_suite(&[], 0).unwrap();
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.pass)
        .map(|r| r.name.as_str())
        .collect();
    let pass = failed.is_empty();
    report(
        6,
        pass,
        format!("{} oracles, failed: {failed:?}", reports.len()),
    );
    assert!(pass);
}

fn random_tiny(i: usize, r: &mut rng::Rng) -> ArchSpec {
    use rand::Rng as _;
    let act = [Activation::Relu, Activation::Gelu, Activation::Identity][r.gen_range(0..3)];
    let mut s = match i % 4 {
        0 => ArchSpec::mlp(r.gen_range(1..=4), r.gen_range(2..=6)),
        1 => {
            let mut c = ArchSpec::cnn1d(r.gen_range(1..=3), r.gen_range(2..=4), r.gen_range(3..=6));
            if r.gen_bool(0.5) {
                c.family = "cnn2d".parse().unwrap();
                c.grid = vec![3, r.gen_range(3..=4)];
                c.kernel = vec![3, 3];
            }
            c.padding = if r.gen_bool(0.5) {
                PaddingMode::Circular
            } else {
                PaddingMode::Zero
            };
            c
        }
        2 => {
            let mut n =
                ArchSpec::resnet(r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(2..=5));
            if r.gen_bool(0.5) {
                n.branch = Branch::Conv;
                n.channels = r.gen_range(2..=3);
                n.grid = vec![r.gen_range(3..=5)];
                n.kernel = vec![3];
            }
            n.residual_c = r.gen_range(0.5..2.0);
            n
        }
        _ => {
            let mut t = ArchSpec::transformer(r.gen_range(1..=2), r.gen_range(0..=1), 4);
            t.heads = [1, 2][r.gen_range(0..2)];
            t.tokens = r.gen_range(2..=4);
            t.ffn_mult = 2;
            t.norm_placement =
                [NormPlacement::Pre, NormPlacement::Post, NormPlacement::None][r.gen_range(0..3)];
            t
        }
    };
    if i % 4 != 3 {
        s.activation = act;
    }
    s.input_dim = r.gen_range(2..=4);
    s.outputs = r.gen_range(2..=3);
    s
}

fn rel_err(fd: &[f64], exact: &[f64]) -> f64 {
    let diff: f64 = fd
        .iter()
        .zip(exact)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = exact.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / (norm + ABS_FLOOR)
}

#[test]
fn criterion_7_derivatives() {
    let h = 1e-5;
    let mut worst_jvp = 0.0f64;
    let mut worst_grad = 0.0f64;
    for i in 0..50 {
        let mut r = rng::named(2024, "acceptance_tiny", i as u64);
        let spec = random_tiny(i, &mut r);
        let loss = if i % 2 == 0 {
            LossSpec::mse(spec.outputs, 1.0)
        } else {
            LossSpec::cross_entropy(spec.outputs)
        };
        let model: Model<f64> = Model::build(&spec, 100 + i as u64).unwrap();
        let batch: Batch<f64> = gaussian_batch(&spec, &loss, 3, &mut r);
        let dir = ParamVector::random(&model, &mut r);
        let (mut plus, mut minus) = (model.clone(), model.clone());
        plus.step(h, &dir);
        minus.step(-h, &dir);

        let jvp = jvp_preactivations(&model, &batch.x, &dir).unwrap();
        let (tp, tm) = (
            plus.forward(&batch.x).unwrap(),
            minus.forward(&batch.x).unwrap(),
        );
        let fwd_p: Vec<&Tensor<f64>> = tp.units.iter().chain(std::iter::once(&tp.output)).collect();
        let fwd_m: Vec<&Tensor<f64>> = tm.units.iter().chain(std::iter::once(&tm.output)).collect();
        assert_eq!(jvp.len(), fwd_p.len());
        for ((j, p), m) in jvp.iter().zip(&fwd_p).zip(&fwd_m) {
            let fd: Vec<f64> = p
                .data
                .iter()
                .zip(&m.data)
                .map(|(a, b)| (a - b) / (2.0 * h))
                .collect();
            worst_jvp = worst_jvp.max(rel_err(&fd, &j.data));
        }

        let (_, g) = loss_gradient(&model, &batch, &loss).unwrap();
        let fd = (batch_loss(&plus, &batch, &loss).unwrap()
            - batch_loss(&minus, &batch, &loss).unwrap())
            / (2.0 * h);
        worst_grad = worst_grad.max(rel_err(&[fd], &[g.dot(&dir)]));
    }

    let mut worst_ab = 0.0f64;
    for seed in 0..5u64 {
        let mut spec = ArchSpec::mlp(3, 4);
        spec.input_dim = 5;
        spec.outputs = 3;
        let sigma = 1.0;
        let loss = LossSpec::mse(3, sigma);
        let model: Model<f64> = Model::build(&spec, seed).unwrap();
        let x = Tensor::randn(&[1, 5], 1.0, &mut rng::named(seed, "acceptance_ab", 0));
        let eta = 0.5;
        let ab = ab_decomposition(&model, &x, eta, &loss).unwrap();
        // the update is affine in y, so E_y[(dz)^2] follows from y = 0 and y = sigma e_t
        let at = |y: Vec<f64>| {
            let batch = Batch {
                x: x.clone(),
                y: Targets::Regression(Tensor::from_vec(&[1, 3], y).unwrap()),
            };
            delta_z_linearized(&model, &batch, &x, eta, &loss).unwrap()
        };
        let base = at(vec![0.0; 3]);
        let shifted: Vec<_> = (0..3)
            .map(|t| {
                let mut y = vec![0.0; 3];
                y[t] = sigma;
                at(y)
            })
            .collect();
        for (li, terms) in ab.iter().enumerate() {
            let m = base[li].len() as f64;
            let mut expect = base[li].sq_norm() / m;
            for s in &shifted {
                let mut d = s[li].clone();
                d.axpy(-1.0, &base[li]);
                expect += d.sq_norm() / m;
            }
            worst_ab = worst_ab.max((terms.total - expect).abs() / (expect.abs() + ABS_FLOOR));
        }
    }

    let pass = worst_jvp <= 1e-6 && worst_grad <= 1e-6 && worst_ab <= 1e-8;
    report(
        7,
        pass,
        format!("max rel err: jvp {worst_jvp:.2e}, gradient {worst_grad:.2e} (tol 1e-6); A+B {worst_ab:.2e} (tol 1e-8)"),
    );
    assert!(pass);
}

#[test]
fn criterion_8_optimizer_ablation() {
    let fits = ablation();
    let pass = fits.iter().all(|(_, sgd, adam)| adam.abs() < sgd.abs());
    let s: Vec<String> = fits
        .iter()
        .map(|(t, sgd, adam)| format!("{t} sgd {sgd:.3} adam {adam:.3}"))
        .collect();
    report(
        8,
        pass,
        format!("|alpha_adam| < |alpha_sgd|: {}", s.join(", ")),
    );
    assert!(pass);
}
