use depthlaw_core::ammup::solve_eta_star;
use depthlaw_core::nncore::{Activation, Model, Role};
use depthlaw_core::rng;
use depthlaw_core::sensitivity::{
    delta_z_linearized, delta_z_literal, gaussian_batch, jvp_preactivations, loss_gradient,
    vjp_params, Batch, EnergyConfig, LossSpec, ParamVector, Targets,
};
use depthlaw_core::{ArchSpec, Tensor};
use proptest::prelude::*;

/// `out = w2 * w1 * x` with every weight and the input equal to one.
fn unit_chain() -> (Model<f64>, Batch<f64>, LossSpec) {
    let mut spec = ArchSpec::mlp(1, 1);
    spec.activation = Activation::Identity;
    spec.input_dim = 1;
    spec.outputs = 1;
    let mut m: Model<f64> = Model::build(&spec, 0).unwrap();
    for p in &mut m.params {
        p.value.data[0] = 1.0;
    }
    let batch = Batch {
        x: Tensor::from_f64(&[1, 1], &[1.0]).unwrap(),
        y: Targets::Regression(Tensor::zeros(&[1, 1])),
    };
    (m, batch, LossSpec::mse(1, 1.0))
}

#[test]
fn hand_computed_chain() {
    let (m, batch, loss) = unit_chain();
    let (l, g) = loss_gradient(&m, &batch, &loss).unwrap();
    assert_eq!(l, 0.5);
    assert_eq!(g.flat(), vec![1.0, 1.0]);
    let dz = delta_z_linearized(&m, &batch, &batch.x, 1.0, &loss).unwrap();
    assert_eq!(dz[0].data, vec![-1.0]);
    assert_eq!(dz[1].data, vec![-2.0]);
    assert_eq!(dz[0].mean_sq(), 1.0);
}

#[test]
fn zero_and_head_directions() {
    let spec = ArchSpec::mlp(3, 5);
    let m: Model<f64> = Model::build(&spec, 1).unwrap();
    let x = Tensor::randn(&[2, spec.input_dim], 1.0, &mut rng::stream(0, 0));
    let zero = jvp_preactivations(&m, &x, &ParamVector::zeros(&m)).unwrap();
    assert!(zero.iter().all(|t| t.data.iter().all(|&v| v == 0.0)));
    let head = m.index_of(4, Role::Head).unwrap();
    let d = jvp_preactivations(&m, &x, &ParamVector::unit(&m, head, 0)).unwrap();
    assert!(d[..3].iter().all(|t| t.data.iter().all(|&v| v == 0.0)));
    assert!(d[3].max_abs() > 0.0);
}

#[test]
fn linearized_tracks_literal_near_zero() {
    for (i, spec) in [
        ArchSpec::mlp(4, 16),
        ArchSpec::cnn1d(3, 8, 6),
        ArchSpec::transformer(1, 1, 8),
    ]
    .into_iter()
    .enumerate()
    {
        let loss = LossSpec::mse(spec.outputs, 1.0);
        let cfg = EnergyConfig {
            n_init: 4,
            n_data: 2,
            batch: 16,
            seed: i as u64,
            ..Default::default()
        };
        let eta = 1e-3 * solve_eta_star::<f64>(&spec, &loss, &cfg).unwrap().value;
        let m: Model<f64> = Model::build(&spec, 30 + i as u64).unwrap();
        let mut r = rng::stream(i as u64, 9);
        let batch = gaussian_batch(&spec, &loss, 16, &mut r);
        let probe = gaussian_batch::<f64>(&spec, &loss, 1, &mut r).x;
        let lin = delta_z_linearized(&m, &batch, &probe, eta, &loss).unwrap();
        let lit = delta_z_literal(&m, &batch, &probe, eta, &loss).unwrap();
        for (a, b) in lin.iter().zip(&lit) {
            let mut d = a.clone();
            d.axpy(-1.0, b);
            assert!(d.sq_norm().sqrt() <= 0.01 * a.sq_norm().sqrt() + 1e-12);
        }
    }
}

fn tiny(family: usize, seed: u64) -> ArchSpec {
    let mut s = match family {
        0 => ArchSpec::mlp(3, 4),
        1 => ArchSpec::cnn1d(2, 3, 5),
        2 => ArchSpec::resnet(1, 2, 4),
        _ => {
            let mut t = ArchSpec::transformer(1, 1, 4);
            t.tokens = 3;
            t.ffn_mult = 2;
            t
        }
    };
    s.input_dim = 3;
    s.outputs = 2;
    s.seed = seed;
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn jvp_vjp_adjoint(family in 0usize..4, seed in 0u64..1000) {
        let spec = tiny(family, seed);
        let m: Model<f64> = Model::build(&spec, seed).unwrap();
        let mut r = rng::stream(seed, 1);
        let mut shape = vec![2];
        shape.extend(spec.input_shape());
        let x = Tensor::randn(&shape, 1.0, &mut r);
        let v = ParamVector::random(&m, &mut r);
        let f = m.record(&x).unwrap();
        let jv = jvp_preactivations(&m, &x, &v).unwrap();
        let vars: Vec<_> = f.units.iter().chain(std::iter::once(&f.output)).copied().collect();
        let ws: Vec<Tensor<f64>> = vars.iter().map(|&u| Tensor::randn(&f.tape.value(u).shape, 1.0, &mut r)).collect();
        let seeds: Vec<_> = vars.iter().copied().zip(ws.iter()).collect();
        let lhs: f64 = ws.iter().zip(&jv).map(|(w, j)| w.data.iter().zip(&j.data).map(|(a, b)| a * b).sum::<f64>()).sum();
        let rhs = vjp_params(&m, &f, &seeds).dot(&v);
        prop_assert!((lhs - rhs).abs() <= 1e-8 * lhs.abs().max(rhs.abs()) + 1e-12, "{} vs {}", lhs, rhs);
    }

    #[test]
    fn update_is_linear_in_eta(seed in 0u64..1000, c in 0.0f64..8.0) {
        let spec = tiny(0, seed);
        let loss = LossSpec::cross_entropy(2);
        let m: Model<f64> = Model::build(&spec, seed).unwrap();
        let mut r = rng::stream(seed, 2);
        let batch = gaussian_batch(&spec, &loss, 4, &mut r);
        let a = delta_z_linearized(&m, &batch, &batch.x, 0.3, &loss).unwrap();
        let b = delta_z_linearized(&m, &batch, &batch.x, 0.3 * c, &loss).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for (p, q) in x.data.iter().zip(&y.data) {
                prop_assert!((c * p - q).abs() <= 1e-12 * (1.0 + q.abs()));
            }
        }
    }
}
