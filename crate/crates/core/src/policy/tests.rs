use super::*;
use crate::gradcheck::{check, ScalarFn, Tolerance};
use crate::gradcore::{Result as GradResult, Tape};
use crate::rng::stream;
use crate::stats::chi_square_fit;

const DIMS: PolicyDims = PolicyDims {
    state_dim: 3,
    action_dim: 2,
    hidden: 8,
    n_factors: 2,
    n_classes: 3,
};

fn policy(method: ModeMethod, seed: u64) -> Policy {
    Policy::multimodal(DIMS, method, GumbelConfig::default(), &mut stream(seed, "init"))
}

fn states(rows: usize, seed: u64) -> Matrix {
    let mut rng = stream(seed, "states");
    Matrix::from_fn(rows, DIMS.state_dim, |_, _| rng.random_range(-1.0..1.0))
}

fn bind_layers<V: Clone>(params: &[V], acts: &[Activation]) -> BoundMlp<V> {
    BoundMlp {
        layers: params
            .chunks(2)
            .zip(acts)
            .map(|(wb, &a)| (wb[0].clone(), wb[1].clone(), a))
            .collect(),
    }
}

fn acts(mlp: &Mlp) -> Vec<Activation> {
    mlp.layers().iter().map(|l| l.activation).collect()
}

fn weighted<B: Backend>(b: &mut B, x: &B::Value, seed: u64) -> GradResult<B::Value> {
    let (r, c) = b.value(x).shape();
    let mut rng = stream(seed, "weights");
    let w = b.constant(Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0)));
    let p = b.mul(x, &w)?;
    Ok(b.sum(&p))
}

#[test]
fn zero_weights_give_uniform_modes() {
    let mut pol = policy(ModeMethod::Ste, 0);
    if let Policy::Multimodal(p) = &mut pol {
        p.f_b = Mlp::zeros(&[3, 8, 8, 6]);
    }
    let mut e = Eager;
    let bound = pol.bind(&mut e);
    let logits = pol.mode_logits(&mut e, &bound, &states(4, 1)).unwrap();
    assert_eq!(logits.shape(), (8, 3));
    assert!(logits.as_slice().iter().all(|&v| v == 0.0));
    let probs = e.softmax_rows(&logits);
    assert!(probs.as_slice().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn batched_logits_match_single_rows() {
    let pol = policy(ModeMethod::Ste, 2);
    let s = states(5, 3);
    let mut e = Eager;
    let bound = pol.bind(&mut e);
    let all = pol.mode_logits(&mut e, &bound, &s).unwrap();
    for r in 0..5 {
        let one = Matrix::row_vector(s.row(r));
        let l = pol.mode_logits(&mut e, &bound, &one).unwrap();
        for f in 0..DIMS.n_factors {
            assert_eq!(l.row(f), all.row(r * DIMS.n_factors + f));
        }
    }
}

#[test]
fn state_width_is_checked() {
    let pol = policy(ModeMethod::Ste, 0);
    let mut e = Eager;
    let bound = pol.bind(&mut e);
    let err = pol.mode_logits(&mut e, &bound, &Matrix::zeros(1, 4)).unwrap_err();
    assert!(matches!(
        err,
        PolicyError::Dimension {
            expected: 3,
            got: 4,
            ..
        }
    ));
}

struct LogitsFn {
    acts: Vec<Activation>,
}

impl ScalarFn for LogitsFn {
    fn eval<B: Backend>(&self, b: &mut B, inputs: &[B::Value]) -> GradResult<B::Value> {
        let (state, params) = inputs.split_last().unwrap();
        let mlp = bind_layers(params, &self.acts);
        let out = mlp.forward(b, state).map_err(|e| match e {
            PolicyError::Grad(g) => g,
            other => panic!("{other}"),
        })?;
        weighted(b, &out, 9)
    }
}

#[test]
fn logit_gradients_match_finite_differences() {
    for seed in 0..3 {
        let Policy::Multimodal(p) = policy(ModeMethod::Ste, seed) else {
            unreachable!()
        };
        let mut inputs: Vec<Matrix> = p.f_b.params().into_iter().cloned().collect();
        inputs.push(states(4, seed));
        let rep = check(&LogitsFn { acts: acts(&p.f_b) }, &inputs, 1e-6, Tolerance::default()).unwrap();
        assert!(rep.passed, "rel {} abs {}", rep.max_rel_err, rep.max_abs_err);
    }
}

fn zero_noise(pol: &Policy, batch: usize) -> ActNoise {
    let Policy::Multimodal(p) = pol else {
        return ActNoise {
            mode: ModeNoise::None,
            action: Matrix::zeros(batch, pol.action_dim()),
        };
    };
    ActNoise {
        mode: ModeNoise::Uniform(vec![0.5; batch * p.n_factors]),
        action: Matrix::zeros(batch, p.action_dim),
    }
}

#[test]
fn zero_action_head_with_zero_noise_acts_zero() {
    let dims = PolicyDims {
        n_factors: 1,
        n_classes: 2,
        ..DIMS
    };
    let mut pol = Policy::multimodal(dims, ModeMethod::Ste, GumbelConfig::default(), &mut stream(0, "init"));
    if let Policy::Multimodal(p) = &mut pol {
        p.f_a = Mlp::zeros(&[2, 8, 8, 4]);
    }
    let mut e = Eager;
    let bound = pol.bind(&mut e);
    let s = pol
        .act_with_noise(&mut e, &bound, &states(3, 0), &zero_noise(&pol, 3))
        .unwrap();
    assert!(s.action.as_slice().iter().all(|&a| a == 0.0));

    // With noise the action is tanh(sigma * eps) for sigma = exp(0) = 1.
    let mut noise = zero_noise(&pol, 1);
    noise.action = Matrix::row_vector(&[0.3, -1.2]);
    let s = pol.act_with_noise(&mut e, &bound, &states(1, 0), &noise).unwrap();
    assert_eq!(s.action.as_slice(), &[0.3f64.tanh(), (-1.2f64).tanh()]);
}

#[test]
fn acting_is_deterministic_per_stream() {
    for method in [ModeMethod::Ste, ModeMethod::Gumbel] {
        let pol = policy(method, 4);
        let s = states(6, 4);
        let run = || {
            let mut e = Eager;
            let bound = pol.bind(&mut e);
            let mut streams = NoiseStreams::from_seed(11);
            let a = pol.act(&mut e, &bound, &s, &mut streams).unwrap();
            (a.action, a.mode_index)
        };
        assert_eq!(run(), run());
    }
}

#[test]
fn mode_index_matches_mode_rows() {
    let pol = policy(ModeMethod::Gumbel, 5);
    let mut e = Eager;
    let bound = pol.bind(&mut e);
    let s = pol
        .act(&mut e, &bound, &states(16, 5), &mut NoiseStreams::from_seed(5))
        .unwrap();
    let mode = s.mode.unwrap();
    let z = mode.z.argmax_rows();
    for (r, &idx) in s.mode_index.iter().enumerate() {
        assert!(idx < 9);
        assert_eq!(decode_mode(idx, 2, 3), z[r * 2..r * 2 + 2].to_vec());
    }
}

#[test]
fn loss_gradient_reaches_mode_logits() {
    for method in [ModeMethod::Ste, ModeMethod::Gumbel] {
        for seed in 0..5 {
            let pol = policy(method, seed);
            let mut t = Tape::new();
            let bound = pol.bind(&mut t);
            let s = t.constant(states(8, seed));
            let a = pol.act(&mut t, &bound, &s, &mut NoiseStreams::from_seed(seed)).unwrap();
            let loss = weighted(&mut t, &a.action, seed).unwrap();
            t.backward(loss).unwrap();
            let BoundPolicy::Multimodal { f_b, .. } = &bound else {
                unreachable!()
            };
            let norm: f64 = f_b.vars().iter().map(|v| t.grad(*v).sum_of_squares()).sum();
            assert!(norm > 1e-12, "{method:?} seed {seed}: {norm}");
        }
    }
}

#[test]
fn greedy_tie_breaks_to_first_class() {
    let mut pol = policy(ModeMethod::Ste, 0);
    if let Policy::Multimodal(p) = &mut pol {
        p.f_b = Mlp::zeros(&[3, 8, 8, 6]);
    }
    let g = pol.act_deterministic(&states(3, 0)).unwrap();
    assert_eq!(g.mode_index, vec![0, 0, 0]);
    assert_eq!(g, pol.act_deterministic(&states(3, 0)).unwrap());
}

fn linear_mode_head(weight: Matrix) -> Mlp {
    let cols = weight.cols();
    Mlp::from_layers(vec![Layer {
        weight,
        bias: Matrix::zeros(1, cols),
        activation: Activation::Linear,
    }])
    .unwrap()
}

#[test]
fn greedy_picks_dominant_logit() {
    let dims = PolicyDims {
        state_dim: 1,
        n_factors: 1,
        ..DIMS
    };
    let mut pol = Policy::multimodal(dims, ModeMethod::Ste, GumbelConfig::default(), &mut stream(0, "init"));
    if let Policy::Multimodal(p) = &mut pol {
        p.f_b = linear_mode_head(Matrix::row_vector(&[5.0, 0.0, 0.0]));
    }
    let g = pol.act_deterministic(&Matrix::from_fn(4, 1, |_, _| 1.0)).unwrap();
    assert_eq!(g.mode_index, vec![0; 4]);
    assert!(g.action.as_slice().iter().all(|a| a.abs() < 1.0));
}

#[test]
fn unimodal_zero_weights_and_range() {
    let mut pol = Policy::unimodal(3, 2, 8, &mut stream(0, "init"));
    let mut e = Eager;
    let mut noise = ActNoise {
        mode: ModeNoise::None,
        action: sample_standard_normal(50, 2, &mut stream(0, "eps")),
    };
    noise.action.as_mut_slice()[0] = 40.0;
    let bound = pol.bind(&mut e);
    let s = pol.act_with_noise(&mut e, &bound, &states(50, 0), &noise).unwrap();
    assert!(s.action.as_slice().iter().all(|a| a.abs() < 1.0));
    assert!(s.mode.is_none() && s.mode_index.is_empty());

    if let Policy::Unimodal(p) = &mut pol {
        assert_eq!(p.f.hidden_layers(), 3);
        p.f = Mlp::zeros(&[3, 8, 8, 8, 4]);
    }
    let bound = pol.bind(&mut e);
    let s = pol
        .act_with_noise(&mut e, &bound, &states(2, 0), &zero_noise(&pol, 2))
        .unwrap();
    assert!(s.action.as_slice().iter().all(|&a| a == 0.0));
}

struct UnimodalFn {
    acts: Vec<Activation>,
    eps: Matrix,
}

impl ScalarFn for UnimodalFn {
    fn eval<B: Backend>(&self, b: &mut B, inputs: &[B::Value]) -> GradResult<B::Value> {
        let (state, params) = inputs.split_last().unwrap();
        let f = bind_layers(params, &self.acts);
        let head = f.forward(b, state).map_err(|e| match e {
            PolicyError::Grad(g) => g,
            other => panic!("{other}"),
        })?;
        let dist = gaussian_head(b, &head, 2).map_err(|e| match e {
            DistError::Grad(g) => g,
            other => panic!("{other}"),
        })?;
        let s = squashed_gaussian_with_noise(b, &dist, self.eps.clone()).map_err(|e| match e {
            DistError::Grad(g) => g,
            other => panic!("{other}"),
        })?;
        weighted(b, &s.action, 3)
    }
}

#[test]
fn unimodal_gradients_match_finite_differences() {
    let Policy::Unimodal(p) = Policy::unimodal(3, 2, 8, &mut stream(7, "init")) else {
        unreachable!()
    };
    let mut inputs: Vec<Matrix> = p.f.params().into_iter().cloned().collect();
    inputs.push(states(5, 7));
    let f = UnimodalFn {
        acts: acts(&p.f),
        eps: sample_standard_normal(5, 2, &mut stream(7, "eps")),
    };
    let rep = check(&f, &inputs, 1e-6, Tolerance::default()).unwrap();
    assert!(rep.passed, "rel {} abs {}", rep.max_rel_err, rep.max_abs_err);
    // Every hidden layer receives gradient.
    for g in rep.analytic.iter().step_by(2).take(3) {
        assert!(g.sum_of_squares() > 0.0);
    }
}

#[test]
fn histogram_counts() {
    let pol = policy(ModeMethod::Ste, 8);
    let one = states(1, 8);
    let rep = Matrix::from_fn(10, 3, |_, c| one.get(0, c));
    let h = pol.mode_usage_histogram(&rep).unwrap();
    assert_eq!(h.distinct(), 1);
    assert_eq!(h.total(), 10);
    let h = pol.mode_usage_histogram(&states(37, 9)).unwrap();
    assert_eq!(h.total(), 37);
    assert!(matches!(
        pol.mode_usage_histogram(&Matrix::zeros(0, 3)),
        Err(PolicyError::EmptyStates)
    ));
    let uni = Policy::unimodal(3, 2, 8, &mut stream(0, "init"));
    assert!(matches!(
        uni.mode_usage_histogram(&one),
        Err(PolicyError::NotMultimodal)
    ));
}

#[test]
fn histogram_separates_two_state_clusters() {
    let dims = PolicyDims {
        state_dim: 2,
        n_factors: 2,
        n_classes: 2,
        ..DIMS
    };
    let mut pol = Policy::multimodal(dims, ModeMethod::Ste, GumbelConfig::default(), &mut stream(0, "init"));
    if let Policy::Multimodal(p) = &mut pol {
        // Cluster near (1, 0) favors classes (0, 1); near (0, 1) favors (1, 0).
        p.f_b = linear_mode_head(Matrix::from_rows(&[vec![5.0, 0.0, 0.0, 5.0], vec![0.0, 5.0, 5.0, 0.0]]).unwrap());
    }
    let mut rng = stream(1, "cluster");
    let s = Matrix::from_fn(40, 2, |r, c| {
        let centre = if (r % 2 == 0) == (c == 0) { 1.0 } else { 0.0 };
        centre + rng.random_range(-0.1..0.1)
    });
    let h = pol.mode_usage_histogram(&s).unwrap();
    assert_eq!(h.distinct(), 2);
    assert_eq!(h.counts.get(&encode_mode(&[0, 1], 2)), Some(&20));
    assert_eq!(h.counts.get(&encode_mode(&[1, 0], 2)), Some(&20));
}

#[test]
fn action_head_ignores_state() {
    let pol = policy(ModeMethod::Gumbel, 12);
    let n = 6;
    // Overwhelming noise on class 0 pins every factor to class 0 whatever the state.
    let g = Matrix::from_fn(n * 2, 3, |_, c| if c == 0 { 1e6 } else { 0.0 });
    let noise = ActNoise {
        mode: ModeNoise::Gumbel(g),
        action: Matrix::zeros(n, 2),
    };
    let mut e = Eager;
    let bound = pol.bind(&mut e);
    let s = pol.act_with_noise(&mut e, &bound, &states(n, 12), &noise).unwrap();
    assert!(s.mode_index.iter().all(|&i| i == 0));
    for r in 1..n {
        assert_eq!(s.mean.row(r), s.mean.row(0));
        assert_eq!(s.log_std.row(r), s.log_std.row(0));
    }
}

#[test]
fn mode_encoding_round_trips() {
    for n in 1..=3 {
        for m in 1..=4usize {
            let total = m.pow(n as u32);
            for idx in 0..total {
                let classes = decode_mode(idx, n, m);
                assert!(classes.iter().all(|&c| c < m));
                assert_eq!(encode_mode(&classes, m), idx);
            }
        }
    }
}

#[test]
fn ste_and_hard_gumbel_share_forward_distribution() {
    let dims = PolicyDims {
        state_dim: 1,
        n_factors: 1,
        n_classes: 4,
        ..DIMS
    };
    let logits = [0.8, -0.4, 0.1, 0.0];
    let probs = {
        let m = logits.iter().map(|l: &f64| l.exp()).sum::<f64>();
        logits.iter().map(|l| l.exp() / m).collect::<Vec<_>>()
    };
    for method in [ModeMethod::Ste, ModeMethod::Gumbel] {
        let mut pol = Policy::multimodal(
            dims,
            method,
            GumbelConfig::new(0.5, true).unwrap(),
            &mut stream(0, "init"),
        );
        if let Policy::Multimodal(p) = &mut pol {
            p.f_b = linear_mode_head(Matrix::row_vector(&logits));
        }
        let mut e = Eager;
        let bound = pol.bind(&mut e);
        let mut streams = NoiseStreams::from_seed(21);
        let state = Matrix::filled(20_000, 1, 1.0);
        let mut counts = [0u64; 4];
        for _ in 0..5 {
            let s = pol.act(&mut e, &bound, &state, &mut streams).unwrap();
            s.mode_index.iter().for_each(|&i| counts[i] += 1);
        }
        let fit = chi_square_fit(&counts, &probs).unwrap();
        assert!(fit.p_value > 1e-3, "{method:?}: {counts:?} p={}", fit.p_value);
    }
}

#[test]
fn fixed_modes_reproduce_greedy_actions() {
    let pol = policy(ModeMethod::Ste, 13);
    let s = states(7, 13);
    let g = pol.act_deterministic(&s).unwrap();
    assert_eq!(pol.act_for_modes(&g.mode_index, None).unwrap(), g.action);
    let uni = Policy::unimodal(3, 2, 8, &mut stream(0, "init"));
    assert!(matches!(uni.act_for_modes(&[0], None), Err(PolicyError::NotMultimodal)));
}
