use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use super::*;
use crate::tensor::{Mode, NoiseSource, Tape, Tensor};
use crate::{seeded_rng, Rng};

fn random_tensor(rng: &mut Rng, shape: Vec<usize>) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal) as f32)
}

/// Moves channel `c` of every sample to channel `perm[c]`.
fn permute_channels(t: &Tensor<f32>, perm: &[usize]) -> Tensor<f32> {
    let (b, c, h, w) = t.dims4().unwrap();
    let plane = h * w;
    let mut out = Tensor::zeros(vec![b, c, h, w]);
    for n in 0..b {
        for (from, &to) in perm.iter().enumerate() {
            let src = &t.data()[(n * c + from) * plane..][..plane];
            out.data_mut()[(n * c + to) * plane..][..plane].copy_from_slice(src);
        }
    }
    out
}

fn mu_value(phi: &PhiParams<f32>, h: &Tensor<f32>) -> Tensor<f32> {
    let mut tape = Tape::new();
    let x = tape.constant(h.clone());
    let vars = phi.to_tape(&mut tape, false);
    let m = mu(&mut tape, x, &vars).unwrap();
    tape.value(m).clone()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

#[test]
fn permutation_enumeration_is_complete() {
    for (n, count) in [(1, 1), (2, 2), (3, 6), (4, 24)] {
        let mut all = permutations(n);
        assert_eq!(all.len(), count);
        all.sort();
        all.dedup();
        assert_eq!(all.len(), count);
    }
}

#[test]
fn mu_is_channel_equivariant_for_every_small_permutation() {
    let mut rng = seeded_rng(11);
    let phi = PhiParams::init(&mut rng);
    for c in 1..=4 {
        let h = random_tensor(&mut rng, vec![2, c, 5, 6]);
        let base = mu_value(&phi, &h);
        for perm in permutations(c) {
            let lhs = mu_value(&phi, &permute_channels(&h, &perm));
            let rhs = permute_channels(&base, &perm);
            assert!(lhs.max_abs_diff(&rhs) <= 1e-5, "C={c} perm={perm:?}");
        }
    }
}

#[test]
fn equivariant_weight_layout() {
    let mut tape: Tape<f64> = Tape::new();
    let lam = tape.constant(Tensor::from_fn(vec![3, 3], |i| i as f64));
    let gam = tape.constant(Tensor::from_fn(vec![3, 3], |i| 100.0 + i as f64));
    let w = build_equivariant_weight(&mut tape, (lam, gam), 3).unwrap();
    let w = tape.value(w);
    assert_eq!(w.shape(), &[3, 3, 3, 3]);
    for o in 0..3 {
        for i in 0..3 {
            for k in 0..9 {
                let v = w.data()[(o * 3 + i) * 9 + k];
                let expect = if o == i { k as f64 + 100.0 + k as f64 } else { 100.0 + k as f64 };
                assert_eq!(v, expect);
            }
        }
    }
}

fn perturb_once(
    h: &Tensor<f32>,
    phi: &PhiParams<f32>,
    cfg: &PerturbConfig,
    beta: f32,
    mode: Mode,
    scales: &mut RunningScales<f32>,
    noise: NoiseSource<'_>,
) -> Result<Tensor<f32>> {
    let mut noise = noise;
    let mut tape = Tape::new();
    let x = tape.constant(h.clone());
    let vars = phi.to_tape(&mut tape, false);
    let y = apply_perturbation(&mut tape, x, &vars, cfg, mode, beta, scales, 0, &mut noise)?;
    Ok(tape.value(y).clone())
}

#[test]
fn beta_zero_returns_h_exactly() {
    let mut rng = seeded_rng(3);
    let h = random_tensor(&mut rng, vec![4, 3, 5, 5]);
    let phi = PhiParams::init(&mut rng);
    let mut scales = RunningScales::new(0.1);
    let mut noise_rng = seeded_rng(9);
    let out = perturb_once(
        &h,
        &phi,
        &PerturbConfig::default(),
        0.0,
        Mode::Train,
        &mut scales,
        NoiseSource::Gaussian(&mut noise_rng),
    )
    .unwrap();
    assert_eq!(out, h);
}

#[test]
fn disabled_components_return_h_for_any_beta() {
    let mut rng = seeded_rng(4);
    let h = random_tensor(&mut rng, vec![2, 2, 4, 4]);
    let phi = PhiParams::init(&mut rng);
    for beta in [0.0, 0.3, 1.0] {
        let mut scales = RunningScales::new(0.1);
        let out =
            perturb_once(&h, &phi, &PerturbConfig::disabled(), beta, Mode::Train, &mut scales, NoiseSource::Zero)
                .unwrap();
        assert_eq!(out, h);
        assert!(scales.is_empty());
    }
}

#[test]
fn zero_phi_with_zero_noise_gives_half_ln2() {
    let mut rng = seeded_rng(5);
    let h = random_tensor(&mut rng, vec![3, 4, 6, 6]);
    let mut scales = RunningScales::new(0.1);
    let out = perturb_once(
        &h,
        &PhiParams::zeros(),
        &PerturbConfig::default(),
        1.0,
        Mode::Train,
        &mut scales,
        NoiseSource::Zero,
    )
    .unwrap();
    let factor = 0.5 * std::f64::consts::LN_2;
    assert!((factor - 0.3466).abs() < 1e-4);
    for (&o, &x) in out.data().iter().zip(h.data()) {
        assert!((o as f64 - factor * x as f64).abs() <= 1e-6 * (1.0 + x.abs() as f64));
    }
}

#[test]
fn beta_outside_unit_interval_is_rejected() {
    let h = Tensor::ones(vec![2, 1, 2, 2]);
    let mut scales = RunningScales::new(0.1);
    for beta in [-0.1, 1.5, f32::NAN] {
        let r = perturb_once(
            &h,
            &PhiParams::zeros(),
            &PerturbConfig::default(),
            beta,
            Mode::Train,
            &mut scales,
            NoiseSource::Zero,
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }
}

#[test]
fn noise_is_strictly_positive() {
    let mut rng = seeded_rng(6);
    let phi = PhiParams::init(&mut rng);
    let h = random_tensor(&mut rng, vec![2, 5, 7, 7]).map(|v| v * 4.0);
    let mut tape = Tape::new();
    let x = tape.constant(h);
    let vars = phi.to_tape(&mut tape, false);
    let z = sample_noise(&mut tape, x, &vars, &mut NoiseSource::Gaussian(&mut rng)).unwrap();
    assert!(tape.value(z).data().iter().all(|&v| v > 0.0));
}

fn train_scales(h: &Tensor<f32>, phi: &PhiParams<f32>, running: &mut RunningScales<f32>) -> Vec<f32> {
    let mut tape = Tape::new();
    let x = tape.constant(h.clone());
    let vars = phi.to_tape(&mut tape, false);
    let s = compute_scales(&mut tape, x, &vars, Mode::Train, running, 0).unwrap();
    tape.value(s).data().to_vec()
}

#[test]
fn eval_scales_are_constant_and_read_only() {
    let mut rng = seeded_rng(8);
    let phi = PhiParams::init(&mut rng);
    let mut running = RunningScales::new(0.1);
    for _ in 0..3 {
        train_scales(&random_tensor(&mut rng, vec![4, 3, 5, 5]), &phi, &mut running);
    }
    let before = running.clone();
    let mut seen = Vec::new();
    for _ in 0..3 {
        let h = random_tensor(&mut rng, vec![4, 3, 5, 5]);
        let mut tape = Tape::new();
        let x = tape.constant(h);
        let vars = phi.to_tape(&mut tape, false);
        let s = compute_scales(&mut tape, x, &vars, Mode::Eval, &mut running, 0).unwrap();
        seen.push(tape.value(s).clone());
    }
    assert!(seen.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(running, before);
    assert_eq!(seen[0].data(), &before.get(0, 3).unwrap().ema[..]);
}

#[test]
fn eval_without_running_scales_is_an_error() {
    let mut running = RunningScales::new(0.1);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::<f32>::ones(vec![2, 3, 4, 4]));
    let vars = PhiParams::zeros().to_tape(&mut tape, false);
    let r = compute_scales(&mut tape, x, &vars, Mode::Eval, &mut running, 2);
    assert!(matches!(r, Err(Error::UninitializedScales(2))));
}

#[test]
fn descriptor_needs_two_samples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::<f32>::ones(vec![1, 3, 4, 4]));
    let vars = PhiParams::zeros().to_tape(&mut tape, false);
    assert!(compute_scales(&mut tape, x, &vars, Mode::Train, &mut RunningScales::new(0.1), 0).is_err());
}

#[test]
fn descriptor_layer_info_columns() {
    let mut rng = seeded_rng(12);
    let mut tape: Tape<f64> = Tape::new();
    let h = Tensor::from_fn(vec![3, 4, 8, 8], |_| rng.random_range(-1.0..1.0));
    let x = tape.constant(h);
    let kernel = tape.constant(Tensor::from_fn(vec![4, 1, 3, 3], |i| (i as f64 * 0.1).sin()));
    let d = channel_descriptor(&mut tape, x, kernel).unwrap();
    let d = tape.value(d);
    assert_eq!(d.shape(), &[4, 10]);
    for row in d.data().chunks(10) {
        assert_eq!(row[8], 2.0 / 8.0);
        assert_eq!(row[9], 3.0 / 8.0);
        assert!(row[4..8].iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn every_phi_block_receives_gradient() {
    let mut rng = seeded_rng(13);
    let phi = PhiParams::init(&mut rng);
    let h = random_tensor(&mut rng, vec![4, 3, 6, 6]);
    let target = random_tensor(&mut rng, vec![4, 3, 6, 6]);
    let mut tape = Tape::new();
    let x = tape.constant(h);
    let vars = phi.to_tape(&mut tape, true);
    let mut running = RunningScales::new(0.1);
    let mut noise = NoiseSource::Gaussian(&mut rng);
    let y = apply_perturbation(&mut tape, x, &vars, &PerturbConfig::default(), Mode::Train, 0.7, &mut running, 0, &mut noise)
        .unwrap();
    let t = tape.constant(target);
    let prod = tape.mul(y, t).unwrap();
    let loss = tape.sum(prod).unwrap();
    let grads = tape.backward(loss).unwrap();
    for (i, var) in vars.all().into_iter().enumerate() {
        let g = grads.get(var).expect("gradient present");
        assert!(g.data().iter().any(|&v| v != 0.0), "block {i} has an all-zero gradient");
        assert!(g.all_finite());
    }
}

#[test]
fn works_for_extreme_channel_and_spatial_sizes() {
    let mut rng = seeded_rng(14);
    let phi = PhiParams::init(&mut rng);
    for (c, hw) in [(1, 1), (1, 64), (512, 1), (512, 2), (37, 13), (3, 32)] {
        let h = random_tensor(&mut rng, vec![2, c, hw, hw]);
        let mut scales = RunningScales::new(0.1);
        let mut noise_rng = seeded_rng(c as u64);
        let out = perturb_once(
            &h,
            &phi,
            &PerturbConfig::default(),
            1.0,
            Mode::Train,
            &mut scales,
            NoiseSource::Gaussian(&mut noise_rng),
        )
        .unwrap();
        assert_eq!(out.shape(), h.shape());
        assert!(out.all_finite());
    }
}

#[test]
fn phi_has_82_scalars_and_flat_round_trips() {
    assert_eq!(PHI_SCALARS, 82);
    let phi = PhiParams::<f32>::init(&mut seeded_rng(1));
    assert_eq!(phi.param_count(), 82);
    let flat = phi.to_flat();
    assert_eq!(flat.len(), 82);
    assert!(flat.iter().all(|v| v.abs() <= 0.1));
    assert_eq!(PhiParams::from_flat(&flat).unwrap(), phi);
    assert!(PhiParams::<f32>::from_flat(&flat[..81]).is_err());
}

fn phi_bytes(phi: &PhiParams<f32>) -> Vec<u8> {
    let mut buf = Vec::new();
    write_phi(phi, &mut buf).unwrap();
    buf
}

#[test]
fn mpph_layout_and_round_trip() {
    let phi = PhiParams::<f32>::init(&mut seeded_rng(2));
    let bytes = phi_bytes(&phi);
    assert_eq!(bytes.len(), 4 + 4 + 6 * 5 + 82 * 4);
    assert_eq!(&bytes[..4], b"MPPH");
    assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
    assert_eq!(bytes[8], 0x01);
    assert_eq!(&bytes[9..13], &9u32.to_le_bytes());
    assert_eq!(&bytes[13..17], &phi.noise.layer1.lambda_kernel[0].to_le_bytes());
    assert_eq!(read_phi(&bytes[..]).unwrap(), phi);
}

#[test]
fn mpph_rejects_malformed_input() {
    let phi = PhiParams::<f32>::init(&mut seeded_rng(2));
    let good = phi_bytes(&phi);
    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    let mut bad_version = good.clone();
    bad_version[4] = 2;
    let mut bad_count = good.clone();
    bad_count[9] = 8;
    let mut bad_tag = good.clone();
    bad_tag[8] = 0x07;
    let mut nan = good.clone();
    nan[13..17].copy_from_slice(&f32::NAN.to_le_bytes());
    let missing_last = good[..good.len() - (5 + 40)].to_vec();
    let mut duplicate = good.clone();
    duplicate.extend_from_slice(&good[good.len() - 45..]);
    for (name, bytes) in [
        ("magic", bad_magic),
        ("version", bad_version),
        ("count", bad_count),
        ("tag", bad_tag),
        ("nan", nan),
        ("missing", missing_last),
        ("duplicate", duplicate),
        ("truncated", good[..good.len() - 1].to_vec()),
        ("empty", Vec::new()),
    ] {
        assert!(matches!(read_phi(&bytes[..]), Err(Error::Format(_))), "{name} accepted");
    }
}

#[test]
fn mpph_accepts_sections_in_any_order() {
    let phi = PhiParams::<f32>::init(&mut seeded_rng(5));
    let good = phi_bytes(&phi);
    let mut sections = Vec::new();
    let mut pos = 8;
    while pos < good.len() {
        let count = u32::from_le_bytes(good[pos + 1..pos + 5].try_into().unwrap()) as usize;
        sections.push(good[pos..pos + 5 + 4 * count].to_vec());
        pos += 5 + 4 * count;
    }
    sections.reverse();
    let mut shuffled = good[..8].to_vec();
    sections.iter().for_each(|s| shuffled.extend_from_slice(s));
    assert_eq!(read_phi(&shuffled[..]).unwrap(), phi);
}

#[test]
fn anneal_schedule() {
    let lin = Anneal::Linear { fraction: 0.5 };
    assert_eq!(lin.beta(0, 100), 0.0);
    assert_eq!(lin.beta(25, 100), 0.5);
    assert_eq!(lin.beta(50, 100), 1.0);
    assert_eq!(lin.beta(99, 100), 1.0);
    assert_eq!(Anneal::Linear { fraction: 0.0 }.beta(0, 100), 1.0);
    assert_eq!(Anneal::Fixed(0.25).beta(7, 100), 0.25);
}

#[test]
fn config_validation() {
    assert!(PerturbConfig::default().validate().is_ok());
    let bad = [
        PerturbConfig { mc_samples: 0, ..Default::default() },
        PerturbConfig { scale_momentum: 0.0, ..Default::default() },
        PerturbConfig { scale_momentum: 1.0, ..Default::default() },
        PerturbConfig { anneal: Anneal::Linear { fraction: 1.5 }, ..Default::default() },
        PerturbConfig { anneal: Anneal::Fixed(-0.5), ..Default::default() },
    ];
    for cfg in bad {
        assert!(cfg.validate().is_err(), "{cfg:?}");
    }
    assert!(!PerturbConfig::disabled().is_active());
}

fn logits_from(rng: &mut Rng) -> Result<Tensor<f64>> {
    Ok(Tensor::from_fn(vec![3, 4], |_| rng.random_range(-3.0..3.0)))
}

#[test]
fn mc_predict_matches_hand_averaging() {
    let single = |seed| mc_predict(1, || logits_from(&mut seeded_rng(seed))).unwrap();
    let (p1, p2) = (single(1), single(2));
    let mut seeds = [1u64, 2].into_iter();
    let pair = mc_predict(2, || logits_from(&mut seeded_rng(seeds.next().unwrap()))).unwrap();
    for ((&a, &b), &m) in p1.data().iter().zip(p2.data()).zip(pair.data()) {
        assert!((m - 0.5 * (a + b)).abs() < 1e-15);
    }
    for row in pair.data().chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
    }
}

#[test]
fn mc_predict_of_deterministic_forward_equals_one_sample() {
    let logits = logits_from(&mut seeded_rng(3)).unwrap();
    let one = mc_predict(1, || Ok(logits.clone())).unwrap();
    assert_eq!(one, softmax_rows(&logits).unwrap());
    for k in [2, 7, 30] {
        let many = mc_predict(k, || Ok(logits.clone())).unwrap();
        assert!(many.max_abs_diff(&one) < 1e-12);
    }
    assert!(mc_predict::<f64>(0, || Ok(logits.clone())).is_err());
}

#[test]
fn softmax_is_stable_for_large_logits() {
    let t = Tensor::new(vec![1, 3], vec![1000.0f32, 999.0, -1000.0]).unwrap();
    let p = softmax_rows(&t).unwrap();
    assert!(p.all_finite());
    assert!((p.data()[0] - 1.0 / (1.0 + (-1.0f32).exp())).abs() < 1e-6);
}

/// Closed form of the recurrence: the first update copies, later ones blend.
fn ema_closed_form(updates: &[Vec<f64>], m: f64) -> Vec<f64> {
    let n = updates.len();
    (0..updates[0].len())
        .map(|c| {
            let mut v = (1.0 - m).powi(n as i32 - 1) * updates[0][c];
            for (k, u) in updates.iter().enumerate().skip(1) {
                v += m * (1.0 - m).powi((n - 1 - k) as i32) * u[c];
            }
            v
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mu_equivariant_under_random_permutations(seed in any::<u64>(), c in prop::sample::select(vec![5usize, 8, 16])) {
        let mut rng = seeded_rng(seed);
        let phi = PhiParams::init(&mut rng);
        let h = random_tensor(&mut rng, vec![1, c, 4, 4]);
        let mut perm: Vec<usize> = (0..c).collect();
        perm.shuffle(&mut rng);
        let lhs = mu_value(&phi, &permute_channels(&h, &perm));
        let rhs = permute_channels(&mu_value(&phi, &h), &perm);
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-5);
    }

    #[test]
    fn emitted_scales_lie_strictly_inside_unit_interval(seed in any::<u64>(), c in 1usize..6, b in 2usize..5, amp in 0.1f32..10.0) {
        let mut rng = seeded_rng(seed);
        let phi = PhiParams::init(&mut rng);
        let h = random_tensor(&mut rng, vec![b, c, 4, 4]).map(|v| v * amp);
        let mut running = RunningScales::new(0.1);
        let s = train_scales(&h, &phi, &mut running);
        prop_assert_eq!(s.len(), c);
        prop_assert!(s.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn ema_matches_closed_form(
        updates in prop::collection::vec(prop::collection::vec(0.0f64..=1.0, 3), 1..40),
        m in 0.01f64..0.99,
    ) {
        let mut running: RunningScales<f64> = RunningScales::new(m);
        for u in &updates {
            running.update(0, u);
        }
        let entry = running.get(0, 3).unwrap();
        prop_assert_eq!(entry.update_count, updates.len() as u64);
        for (&got, want) in entry.ema.iter().zip(ema_closed_form(&updates, m)) {
            prop_assert!((got - want).abs() <= 1e-6);
            prop_assert!((0.0..=1.0).contains(&got));
        }
    }

    #[test]
    fn mpph_round_trips_any_finite_phi(values in prop::collection::vec(-1e6f32..1e6, 82)) {
        let phi = PhiParams::from_flat(&values).unwrap();
        prop_assert_eq!(read_phi(&phi_bytes(&phi)[..]).unwrap(), phi);
    }
}
