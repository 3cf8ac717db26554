use evtplus::nn::{ParamStore, Tape, Tensor};
use evtplus::objectives::{
    combined_depth_loss, combined_depth_loss_on, log_depth_denormalize, log_depth_normalize,
    multiscale_gradient_loss, nll_label_smoothing, nll_label_smoothing_on, scale_invariant_loss,
    DepthLossConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Option-valued maps, pooled with explicit 2×2 block scans.
fn oracle_msi(r: &[f64], mask: &[bool], h: usize, w: usize, scales: usize) -> f64 {
    let mut map: Vec<Vec<Option<f64>>> = (0..h)
        .map(|y| {
            (0..w)
                .map(|x| mask[y * w + x].then(|| r[y * w + x]))
                .collect()
        })
        .collect();
    let n = mask.iter().filter(|m| **m).count() as f64;
    let mut total = 0.0;
    for k in 0..scales {
        if k > 0 {
            let (ph, pw) = (map.len(), map[0].len());
            let (nh, nw) = ((ph + 1) / 2, (pw + 1) / 2);
            let mut next = vec![vec![None; nw]; nh];
            for (cy, row) in next.iter_mut().enumerate() {
                for (cx, cell) in row.iter_mut().enumerate() {
                    let mut vals = Vec::new();
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let (y, x) = (2 * cy + dy, 2 * cx + dx);
                            if y < ph && x < pw {
                                if let Some(v) = map[y][x] {
                                    vals.push(v);
                                }
                            }
                        }
                    }
                    if !vals.is_empty() {
                        *cell = Some(vals.iter().sum::<f64>() / vals.len() as f64);
                    }
                }
            }
            map = next;
        }
        for y in 0..map.len() {
            for x in 0..map[0].len() {
                if let Some(a) = map[y][x] {
                    if let Some(Some(b)) = map[y].get(x + 1) {
                        total += (b - a).abs();
                    }
                    if let Some(Some(b)) = map.get(y + 1).map(|row| row[x]) {
                        total += (b - a).abs();
                    }
                }
            }
        }
    }
    total / n
}

fn random_map(rng: &mut ChaCha8Rng, n: usize, invalid: f64) -> (Vec<f64>, Vec<bool>) {
    let r = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut m: Vec<bool> = (0..n).map(|_| rng.random::<f64>() >= invalid).collect();
    m[0] = true;
    (r, m)
}

#[test]
fn msi_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for &(h, w) in &[(8, 8), (7, 5), (9, 12), (1, 6)] {
        for invalid in [0.0, 0.3] {
            let (r, m) = random_map(&mut rng, h * w, invalid);
            let (v, _) = multiscale_gradient_loss(&r, &m, h, w, 4).unwrap();
            let o = oracle_msi(&r, &m, h, w, 4);
            assert!((v - o).abs() <= 1e-12, "{h}x{w}: {v} vs {o}");
        }
    }
}

#[test]
fn losses_vanish_on_constant_residual() {
    let (h, w) = (6, 10);
    let r = vec![0.37; h * w];
    let m = vec![true; h * w];
    assert!(scale_invariant_loss(&r, &m).unwrap().0.abs() < 1e-15);
    assert_eq!(multiscale_gradient_loss(&r, &m, h, w, 4).unwrap().0, 0.0);
    assert_eq!(
        scale_invariant_loss(&vec![0.0; 4], &[true; 4]).unwrap().0,
        0.0
    );
}

#[test]
fn si_shift_invariance_random() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let n = rng.random_range(1..200);
        let (r, m) = random_map(&mut rng, n, 0.2);
        let c = rng.random_range(-5.0..5.0);
        let shifted: Vec<f64> = r.iter().map(|v| v + c).collect();
        let (a, _) = scale_invariant_loss(&r, &m).unwrap();
        let (b, _) = scale_invariant_loss(&shifted, &m).unwrap();
        assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
    }
}

#[test]
fn combined_loss_zero_and_lambda_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (t, m) = random_map(&mut rng, 64, 0.2);
    let cfg = DepthLossConfig::default();
    assert_eq!(combined_depth_loss(&t, &t, &m, 8, 8, &cfg).unwrap().0, 0.0);
    let (p, _) = random_map(&mut rng, 64, 0.0);
    let r: Vec<f64> = t
        .iter()
        .zip(&p)
        .zip(&m)
        .map(|((a, b), &v)| if v { a - b } else { 0.0 })
        .collect();
    let si = scale_invariant_loss(&r, &m).unwrap().0;
    let l0 = combined_depth_loss(&t, &p, &m, 8, 8, &DepthLossConfig { lambda: 0.0, ..cfg })
        .unwrap()
        .0;
    assert_eq!(l0, si);
}

#[test]
fn combined_loss_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = DepthLossConfig::default();
    let (t, m) = random_map(&mut rng, 64, 0.25);
    let (p, _) = random_map(&mut rng, 64, 0.0);
    let (_, g) = combined_depth_loss(&t, &p, &m, 8, 8, &cfg).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..64 {
        let mut up = p.clone();
        up[i] += h;
        let mut down = p.clone();
        down[i] -= h;
        let num = (combined_depth_loss(&t, &up, &m, 8, 8, &cfg).unwrap().0
            - combined_depth_loss(&t, &down, &m, 8, 8, &cfg).unwrap().0)
            / (2.0 * h);
        let rel = (num - g[i]).abs() / num.abs().max(g[i].abs()).max(1e-4);
        worst = worst.max(rel);
    }
    assert!(worst < 1e-5, "max relative error {worst}");
}

#[test]
fn tape_losses_backpropagate() {
    let mut store = ParamStore::new();
    let logits = store.add("logits", Tensor::matrix(1, 4, vec![0.2, -0.4, 1.3, 0.0]));
    let pred = store.add(
        "pred",
        Tensor::matrix(4, 4, (0..16).map(|i| (i as f64 * 0.37).sin()).collect()),
    );
    let target: Vec<f64> = (0..16).map(|i| (i as f64 * 0.11).cos()).collect();
    let mask = vec![true; 16];
    let cfg = DepthLossConfig::default();
    let report = evtplus::nn::grad_check(
        &mut store,
        |t: &mut Tape<'_>| {
            let (l, p) = (t.param(logits), t.param(pred));
            let a = nll_label_smoothing_on(t, l, 2, 0.1).unwrap();
            let b = combined_depth_loss_on(t, p, &target, &mask, 4, 4, &cfg).unwrap();
            t.add(a, b).unwrap()
        },
        &Default::default(),
    );
    assert!(report.max_rel_error < 1e-5, "{report:?}");
    let mut tape = Tape::new(&store);
    let l = tape.param(logits);
    let v = nll_label_smoothing_on(&mut tape, l, 2, 0.1).unwrap();
    let direct = nll_label_smoothing(&[0.2, -0.4, 1.3, 0.0], 2, 0.1).unwrap();
    assert!((tape.value(v).data()[0] - direct).abs() < 1e-14);
}

#[test]
fn depth_round_trip() {
    let cfg = DepthLossConfig::default();
    let mut d = 2.0;
    while d <= 80.0 {
        let back = log_depth_denormalize(log_depth_normalize(d, &cfg).unwrap(), &cfg);
        assert!((back - d).abs() <= 1e-9);
        d += 0.173;
    }
}

proptest! {
    #[test]
    fn masked_pixels_are_inert(
        vals in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0, any::<bool>()), 30),
        junk in -1e3f64..1e3,
        pick in 0usize..30,
    ) {
        let (h, w) = (5, 6);
        let mut t: Vec<f64> = vals.iter().map(|v| v.0).collect();
        let mut p: Vec<f64> = vals.iter().map(|v| v.1).collect();
        let mut m: Vec<bool> = vals.iter().map(|v| v.2).collect();
        m[pick] = false;
        let alt = (pick + 1) % 30;
        m[alt] = true;
        let cfg = DepthLossConfig::default();
        let (a, ga) = combined_depth_loss(&t, &p, &m, h, w, &cfg).unwrap();
        t[pick] = junk;
        p[pick] = f64::NAN;
        let (b, gb) = combined_depth_loss(&t, &p, &m, h, w, &cfg).unwrap();
        prop_assert_eq!(a.to_bits(), b.to_bits());
        for (x, y) in ga.iter().zip(&gb) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
        prop_assert!(a >= 0.0);
    }
}

#[test]
fn level_term_pins_constant_offset() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (t, m) = random_map(&mut rng, 64, 0.2);
    let cfg = DepthLossConfig {
        lambda: 0.0,
        level_weight: 0.5,
        ..DepthLossConfig::default()
    };
    let shifted: Vec<f64> = t.iter().map(|v| v - 0.3).collect();
    let (value, grad) = combined_depth_loss(&t, &shifted, &m, 8, 8, &cfg).unwrap();
    assert!((value - 0.5 * 0.09).abs() < 1e-12, "{value}");
    let n = m.iter().filter(|v| **v).count() as f64;
    for (g, &valid) in grad.iter().zip(&m) {
        let expected = if valid { -2.0 * 0.5 * 0.3 / n } else { 0.0 };
        assert!((g - expected).abs() < 1e-12);
    }
    let without = DepthLossConfig {
        level_weight: 0.0,
        ..cfg
    };
    assert!(
        combined_depth_loss(&t, &shifted, &m, 8, 8, &without)
            .unwrap()
            .0
            .abs()
            < 1e-12
    );
}
