use mmkd::losses::{
    autoregressive_loss, autoregressive_loss_tape, dft_loss, dpt_loss, objective,
    prompt_distill_loss, relation_cosine_tape, relation_loss, relation_matrix,
    relation_matrix_tape, response_distill_loss, row_divergence, token_divergence,
    visual_distill_loss, DistillConfig, DistillStage, Divergence, LossParts, MdistConfig,
    Reduction, RelationMatrix, StageWeights, TargetMask,
};
use mmkd::model::{ForwardOutput, Segment, TapeOutput, TokenSegments};
use mmkd::tensor::{gradcheck, naive_matmul, Tape, Tensor};
use mmkd::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Direct summation over the vocabulary.
fn oracle_divergence(t: &[f64], s: &[f64], kind: Divergence) -> f64 {
    let (pt, ps) = (softmax(t), softmax(s));
    let kl =
        |p: &[f64], q: &[f64]| -> f64 { p.iter().zip(q).map(|(a, b)| a * (a.ln() - b.ln())).sum() };
    match kind {
        Divergence::Fkl => kl(&pt, &ps),
        Divergence::Rkl => kl(&ps, &pt),
        Divergence::Jsd => {
            let m: Vec<f64> = pt.iter().zip(&ps).map(|(a, b)| 0.5 * (a + b)).collect();
            0.5 * kl(&pt, &m) + 0.5 * kl(&ps, &m)
        }
    }
}

/// Token-mean over the positions of `segment`; position `p` is predicted
/// by row `p - 1`.
fn oracle_segment(
    t: &Tensor,
    s: &Tensor,
    positions: std::ops::Range<usize>,
    kind: Divergence,
) -> f64 {
    let rows: Vec<usize> = positions.filter(|&p| p >= 1).map(|p| p - 1).collect();
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter()
        .map(|&r| oracle_divergence(t.row(r), s.row(r), kind))
        .sum::<f64>()
        / rows.len() as f64
}

fn fwd(logits: Tensor) -> ForwardOutput {
    ForwardOutput {
        logits,
        visual_hidden: Tensor::zeros(vec![0, 1]),
    }
}

fn mdist(kind: Divergence, targets: TargetMask) -> MdistConfig {
    MdistConfig {
        divergence: kind,
        targets,
        ..MdistConfig::default()
    }
}

#[test]
fn uniform_logits_cost_ln_v() {
    let seg = TokenSegments::new(2, 3, 4);
    let v = 7;
    let logits = Tensor::zeros(vec![seg.len(), v]);
    let targets = vec![3; seg.len()];
    let l = autoregressive_loss(&logits, &targets, &seg, Reduction::TokenMean).unwrap();
    assert!((l - (v as f64).ln()).abs() < 1e-12);
    let sum = autoregressive_loss(&logits, &targets, &seg, Reduction::Sum).unwrap();
    assert!((sum - 4.0 * (v as f64).ln()).abs() < 1e-12);
}

#[test]
fn confident_correct_logits_cost_nothing_in_the_limit() {
    let seg = TokenSegments::new(1, 2, 2);
    let targets = vec![0, 0, 0, 1, 2];
    let mut last = f64::INFINITY;
    for margin in [1.0, 5.0, 20.0, 60.0] {
        let mut l = Tensor::zeros(vec![seg.len(), 4]);
        for (p, &t) in targets.iter().enumerate().skip(1) {
            l.data_mut()[(p - 1) * 4 + t] = margin;
        }
        let v = autoregressive_loss(&l, &targets, &seg, Reduction::TokenMean).unwrap();
        assert!(v < last);
        last = v;
    }
    assert!(last < 1e-20);
}

#[test]
fn only_response_targets_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let seg = TokenSegments::new(3, 4, 2);
    let logits = rand_tensor(&mut rng, seg.len(), 5, 2.0);
    let mut targets = vec![1, 2, 3, 0, 0, 0, 0, 4, 2];
    let a = autoregressive_loss(&logits, &targets, &seg, Reduction::TokenMean).unwrap();
    for t in &mut targets[..7] {
        *t = (*t + 1) % 5;
    }
    assert_eq!(
        a,
        autoregressive_loss(&logits, &targets, &seg, Reduction::TokenMean).unwrap()
    );
    // direct oracle
    let o = -(softmax(logits.row(6))[4].ln() + softmax(logits.row(7))[2].ln()) / 2.0;
    assert!((a - o).abs() < 1e-12);
}

#[test]
fn empty_response_is_rejected() {
    let seg = TokenSegments::new(2, 3, 0);
    let r = autoregressive_loss(
        &Tensor::zeros(vec![5, 3]),
        &[0; 5],
        &seg,
        Reduction::TokenMean,
    );
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn divergence_examples() {
    let t = [0.75f64.ln(), 0.25f64.ln()];
    let s = [0.25f64.ln(), 0.75f64.ln()];
    let fkl = token_divergence(&t, &s, Divergence::Fkl, 1.0).unwrap();
    assert!((fkl - 0.5 * 3f64.ln()).abs() < 1e-12);
    for kind in Divergence::ALL {
        assert_eq!(token_divergence(&t, &t, kind, 1.0).unwrap(), 0.0);
    }
    assert!(matches!(
        token_divergence(&[f64::NAN, 0.0], &[0.0, 0.0], Divergence::Fkl, 1.0),
        Err(Error::NonFinite { .. })
    ));
    assert!(token_divergence(&t, &s, Divergence::Fkl, 0.0).is_err());
    assert!(token_divergence(&t, &[0.0; 3], Divergence::Fkl, 1.0).is_err());
}

#[test]
fn temperature_scales_both_operands() {
    let t = [1.0, -0.5, 2.0];
    let s = [0.3, 0.1, -1.0];
    let ts: Vec<f64> = t.iter().map(|x| x / 2.0).collect();
    let ss: Vec<f64> = s.iter().map(|x| x / 2.0).collect();
    let a = token_divergence(&t, &s, Divergence::Jsd, 2.0).unwrap();
    assert!((a - oracle_divergence(&ts, &ss, Divergence::Jsd)).abs() < 1e-14);
}

proptest! {
    #[test]
    fn divergences_match_direct_summation_and_symmetries(
        t in prop::collection::vec(-4.0f64..4.0, 5),
        s in prop::collection::vec(-4.0f64..4.0, 5),
    ) {
        for kind in Divergence::ALL {
            let d = token_divergence(&t, &s, kind, 1.0).unwrap();
            prop_assert!(d >= -1e-15);
            prop_assert!((d - oracle_divergence(&t, &s, kind)).abs() < 1e-12);
        }
        let jsd_ab = token_divergence(&t, &s, Divergence::Jsd, 1.0).unwrap();
        let jsd_ba = token_divergence(&s, &t, Divergence::Jsd, 1.0).unwrap();
        prop_assert!((jsd_ab - jsd_ba).abs() < 1e-14);
        let fkl = token_divergence(&t, &s, Divergence::Fkl, 1.0).unwrap();
        let rkl_swapped = token_divergence(&s, &t, Divergence::Rkl, 1.0).unwrap();
        prop_assert!((fkl - rkl_swapped).abs() < 1e-14);
    }

    #[test]
    fn divergence_vanishes_only_on_equal_distributions(
        t in prop::collection::vec(-4.0f64..4.0, 4),
        shift in -3.0f64..3.0,
    ) {
        let shifted: Vec<f64> = t.iter().map(|x| x + shift).collect();
        for kind in Divergence::ALL {
            prop_assert!(token_divergence(&t, &shifted, kind, 1.0).unwrap().abs() < 1e-10);
        }
        let mut other = t.clone();
        other[0] += 1.0;
        for kind in Divergence::ALL {
            prop_assert!(token_divergence(&t, &other, kind, 1.0).unwrap() > 1e-10);
        }
    }
}

#[test]
fn fkl_gradient_is_softmax_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let t = rand_tensor(&mut rng, 3, 6, 3.0);
        let s = rand_tensor(&mut rng, 3, 6, 3.0);
        let mut tape = Tape::new();
        let tv = tape.constant(t.clone());
        let mut s_leaf = s.clone();
        s_leaf.set_requires_grad(true);
        let sv = tape.leaf(s_leaf);
        let d = row_divergence(&mut tape, tv, sv, Divergence::Fkl, 1.0).unwrap();
        let l = tape.sum(d).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(sv).unwrap();
        for r in 0..3 {
            let (ps, pt) = (softmax(s.row(r)), softmax(t.row(r)));
            for j in 0..6 {
                assert!((g.row(r)[j] - (ps[j] - pt[j])).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn teacher_operand_receives_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut t = rand_tensor(&mut rng, 2, 4, 1.0);
    let mut s = rand_tensor(&mut rng, 2, 4, 1.0);
    t.set_requires_grad(true);
    s.set_requires_grad(true);
    for kind in Divergence::ALL {
        let mut tape = Tape::new();
        let (tv, sv) = (tape.leaf(t.clone()), tape.leaf(s.clone()));
        let d = row_divergence(&mut tape, tv, sv, kind, 1.0).unwrap();
        let l = tape.sum(d).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(tv).is_none(), "{kind}");
        assert!(tape.grad(sv).is_some());
    }
    let mut tape = Tape::new();
    let (yt, ys) = (tape.leaf(t.clone()), tape.leaf(s.clone()));
    let rt = relation_matrix_tape(&mut tape, yt).unwrap();
    let rs = relation_matrix_tape(&mut tape, ys).unwrap();
    let l = relation_cosine_tape(&mut tape, rs, rt).unwrap();
    tape.backward(l).unwrap();
    assert!(tape.grad(yt).is_none());
}

fn assert_gradcheck(name: &str, r: gradcheck::GradCheck) {
    assert!(
        r.max_rel_error < 1e-5,
        "{name}: {} at {:?}",
        r.max_rel_error,
        r.worst
    );
}

#[test]
fn losses_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let seg = TokenSegments::new(2, 2, 2);
        let logits = rand_tensor(&mut rng, seg.len(), 5, 2.0);
        let response = [rng.random_range(0..5), rng.random_range(0..5)];
        let seg2 = seg.clone();
        let r = gradcheck::check(&[logits], 1e-6, move |tape, v| {
            let out = TapeOutput {
                logits: v[0],
                visual_hidden: v[0],
                segments: vec![seg2.clone()],
                seq_len: seg2.len(),
                num_visual: 2,
            };
            autoregressive_loss_tape(tape, &out, &[&response], Reduction::TokenMean)
        })
        .unwrap();
        assert_gradcheck("autoregressive", r);

        let teacher = rand_tensor(&mut rng, 3, 5, 2.0);
        let student = rand_tensor(&mut rng, 3, 5, 2.0);
        for kind in Divergence::ALL {
            let t = teacher.clone();
            let r = gradcheck::check(std::slice::from_ref(&student), 1e-6, move |tape, v| {
                let tv = tape.constant(t.clone());
                let d = row_divergence(tape, tv, v[0], kind, 1.0)?;
                tape.weighted_sum(d, &[0.5, 1.0, -0.3])
            })
            .unwrap();
            assert_gradcheck(kind.as_str(), r);
        }

        let yt = rand_tensor(&mut rng, 4, 5, 1.0);
        let ys = rand_tensor(&mut rng, 4, 3, 1.0);
        let r = gradcheck::check(&[ys], 1e-6, move |tape, v| {
            let t = tape.constant(yt.clone());
            let rt = relation_matrix_tape(tape, t)?;
            let rs = relation_matrix_tape(tape, v[0])?;
            relation_cosine_tape(tape, rs, rt)
        })
        .unwrap();
        assert_gradcheck("relation", r);
    }
}

#[test]
fn response_distillation_matches_per_position_sum() {
    // two response tokens, three words
    let seg = TokenSegments::new(1, 1, 2);
    let t = Tensor::from_rows(&[
        vec![0.1, 0.2, 0.3],
        vec![1.0, -1.0, 0.5],
        vec![0.0, 2.0, -0.5],
        vec![9.0, 9.0, 9.0],
    ])
    .unwrap();
    let s = Tensor::from_rows(&[
        vec![0.3, 0.2, 0.1],
        vec![-0.5, 0.5, 0.0],
        vec![1.0, 1.0, 1.0],
        vec![0.0, 0.0, 0.0],
    ])
    .unwrap();
    for kind in Divergence::ALL {
        let cfg = mdist(kind, TargetMask::RESPONSE);
        let got = response_distill_loss(&fwd(t.clone()), &fwd(s.clone()), &seg, &cfg).unwrap();
        let want = (oracle_divergence(t.row(1), s.row(1), kind)
            + oracle_divergence(t.row(2), s.row(2), kind))
            / 2.0;
        assert!((got - want).abs() < 1e-10, "{kind}");
        let sum = MdistConfig {
            reduction: Reduction::Sum,
            ..cfg
        };
        let got = response_distill_loss(&fwd(t.clone()), &fwd(s.clone()), &seg, &sum).unwrap();
        assert!((got - 2.0 * want).abs() < 1e-10);
    }
    // a single response token reduces to one row divergence
    let seg1 = TokenSegments::new(1, 1, 1);
    let (t1, s1) = (
        Tensor::from_rows(&[t.row(0).to_vec(), t.row(1).to_vec(), t.row(2).to_vec()]).unwrap(),
        Tensor::from_rows(&[s.row(0).to_vec(), s.row(1).to_vec(), s.row(2).to_vec()]).unwrap(),
    );
    let got = response_distill_loss(&fwd(t1), &fwd(s1), &seg1, &MdistConfig::default()).unwrap();
    let want = token_divergence(t.row(1), s.row(1), Divergence::Fkl, 1.0).unwrap();
    assert_eq!(got, want);
}

#[test]
fn segment_losses_match_oracles_and_isolate() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // 3 prompt tokens, 4 visual tokens, 2 response tokens, 5 words
    let seg = TokenSegments::new(3, 4, 2);
    let t = rand_tensor(&mut rng, seg.len(), 5, 2.0);
    let s = rand_tensor(&mut rng, seg.len(), 5, 2.0);
    for kind in Divergence::ALL {
        let cfg = mdist(kind, TargetMask::ALL);
        let v = visual_distill_loss(&fwd(t.clone()), &fwd(s.clone()), &seg, &cfg).unwrap();
        assert!((v - oracle_segment(&t, &s, seg.visual.clone(), kind)).abs() < 1e-10);
        let p = prompt_distill_loss(&fwd(t.clone()), &fwd(s.clone()), &seg, &cfg).unwrap();
        assert!((p - oracle_segment(&t, &s, seg.prompt.clone(), kind)).abs() < 1e-10);
        let r = response_distill_loss(&fwd(t.clone()), &fwd(s.clone()), &seg, &cfg).unwrap();
        assert!((r - oracle_segment(&t, &s, seg.response.clone(), kind)).abs() < 1e-10);
    }

    // changing only visual-predicting rows moves the visual loss alone
    let cfg = mdist(Divergence::Fkl, TargetMask::ALL);
    let mut s2 = s.clone();
    for r in seg.prediction_rows(Segment::Visual) {
        s2.data_mut()[r * 5] += 1.0;
    }
    let pair = |s: &Tensor| {
        (
            response_distill_loss(&fwd(t.clone()), &fwd(s.clone()), &seg, &cfg).unwrap(),
            visual_distill_loss(&fwd(t.clone()), &fwd(s.clone()), &seg, &cfg).unwrap(),
        )
    };
    let (r1, v1) = pair(&s);
    let (r2, v2) = pair(&s2);
    assert_eq!(r1, r2);
    assert_ne!(v1, v2);

    // identical logits give zero everywhere
    for f in [
        response_distill_loss,
        visual_distill_loss,
        prompt_distill_loss,
    ] {
        assert_eq!(
            f(&fwd(t.clone()), &fwd(t.clone()), &seg, &cfg).unwrap(),
            0.0
        );
    }
}

#[test]
fn segment_losses_enforce_mask_and_layout() {
    let seg = TokenSegments::new(0, 4, 1);
    let t = Tensor::zeros(vec![5, 3]);
    let cfg = mdist(Divergence::Fkl, TargetMask::RESPONSE);
    assert!(matches!(
        visual_distill_loss(&fwd(t.clone()), &fwd(t.clone()), &seg, &cfg),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        prompt_distill_loss(&fwd(t.clone()), &fwd(t.clone()), &seg, &cfg),
        Err(Error::Config(_))
    ));
    // empty prompt contributes zero
    let all = mdist(Divergence::Fkl, TargetMask::ALL);
    let s = Tensor::new(vec![5, 3], (0..15).map(|i| i as f64 * 0.1).collect()).unwrap();
    assert_eq!(
        prompt_distill_loss(&fwd(t.clone()), &fwd(s), &seg, &all).unwrap(),
        0.0
    );
    let shorter = Tensor::zeros(vec![4, 3]);
    assert!(matches!(
        response_distill_loss(&fwd(t), &fwd(shorter), &seg, &all),
        Err(Error::Contract(_))
    ));
}

#[test]
fn relation_matrix_examples() {
    let i2 = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    assert_eq!(relation_matrix(&i2).unwrap().values, i2);

    let (c, s) = (0.6, 0.8);
    let rot = Tensor::from_rows(&[vec![c, s, 0.0], vec![-s, c, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
    let r = relation_matrix(&rot).unwrap().values;
    for i in 0..3 {
        for j in 0..3 {
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((r.at(&[i, j]) - want).abs() < 1e-15);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let y = rand_tensor(&mut rng, 4, 3, 1.0);
    let r = relation_matrix(&y).unwrap().values;
    let mut yt = Tensor::zeros(vec![3, 4]);
    for i in 0..4 {
        for j in 0..3 {
            yt.data_mut()[j * 4 + i] = y.at(&[i, j]);
        }
    }
    let oracle = naive_matmul(&y, &yt).unwrap();
    for (a, b) in r.data().iter().zip(oracle.data()) {
        assert!((a - b).abs() < 1e-14);
    }
}

fn gram(y: &Tensor) -> RelationMatrix {
    relation_matrix(y).unwrap()
}

proptest! {
    #[test]
    fn relation_matrices_are_symmetric_psd(
        data in prop::collection::vec(-3.0f64..3.0, 12),
        probe in prop::collection::vec(-2.0f64..2.0, 4),
    ) {
        let y = Tensor::new(vec![4, 3], data).unwrap();
        let r = gram(&y).values;
        for i in 0..4 {
            for j in 0..4 {
                prop_assert!((r.at(&[i, j]) - r.at(&[j, i])).abs() < 1e-10);
            }
        }
        let mut q = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                q += probe[i] * r.at(&[i, j]) * probe[j];
            }
        }
        prop_assert!(q >= -1e-8);
    }

    #[test]
    fn relation_loss_is_bounded_and_scale_free(
        a in prop::collection::vec(-3.0f64..3.0, 12),
        b in prop::collection::vec(-3.0f64..3.0, 20),
        c in 1e-3f64..1e3,
    ) {
        let rs = gram(&Tensor::new(vec![4, 3], a).unwrap());
        let rt = gram(&Tensor::new(vec![4, 5], b).unwrap());
        let l = relation_loss(&rs, &rt).unwrap();
        prop_assert!((0.0..=1.0).contains(&l));
        let scaled = RelationMatrix { values: rs.values.map(|x| x * c) };
        prop_assert!((relation_loss(&scaled, &rt).unwrap() - l).abs() < 1e-12);
        prop_assert!(relation_loss(&rs, &rs).unwrap().abs() < 1e-12);
        prop_assert!(relation_loss(&scaled, &rs).unwrap().abs() < 1e-12);
    }
}

#[test]
fn relation_loss_examples() {
    let d = |a: f64, b: f64| RelationMatrix {
        values: Tensor::from_rows(&[vec![a, 0.0], vec![0.0, b]]).unwrap(),
    };
    assert_eq!(relation_loss(&d(1.0, 2.0), &d(1.0, 2.0)).unwrap(), 0.0);
    assert!(relation_loss(&d(2.0, 4.0), &d(1.0, 2.0)).unwrap().abs() < 1e-15);
    assert_eq!(relation_loss(&d(1.0, 0.0), &d(0.0, 1.0)).unwrap(), 1.0);
    assert!(matches!(
        relation_loss(&d(0.0, 0.0), &d(0.0, 1.0)),
        Err(Error::Numeric(_))
    ));
}

#[test]
fn composite_objectives() {
    let cfg = DistillConfig::default();
    assert_eq!(
        (cfg.dpt.alpha, cfg.dpt.beta, cfg.dpt.gamma),
        (1.0, 1.0, 0.5)
    );
    assert_eq!(
        (cfg.dft.alpha, cfg.dft.beta, cfg.dft.gamma),
        (1.0, 1.0, 0.5)
    );

    let parts = LossParts {
        reg: 1.0,
        res: 2.0,
        vis: 3.0,
        rel: 0.4,
        prompt: 0.0,
    };
    assert!((dpt_loss(&parts, &cfg) - 6.2).abs() < 1e-12);
    assert_eq!(dpt_loss(&LossParts::default(), &cfg), 0.0);

    let mut no_vis = cfg.clone();
    no_vis.dft.targets = TargetMask::RESPONSE;
    let parts = LossParts {
        reg: 0.5,
        res: 1.0,
        vis: 0.0,
        rel: 2.0,
        prompt: 0.0,
    };
    assert!((dft_loss(&parts, &no_vis) - 2.5).abs() < 1e-12);

    // response-only mask without relation weight reduces to L_reg + alpha' L_res
    no_vis.dft.gamma = 0.0;
    let parts = LossParts {
        reg: 0.7,
        res: 0.3,
        vis: 5.0,
        rel: 5.0,
        prompt: 5.0,
    };
    assert!((dft_loss(&parts, &no_vis) - (0.7 + 0.3)).abs() < 1e-15);
}

proptest! {
    #[test]
    fn composites_are_linear_in_parts(
        a in prop::array::uniform5(0.0f64..10.0),
        b in prop::array::uniform5(0.0f64..10.0),
        k in 0.0f64..5.0,
    ) {
        let p = |x: [f64; 5]| LossParts { reg: x[0], res: x[1], vis: x[2], prompt: x[3], rel: x[4] };
        let cfg = DistillConfig {
            dpt: StageWeights { targets: TargetMask::ALL, ..StageWeights::default() },
            ..DistillConfig::default()
        };
        let mixed: [f64; 5] = std::array::from_fn(|i| a[i] + k * b[i]);
        let lhs = dpt_loss(&p(mixed), &cfg);
        let rhs = dpt_loss(&p(a), &cfg) + k * dpt_loss(&p(b), &cfg);
        prop_assert!((lhs - rhs).abs() < 1e-9);
    }
}

#[test]
fn target_masks_require_the_response() {
    let m: TargetMask = serde_json::from_str(r#"["response", "visual"]"#).unwrap();
    assert_eq!(m, TargetMask::RESPONSE_VISUAL);
    assert!(serde_json::from_str::<TargetMask>(r#"["visual"]"#).is_err());
    assert_eq!(
        "response+prompt".parse::<TargetMask>().unwrap(),
        TargetMask::RESPONSE_PROMPT
    );
    assert!("prompt".parse::<TargetMask>().is_err());
    for m in TargetMask::SWEEP {
        assert_eq!(m.label().parse::<TargetMask>().unwrap(), m);
    }
    assert_eq!("jsd".parse::<Divergence>().unwrap(), Divergence::Jsd);
}

#[test]
fn config_validation() {
    let mut c = DistillConfig::default();
    c.validate().unwrap();
    c.dft.beta = -1.0;
    assert!(c.validate().is_err());
    let c = DistillConfig {
        temperature: 0.0,
        ..DistillConfig::default()
    };
    assert!(c.validate().is_err());
}

/// Builds a two-sample batch on one tape.
fn batch_outputs(
    tape: &mut Tape,
    rng: &mut ChaCha8Rng,
    segs: &[TokenSegments],
    v: usize,
    d: usize,
) -> TapeOutput {
    let t = segs.iter().map(TokenSegments::len).max().unwrap();
    let mut logits = rand_tensor(rng, segs.len() * t, v, 2.0);
    logits.set_requires_grad(true);
    let mut hidden = rand_tensor(rng, segs.len() * segs[0].visual.len(), d, 1.0);
    hidden.set_requires_grad(true);
    TapeOutput {
        logits: tape.leaf(logits),
        visual_hidden: tape.leaf(hidden),
        segments: segs.to_vec(),
        seq_len: t,
        num_visual: segs[0].visual.len(),
    }
}

#[test]
fn objective_adds_weighted_parts_and_skips_zero_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let segs = [TokenSegments::new(2, 3, 2), TokenSegments::new(1, 3, 3)];
    let responses: [&[usize]; 2] = [&[1, 2], &[3, 0, 2]];
    let mut tape = Tape::new();
    let student = batch_outputs(&mut tape, &mut rng, &segs, 5, 4);
    let teacher = batch_outputs(&mut tape, &mut rng, &segs, 5, 6);
    let cfg = DistillConfig {
        dpt: StageWeights {
            targets: TargetMask::ALL,
            ..StageWeights::default()
        },
        ..DistillConfig::default()
    };
    let obj = objective(
        &mut tape,
        &student,
        &responses,
        Some((DistillStage::Pretrain, &teacher)),
        &cfg,
    )
    .unwrap();
    assert!(obj.parts.is_finite());
    assert!((tape.item(obj.total) - dpt_loss(&obj.parts, &cfg)).abs() < 1e-12);
    assert!(obj.parts.prompt > 0.0 && obj.parts.vis > 0.0 && obj.parts.rel > 0.0);

    // the batched response term is the mean of per-sample oracles
    let logits = tape.value(student.logits);
    let tl = tape.value(teacher.logits);
    let mut want = 0.0;
    for (b, s) in segs.iter().enumerate() {
        let rows: Vec<usize> = s
            .prediction_rows(Segment::Response)
            .map(|r| b * student.seq_len + r)
            .collect();
        want += rows
            .iter()
            .map(|&r| oracle_divergence(tl.row(r), logits.row(r), Divergence::Fkl))
            .sum::<f64>()
            / rows.len() as f64;
    }
    assert!((obj.parts.res - want / 2.0).abs() < 1e-12);

    let zero = DistillConfig {
        dpt: StageWeights::ZERO,
        ..cfg.clone()
    };
    let z = objective(
        &mut tape,
        &student,
        &responses,
        Some((DistillStage::Pretrain, &teacher)),
        &zero,
    )
    .unwrap();
    let plain = objective(&mut tape, &student, &responses, None, &zero).unwrap();
    assert_eq!(tape.item(z.total), tape.item(plain.total));
    assert_eq!(tape.item(z.total), z.parts.reg);

    // additivity: the three segment terms are computed independently
    let seg_sum = obj.parts.res + obj.parts.prompt + obj.parts.vis;
    let only = |m: TargetMask, stage_cfg: &DistillConfig, tape: &mut Tape| {
        let mut c = stage_cfg.clone();
        c.dpt.targets = m;
        c.dpt.gamma = 0.0;
        objective(
            tape,
            &student,
            &responses,
            Some((DistillStage::Pretrain, &teacher)),
            &c,
        )
        .unwrap()
        .parts
    };
    let a = only(TargetMask::RESPONSE_PROMPT, &cfg, &mut tape);
    let b = only(TargetMask::RESPONSE_VISUAL, &cfg, &mut tape);
    assert!((a.res + a.prompt + b.vis - seg_sum).abs() < 1e-14);
}
