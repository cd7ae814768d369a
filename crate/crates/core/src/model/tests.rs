use super::*;
use crate::gradcheck;
use rand::Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::new(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect(),
    )
    .unwrap()
}

fn shape(variant: Variant, din: usize, d: usize, c: usize) -> ModelShape {
    ModelShape {
        variant,
        din,
        d,
        c_verb: c,
        c_noun: c + 1,
        shared_trunk: true,
    }
}

fn run_forward(params: &ModelParams, x: &Matrix, head: Head, class: usize, dropout: &mut Dropout) -> ClipForward {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params);
    let input = tape.constant(x.clone());
    match params.shape.variant {
        Variant::Ours => forward(&mut tape, &bound, params, input, head, class, dropout).unwrap(),
        Variant::ClsAgno => forward_agnostic(&mut tape, &bound, params, input, head, class, dropout).unwrap(),
        _ => unreachable!(),
    }
}

#[test]
fn inference_is_deterministic_and_zero_dropout_matches() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = ModelParams::init(shape(Variant::Ours, 3, 5, 4), 2).unwrap();
    let x = random(&mut rng, 6, 3);
    let a = run_forward(&params, &x, Head::Verb, 1, &mut Dropout::inference());
    let b = run_forward(&params, &x, Head::Verb, 1, &mut Dropout::inference());
    assert_eq!(a.p, b.p);
    assert_eq!(a.d, b.d);
    assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    let c = run_forward(&params, &x, Head::Verb, 1, &mut Dropout::training(0.0, 99));
    assert_eq!(a.p, c.p);
    assert_eq!(a.a_sel, c.a_sel);
    let dropped = run_forward(&params, &x, Head::Verb, 1, &mut Dropout::training(0.5, 99));
    assert_ne!(a.a_sel, dropped.a_sel);
}

#[test]
fn forward_probability_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let params = ModelParams::init(shape(Variant::Ours, 3, 5, 4), 3).unwrap();
    let x = random(&mut rng, 7, 3);
    let out = run_forward(&params, &x, Head::Noun, 4, &mut Dropout::inference());
    assert_eq!(out.a_full.shape(), (5, 7));
    assert!(out.a_full.data().iter().all(|&a| a > 0.0 && a < 1.0));
    for r in 0..out.d.rows() {
        assert!((out.d.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!((out.p.sum() - 1.0).abs() < 1e-12);
    assert!((out.loss + out.p.get(0, 4).ln()).abs() < 1e-12);
}

#[test]
fn rejects_out_of_range_label() {
    let params = ModelParams::init(shape(Variant::Ours, 2, 3, 2), 1).unwrap();
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, &params);
    let input = tape.constant(Matrix::zeros(3, 2));
    let err = forward(
        &mut tape,
        &bound,
        &params,
        input,
        Head::Verb,
        2,
        &mut Dropout::inference(),
    );
    assert!(matches!(err, Err(Error::Config(_))));
    assert!(forward_agnostic(
        &mut tape,
        &bound,
        &params,
        input,
        Head::Verb,
        0,
        &mut Dropout::inference()
    )
    .is_err());
}

#[test]
fn gradients_match_finite_differences_for_every_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&mut rng, 6, 3);
    for variant in Variant::ALL {
        for (shared, p) in [(true, 0.0), (false, 0.5)] {
            let mut sh = shape(variant, 3, 5, 4);
            sh.shared_trunk = shared;
            let params = ModelParams::init(sh, 17).unwrap();
            let verb: Vec<usize> = (0..6).map(|t| t % 5).collect();
            let noun: Vec<usize> = (0..6).map(|t| (t + 2) % 6).collect();
            let target = if variant.is_supervised() {
                Target::Frames {
                    verb: &verb,
                    noun: &noun,
                }
            } else {
                Target::Clip { verb: 2, noun: 3 }
            };
            let check = gradcheck::check(&params, &x, target, p, 4, 1e-5).unwrap();
            assert!(check.max_rel_err < 1e-4, "{variant} shared={shared}: {check:?}");
        }
    }
}

#[test]
fn only_selected_attention_row_gets_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let params = ModelParams::init(shape(Variant::Ours, 3, 5, 4), 1).unwrap();
    let x = random(&mut rng, 6, 3);
    let target = Target::Clip { verb: 2, noun: 0 };
    let (_, grads) = loss_and_grads(&params, &x, target, &mut Dropout::inference()).unwrap();
    // blocks: kernel, bias, verb W1, verb W2, noun W1, noun W2
    let w1 = &grads[2];
    for r in 0..4 {
        let norm: f64 = w1.row(r).iter().map(|v| v.abs()).sum();
        if r == 2 {
            assert!(norm > 0.0);
        } else {
            assert_eq!(norm, 0.0);
        }
    }
    // finite differences on a non-selected row agree that it is flat
    let mut probe = params.clone();
    let h = 1e-5;
    let base = loss_and_grads(&probe, &x, target, &mut Dropout::inference()).unwrap().0;
    probe
        .head_mut(Head::Verb)
        .attention
        .set(1, 3, params.head(Head::Verb).attention.get(1, 3) + h);
    let moved = loss_and_grads(&probe, &x, target, &mut Dropout::inference()).unwrap().0;
    assert_eq!(base, moved);
}

#[test]
fn classifier_is_shared_between_frame_and_clip_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let params = ModelParams::init(shape(Variant::Ours, 3, 5, 4), 1).unwrap();
    let x = random(&mut rng, 5, 3);
    let before = run_forward(&params, &x, Head::Verb, 0, &mut Dropout::inference());
    let mut moved = params.clone();
    moved.head_mut(Head::Verb).classifier.data_mut()[0] += 0.5;
    let after = run_forward(&moved, &x, Head::Verb, 0, &mut Dropout::inference());
    assert_ne!(before.d, after.d);
    assert_ne!(before.p, after.p);
}

#[test]
fn class_permutation_symmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let params = ModelParams::init(shape(Variant::Ours, 3, 5, 4), 1).unwrap();
    let x = random(&mut rng, 6, 3);
    let perm = [2usize, 0, 3, 1];
    let mut permuted = params.clone();
    {
        let src = params.head(Head::Verb);
        let dst = permuted.head_mut(Head::Verb);
        for (old, &new) in perm.iter().enumerate() {
            dst.attention.row_mut(new).copy_from_slice(src.attention.row(old));
            for r in 0..src.classifier.rows() {
                dst.classifier.set(r, new, src.classifier.get(r, old));
            }
        }
    }
    for class in 0..4 {
        let a = run_forward(&params, &x, Head::Verb, class, &mut Dropout::inference());
        let b = run_forward(&permuted, &x, Head::Verb, perm[class], &mut Dropout::inference());
        assert!((a.loss - b.loss).abs() < 1e-12);
    }
}

#[test]
fn single_frame_pools_to_itself() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let params = ModelParams::init(shape(Variant::Ours, 3, 5, 4), 1).unwrap();
    let x = random(&mut rng, 1, 3);
    let out = run_forward(&params, &x, Head::Verb, 1, &mut Dropout::inference());
    let frame = conv1d(&x, &params.trunks[0].kernel, &params.trunks[0].bias).unwrap();
    for (p, f) in out.pooled.data().iter().zip(frame.data()) {
        assert!((p - f).abs() <= 1e-7 * f.abs().max(1e-12));
    }
}

#[test]
fn single_class_aware_equals_agnostic() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let aware = ModelParams::init(shape(Variant::Ours, 3, 5, 1), 4).unwrap();
    let mut agno = aware.clone();
    agno.shape.variant = Variant::ClsAgno;
    let x = random(&mut rng, 6, 3);
    let a = run_forward(&aware, &x, Head::Verb, 0, &mut Dropout::inference());
    let b = run_forward(&agno, &x, Head::Verb, 0, &mut Dropout::inference());
    assert_eq!(a.a_full, b.a_full);
    assert_eq!(a.p, b.p);
    assert_eq!(a.loss, b.loss);
}

#[test]
fn agnostic_attention_ignores_class() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let params = ModelParams::init(shape(Variant::ClsAgno, 3, 5, 4), 4).unwrap();
    let x = random(&mut rng, 6, 3);
    let a = run_forward(&params, &x, Head::Verb, 0, &mut Dropout::inference());
    let b = run_forward(&params, &x, Head::Verb, 3, &mut Dropout::inference());
    assert_eq!(a.a_full.rows(), 1);
    assert_eq!(a.a_sel, b.a_sel);
    assert_eq!(a.pooled, b.pooled);
}

#[test]
fn supervised_loss_cases() {
    let sh = ModelShape {
        variant: Variant::Ful,
        din: 2,
        d: 3,
        c_verb: 4,
        c_noun: 2,
        shared_trunk: true,
    };
    let mut params = ModelParams::init(sh, 1).unwrap();
    params.trunks[0].kernel = Matrix::zeros(6, 3);
    params.trunks[0].bias = Matrix::row_vector(&[1.0, 0.0, 0.0]);
    let x = Matrix::filled(5, 2, 0.3);
    let run = |params: &ModelParams, labels: &[usize]| {
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, params);
        let input = tape.constant(x.clone());
        forward_supervised(
            &mut tape,
            &bound,
            params,
            input,
            Head::Verb,
            labels,
            &mut Dropout::inference(),
        )
    };
    let background = [4usize; 5];
    let mut confident = params.clone();
    let w2 = &mut confident.head_mut(Head::Verb).classifier;
    *w2 = Matrix::zeros(3, 5);
    w2.set(0, 4, 1000.0);
    let out = run(&confident, &background).unwrap();
    assert_eq!(out.loss, 0.0);

    params.head_mut(Head::Verb).classifier = Matrix::zeros(3, 5);
    let out = run(&params, &[0, 1, 2, 3, 4]).unwrap();
    assert!((out.loss - 5f64.ln()).abs() < 1e-12);
    assert_eq!(out.d.shape(), (5, 5));
    assert!(run(&params, &[0, 1, 2, 3, 5]).is_err());
    assert!(run(&params, &[0, 1]).is_err());
}

#[test]
fn infer_scores_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = random(&mut rng, 9, 3);
    for variant in Variant::ALL {
        let params = ModelParams::init(shape(variant, 3, 5, 4), 2).unwrap();
        let [v, n] = infer_scores(&params, &x).unwrap();
        assert_eq!(v.shape(), (9, 4));
        assert_eq!(n.shape(), (9, 5));
        if !variant.is_supervised() {
            for r in 0..9 {
                assert!((v.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
    let params = ModelParams::init(shape(Variant::Ours, 4, 5, 4), 2).unwrap();
    assert!(infer_scores(&params, &x).is_err());
}

#[test]
fn variant_names_round_trip() {
    for v in Variant::ALL {
        assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        assert_eq!(Variant::from_tag(v.tag()), Some(v));
    }
    assert!("full".parse::<Variant>().is_err());
}
