mod common;

use common::{random_tokens, small_dims, small_world};
use medrec::domain::{DdiGraph, DrugId, MedicationSet, PatientRecord};
use medrec::oracle::{finite_diff_grad, max_relative_error};
use medrec::policy::{
    decide, fuse_embeddings, sft_update, Policy, PolicyDims, PolicyParams, Prompt, SftExample,
    Tensor,
};
use medrec::seed;
use medrec::vocab::{EditKind, Token, Vocab, VocabConfig};
use rand::Rng;

fn prompt<'a>(p: &'a PatientRecord, kind: EditKind, m0: &'a MedicationSet) -> Prompt<'a> {
    Prompt {
        patient: p,
        instruction: kind,
        m0,
    }
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    let mut worst: f64 = 0.0;
    for s in 0..50u64 {
        let w = small_world(s);
        let mut rng = seed::stream(s, "tokens", 0);
        let tokens = random_tokens(&w.vocab, &mut rng, 10);
        let kind = if s % 2 == 0 {
            EditKind::Add
        } else {
            EditKind::Remove
        };
        let m0 = MedicationSet::from_drugs([DrugId(1), DrugId(2)]);
        let pr = prompt(&w.patient, kind, &m0);
        let policy = Policy::new(&w.params, &w.vocab, &w.ddi).unwrap();
        let analytic = policy.grad_logprob_sequence(pr, &tokens).unwrap();
        assert!(analytic.collab.data.iter().all(|&g| g == 0.0));
        let x0 = w.params.learnable_flat();
        let numeric = finite_diff_grad(
            |x| {
                let mut p = w.params.clone();
                p.set_learnable_flat(x);
                let pol = Policy::new(&p, &w.vocab, &w.ddi).unwrap();
                pol.logprob_sequence(pr, &tokens).unwrap().iter().sum()
            },
            &x0,
            1e-5,
        );
        let err = max_relative_error(&analytic.learnable_flat(), &numeric, 1e-3);
        worst = worst.max(err);
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn classifier_gradient_matches_finite_differences() {
    for s in 0..10u64 {
        let w = small_world(s);
        let policy = Policy::new(&w.params, &w.vocab, &w.ddi).unwrap();
        let weights: Vec<(DrugId, f64)> =
            (0..5).map(|i| (DrugId(i), 0.3 * i as f64 - 0.5)).collect();
        let mut g = w.params.zeros_like();
        policy
            .classifier_backward(&w.patient, &weights, &mut g)
            .unwrap();
        let numeric = finite_diff_grad(
            |x| {
                let mut p = w.params.clone();
                p.set_learnable_flat(x);
                let pol = Policy::new(&p, &w.vocab, &w.ddi).unwrap();
                let z = pol.classifier_logits(&w.patient).unwrap();
                z.iter().zip(&weights).map(|((_, l), (_, c))| l * c).sum()
            },
            &w.params.learnable_flat(),
            1e-5,
        );
        assert!(max_relative_error(&g.learnable_flat(), &numeric, 1e-3) < 1e-4);
    }
}

#[test]
fn output_bias_gradient_is_onehot_minus_softmax() {
    let w = small_world(3);
    let mut rng = seed::stream(3, "tokens", 1);
    let tokens = random_tokens(&w.vocab, &mut rng, 8);
    let m0 = MedicationSet::new();
    let pr = prompt(&w.patient, EditKind::Add, &m0);
    let policy = Policy::new(&w.params, &w.vocab, &w.ddi).unwrap();
    let g = policy.grad_logprob_sequence(pr, &tokens).unwrap();
    let mut expected = vec![0.0; w.vocab.size()];
    for t in 0..tokens.len() {
        let lp = policy.next_token_logprobs(pr, &tokens[..t]).unwrap();
        for (k, l) in lp.iter().enumerate() {
            expected[k] += f64::from(k == tokens[t].index()) - l.exp();
        }
    }
    for (a, b) in g.bo.data.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn zero_parameters_are_uniform() {
    let w = small_world(1);
    let zero = PolicyParams::zeros(w.params.dims, w.params.collab.clone()).unwrap();
    let policy = Policy::new(&zero, &w.vocab, &w.ddi).unwrap();
    let m0 = MedicationSet::new();
    let mut rng = seed::stream(1, "tokens", 0);
    let tokens = random_tokens(&w.vocab, &mut rng, 9);
    let lp = policy
        .logprob_sequence(prompt(&w.patient, EditKind::Remove, &m0), &tokens)
        .unwrap();
    let v = w.vocab.size() as f64;
    assert!(lp.iter().all(|&l| (l + v.ln()).abs() < 1e-12));
}

#[test]
fn distributions_are_normalized_and_bias_shift_invariant() {
    let w = small_world(5);
    let m0 = MedicationSet::from_drugs([DrugId(3)]);
    let pr = prompt(&w.patient, EditKind::Add, &m0);
    let prefix = [Token(1), Token(0), w.vocab.sep()];
    let policy = Policy::new(&w.params, &w.vocab, &w.ddi).unwrap();
    let lp = policy.next_token_logprobs(pr, &prefix).unwrap();
    assert!((lp.iter().map(|l| l.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
    let mut shifted = w.params.clone();
    shifted.bo.data.iter_mut().for_each(|b| *b += 3.7);
    let lp2 = Policy::new(&shifted, &w.vocab, &w.ddi)
        .unwrap()
        .next_token_logprobs(pr, &prefix)
        .unwrap();
    for (a, b) in lp.iter().zip(&lp2) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn sampling_records_exact_logprobs() {
    for s in 0..10u64 {
        let w = small_world(s);
        let m0 = MedicationSet::from_drugs([DrugId(0)]);
        let pr = prompt(&w.patient, EditKind::Add, &m0);
        let policy = Policy::new(&w.params, &w.vocab, &w.ddi).unwrap();
        let mut rng = seed::stream(s, "sample", 0);
        let traj = policy.sample_sequence(pr, 1.0, 12, &mut rng).unwrap();
        assert!(!traj.tokens.is_empty() && traj.tokens.len() <= 12);
        let lp = policy.logprob_sequence(pr, &traj.tokens).unwrap();
        for (a, b) in lp.iter().zip(&traj.logprobs_old) {
            assert!((a - b).abs() < 1e-12);
        }
        let seq: f64 = lp.iter().sum();
        assert!(seq <= 0.0);
    }
}

#[test]
fn greedy_decoding_ignores_the_rng_and_temperature_keeps_argmax() {
    let w = small_world(9);
    let m0 = MedicationSet::new();
    let pr = prompt(&w.patient, EditKind::Add, &m0);
    let policy = Policy::new(&w.params, &w.vocab, &w.ddi).unwrap();
    let a = policy
        .sample_sequence(pr, 0.0, 12, &mut seed::stream(1, "x", 0))
        .unwrap();
    let b = policy
        .sample_sequence(pr, 0.0, 12, &mut seed::stream(2, "y", 0))
        .unwrap();
    assert_eq!(a, b);
    let lp = policy.next_token_logprobs(pr, &[]).unwrap();
    let best = lp
        .iter()
        .enumerate()
        .max_by(|x, y| x.1.total_cmp(y.1))
        .unwrap()
        .0;
    for t in [0.1, 0.5, 2.0, 10.0] {
        let scaled: Vec<f64> = lp.iter().map(|l| l / t).collect();
        let b2 = scaled
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.total_cmp(y.1))
            .unwrap()
            .0;
        assert_eq!(best, b2);
    }
}

#[test]
fn eos_heavy_policy_yields_empty_trajectories() {
    let w = small_world(2);
    let mut p = PolicyParams::zeros(w.params.dims, w.params.collab.clone()).unwrap();
    let eos = w.vocab.eos().index();
    p.bo.data[eos] = 20.0;
    let policy = Policy::new(&p, &w.vocab, &w.ddi).unwrap();
    let first = policy
        .next_token_logprobs(
            prompt(&w.patient, EditKind::Add, &MedicationSet::new()),
            &[],
        )
        .unwrap();
    assert!(first[eos].exp() >= 0.999);
    let m0 = MedicationSet::new();
    let empty = (0..100u64)
        .filter(|&s| {
            let t = policy.sample_sequence(
                prompt(&w.patient, EditKind::Add, &m0),
                1.0,
                12,
                &mut seed::stream(s, "eos", 0),
            );
            t.unwrap().n_steps() == 0
        })
        .count();
    assert!(empty >= 99);
}

#[test]
fn fusion_shapes_and_identity_projection() {
    let w = small_world(4);
    let mut p = w.params.clone();
    p.proj_w.data.iter_mut().for_each(|x| *x = 0.0);
    p.proj_b.data.iter_mut().for_each(|x| *x = 0.0);
    let f = fuse_embeddings(DrugId(2), &p).unwrap();
    assert_eq!(f.len(), 5);
    assert_eq!(&f[..3], p.text_emb.row(2));
    assert!(f[3..].iter().all(|&x| x == 0.0));
    p.proj_w.data = vec![1.0, 0.0, 0.0, 1.0];
    let f = fuse_embeddings(DrugId(2), &p).unwrap();
    assert_eq!(&f[3..], p.collab.row(2));
    assert!(fuse_embeddings(DrugId(6), &p).is_err());
}

#[test]
fn classifier_tie_and_monotonicity() {
    let w = small_world(6);
    let zero = PolicyParams::zeros(w.params.dims, w.params.collab.clone()).unwrap();
    let policy = Policy::new(&zero, &w.vocab, &w.ddi).unwrap();
    let p = policy.classifier_predict(&w.patient, DrugId(1)).unwrap();
    assert_eq!(p, 0.5);
    assert!(!decide(p));
    let mut last = 0.0;
    for b in [-3.0, -1.0, 0.0, 0.5, 2.0] {
        let mut q = w.params.clone();
        q.cls_bias.data[0] = b;
        let pr = Policy::new(&q, &w.vocab, &w.ddi)
            .unwrap()
            .classifier_predict(&w.patient, DrugId(1))
            .unwrap();
        assert!(pr > 0.0 && pr < 1.0 && pr > last);
        last = pr;
    }
}

#[test]
fn non_finite_parameters_are_rejected() {
    let w = small_world(7);
    let mut p = w.params.clone();
    p.w1.data[0] = f64::NAN;
    assert!(Policy::new(&p, &w.vocab, &w.ddi).is_err());
}

fn tiny_world() -> (Vocab, DdiGraph, PatientRecord, PolicyDims) {
    let vocab = Vocab::new(
        4,
        VocabConfig {
            n_symbols: 6,
            name_len: 2,
            seed: 1,
        },
    )
    .unwrap();
    let ddi = DdiGraph::empty(4);
    let all = MedicationSet::from_drugs((0..4).map(DrugId));
    let patient =
        PatientRecord::new(0, vec![0.5, -0.2, 0.1], None, MedicationSet::new(), all).unwrap();
    let mut dims = small_dims(4, 6, 2);
    dims.token_dim = 8;
    dims.hidden = 8;
    (vocab, ddi, patient, dims)
}

#[test]
fn sft_drives_a_single_token_target_to_high_probability() {
    let (vocab, ddi, patient, dims) = tiny_world();
    assert_eq!(vocab.size(), 8);
    let mut rng = seed::stream(0, "init", 0);
    let collab = Tensor {
        shape: vec![4, 2],
        data: (0..8).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    let mut p = PolicyParams::init(dims, collab, &mut rng).unwrap();
    let m0 = MedicationSet::new();
    let ex = [SftExample {
        prompt: prompt(&patient, EditKind::Add, &m0),
        target: vec![vocab.eos()],
    }];
    let mut reached = None;
    for step in 0..500 {
        let (next, loss) = sft_update(&p, &vocab, &ddi, &ex, 0.5).unwrap();
        if (-loss).exp() > 0.99 {
            reached = Some(step);
            break;
        }
        p = next;
    }
    assert!(reached.is_some());
}

#[test]
fn sft_loss_is_mean_nll_and_zero_rate_is_a_no_op() {
    let (vocab, ddi, patient, dims) = tiny_world();
    let mut rng = seed::stream(1, "init", 0);
    let collab = Tensor {
        shape: vec![4, 2],
        data: (0..8).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    let p = PolicyParams::init(dims, collab, &mut rng).unwrap();
    let m0 = MedicationSet::from_drugs([DrugId(1)]);
    let target = vocab.encode_list(&[DrugId(2), DrugId(3)]).unwrap();
    let ex = [SftExample {
        prompt: prompt(&patient, EditKind::Add, &m0),
        target: target.clone(),
    }];
    let (same, loss) = sft_update(&p, &vocab, &ddi, &ex, 0.0).unwrap();
    assert_eq!(same, p);
    let lp = Policy::new(&p, &vocab, &ddi)
        .unwrap()
        .logprob_sequence(ex[0].prompt, &target)
        .unwrap();
    let mean = -lp.iter().sum::<f64>() / lp.len() as f64;
    assert!((loss - mean).abs() < 1e-12);
}
