use diffcl_core::autodiff::Graph;
use diffcl_core::labelprop::{
    contrastive_loss, contrastive_loss_var, cosine_scores, mine_pairs, sample_anchors, topk_select, Anchors,
    ClassPairs, MemoryBank,
};
use diffcl_core::losses::{ce_loss, dice_loss, warmup_lambda, CE_EPS, DICE_SMOOTH};
use diffcl_core::{Rng, Tensor};
use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let d = t.shape()[1];
    t.data().chunks(d).map(<[f64]>::to_vec).collect()
}

fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn bank_holds_only_correct_voxels_of_their_class() {
    let mut rng = Rng::seed_from_u64(3);
    let (classes, dim, s) = (3, 6, 50);
    let mut bank = MemoryBank::new(classes, dim, 40, 10).unwrap();
    for _ in 0..20 {
        let truth: Vec<u8> = (0..2 * s).map(|_| rng.gen_range(0..classes as u8)).collect();
        let pred: Vec<u8> =
            truth.iter().map(|&t| if rng.gen_bool(0.6) { t } else { rng.gen_range(0..classes as u8) }).collect();
        // Channel `classes + pred` marks the prediction, channel `truth`
        // marks the truth; everything else is small noise.
        let mut f = vec![0.0; 2 * dim * s];
        for b in 0..2 {
            for j in 0..s {
                for k in 0..dim {
                    f[(b * dim + k) * s + j] = rng.gen_range(0.0..0.01);
                }
                f[(b * dim + truth[b * s + j] as usize) * s + j] = 1.0;
                f[(b * dim + classes + pred[b * s + j] as usize) * s + j] = 1.0;
            }
        }
        let feats = Tensor::new(&[2, dim, s], f).unwrap();
        let up = bank.update(&feats, &pred, &truth, &mut rng).unwrap();
        assert!(up.inserted.iter().all(|&n| n <= 10));
    }
    for c in 0..classes {
        let entries = bank.entries(c);
        assert_eq!(entries.len(), 40);
        for e in entries {
            let truth = (0..classes).max_by(|&a, &b| e[a].total_cmp(&e[b])).unwrap();
            let pred = (0..classes).max_by(|&a, &b| e[classes + a].total_cmp(&e[classes + b])).unwrap();
            assert_eq!((truth, pred), (c, c));
        }
    }
}

#[test]
fn empty_class_is_skipped() {
    let bank = MemoryBank::new(2, 4, 8, 8).unwrap();
    let a = sample_anchors(&bank, 4, &mut Rng::seed_from_u64(0));
    assert_eq!(a.skipped, vec![0, 1]);
    assert!(a.per_class.iter().all(Option::is_none));
}

proptest! {
    #[test]
    fn topk_matches_exhaustive_sort(seed in any::<u64>(), p in 1usize..5, q in 4usize..30, d in 2usize..6) {
        let mut rng = Rng::seed_from_u64(seed);
        let k = rng.gen_range(1..=q / 2);
        let a = random_tensor(&mut rng, &[p, d]);
        let b = random_tensor(&mut rng, &[q, d]);
        let scores = cosine_scores(&a, &b).unwrap();
        let (pos, neg) = topk_select(&scores, k).unwrap();
        let (opos, oneg) = diffcl_oracles::exhaustive_pairs(&rows(&a), &rows(&b), k);
        prop_assert_eq!(pos, opos);
        prop_assert_eq!(neg, oneg);
    }

    #[test]
    fn contrastive_matches_closed_form(seed in any::<u64>(), tau in 0.05..2.0f64) {
        let mut rng = Rng::seed_from_u64(seed);
        let (p, q, d, k) = (3, 12, 4, 3);
        let anchors = [random_tensor(&mut rng, &[p, d]), random_tensor(&mut rng, &[p, d])];
        let cands = random_tensor(&mut rng, &[q, d]);
        let set = Anchors { per_class: anchors.iter().cloned().map(Some).collect(), skipped: vec![] };
        let pairs = mine_pairs(&set, &cands, k).unwrap();
        let refs: Vec<&Tensor> = anchors.iter().collect();
        let got = contrastive_loss(&refs, &cands, &pairs, tau).unwrap();
        let want: f64 = pairs
            .iter()
            .zip(&anchors)
            .map(|(pr, a)| diffcl_oracles::contrastive_class_loss(&rows(a), &rows(&cands), &pr.positives, &pr.negatives, tau))
            .sum::<f64>()
            / (2 * p * k) as f64;
        prop_assert!((got - want).abs() < 1e-9 * want.abs().max(1.0));
    }

    #[test]
    fn dice_and_ce_match_oracle(seed in any::<u64>(), n in 1usize..3, c in 2usize..4, s in 1usize..20) {
        let mut rng = Rng::seed_from_u64(seed);
        let mut p = vec![0.0; n * c * s];
        let mut y = vec![0.0; n * c * s];
        for b in 0..n {
            for j in 0..s {
                let w: Vec<f64> = (0..c).map(|_| rng.gen_range(0.01..1.0)).collect();
                let tot: f64 = w.iter().sum();
                let hot = rng.gen_range(0..c);
                for k in 0..c {
                    p[(b * c + k) * s + j] = w[k] / tot;
                    y[(b * c + k) * s + j] = (k == hot) as u8 as f64;
                }
            }
        }
        let nested = |v: &[f64]| -> Vec<Vec<Vec<f64>>> {
            (0..n).map(|b| (0..c).map(|k| v[(b * c + k) * s..(b * c + k + 1) * s].to_vec()).collect()).collect()
        };
        let pt = Tensor::new(&[n, c, s], p.clone()).unwrap();
        let yt = Tensor::new(&[n, c, s], y.clone()).unwrap();
        let dice = dice_loss(&pt, &yt, DICE_SMOOTH).unwrap();
        let ce = ce_loss(&pt, &yt, CE_EPS).unwrap();
        prop_assert!((dice - diffcl_oracles::dice_loss(&nested(&p), &nested(&y), DICE_SMOOTH)).abs() < 1e-12);
        prop_assert!((ce - diffcl_oracles::cross_entropy(&nested(&p), &nested(&y), CE_EPS)).abs() < 1e-12);
    }
}

#[test]
fn opposed_pair_closed_form() {
    let a = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
    let b = Tensor::new(&[2, 2], vec![2.0, 0.0, -3.0, 0.0]).unwrap();
    let pairs = [ClassPairs { class: 0, positives: vec![0], negatives: vec![1] }];
    let v = contrastive_loss(&[&a], &b, &pairs, 1.0).unwrap();
    assert!((v - 0.1269).abs() < 1e-4);
    assert!((v - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-12);
}

#[test]
fn uniform_similarity_gives_log_one_plus_k() {
    let a = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.5, 0.0]).unwrap();
    let b = Tensor::new(&[6, 2], vec![1.0, 1.0].repeat(6)).unwrap();
    let k = 3;
    let pairs = [ClassPairs { class: 0, positives: vec![0, 1, 2], negatives: vec![3, 4, 5] }];
    let v = contrastive_loss(&[&a], &b, &pairs, 0.3).unwrap();
    assert!((v - (1.0 + k as f64).ln()).abs() < 1e-12);
}

#[test]
fn contrastive_gradient_matches_differences() {
    let mut rng = Rng::seed_from_u64(9);
    let a = random_tensor(&mut rng, &[3, 4]);
    let b = random_tensor(&mut rng, &[10, 4]);
    let set = Anchors { per_class: vec![Some(a.clone())], skipped: vec![] };
    let pairs = mine_pairs(&set, &b, 2).unwrap();
    let mut g = Graph::new();
    let av = g.param(a.clone());
    let bv = g.param(b.clone());
    let l = contrastive_loss_var(&mut g, &[av], bv, &pairs, 0.5).unwrap();
    g.backward(l).unwrap();
    let fd = diffcl_oracles::central_gradient(
        &mut |x: &[f64]| {
            let bt = Tensor::new(&[10, 4], x.to_vec()).unwrap();
            contrastive_loss(&[&a], &bt, &pairs, 0.5).unwrap()
        },
        b.data(),
        1e-6,
    );
    for (an, nu) in g.grad(bv).unwrap().data().iter().zip(&fd) {
        assert!((an - nu).abs() <= 1e-3 * an.abs().max(nu.abs()) + 1e-8);
    }
}

#[test]
fn warmup_endpoints() {
    let scale = 2.0 * (-5.0f64).exp();
    assert!((warmup_lambda(0.0, 300.0).unwrap() - scale).abs() < 1e-9);
    assert!((scale - 0.013476).abs() < 1e-6);
    assert!((warmup_lambda(300.0, 300.0).unwrap() - 2.0).abs() < 1e-9);
    for t in [0.0, 37.0, 150.0, 299.0] {
        let want = diffcl_oracles::gaussian_warmup(t, 300.0);
        assert!((warmup_lambda(t, 300.0).unwrap() - want).abs() < 1e-12);
    }
    assert!(warmup_lambda(301.0, 300.0).is_err());
}
