use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::corpus::split_corpus;
use crate::model::{DecoderKind, Hyper};
use crate::nnet::AdamConfig;

fn hyper(kind: DecoderKind, k: usize) -> Hyper {
    Hyper {
        k,
        d_h: 3,
        d_ell: 2,
        decoder: kind,
        depth: 4,
        enc_hidden: 6,
        dec_hidden: 5,
        ..Hyper::default()
    }
}

fn corpus(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Corpus {
    let docs = (0..n)
        .map(|_| Document::from_counts((0..rng.gen_range(12..30)).map(|_| (rng.gen_range(0..d as u32), 1))))
        .collect();
    Corpus::new(d, docs)
}

/// A state whose networks have moved off their zero output layer.
fn state(kind: DecoderKind, k: usize, d: usize, seed: u64) -> GlobalState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = GlobalState::init(&hyper(kind, k), d, 500, AdamConfig::default(), &mut rng).unwrap();
    for p in g.gradient_params_mut() {
        for v in p.iter_mut() {
            *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    g
}

fn local(a: Vec<f64>, b: Vec<f64>) -> LocalState {
    let k = a.len();
    LocalState {
        a,
        b,
        phi: vec![1.0 / k as f64; k],
        eps: 1.0,
        sweeps: 0,
        converged: true,
    }
}

#[test]
fn uniform_predictive_gives_vocabulary_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let c = corpus(&mut rng, 7, 53);
    let docs: Vec<&Document> = c.docs.iter().collect();
    let ppl = uniform_perplexity(&docs, 53).unwrap();
    assert!((ppl - 53.0).abs() <= 1e-9, "{ppl}");
}

#[test]
fn certain_prediction_gives_one() {
    let doc = Document::from_counts([(4, 1)]);
    assert_eq!(pooled_perplexity(&[&doc], |_, _| 1.0).unwrap(), 1.0);
}

#[test]
fn empty_tests_and_bad_probabilities_are_errors() {
    let empty = Document::from_counts([]);
    assert!(matches!(pooled_perplexity(&[&empty], |_, _| 0.5), Err(EvalError::EmptyTestSet)));
    let doc = Document::from_counts([(0, 2)]);
    assert!(matches!(pooled_perplexity(&[&doc], |_, _| 0.0), Err(EvalError::BadProbability { .. })));
}

#[test]
fn single_topic_perplexity_reduces_to_topic_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let c = corpus(&mut rng, 10, 15);
    let mut g = state(DecoderKind::Constant, 1, 15, 3);
    for v in g.gamma.data_mut() {
        *v = rng.gen_range(0.1..4.0);
    }
    let splits = split_corpus(&c, 0.1, 9).unwrap();
    let ppl = perplexity(&g, &splits, &LocalConfig::default()).unwrap();

    let total: f64 = g.gamma.row(0).iter().sum();
    let (mut nll, mut tokens) = (0.0, 0.0);
    for s in &splits {
        for &(w, n) in s.test.counts() {
            nll -= n as f64 * (g.gamma.get(0, w as usize) / total).ln();
            tokens += n as f64;
        }
    }
    let expect = (nll / tokens).exp();
    assert!((ppl - expect).abs() <= 1e-10 * expect, "{ppl} vs {expect}");
}

#[test]
fn fitted_perplexity_is_finite_and_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let c = corpus(&mut rng, 12, 20);
    let g = state(DecoderKind::MlpBn, 4, 20, 5);
    let splits = split_corpus(&c, 0.1, 1).unwrap();
    let a = perplexity(&g, &splits, &LocalConfig::default()).unwrap();
    let b = perplexity(&g, &splits, &LocalConfig::default()).unwrap();
    assert!(a.is_finite() && a > 1.0);
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn usage_of_one_topic_is_one() {
    let u = topic_usage(&[local(vec![2.0], vec![3.0]), local(vec![1.0], vec![0.5])]);
    assert_eq!(u, vec![TopicUsage { rank: 1, topic: 0, proportion: 1.0 }]);
}

#[test]
fn symmetric_usage_is_even_and_ties_keep_topic_order() {
    let u = topic_usage(&[local(vec![2.0, 1.0], vec![1.0, 2.0])]);
    assert_eq!(u.iter().map(|x| x.topic).collect::<Vec<_>>(), vec![0, 1]);
    assert!(u.iter().all(|x| x.proportion == 0.5));
}

#[test]
fn usage_csv_layout() {
    let u = topic_usage(&[local(vec![1.0, 3.0], vec![1.0, 1.0])]);
    let mut out = Vec::new();
    write_usage_csv(&u, &mut out).unwrap();
    assert_eq!(String::from_utf8(out).unwrap(), "rank,topic,proportion\n1,1,0.75\n2,0,0.25\n");
}

proptest! {
    #[test]
    fn usage_sums_to_one_and_is_sorted(
        rows in prop::collection::vec(prop::collection::vec((0.01f64..50.0, 0.01f64..5.0), 6), 1..8)
    ) {
        let locals: Vec<LocalState> = rows
            .iter()
            .map(|r| local(r.iter().map(|x| x.0).collect(), r.iter().map(|x| x.1).collect()))
            .collect();
        let u = topic_usage(&locals);
        let total: f64 = u.iter().map(|x| x.proportion).sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        for pair in u.windows(2) {
            prop_assert!(pair[0].proportion >= pair[1].proportion);
        }
        for (i, x) in u.iter().enumerate() {
            prop_assert_eq!(x.rank, i + 1);
        }
    }
}

#[test]
fn points_on_a_line_have_zero_second_singular_value() {
    let dir = [0.6, -0.8, 0.0];
    let h = Matrix::from_vec(
        5,
        3,
        (0..5).flat_map(|i| dir.iter().map(move |d| 1.0 + (i as f64 - 1.5) * d)).collect(),
    );
    let e = svd_embed(&h).unwrap();
    assert_eq!(e.singular_values[1], 0.0);
    assert!(e.singular_values[0] > 1.0);
    // First direction is ±dir with the sign convention applied.
    let d1 = &e.directions[0];
    assert!(d1[0] > 0.0);
    for (x, y) in d1.iter().zip(dir) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn isotropic_sample_has_balanced_spectrum() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 10_000;
    let h = Matrix::from_vec(n, 3, (0..3 * n).map(|_| rng.sample(StandardNormal)).collect());
    let e = svd_embed(&h).unwrap();
    let ratio = e.singular_values[0] / e.singular_values[1];
    assert!((0.9..=1.1).contains(&ratio), "{ratio}");
}

#[test]
fn two_directions_capture_their_share_of_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (n, d) = (40, 5);
    let scales = [3.0, 2.0, 1.0, 0.5, 0.2];
    let h = Matrix::from_vec(
        n,
        d,
        (0..n * d).map(|i| scales[i % d] * rng.sample::<f64, _>(StandardNormal) + 0.7).collect(),
    );
    let e = svd_embed(&h).unwrap();
    let mut captured = 0.0;
    let mut total = 0.0;
    for i in 0..n {
        let c: Vec<f64> = h.row(i).iter().zip(&e.mean).map(|(x, m)| x - m).collect();
        total += c.iter().map(|x| x * x).sum::<f64>();
        for dir in &e.directions {
            let p: f64 = c.iter().zip(dir).map(|(x, y)| x * y).sum();
            captured += p * p;
        }
    }
    let spec_total: f64 = e.spectrum.iter().map(|s| s * s).sum();
    let [s1, s2] = e.singular_values;
    assert!((total - spec_total).abs() <= 1e-9 * total);
    assert!((captured / total - (s1 * s1 + s2 * s2) / spec_total).abs() <= 1e-10);
}

#[test]
fn two_dimensional_spectrum_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 30;
    let h = Matrix::from_vec(n, 2, (0..2 * n).map(|i| rng.gen_range(-1.0..1.0) * (1.0 + (i % 2) as f64)).collect());
    let e = svd_embed(&h).unwrap();
    // Eigenvalues of the 2×2 scatter matrix of the centered rows.
    let m = [h.col_sums()[0] / n as f64, h.col_sums()[1] / n as f64];
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (x, y) = (h.get(i, 0) - m[0], h.get(i, 1) - m[1]);
        sxx += x * x;
        syy += y * y;
        sxy += x * y;
    }
    let tr = sxx + syy;
    let disc = ((sxx - syy).powi(2) + 4.0 * sxy * sxy).sqrt();
    let (l1, l2) = ((tr + disc) / 2.0, (tr - disc) / 2.0);
    assert!((e.singular_values[0] - l1.sqrt()).abs() < 1e-10);
    assert!((e.singular_values[1] - l2.sqrt()).abs() < 1e-10);
}

#[test]
fn degenerate_embeddings_are_errors() {
    assert!(matches!(svd_embed(&Matrix::zeros(1, 3)), Err(EvalError::TooFewRows { .. })));
    let same = Matrix::from_vec(3, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    assert!(matches!(svd_embed(&same), Err(EvalError::RankZero)));
}

#[test]
fn projection_inverts_plane_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let h = Matrix::from_vec(20, 4, (0..80).map(|_| rng.sample(StandardNormal)).collect());
    let e = svd_embed(&h).unwrap();
    let (x, y) = e.project(&e.point(0.13, -0.07));
    assert!((x - 0.13).abs() < 1e-12 && (y + 0.07).abs() < 1e-12);
}

fn embedding_for(g: &GlobalState, seed: u64) -> Embedding {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = corpus(&mut rng, 15, g.num_words);
    let docs: Vec<&Document> = c.docs.iter().collect();
    svd_embed(&g.encode(&docs).unwrap()).unwrap()
}

#[test]
fn constant_decoder_grid_is_flat() {
    let g = state(DecoderKind::Constant, 5, 10, 10);
    let e = Embedding::empty();
    let grid = paintbox_grid(&g, &e, 2, DEFAULT_GRID_RANGE, 8).unwrap();
    let expect = g.hyper.beta * g.stick_weights()[2];
    assert!(grid.values.data().iter().all(|&v| v == expect));
    assert_eq!(grid.beta_p, expect);
}

#[test]
fn grid_is_linear_in_beta() {
    let g = state(DecoderKind::MlpBn, 4, 12, 11);
    let e = embedding_for(&g, 12);
    let mut g2 = g.clone();
    g2.hyper.beta *= 2.0;
    let a = paintbox_grid(&g, &e, 1, DEFAULT_GRID_RANGE, 6).unwrap();
    let b = paintbox_grid(&g2, &e, 1, DEFAULT_GRID_RANGE, 6).unwrap();
    for (x, y) in a.values.data().iter().zip(b.values.data()) {
        assert!((2.0 * x - y).abs() <= 1e-12 * y);
    }
}

#[test]
fn grid_points_match_direct_decoder_evaluation() {
    for kind in [DecoderKind::Linear, DecoderKind::Mlp, DecoderKind::ResnetBn] {
        let g = state(kind, 4, 12, 13);
        let e = embedding_for(&g, 14);
        let grid = paintbox_grid(&g, &e, 3, (-0.3, 0.5), 5).unwrap();
        let bp = g.hyper.beta * g.stick_weights()[3];
        for (i, j) in [(0, 0), (2, 2), (4, 1), (1, 4)] {
            let h = e.point(grid.coord(j), grid.coord(i));
            let (mu, var) = g.decoder_moments(&h, 3).unwrap();
            let direct = bp * (mu + var / 2.0).exp();
            let v = grid.values.get(i, j);
            assert!((v - direct).abs() <= 1e-12 * direct, "{kind:?} ({i},{j}): {v} vs {direct}");
        }
        assert_eq!(grid.coord(0), -0.3);
        assert_eq!(grid.coord(4), 0.5);
    }
}

#[test]
fn grid_values_are_positive_and_bounded() {
    let g = state(DecoderKind::MlpBn, 6, 12, 15);
    let e = embedding_for(&g, 16);
    let b = g.hyper.bounding;
    for k in 0..6 {
        // A wide range pushes the decoder towards its bounds.
        let grid = paintbox_grid(&g, &e, k, (-50.0, 50.0), 9).unwrap();
        let cap = grid.beta_p * (b.mu_hi + b.var_max / 2.0).exp();
        assert!(grid.values.data().iter().all(|&v| v > 0.0 && v <= cap));
    }
}

#[test]
fn grid_arguments_are_checked() {
    let g = state(DecoderKind::Mlp, 3, 8, 17);
    let e = embedding_for(&g, 18);
    assert!(paintbox_grid(&g, &e, 3, DEFAULT_GRID_RANGE, 4).is_err());
    assert!(paintbox_grid(&g, &e, 0, DEFAULT_GRID_RANGE, 1).is_err());
    assert!(paintbox_grid(&g, &e, 0, (0.2, -0.2), 4).is_err());
    assert!(paintbox_grid(&g, &Embedding::empty(), 0, DEFAULT_GRID_RANGE, 4).is_err());
}

#[test]
fn grid_csv_round_trips_exactly() {
    let g = state(DecoderKind::MlpBn, 4, 12, 19);
    let e = embedding_for(&g, 20);
    let grid = paintbox_grid(&g, &e, 0, DEFAULT_GRID_RANGE, 7).unwrap();
    let mut out = Vec::new();
    write_grid_csv(&grid, &mut out).unwrap();
    let text = String::from_utf8(out.clone()).unwrap();
    assert!(text.starts_with("k=0,lo=-0.2,hi=0.2,resolution=7,beta_p="));
    assert_eq!(text.lines().count(), 8);
    let back = read_grid_csv(out.as_slice()).unwrap();
    assert_eq!(back, grid);
}

#[test]
fn malformed_grid_csv_names_the_line() {
    let text = "k=0,lo=-1,hi=1,resolution=2,beta_p=1\n1,2\n3\n";
    match read_grid_csv(text.as_bytes()) {
        Err(EvalError::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
}
