use proptest::prelude::*;

use super::*;
use crate::data::{generate, CorpusSpec, Dataset, FeatureSettings, Scale, Split};
use crate::model::ModelConfig;

fn seqs(v: &[&[usize]]) -> Vec<UnitSequence> {
    v.iter().map(|s| UnitSequence(s.to_vec())).collect()
}

#[test]
fn identical_corpus_scores_100() {
    let refs = seqs(&[&[1, 2, 3, 4, 5], &[7], &[3, 3, 9]]);
    assert!((bleu(&refs, &refs, 4).unwrap() - 100.0).abs() < 1e-9);
}

#[test]
fn clipped_precision_example() {
    let hyp = seqs(&[&[7, 7, 7]]);
    let rf = seqs(&[&[7]]);
    assert_eq!(bleu(&hyp, &rf, 4).unwrap(), 0.0);
    assert!((bleu(&hyp, &rf, 1).unwrap() - 100.0 / 3.0).abs() < 1e-9);
}

#[test]
fn hand_computed_scores() {
    // p1 = 3/4, p2 = 2/3, p3 = 1/2, p4 = 0/1
    let hyp = seqs(&[&[1, 2, 3, 4]]);
    let rf = seqs(&[&[1, 2, 3, 5]]);
    assert_eq!(bleu(&hyp, &rf, 4).unwrap(), 0.0);
    let expected = 100.0 * (0.75f64 * (2.0 / 3.0) * 0.5).powf(1.0 / 3.0);
    assert!((bleu(&hyp, &rf, 3).unwrap() - expected).abs() < 1e-9);
    // short hypothesis: brevity penalty exp(1 − 4/2)
    let hyp = seqs(&[&[1, 2]]);
    let rf = seqs(&[&[1, 2, 3, 4]]);
    assert!((bleu(&hyp, &rf, 2).unwrap() - 100.0 * (-1f64).exp()).abs() < 1e-9);
    // corpus level pools counts before dividing
    let hyp = seqs(&[&[1, 9], &[5, 6]]);
    let rf = seqs(&[&[1, 2], &[5, 6]]);
    let expected = 100.0 * (0.75f64 * 0.5).sqrt();
    assert!((bleu(&hyp, &rf, 2).unwrap() - expected).abs() < 1e-9);
}

#[test]
fn degenerate_inputs() {
    let rf = seqs(&[&[1, 2, 3]]);
    assert_eq!(bleu(&seqs(&[&[]]), &rf, 4).unwrap(), 0.0);
    assert!(bleu(&rf, &seqs(&[&[]]), 4).is_err());
    assert!(bleu(&[], &[], 4).is_err());
    assert!(bleu(&rf, &seqs(&[&[1], &[2]]), 4).is_err());
    assert!(bleu(&rf, &rf, 0).is_err());
}

fn corpus_strategy() -> impl Strategy<Value = Vec<(Vec<usize>, Vec<usize>)>> {
    prop::collection::vec(
        (prop::collection::vec(0usize..6, 0..8), prop::collection::vec(0usize..6, 1..8)),
        1..6,
    )
}

proptest! {
    #[test]
    fn bleu_is_bounded_and_order_free(pairs in corpus_strategy(), rot in 0usize..6) {
        let hyps: Vec<UnitSequence> = pairs.iter().map(|p| UnitSequence(p.0.clone())).collect();
        let refs: Vec<UnitSequence> = pairs.iter().map(|p| UnitSequence(p.1.clone())).collect();
        let b = bleu(&hyps, &refs, 4).unwrap();
        prop_assert!((0.0..=100.0).contains(&b));
        let k = rot % hyps.len();
        let mut h2 = hyps.clone();
        let mut r2 = refs.clone();
        h2.rotate_left(k);
        r2.rotate_left(k);
        prop_assert!((bleu(&h2, &r2, 4).unwrap() - b).abs() < 1e-9);
        prop_assert!((bleu(&refs, &refs, 4).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn corrupting_more_tokens_never_raises_unigram_precision(
        refs in prop::collection::vec(prop::collection::vec(0usize..6, 1..8), 1..5),
        order_seed in 0u64..1000,
    ) {
        use rand::{seq::SliceRandom, SeedableRng};
        let refs: Vec<UnitSequence> = refs.into_iter().map(UnitSequence).collect();
        let mut slots: Vec<(usize, usize)> = refs
            .iter()
            .enumerate()
            .flat_map(|(i, r)| (0..r.len()).map(move |j| (i, j)))
            .collect();
        slots.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(order_seed));
        let mut hyps = refs.clone();
        let mut prev = bleu(&hyps, &refs, 1).unwrap();
        for (n, (i, j)) in slots.into_iter().enumerate() {
            // ids from 100 upwards never occur in a reference
            hyps[i].0[j] = 100 + n;
            let now = bleu(&hyps, &refs, 1).unwrap();
            prop_assert!(now <= prev + 1e-12);
            prev = now;
        }
        prop_assert_eq!(prev, 0.0);
    }
}

fn test_set(n: usize, seed: u64) -> Dataset {
    let spec = CorpusSpec {
        n_train: 120,
        n_valid: 0,
        n_test: n,
        ..CorpusSpec::preset(Scale::Tiny, seed)
    };
    Dataset::from_corpus(&generate(&spec).unwrap(), &FeatureSettings::default()).unwrap()
}

fn small_model() -> ModelConfig {
    ModelConfig {
        video_in: 16,
        dim: 16,
        heads: 2,
        ffn_dim: 32,
        enc_layers: 1,
        dec_layers: 1,
        ..ModelConfig::default()
    }
}

#[test]
fn untrained_model_is_near_zero_and_deterministic() {
    let data = test_set(20, 0);
    let test = data.split(Split::Test);
    let p = ModelParams::init(&ModelConfig { max_target_len: 16, ..small_model() }, 0).unwrap();
    let s = EvalSettings { beam: 3, ..Default::default() };
    let a = evaluate(&p, &test, Modality::Av, None, &s).unwrap();
    assert!(a < 1.0, "{a}");
    assert_eq!(a, evaluate(&p, &test, Modality::Av, None, &s).unwrap());
}

#[test]
fn sweep_shapes_and_shared_noise() {
    let data = test_set(3, 2);
    let test = data.split(Split::Test);
    let p = ModelParams::init(&ModelConfig { max_target_len: 8, ..small_model() }, 2).unwrap();
    let s = EvalSettings { beam: 2, ..Default::default() };
    let one = SweepGrid {
        categories: vec![NoiseCategory::Babble],
        snr_grid: vec![0.0],
        modalities: vec![Modality::A],
        ..SweepGrid::default()
    };
    assert_eq!(sweep_snr(&p, &test, &one, &s).unwrap().rows.len(), 1);

    let grid = SweepGrid {
        snr_grid: vec![-5.0, 5.0],
        clean: true,
        ..SweepGrid::default()
    };
    let r = sweep_snr(&p, &test, &grid, &s).unwrap();
    assert_eq!(r.rows.len(), 2 + 3 * 2 * 2);
    assert_eq!(r.rows.iter().filter(|r| r.snr_db.is_none()).count(), 2);
    assert!(r.rows.iter().all(|r| (0.0..=100.0).contains(&r.bleu)));
    let csv = r.to_csv();
    assert!(csv.starts_with("category,snr_db,modality,bleu\nnone,clean,av,"));
    let back = SweepResult::parse_csv(&csv).unwrap();
    assert_eq!(back.rows.len(), r.rows.len());
    assert_eq!(back.to_csv(), csv);

    let spec = MixSpec::new(NoiseCategory::Music, -5.0, 0).unwrap();
    let a = mixed_waveform(test[1], &spec, 1).unwrap();
    assert_eq!(a, mixed_waveform(test[1], &spec, 1).unwrap());
    assert_ne!(a, mixed_waveform(test[1], &spec, 2).unwrap());
    assert!(sweep_snr(&p, &test, &SweepGrid { modalities: vec![], ..grid }, &s).is_err());
}

#[test]
fn noisy_evaluation_needs_waveforms() {
    let data = test_set(2, 3);
    let mut e = data.split(Split::Test)[0].clone();
    e.waveform = None;
    let p = ModelParams::init(&ModelConfig { max_target_len: 4, ..small_model() }, 0).unwrap();
    let spec = MixSpec::new(NoiseCategory::Speech, 0.0, 0).unwrap();
    let s = EvalSettings { beam: 1, ..Default::default() };
    assert!(evaluate(&p, &[&e], Modality::A, Some(&spec), &s).is_err());
    // lips alone never look at the audio
    assert!(evaluate(&p, &[&e], Modality::V, Some(&spec), &s).is_ok());
}

#[test]
fn plot_outputs() {
    let rows = vec![
        SweepRow { category: None, snr_db: None, modality: Modality::Av, bleu: 50.0 },
        SweepRow { category: Some(NoiseCategory::Babble), snr_db: Some(5.0), modality: Modality::Av, bleu: 40.0 },
        SweepRow { category: Some(NoiseCategory::Babble), snr_db: Some(-5.0), modality: Modality::Av, bleu: 30.0 },
        SweepRow { category: Some(NoiseCategory::Babble), snr_db: Some(-5.0), modality: Modality::A, bleu: 10.0 },
    ];
    let r = SweepResult { rows };
    let csvs = curve_csvs(&r);
    assert_eq!(csvs.len(), 2);
    assert_eq!(csvs[0].0, "babble_av.csv");
    assert_eq!(csvs[0].1, "snr_db,bleu\n-5,30.0000\n5,40.0000\n");
    let svg = sweep_svg(&r).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg.matches("<polyline").count(), 2);
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(write_plot(&r, dir.path(), true).unwrap().len(), 3);
    assert!(sweep_svg(&SweepResult::default()).is_err());
}
