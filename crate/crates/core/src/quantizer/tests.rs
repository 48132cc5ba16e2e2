use std::collections::HashMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::dataset::{generate_corpus, write_corpus, CorpusSpec, LineImage, LineSample, Split};
use crate::error::Error;
use crate::model::StemConfig;

fn extractor() -> FeatureExtractor {
    FeatureExtractor::new(ExtractorSpec::random(StemConfig::small(), 16, 3)).unwrap()
}

fn cfg(k: usize, seed: u64) -> KMeansConfig {
    KMeansConfig { k, max_iters: 100, tol: 1e-6, seed }
}

fn ari(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let c2 = |x: f64| x * (x - 1.0) / 2.0;
    let mut joint: HashMap<(usize, usize), f64> = HashMap::new();
    let mut ra: HashMap<usize, f64> = HashMap::new();
    let mut rb: HashMap<usize, f64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1.0;
        *ra.entry(x).or_default() += 1.0;
        *rb.entry(y).or_default() += 1.0;
    }
    let index: f64 = joint.values().map(|v| c2(*v)).sum();
    let sa: f64 = ra.values().map(|v| c2(*v)).sum();
    let sb: f64 = rb.values().map(|v| c2(*v)).sum();
    let expected = sa * sb / c2(n);
    (index - expected) / ((sa + sb) / 2.0 - expected)
}

fn brute_nearest(x: &[f32], cb: &Codebook) -> u32 {
    let mut best = (0u32, f64::MAX);
    for c in 0..cb.k() {
        let d: f64 = x.iter().zip(cb.centroid(c)).map(|(a, b)| ((*a - *b) as f64).powi(2)).sum();
        if d < best.1 {
            best = (c as u32, d);
        }
    }
    best.0
}

#[test]
fn feature_length_is_width_over_eight() {
    let fx = extractor();
    for (w, t) in [(96, 12), (8, 1), (23, 2)] {
        let f = fx.extract(&LineImage::filled(48, w, 0.3)).unwrap();
        assert_eq!(f.shape(), &[t, 16]);
    }
    assert!(matches!(fx.extract(&LineImage::filled(48, 7, 0.3)), Err(Error::EmptyInput(_))));
}

#[test]
fn features_are_deterministic() {
    let img = LineImage::new(48, 64, (0..48 * 64).map(|i| (i % 13) as f32 / 13.0).collect()).unwrap();
    let a = extractor().extract(&img).unwrap();
    let b = extractor().extract(&img).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(extractor().weights_hash(), extractor().weights_hash());
}

#[test]
fn single_point_single_cluster() {
    let cb = fit_kmeans(&[1.5, -2.0], 2, &cfg(1, 0)).unwrap();
    assert_eq!(cb.centroids(), &[1.5, -2.0]);
    assert_eq!(cb.meta.inertia, 0.0);
}

#[test]
fn k_equal_n_gives_zero_inertia() {
    let pts: Vec<f32> = (0..10).flat_map(|i| [i as f32, (i * i) as f32]).collect();
    let cb = fit_kmeans(&pts, 2, &cfg(10, 4)).unwrap();
    assert_eq!(cb.meta.inertia, 0.0);
    let labels = cb.assign(&pts).unwrap();
    let mut sorted = labels.clone();
    sorted.sort_unstable();
    sorted.dedup();
    assert_eq!(sorted.len(), 10);
}

#[test]
fn too_few_points_is_insufficient_data() {
    assert!(matches!(fit_kmeans(&[0.0; 6], 2, &cfg(4, 0)), Err(Error::InsufficientData(_))));
    // enough points but only two distinct ones
    let dup = [0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0];
    assert!(matches!(fit_kmeans(&dup, 2, &cfg(3, 0)), Err(Error::InsufficientData(_))));
}

fn blobs(seed: u64, per: usize) -> (Vec<f32>, Vec<usize>) {
    let centers = [[0.0f32, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0]];
    let noise = Normal::new(0.0f32, 0.01).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = Vec::new();
    let mut truth = Vec::new();
    for i in 0..per * 4 {
        let c = i % 4;
        pts.push(centers[c][0] + noise.sample(&mut rng));
        pts.push(centers[c][1] + noise.sample(&mut rng));
        truth.push(c);
    }
    (pts, truth)
}

#[test]
fn four_blobs_are_recovered() {
    for seed in 0..5 {
        let (pts, truth) = blobs(seed, 50);
        let cb = fit_kmeans(&pts, 2, &cfg(4, seed)).unwrap();
        let labels: Vec<usize> = cb.assign(&pts).unwrap().into_iter().map(|l| l as usize).collect();
        assert!((ari(&labels, &truth) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn rand_index_oracle_sanity() {
    assert!((ari(&[0, 0, 1, 1], &[5, 5, 2, 2]) - 1.0).abs() < 1e-12);
    assert!(ari(&[0, 0, 1, 1], &[0, 1, 0, 1]) < 0.0);
}

#[test]
fn ties_go_to_lowest_centroid() {
    let cents = vec![9.0, 9.0, -1.0, 0.0, 5.0, 5.0, 7.0, 7.0, 1.0, 0.0];
    let cb = Codebook::new(5, 2, cents, dummy_meta()).unwrap();
    assert_eq!(cb.assign(&[0.0, 0.0]).unwrap(), vec![1]);
    assert_eq!(cb.assign(&[5.0, 5.0]).unwrap(), vec![2]);
    assert!(matches!(cb.assign(&[1.0, 2.0, 3.0]), Err(Error::Dimension(_))));
}

fn dummy_meta() -> CodebookMeta {
    CodebookMeta { n_fit_vectors: 0, iterations: 0, inertia: 0.0, seed: 0, inertia_history: vec![], extractor: None }
}

#[test]
fn assignment_matches_exhaustive_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let fit: Vec<f32> = (0..400 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let cb = fit_kmeans(&fit, 6, &cfg(16, 1)).unwrap();
    let probe: Vec<f32> = (0..1000 * 6).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let got = cb.assign(&probe).unwrap();
    for (x, l) in probe.chunks(6).zip(&got) {
        assert_eq!(*l, brute_nearest(x, &cb));
    }
}

#[test]
fn every_cluster_is_used_on_its_fit_set() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let fit: Vec<f32> = (0..2000 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let cb = fit_kmeans(&fit, 4, &cfg(20, 9)).unwrap();
    let mut used = vec![false; 20];
    for l in cb.assign(&fit).unwrap() {
        used[l as usize] = true;
    }
    assert!(used.iter().all(|u| *u));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn lloyd_inertia_never_increases(seed in any::<u64>(), n in 20usize..120, k in 2usize..10, dim in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<f32> = (0..n * dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let cb = fit_kmeans(&pts, dim, &KMeansConfig { k, max_iters: 50, tol: 0.0, seed }).unwrap();
        for w in cb.meta.inertia_history.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
        prop_assert_eq!(*cb.meta.inertia_history.last().unwrap(), cb.meta.inertia);
        let mut c = cb.centroids().chunks(dim).map(|c| c.to_vec()).collect::<Vec<_>>();
        c.sort_by(|a, b| a.partial_cmp(b).unwrap());
        c.dedup();
        prop_assert_eq!(c.len(), k);
    }
}

#[test]
fn codebook_round_trips_and_validates() {
    let (pts, _) = blobs(0, 10);
    let cb = fit_kmeans(&pts, 2, &cfg(4, 0)).unwrap();
    let back = Codebook::from_bytes(&cb.to_bytes().unwrap()).unwrap();
    assert_eq!(back, cb);
    let mut bytes = cb.to_bytes().unwrap();
    assert_eq!(&bytes[..4], b"LQKM");
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 4);
    assert!(matches!(Codebook::from_bytes(&bytes[..20]), Err(Error::Format { .. })));
    bytes[0] = 0;
    assert!(matches!(Codebook::from_bytes(&bytes), Err(Error::Format { offset: 0, .. })));
}

fn small_corpus(n: usize) -> Vec<LineSample> {
    generate_corpus(&CorpusSpec::toy(n, 0, 0, 17)).unwrap()
}

#[test]
fn labeling_a_corpus_is_complete_and_idempotent() {
    let samples = small_corpus(100);
    let fx = extractor();
    let cb = fit_codebook(&samples, &fx, &cfg(8, 1), 50).unwrap();
    assert_eq!(cb.meta.extractor.as_ref(), Some(fx.spec()));
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_corpus(&samples, dir.path()).unwrap();
    let out1 = dir.path().join("labels1.jsonl");
    let out2 = dir.path().join("labels2.jsonl");
    let recs = label_corpus(&manifest, &fx, &cb, &out1).unwrap();
    label_corpus(&manifest, &fx, &cb, &out2).unwrap();
    assert_eq!(recs.len(), 100);
    for (r, s) in recs.iter().zip(&samples) {
        assert_eq!(r.id, s.id);
        assert_eq!(r.labels.len(), s.image.width() / 8);
        assert!(r.labels.iter().all(|l| (*l as usize) < 8));
    }
    assert_eq!(std::fs::read(&out1).unwrap(), std::fs::read(&out2).unwrap());
    assert_eq!(read_label_store(&out1).unwrap(), recs);
    assert_eq!(labels_for(&recs, &samples).unwrap().len(), 100);
}

#[test]
fn empty_manifest_gives_empty_store() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_corpus(&[], dir.path()).unwrap();
    let cb = Codebook::new(2, 16, vec![0.0; 32], dummy_meta()).unwrap();
    let out = dir.path().join("labels.jsonl");
    assert!(label_corpus(&manifest, &extractor(), &cb, &out).unwrap().is_empty());
    assert_eq!(std::fs::read(&out).unwrap(), b"");
}

#[test]
fn missing_image_names_the_sample() {
    let samples = small_corpus(3);
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_corpus(&samples, dir.path()).unwrap();
    std::fs::remove_file(dir.path().join("images").join(format!("{}.pgm", samples[1].id))).unwrap();
    let cb = Codebook::new(2, 16, vec![0.0; 32], dummy_meta()).unwrap();
    let err = label_corpus(&manifest, &extractor(), &cb, &dir.path().join("l.jsonl")).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert!(err.to_string().contains(&samples[1].id));
}

#[test]
fn mismatched_label_lengths_are_reported() {
    let samples = small_corpus(2);
    let store = vec![
        LabelRecord { id: samples[0].id.clone(), labels: vec![0; samples[0].image.width() / 8] },
        LabelRecord { id: samples[1].id.clone(), labels: vec![0] },
    ];
    let err = labels_for(&store, &samples).unwrap_err();
    assert!(err.to_string().contains(&samples[1].id));
}

fn line(id: &str, width: usize) -> LineSample {
    LineSample { id: id.into(), image: LineImage::filled(48, width, 0.5), text: "a".into(), split: Split::Train }
}

#[test]
fn degenerate_labels_give_one_group() {
    let samples = vec![line("a", 64), line("b", 40)];
    let store = vec![
        LabelRecord { id: "a".into(), labels: vec![5; 8] },
        LabelRecord { id: "b".into(), labels: vec![5; 5] },
    ];
    let groups = trigram_report(&store, &samples, 10).unwrap();
    assert_eq!(groups.len(), 1);
    assert_eq!(groups[0].key, [5, 5, 5]);
    assert_eq!(groups[0].count, 6 + 3);
    assert_eq!(groups[0].crops.len(), 2);
    assert_eq!((groups[0].crops[0].image.width(), groups[0].crops[0].image.height()), (24, 48));
    assert!(trigram_report(&store, &samples, 0).unwrap().is_empty());
}

#[test]
fn short_lines_give_empty_report() {
    let samples = vec![line("a", 16)];
    let store = vec![LabelRecord { id: "a".into(), labels: vec![1, 2] }];
    assert!(trigram_report(&store, &samples, 5).unwrap().is_empty());
}

#[test]
fn groups_rank_by_count_then_key_and_crops_carry_the_key() {
    let samples = vec![line("a", 48), line("b", 48), line("c", 48)];
    let store = vec![
        LabelRecord { id: "a".into(), labels: vec![1, 2, 3, 1, 2, 3] },
        LabelRecord { id: "b".into(), labels: vec![0, 1, 2, 3, 9, 9] },
        LabelRecord { id: "c".into(), labels: vec![7, 7, 7, 1, 2, 3] },
    ];
    let groups = trigram_report(&store, &samples, 3).unwrap();
    assert_eq!(groups[0].key, [1, 2, 3]);
    assert_eq!(groups[0].count, 4);
    for c in &groups[0].crops {
        let rec = store.iter().find(|r| r.id == c.id).unwrap();
        assert_eq!(&rec.labels[c.patch..c.patch + 3], &[1, 2, 3]);
    }
    assert_eq!(groups[0].crops.len(), 3);
    // remaining trigrams all occur once; lowest keys first
    assert_eq!(groups[1].key, [0, 1, 2]);
    assert_eq!(groups[2].key, [2, 3, 1]);
}
