//! Pinned-seed fixtures and file-level determinism.

use simfuse::feature_store::{self, FeatureSet, PairedGallery};
use simfuse::fusion::{self, FusionMode, SubsetMask};
use simfuse::patch_metric::{self, LayerShape};
use simfuse::similarity::{self, matrix_stats};
use simfuse::synth::{self, SignalSet, SynthSpec};

const ORIGINAL_NAMES: [&str; 11] =
    ["conv", "ret", "shp", "weaka", "col", "gab", "hog", "lbp", "pix", "sift", "surf"];

#[test]
fn eleven_representations_are_ordered_by_name() {
    let sides = ORIGINAL_NAMES
        .iter()
        .map(|name| {
            let rows = vec![1.0, 0.0, 0.0, 1.0];
            (
                FeatureSet::with_index_ids(*name, 2, rows.clone()).unwrap(),
                FeatureSet::with_index_ids(*name, 2, rows).unwrap(),
            )
        })
        .collect();
    let g = PairedGallery::new(sides).unwrap();
    let mut sorted: Vec<String> = ORIGINAL_NAMES.iter().map(|s| s.to_string()).collect();
    sorted.sort();
    assert_eq!(g.representations(), sorted);
    assert_eq!(fusion::enumerate_subsets(g.n_reprs()).unwrap().len(), 2047);

    let dir = tempfile::tempdir().unwrap();
    let manifest = feature_store::write_gallery(dir.path(), &g).unwrap();
    let back = feature_store::load_gallery(&manifest).unwrap();
    assert_eq!(back.representations(), sorted);
}

#[test]
fn gallery_without_signal_stays_near_chance() {
    let spec = SynthSpec {
        n_pairs: 200,
        n_reprs: 1,
        dim: 32,
        signal: vec![SignalSet::None],
        noise_sigma: 0.0,
        seed: 11,
        suppress_chance_hits: false,
        repr_names: None,
    };
    let g = synth::generate_gallery(&spec).unwrap();
    let stack = similarity::similarity_stack(&g, None).unwrap();
    let recall = similarity::recall_at_k(&stack[0], 1).unwrap().count;
    assert!(recall <= 5, "recall {recall}");
}

#[test]
fn synthetic_gallery_files_are_reproducible() {
    let spec = SynthSpec {
        n_pairs: 30,
        n_reprs: 3,
        dim: 8,
        signal: vec![SignalSet::All, SignalSet::Range([0, 15]), SignalSet::Indices(vec![1, 5, 9])],
        noise_sigma: 0.2,
        seed: 12,
        suppress_chance_hits: false,
        repr_names: None,
    };
    let read_all = |dir: &std::path::Path| {
        let mut files: Vec<_> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                (p.file_name().unwrap().to_owned(), std::fs::read(&p).unwrap())
            })
            .collect();
        files.sort();
        files
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synth::write_synthetic_gallery(&spec, a.path()).unwrap();
    synth::write_synthetic_gallery(&spec, b.path()).unwrap();
    assert_eq!(read_all(a.path()), read_all(b.path()));

    let mut other = spec.clone();
    other.seed = 13;
    let c = tempfile::tempdir().unwrap();
    synth::write_synthetic_gallery(&other, c.path()).unwrap();
    assert_ne!(read_all(a.path()), read_all(c.path()));
}

#[test]
fn similarity_cache_is_reused() {
    let spec = SynthSpec::disjoint_halves(20, 256, 14);
    let g = synth::generate_gallery(&spec).unwrap();
    let cache = tempfile::tempdir().unwrap();
    let first = similarity::similarity_stack(&g, Some(cache.path())).unwrap();
    assert_eq!(std::fs::read_dir(cache.path()).unwrap().count(), 4);
    let second = similarity::similarity_stack(&g, Some(cache.path())).unwrap();
    assert_eq!(first, second);
    let stats: Vec<_> = first.iter().map(matrix_stats).collect();
    let r = fusion::search_all(&first, FusionMode::Normalized, Some(&stats)).unwrap();
    assert_eq!(r.recall(SubsetMask::full(2)), Some(20));
}

#[test]
fn planted_second_layer_is_recovered() {
    let shapes: Vec<LayerShape> = (0..5).map(|l| LayerShape { h: 5 - l, w: 5 - l, c: 4 << l }).collect();
    let items = synth::generate_2afc_items(100, &shapes, 1, 15).unwrap();
    let best = patch_metric::best_single_layer(&items, 5).unwrap();
    assert_eq!(best.layer, 1);
    assert!(best.score >= synth::PLANTED_AGREEMENT - 1e-12);
    for (l, s) in best.per_layer.iter().enumerate() {
        if l != 1 {
            assert!(*s < 0.5, "layer {l} scored {s}");
        }
    }
}
