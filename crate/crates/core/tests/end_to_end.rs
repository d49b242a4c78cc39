use std::io::Write;

use dcube::density::{density, DensityMeasure};
use dcube::detector::{blocks_json, detect_topk, DetectorConfig, SelectionPolicy};
use dcube::store::{ingest, CacheBudget, IngestOptions, Storage};
use dcube::synth::{brute_force_densest, generate, InjectionSpec};

const FIGURE2: &str = "\
Alice\tA\tMay-29\t4
Alice\tB\tMay-29\t5
Bob\tA\tMay-29\t7
Bob\tB\tMay-29\t3
Carol\tA\tMay-29\t1
Alice\tC\tMay-30\t2
Bob\tC\tMay-30\t1
Carol\tB\tMay-30\t1
";

fn measures() -> [DensityMeasure; 4] {
    [
        DensityMeasure::Ari,
        DensityMeasure::Geo,
        DensityMeasure::Susp,
        DensityMeasure::Es { alpha: 1.0 },
    ]
}

#[test]
fn ingest_from_disk_and_detect_every_measure() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("example.tsv");
    std::fs::File::create(&input)
        .unwrap()
        .write_all(FIGURE2.as_bytes())
        .unwrap();
    let storage = Storage::new(dir.path().join("scratch")).unwrap();
    let rel = ingest(&storage, &input, &IngestOptions::tsv(3)).unwrap();
    assert_eq!(rel.total_mass(), 24.0);

    for measure in measures() {
        for policy in [SelectionPolicy::MaxCardinality, SelectionPolicy::MaxDensity] {
            let config = DetectorConfig {
                k: 3,
                policy,
                measure,
                ..Default::default()
            };
            let det = detect_topk(&rel, &config).unwrap();
            assert!(!det.blocks.is_empty());
            for (i, b) in det.blocks.iter().enumerate() {
                assert_eq!(b.rank, i + 1);
                assert_eq!(b.volume, b.cardinalities.iter().map(|&c| c as u128).product());
                assert_eq!(density(measure, &b.shape(&rel)).unwrap(), b.density);
                let cards: Vec<usize> = b.attr_values.iter().map(Vec::len).collect();
                assert_eq!(cards, b.cardinalities);
            }
        }
    }

    let config = DetectorConfig {
        k: 1,
        policy: SelectionPolicy::MaxCardinality,
        ..Default::default()
    };
    let det = detect_topk(&rel, &config).unwrap();
    let best = brute_force_densest(&rel, DensityMeasure::Ari).unwrap();
    let found = det.blocks[0].density;
    assert!(found <= best.best_density);
    assert!(found >= best.best_density / 3.0);
}

#[test]
fn runs_are_deterministic_and_reads_are_sequential() {
    let dir = tempfile::tempdir().unwrap();
    let storage = Storage::new(dir.path()).unwrap();
    let spec = InjectionSpec::uniform(4, &[8, 8, 4], (10.0, 40.0), 21);
    let rel = generate(&[300, 300, 40], 20_000, &spec).unwrap().ingest(&storage).unwrap();
    let mut outputs = Vec::new();
    for (p, w, budget) in [
        (1, 1, CacheBudget::DISABLED),
        (3, 3, CacheBudget::tuples(500)),
        (5, 2, CacheBudget::UNLIMITED),
        (1, 1, CacheBudget::DISABLED),
    ] {
        let config = DetectorConfig {
            k: 4,
            partitions: p,
            workers: w,
            cache_budget: budget,
            ..Default::default()
        };
        outputs.push(blocks_json(&detect_topk(&rel, &config).unwrap().blocks));
    }
    assert!(outputs.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(storage.stats().snapshot().offset_regressions, 0);
}

#[test]
fn blocks_may_overlap_on_the_original_relation() {
    let dir = tempfile::tempdir().unwrap();
    let storage = Storage::new(dir.path()).unwrap();
    // one heavy cell at (r0, c0) inside a 4x4 block of fives
    let mut text = String::from("r0\tc0\t100\n");
    for i in 0..4 {
        for j in 0..4 {
            if (i, j) != (0, 0) {
                text.push_str(&format!("r{i}\tc{j}\t5\n"));
            }
        }
    }
    let rel = dcube::ingest_reader(&storage, text.as_bytes(), &IngestOptions::tsv(2)).unwrap();
    let config = DetectorConfig {
        k: 2,
        ..Default::default()
    };
    let det = detect_topk(&rel, &config).unwrap();
    assert_eq!(det.blocks.len(), 2);
    assert_eq!(det.blocks[0].attr_values, vec![vec!["r0"], vec!["c0"]]);
    assert_eq!(det.blocks[0].mass, 100.0);
    // found on the relation without the heavy cell, measured on the original
    assert_eq!(det.blocks[1].cardinalities, vec![4, 4]);
    assert_eq!(det.blocks[1].mass, 175.0);
    assert_eq!(det.blocks[1].density, 175.0 / 4.0);
}

#[test]
fn k_beyond_the_relation_returns_fewer_blocks() {
    let dir = tempfile::tempdir().unwrap();
    let storage = Storage::new(dir.path()).unwrap();
    let rel = dcube::ingest_reader(&storage, "a\tx\t2\nb\ty\t3\n".as_bytes(), &IngestOptions::tsv(2)).unwrap();
    let det = detect_topk(&rel, &DetectorConfig { k: 10, ..Default::default() }).unwrap();
    assert!(det.blocks.len() < 10);
    assert_eq!(det.stats.iterations_per_block.len(), det.blocks.len());
}
