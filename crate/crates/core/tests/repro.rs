use dpa_core::config::Config;
use dpa_core::data::{build_corpus, ClassSplit};

#[test]
fn repro() {
    let text = std::fs::read_to_string("/tmp/dpa_smoke/cfg.json").unwrap();
    let cfg = Config::from_json_str(&text).unwrap();
    let (manifest, corpus) = build_corpus(
        cfg.data.blocks, cfg.data.points_per_block, cfg.data.seed, &cfg.data.generator,
    ).unwrap();
    let split = ClassSplit::two_fold(manifest.class_names.len(), cfg.data.fold);
    println!("seen {:?} unseen {:?}", split.seen, split.unseen);
    for class in [2i32, 4, 8] {
        let blocks: Vec<(usize, f64)> = corpus
            .iter()
            .enumerate()
            .map(|(i, b)| (i, b.label_fraction(class)))
            .filter(|(_, f)| *f >= 0.02)
            .collect();
        println!("class {class}: eligible {:?}", blocks);
    }
    // what does block 7 actually contain?
    let mut hist = std::collections::BTreeMap::new();
    for &l in corpus[7].labels.iter() {
        *hist.entry(l).or_insert(0usize) += 1;
    }
    println!("block 7 label histogram: {hist:?}");
}
