//! Temporary diagnosis probe.

use dpa_core::autodiff::Tape;
use dpa_core::config::Config;
use dpa_core::data::{build_corpus, sample_episode, ClassSplit, Phase};
use dpa_core::params::BoundParams;
use dpa_core::training::{self, meta_train, DpaModel, EpisodePredictor};

fn bench_config() -> Config {
    let mut cfg = Config::default();
    cfg.data.blocks = 48;
    cfg.data.points_per_block = 160;
    cfg.data.seed = 20;
    cfg.data.min_class_fraction = 0.05;
    cfg.data.generator.density_scale = 0.1;
    cfg.data.generator.classes_per_scene = [2, 3];
    cfg.data.generator.background_points = [40, 80];
    cfg.data.generator.min_points_per_instance = 500;
    cfg.encoder.k_neighbors = 8;
    cfg.encoder.edgeconv_channels = vec![16, 32];
    cfg.encoder.attention_dim = 16;
    cfg.encoder.output_dim = 32;
    cfg.decoder.ffn_hidden = 32;
    cfg.train.n_way = 2;
    cfg.train.k_shot = 1;
    cfg
}

#[test]
#[ignore]
fn diagnose_collapse() {
    let mut cfg = bench_config();
    cfg.train.meta_iterations = 2000;
    let (manifest, corpus) = build_corpus(
        cfg.data.blocks,
        cfg.data.points_per_block,
        cfg.data.seed,
        &cfg.data.generator,
    )
    .unwrap();
    let split = ClassSplit::two_fold(manifest.class_names.len(), 0);
    let (weights, log) = meta_train(&corpus, &split, &cfg, None, |_, _| {}).unwrap();
    println!(
        "loss first 3: {:?} last 3: {:?}",
        log.iterations.iter().map(|r| r.ce).take(3).collect::<Vec<_>>(),
        log.iterations.iter().rev().map(|r| r.ce).take(3).collect::<Vec<_>>()
    );
    let model = DpaModel {
        params: &weights,
        encoder: &cfg.encoder,
        decoder: &cfg.decoder,
        predictor: &cfg.predictor,
    };

    for (phase, name) in [(Phase::Test, "TEST/unseen"), (Phase::Train, "TRAIN/seen")] {
        let episode = sample_episode(
            &corpus, &split, phase, 2, 1, 1234,
            &cfg.data.episode_options(),
        )
        .unwrap();
        let preds = model.predict_episode(&episode).unwrap();
        let logits = model.episode_logits(&episode).unwrap();
        for (qi, q) in episode.query.iter().enumerate() {
            let mut pred_hist = [0usize; 3];
            let mut truth_hist = [0usize; 3];
            for &p in preds[qi].iter() {
                pred_hist[p as usize] += 1;
            }
            for &t in q.truth.iter() {
                truth_hist[t as usize] += 1;
            }
            // mean probability per class column
            let t = logits[qi].values.nrows();
            let mean_probs: Vec<f64> = (0..3)
                .map(|c| logits[qi].values.column(c).sum() / t as f64)
                .collect();
            println!(
                "{name} q{qi}: pred {pred_hist:?} truth {truth_hist:?} mean_probs {mean_probs:?}"
            );
        }
        // prototype geometry: distances between prototypes themselves
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &weights);
        let features =
            training::encode_episode_on(&mut tape, &episode, &cfg.encoder, &bound).unwrap();
        let masks: Vec<Vec<&dpa_core::BinaryMask>> = (1..=episode.n_way)
            .map(|local| {
                episode
                    .support_for(local)
                    .into_iter()
                    .map(|e| &e.mask)
                    .collect()
            })
            .collect();
        let vanilla =
            dpa_core::prototypes::build_prototype_set_on(&mut tape, &features.support, &masks)
                .unwrap();
        let set = vanilla.snapshot(&tape, dpa_core::PrototypeStage::Vanilla);
        for i in 0..3 {
            for j in (i + 1)..3 {
                let d = dpa_core::predictor::cosine_distance(
                    &set.vectors.row(i),
                    &set.vectors.row(j),
                );
                println!("{name}: cos-dist proto {i} <-> {j} = {d:.4}");
            }
        }
        // query-point distance stats to each prototype, split by truth
        let q0 = tape
            .value(features.queries[0])
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        for class in 0..3usize {
            let rows: Vec<usize> = episode.query[0]
                .truth
                .iter()
                .enumerate()
                .filter(|(_, &t)| t == class as i32)
                .map(|(r, _)| r)
                .collect();
            if rows.is_empty() {
                continue;
            }
            let mut means = [0.0f64; 3];
            for &r in &rows {
                for p in 0..3 {
                    means[p] += dpa_core::predictor::cosine_distance(
                        &q0.row(r),
                        &set.vectors.row(p),
                    );
                }
            }
            for m in &mut means {
                *m /= rows.len() as f64;
            }
            println!(
                "{name}: truth-class {class} ({} pts): mean dist to protos {means:?}",
                rows.len()
            );
        }
    }
}
