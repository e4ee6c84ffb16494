use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vcolbert::encoders::{tokenize_pad, EncoderConfig, EncoderParams};
use vcolbert::fusion::{rank, RankedList};
use vcolbert::harness::bench::{linear_fit, percentile};
use vcolbert::harness::synth::{AND_TOKEN, THEN_TOKEN};
use vcolbert::harness::{
    bench, gen_synth, median_rank, ndcg_at_10, recall_at_k, train_toy, AblationRunner, BenchConfig, Metrics, Qrels,
    Split, Study, SynthConfig, TrainConfig,
};
use vcolbert::index::{write_corpus, SearchMode};
use vcolbert::losses::LossKind;
use vcolbert::Error;

/// Result lists that place each query's relevant video at the given rank.
fn lists_with_ranks(ranks: &[usize], pool: usize) -> (BTreeMap<String, RankedList>, Qrels) {
    let mut results = BTreeMap::new();
    let mut qrels = Qrels::new();
    for (i, &r) in ranks.iter().enumerate() {
        let q = format!("q{i}");
        let ids: Vec<String> = (0..pool).map(|j| format!("d{j:03}")).collect();
        let relevant = ids[r - 1].clone();
        let scored = ids.iter().enumerate().map(|(j, id)| (id.clone(), (pool - j) as f64));
        results.insert(q.clone(), rank(scored).unwrap());
        qrels.insert(q, relevant);
    }
    (results, qrels)
}

#[test]
fn metric_hand_cases() {
    let (r, q) = lists_with_ranks(&[1, 1, 1], 20);
    assert_eq!(recall_at_k(&r, &q, 1).unwrap(), 1.0);
    assert_eq!(ndcg_at_10(&r, &q).unwrap(), 1.0);

    let (r, q) = lists_with_ranks(&[2, 2], 20);
    assert_eq!(recall_at_k(&r, &q, 1).unwrap(), 0.0);
    assert_eq!(recall_at_k(&r, &q, 5).unwrap(), 1.0);

    let (r, q) = lists_with_ranks(&[1, 3, 11], 20);
    assert_eq!(recall_at_k(&r, &q, 5).unwrap(), 2.0 / 3.0);
    assert_eq!(median_rank(&r, &q).unwrap(), 3.0);

    let (r, q) = lists_with_ranks(&[3], 20);
    assert_eq!(ndcg_at_10(&r, &q).unwrap(), 0.5);
    let (r, q) = lists_with_ranks(&[11], 20);
    assert_eq!(ndcg_at_10(&r, &q).unwrap(), 0.0);

    let (r, mut q) = lists_with_ranks(&[1], 5);
    q.insert("absent".into(), "d000".into());
    assert!(matches!(recall_at_k(&r, &q, 1), Err(Error::MissingQuery(_))));
    assert!(matches!(ndcg_at_10(&r, &q), Err(Error::MissingQuery(_))));
}

#[test]
fn metrics_match_brute_force_on_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..100 {
        let nq = rng.gen_range(1..15);
        let pool = rng.gen_range(1..30);
        let mut results = BTreeMap::new();
        let mut qrels = Qrels::new();
        for i in 0..nq {
            let mut ids: Vec<String> = (0..pool).map(|j| format!("d{j}")).collect();
            ids.shuffle(&mut rng);
            let list = rank(ids.iter().enumerate().map(|(j, id)| (id.clone(), -(j as f64)))).unwrap();
            results.insert(format!("q{i}"), list);
            qrels.insert(format!("q{i}"), format!("d{}", rng.gen_range(0..pool + 2)));
        }
        // Reference: walk each list position by position.
        let position = |q: &str| -> Option<usize> {
            let list = &results[q];
            let mut pos = None;
            for (i, (id, _)) in list.entries().iter().enumerate() {
                if *id == qrels[q] {
                    pos = Some(i + 1);
                    break;
                }
            }
            pos
        };
        for k in [1, 5, 10] {
            let mut hits = 0usize;
            for q in qrels.keys() {
                if let Some(p) = position(q) {
                    if p <= k {
                        hits += 1;
                    }
                }
            }
            assert_eq!(recall_at_k(&results, &qrels, k).unwrap(), hits as f64 / nq as f64);
        }
        let mut gain = 0.0;
        for q in qrels.keys() {
            if let Some(p) = position(q) {
                if p <= 10 {
                    gain += 1.0 / ((p + 1) as f64).log2();
                }
            }
        }
        assert_eq!(ndcg_at_10(&results, &qrels).unwrap(), gain / nq as f64);
    }
}

#[test]
fn metrics_mean_is_elementwise() {
    let a = Metrics { r1: 0.2, r5: 0.4, r10: 0.6, ndcg10: 0.3, mdr: 4.0 };
    let b = Metrics { r1: 0.4, r5: 0.6, r10: 0.8, ndcg10: 0.5, mdr: 2.0 };
    let m = Metrics::mean(&[a, b]);
    assert!((m.r1 - 0.3).abs() < 1e-15 && (m.mdr - 3.0).abs() < 1e-15);
}

#[test]
fn synth_is_deterministic_and_structured() {
    let cfg = SynthConfig { num_videos: 40, train_videos: 30, ..Default::default() };
    let a = gen_synth(&cfg).unwrap();
    let b = gen_synth(&cfg).unwrap();
    let bytes = |d: &vcolbert::harness::SynthDataset| {
        let mut v = Vec::new();
        write_corpus(&mut v, &d.corpus).unwrap();
        v
    };
    assert_eq!(bytes(&a), bytes(&b));
    assert_eq!(a.queries, b.queries);
    assert_ne!(bytes(&a), bytes(&gen_synth(&SynthConfig { seed: 1, ..cfg.clone() }).unwrap()));

    assert_eq!(a.qrels.len(), a.queries.len());
    assert_eq!(a.queries.len(), 40 * cfg.queries_per_video);
    for q in &a.queries {
        assert_eq!(a.qrels[&q.id], q.video_id);
    }
    assert_eq!(a.videos(Split::Train).len(), 30);
    assert_eq!(a.videos(Split::Test).len(), 10);

    // Twins share their first two concepts in swapped order.
    for pair in a.concepts.chunks(2) {
        assert_eq!((pair[0][0], pair[0][1]), (pair[1][1], pair[1][0]));
    }
    for q in &a.queries {
        assert_eq!(q.temporal, q.tokens[2] == THEN_TOKEN);
    }
}

#[test]
fn static_only_queries_name_a_concept_the_twin_lacks() {
    let cfg = SynthConfig { num_videos: 30, train_videos: 20, temporal_fraction: 0.0, ..Default::default() };
    let d = gen_synth(&cfg).unwrap();
    let index_of = |id: &str| d.corpus.iter().position(|(v, _)| v == id).unwrap();
    for q in &d.queries {
        assert!(!q.temporal);
        assert_eq!(q.tokens[2], AND_TOKEN);
        let v = index_of(&q.video_id);
        let twin = v ^ 1;
        let named = [q.tokens[1] - 5, q.tokens[3] - 5].map(|c| c as usize);
        assert!(named.iter().all(|c| d.concepts[v].contains(c)));
        if twin < d.concepts.len() {
            assert!(named.iter().any(|c| !d.concepts[twin].contains(c)));
        }
    }
}

#[test]
fn synth_rejects_bad_configs() {
    assert!(gen_synth(&SynthConfig { num_videos: 1, train_videos: 0, ..Default::default() }).is_err());
    assert!(gen_synth(&SynthConfig { temporal_fraction: 1.5, ..Default::default() }).is_err());
    assert!(gen_synth(&SynthConfig { train_videos: 1000, ..Default::default() }).is_err());
}

#[test]
fn dataset_save_load_round_trip() {
    let d = gen_synth(&SynthConfig { num_videos: 6, train_videos: 4, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    d.save(dir.path()).unwrap();
    let back = vcolbert::harness::SynthDataset::load(dir.path()).unwrap();
    assert_eq!(back.corpus, d.corpus);
    assert_eq!(back.queries, d.queries);
    assert_eq!(back.qrels, d.qrels);
    assert_eq!(back.splits, d.splits);
}

fn tiny() -> (SynthConfig, TrainConfig) {
    let synth = SynthConfig {
        num_videos: 24,
        train_videos: 16,
        frames_per_video: 8,
        queries_per_video: 2,
        ..Default::default()
    };
    let train = TrainConfig {
        batch_size: 8,
        epochs: 3,
        num_frames: 4,
        encoder: EncoderConfig {
            vocab_size: synth.vocab_size(),
            d_model: 8,
            dim: 8,
            text_layers: 1,
            temporal_layers: 1,
            ..Default::default()
        },
        ..Default::default()
    };
    (synth, train)
}

#[test]
fn training_rejects_bad_batches() {
    let (synth, train) = tiny();
    let data = gen_synth(&synth).unwrap();
    assert!(train_toy(&TrainConfig { batch_size: 1, ..train.clone() }, &data).is_err());
    assert!(train_toy(&TrainConfig { batch_size: 17, ..train }, &data).is_err());
}

#[test]
fn training_is_deterministic_and_starts_at_the_closed_form_loss() {
    let (synth, train) = tiny();
    let data = gen_synth(&synth).unwrap();
    let a = train_toy(&train, &data).unwrap();
    let b = train_toy(&train, &data).unwrap();
    assert_eq!(a.report.epochs, b.report.epochs);
    assert_eq!(a.report.test, b.report.test);
    assert_eq!(a.report.steps, 3 * 4);
    for mode in ["mp", "mp_video", "mms_f", "mms_v", "mms_fv", "rrf_fv"] {
        assert!(a.report.test.contains_key(mode), "{mode}");
    }
    // Each of the B(B-1) negatives costs softplus(12.93 + tS) with
    // |S| <= 1, positives are nearly free, and each of the two dual terms
    // is averaged over B.
    let softplus = |x: f64| (1.0 + x.exp()).ln();
    let per_level = |s: f64| (8.0 - 1.0) * softplus(12.93 + 4.77 * s);
    let init = a.report.initial_loss;
    assert!(init > 2.0 * per_level(-1.0) && init < 2.0 * per_level(1.0), "initial loss {init}");
    assert!((init - 2.0 * per_level(0.0)).abs() / (2.0 * per_level(0.0)) < 0.2, "initial loss {init}");
    assert!(a.report.final_loss < a.report.initial_loss);

    let c = train_toy(&TrainConfig { loss: LossKind::InfonceCombined, ..train }, &data).unwrap();
    assert!(c.report.final_loss.is_finite());
}

#[test]
fn studies_have_the_expected_rows() {
    let base = TrainConfig::default();
    let labels = |s: Study| s.rows(&base).into_iter().map(|r| r.label).collect::<Vec<_>>();
    assert_eq!(labels(Study::Interaction), ["MP-frame", "MP-video", "MMS_F", "MMS_V", "MMS_FV", "RRF"]);
    assert_eq!(labels(Study::Loss).len(), 4);
    assert_eq!(labels(Study::Frames), ["N=4", "N=12", "N=20"]);
    assert_eq!(labels(Study::QueryAug).len(), 4);
    assert_eq!(labels(Study::Depth).len(), 3);
    assert_eq!("query-aug".parse::<Study>().unwrap(), Study::QueryAug);
    assert!(matches!("nope".parse::<Study>(), Err(Error::Unknown { .. })));
}

#[test]
fn ablation_runner_averages_seeds_and_reuses_models() {
    let (synth, train) = tiny();
    let mut runner = AblationRunner::new(synth, TrainConfig { epochs: 1, ..train }, 3);
    let report = runner.run(Study::Interaction, Some(&["MMS_FV", "RRF"])).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.seeds, [0, 1, 2]);
    // RRF reuses the MMS_FV models.
    assert_eq!(report.timing.trainings, 3);
    let row = report.row("MMS_FV").unwrap();
    assert_eq!(row.per_seed.len(), 3);
    assert_eq!(row.mean, Metrics::mean(&row.per_seed));
    let table = report.to_table();
    assert!(table.contains("MMS_FV") && table.contains("nDCG@10"));
    let json = serde_json::to_value(&report).unwrap();
    assert!(json.get("timing").is_some());

    let again = runner.run(Study::QueryAug, Some(&["causal / pad tokens"])).unwrap();
    assert_eq!(again.timing.trainings, 0);
    assert!(runner.run(Study::Loss, Some(&["missing row"])).is_err());
}

#[test]
fn bench_reports_every_requested_mode() {
    let data = gen_synth(&SynthConfig { num_videos: 60, train_videos: 0, queries_per_video: 1, ..Default::default() }).unwrap();
    let params = EncoderParams::<f64>::init(EncoderConfig::default(), 3).unwrap();
    let queries: Vec<_> = data.queries.iter().take(10).map(|q| tokenize_pad(&q.tokens, 32, 0).unwrap()).collect();
    let cfg = BenchConfig { repeats: 2, scaling_sizes: vec![15, 30, 60], ..Default::default() };
    let report = bench(&params, &data.corpus, &queries, &cfg).unwrap();
    for mode in SearchMode::ALL {
        assert!(report.timing.indexing_ms_per_video.contains_key(mode.as_str()));
        assert!(report.timing.latency.contains_key(mode.as_str()));
    }
    assert_eq!(report.videos, 60);
    assert_eq!(report.timing.scaling.as_ref().unwrap().sizes, [15, 30, 60]);
    assert!(bench(&params, &data.corpus, &[], &cfg).is_err());
}

#[test]
fn percentile_and_fit_helpers() {
    let v: Vec<f64> = (1..=100).map(f64::from).collect();
    assert_eq!(percentile(&v, 50.0), 50.0);
    assert_eq!(percentile(&v, 95.0), 95.0);
    let (s, i, r2) = linear_fit(&[1.0, 2.0, 3.0], &[3.0, 5.0, 7.0]).unwrap();
    assert!((s - 2.0).abs() < 1e-12 && (i - 1.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    assert!(linear_fit(&[1.0], &[1.0]).is_err());
}
