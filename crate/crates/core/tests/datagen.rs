use sampo_core::datagen::{audit, generate_corpus, read_jsonl, split_by_length, write_jsonl, HistogramBin};
use sampo_core::{CorpusSpec, LengthBias, PreferenceTriplet, TokenSeq, TripletMeta};
use std::io::BufReader;

fn spec(bias: LengthBias, gap: f64, size: usize) -> CorpusSpec {
    CorpusSpec {
        size,
        length_bias: bias,
        quality_gap: gap,
        ..CorpusSpec::default()
    }
}

fn triplet(tw: usize, tl: usize) -> PreferenceTriplet {
    let seq = |n: usize, first: u32| TokenSeq::new((0..n as u32).map(|i| (first + i) % 5).collect()).unwrap();
    PreferenceTriplet::new(seq(2, 0), seq(tw, 1), seq(tl, 2), None).unwrap()
}

#[test]
fn zero_gap_scores_are_indistinguishable() {
    let (corpus, _) = generate_corpus(&spec(LengthBias::Neutral, 0.0, 10_000)).unwrap();
    let diffs: Vec<f64> = corpus
        .iter()
        .map(|t| {
            let m = t.meta.as_ref().unwrap();
            m.score_w - m.score_l
        })
        .collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(mean.abs() < 3.0 * sd / n.sqrt(), "mean {mean}, se {}", sd / n.sqrt());
}

#[test]
fn oracle_preference_grows_with_gap() {
    let fracs: Vec<f64> = [0.5, 1.0, 2.0]
        .iter()
        .map(|&gap| {
            let (corpus, _) = generate_corpus(&spec(LengthBias::Neutral, gap, 10_000)).unwrap();
            let wins = corpus
                .iter()
                .filter(|t| {
                    let m = t.meta.as_ref().unwrap();
                    m.score_w > m.score_l
                })
                .count();
            wins as f64 / corpus.len() as f64
        })
        .collect();
    assert!(fracs[0] >= 0.5, "{fracs:?}");
    assert!(fracs[0] < fracs[1] && fracs[1] < fracs[2], "{fracs:?}");
}

#[test]
fn meta_scores_are_oracle_scores() {
    let (corpus, oracle) = generate_corpus(&spec(LengthBias::Mixed, 1.0, 300)).unwrap();
    for t in &corpus {
        let m: &TripletMeta = t.meta.as_ref().unwrap();
        assert_eq!((m.tw, m.tl), t.lens());
        assert!((oracle.score(&t.prompt, &t.chosen).unwrap() - m.score_w).abs() < 1e-12);
        assert!((oracle.score(&t.prompt, &t.rejected).unwrap() - m.score_l).abs() < 1e-12);
    }
}

#[test]
fn length_relations_hold_for_every_triplet() {
    for bias in [LengthBias::Long, LengthBias::Short, LengthBias::Neutral, LengthBias::Mixed] {
        let (corpus, _) = generate_corpus(&spec(bias, 0.5, 2000)).unwrap();
        assert_eq!(corpus.len(), 2000);
        let longer = corpus.iter().filter(|t| t.lens().0 > t.lens().1).count();
        for t in &corpus {
            let (w, l) = t.lens();
            match bias {
                LengthBias::Long => assert!(w > l),
                LengthBias::Short => assert!(w < l),
                LengthBias::Neutral => assert_eq!(w, l),
                LengthBias::Mixed => assert_ne!(w, l),
            }
        }
        if bias == LengthBias::Mixed {
            let frac = longer as f64 / 2000.0;
            assert!((frac - 0.6).abs() < 0.05, "mixed fraction {frac}");
        }
    }
}

#[test]
fn hand_built_audit() {
    let corpus = vec![triplet(5, 3), triplet(2, 4), triplet(3, 3), triplet(6, 2)];
    let report = audit(&corpus, 0.1, 2.0).unwrap();
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
    assert_eq!(report.n, 4);
    assert!(close(report.frac_chosen_longer, 0.5));
    assert!(close(report.tw.mean, 4.0) && close(report.tw.sd, 2.5f64.sqrt()));
    assert!(close(report.tl.mean, 3.0) && close(report.tl.sd, 0.5f64.sqrt()));
    assert!(close(report.diff.mean, 1.0) && close(report.diff.sd, 5f64.sqrt()));
    let proxy = [0.4, -0.4, 0.0, 0.8];
    assert!(report.bias_proxy.iter().zip(proxy).all(|(a, b)| close(*a, b)));
    assert!(close(report.bias_proxy_mean, 0.2));
    let bins: Vec<HistogramBin> = [(-2, 1), (0, 1), (2, 1), (4, 1)]
        .iter()
        .map(|&(diff, count)| HistogramBin { diff, count })
        .collect();
    assert_eq!(report.histogram, bins);
    assert!(audit(&[], 0.1, 1.0).is_err());
}

#[test]
fn split_is_a_partition() {
    let mut corpus = Vec::new();
    for (bias, n) in [(LengthBias::Long, 40), (LengthBias::Neutral, 25), (LengthBias::Short, 35)] {
        corpus.extend(generate_corpus(&CorpusSpec { seed: n as u64, ..spec(bias, 0.5, n) }).unwrap().0);
    }
    let split = split_by_length(&corpus);
    assert_eq!((split.long.len(), split.short.len(), split.ties), (40, 35, 25));
    for t in &corpus {
        let hits = split.long.iter().filter(|x| *x == t).count() + split.short.iter().filter(|x| *x == t).count();
        let (w, l) = t.lens();
        assert_eq!(hits, usize::from(w != l));
    }
    let (long_only, _) = generate_corpus(&spec(LengthBias::Long, 0.5, 100)).unwrap();
    assert!(split_by_length(&long_only).short.is_empty());
}

#[test]
fn corpus_file_round_trip() {
    let (corpus, _) = generate_corpus(&spec(LengthBias::Mixed, 0.5, 200)).unwrap();
    let mut file = tempfile::NamedTempFile::new().unwrap();
    write_jsonl(&corpus, &mut file).unwrap();
    let back = read_jsonl(BufReader::new(std::fs::File::open(file.path()).unwrap())).unwrap();
    assert_eq!(back, corpus);
}

#[test]
fn triplets_without_meta_parse() {
    let line = r#"{"prompt":[1],"chosen":[2,3],"rejected":[4]}"#;
    let parsed = read_jsonl(line.as_bytes()).unwrap();
    assert_eq!(parsed[0].meta, None);
    assert_eq!(parsed[0].lens(), (2, 1));
}
