//! End-to-end harness checks on a tiny training budget.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use semlink::channel::ChannelKind;
use semlink::experiment::{
    self, evaluate_grid, load_checkpoint, parse_results, train_variant, Experiment, ExperimentConfig, Manifest,
    PhaseBudget, RunOutput,
};
use semlink::model::Variant;
use semlink::Error;

fn tiny_config(checkpoints: &Path) -> ExperimentConfig {
    let budget = PhaseBudget {
        steps: 2,
        lr: 1e-3,
        batch: 1,
    };
    ExperimentConfig {
        snr_db: vec![-6.0, 0.0, 6.0, 12.0, 18.0],
        eval_samples: 2,
        pretrain_samples: 8,
        train_samples: 16,
        pretrain: budget,
        sft: budget,
        codec: budget,
        joint: budget,
        checkpoint_dir: checkpoints.to_path_buf(),
        ..ExperimentConfig::default()
    }
}

fn run(cfg: &ExperimentConfig, exp: Experiment) -> RunOutput {
    let mut c = cfg.clone();
    c.experiment = exp;
    experiment::run(&c).unwrap()
}

fn text(out: &RunOutput, name: &str) -> String {
    String::from_utf8(out.file(name).unwrap().to_vec()).unwrap()
}

#[test]
fn harness_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(&tmp.path().join("ckpt"));

    // missing checkpoint before training
    let mut sweep_cfg = cfg.clone();
    sweep_cfg.experiment = Experiment::SweepSnr;
    assert!(matches!(experiment::run(&sweep_cfg), Err(Error::Config(_))));

    for v in Variant::ALL {
        train_variant(&cfg, v).unwrap();
    }

    // training is deterministic: a second checkpoint directory gets the same weights
    let other = tiny_config(&tmp.path().join("ckpt2"));
    assert_eq!(
        train_variant(&other, Variant::Full).unwrap().hash,
        load_checkpoint(&cfg, Variant::Full).unwrap().hash
    );

    // sweep grid is complete and repeatable
    let sweep = run(&cfg, Experiment::SweepSnr);
    let rows = parse_results(&text(&sweep, "results.csv")).unwrap();
    assert_eq!(rows.len(), 5 * 2 * 3 * 3);
    for &c in &cfg.channels {
        for &s in &cfg.snr_db {
            for &seed in &cfg.seeds {
                for &t in &cfg.tasks {
                    let n = rows
                        .iter()
                        .filter(|r| r.channel == Some(c) && r.snr_db == s && r.seed == seed && r.task == t)
                        .count();
                    assert_eq!(n, 1, "{c} {s} {seed} {t}");
                }
            }
        }
    }
    assert_eq!(run(&cfg, Experiment::SweepSnr), sweep);

    // regeneration from the written manifest
    let out_dir = tmp.path().join("sweep");
    experiment::write_output(&sweep, &out_dir).unwrap();
    let manifest = Manifest::load(&out_dir.join("manifest.txt")).unwrap();
    assert_eq!(experiment::reproduce(&manifest).unwrap(), sweep);

    // ablation audit covers every variant under one budget
    let ablate = run(&cfg, Experiment::Ablate);
    let audit = text(&ablate, "audit.tsv");
    let lines: Vec<Vec<&str>> = audit.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    let names: Vec<&str> = lines.iter().map(|l| l[0]).collect();
    assert_eq!(names, ["full", "no_ban", "no_kan"]);
    assert!(lines.iter().all(|l| l[3] == cfg.budget_hash() && l[4] == cfg.dataset_hash()));
    let ablate_rows = parse_results(&text(&ablate, "results.csv")).unwrap();
    assert_eq!(ablate_rows.len(), 3 * 3 * 3);

    // joint comparison: paired samples, per-seed deltas recomputable
    let joint = run(&cfg, Experiment::JointCompare);
    let results = parse_results(&text(&joint, "results.csv")).unwrap();
    let samples = text(&joint, "samples.csv");
    let mut by_cell: BTreeMap<(String, String, String, String), Vec<f64>> = BTreeMap::new();
    let mut pairs: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for line in samples.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let key = (f[0].to_string(), f[2].to_string(), f[3].to_string(), f[4].to_string());
        by_cell.entry(key).or_default().push(f[6].parse().unwrap());
        pairs.entry(f[1..6].join(",")).or_default().push(f[0].to_string());
    }
    assert!(pairs.values().all(|v| v.len() == 2 && v[0] == "full" && v[1] == "no_joint"));
    for &c in &cfg.channels {
        for &s in &cfg.snr_db {
            for &seed in &cfg.seeds {
                let from_results = |v: Variant| {
                    results
                        .iter()
                        .filter(|r| r.variant == v && r.channel == Some(c) && r.snr_db == s && r.seed == seed)
                        .map(|r| r.accuracy)
                        .sum::<f64>()
                        / cfg.tasks.len() as f64
                };
                let from_samples = |v: &str| {
                    let x = &by_cell[&(v.to_string(), c.to_string(), format!("{s}"), seed.to_string())];
                    x.iter().sum::<f64>() / x.len() as f64
                };
                let delta_r = from_results(Variant::Full) - from_results(Variant::NoJoint);
                let delta_s = from_samples("full") - from_samples("no_joint");
                assert!((delta_r - delta_s).abs() < 1e-9);
            }
        }
    }

    // infinite SNR matches the channel-free codec link
    let full = load_checkpoint(&cfg, Variant::Full).unwrap();
    let grid = |ch: &[Option<ChannelKind>], snr: f64| {
        let rows = evaluate_grid(
            Experiment::Eval,
            &full.model,
            ch,
            &[snr],
            &cfg.seeds,
            &cfg.tasks,
            4,
            None,
        )
        .unwrap();
        rows.iter().map(|r| r.accuracy).sum::<f64>() / rows.len() as f64
    };
    let codec = grid(&[None], 0.0);
    for kind in ChannelKind::ALL {
        assert!((grid(&[Some(kind)], f64::INFINITY) - codec).abs() <= 0.001);
    }

    // budget mismatch refuses the checkpoints
    let mut changed = cfg.clone();
    changed.sft.steps += 1;
    assert!(matches!(load_checkpoint(&changed, Variant::Full), Err(Error::Config(_))));
    changed.experiment = Experiment::Ablate;
    assert!(matches!(experiment::run(&changed), Err(Error::Config(_))));

    // tampering with a recorded checkpoint is detected
    let params = experiment::checkpoint_dir(&cfg, Variant::Full).join("params.tct");
    let mut bytes = fs::read(&params).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&params, bytes).unwrap();
    assert!(matches!(experiment::reproduce(&manifest), Err(Error::Format(_))));
}

#[test]
fn manifest_rejects_edited_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = RunOutput::default();
    let text = experiment::manifest_text(&cfg, &out).replace("eval_samples=2", "eval_samples=3");
    let m = Manifest::parse(&text).unwrap();
    assert!(matches!(experiment::reproduce(&m), Err(Error::Format(_))));
}
