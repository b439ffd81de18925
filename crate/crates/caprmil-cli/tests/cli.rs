//! End-to-end command tests through the real binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use caprmil::{
    init_model, save_checkpoint, write_bag, Aggregator, BagRecord, CaprmilConfig, Rng, Split,
    Tensor,
};

const BIN: &str = env!("CARGO_BIN_EXE_caprmil");

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .output()
        .expect("binary launches")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_success(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed: {}\n{}",
        stdout_of(out),
        stderr_of(out)
    );
}

/// Tiny but learnable dataset: every positive patch carries signal.
fn gen_tiny(dir: &Path, seed: &str) {
    let out = run(&[
        "gen",
        "--out",
        dir.to_str().unwrap(),
        "--preset",
        "easy",
        "--bags-per-class",
        "10",
        "--n-min",
        "9",
        "--n-max",
        "14",
        "--d-in",
        "8",
        "--witness-rate",
        "1.0",
        "--separation",
        "8.0",
        "--seed",
        seed,
    ]);
    assert_success(&out, "gen");
}

fn write_settings(path: &Path, extra: &str) {
    let base = "d_model = 8\nn_heads = 2\nn_clusters = 2\nmlp_ratio = 1\nattn_hidden = 4\n\
                max_epochs = 8\nwarmup_epochs = 2\nbase_lr = 3e-3\nearly_stop_patience = 8\n";
    std::fs::write(path, format!("{base}{extra}")).unwrap();
}

#[test]
fn gen_is_deterministic_per_seed_and_validates_the_spec() {
    let root = tempfile::tempdir().unwrap();
    let a = root.path().join("a");
    let b = root.path().join("b");
    let c = root.path().join("c");
    gen_tiny(&a, "7");
    gen_tiny(&b, "7");
    gen_tiny(&c, "8");

    let manifest_a = std::fs::read(a.join("manifest.csv")).unwrap();
    let manifest_b = std::fs::read(b.join("manifest.csv")).unwrap();
    assert_eq!(manifest_a, manifest_b);
    let bag_a = std::fs::read(a.join("syn_c1_0000.capb")).unwrap();
    let bag_b = std::fs::read(b.join("syn_c1_0000.capb")).unwrap();
    let bag_c = std::fs::read(c.join("syn_c1_0000.capb")).unwrap();
    assert_eq!(bag_a, bag_b);
    assert_ne!(bag_a, bag_c);

    let bad = run(&[
        "gen",
        "--out",
        root.path().join("bad").to_str().unwrap(),
        "--witness-rate",
        "1.5",
    ]);
    assert_eq!(bad.status.code(), Some(2), "{}", stderr_of(&bad));
    let err = stderr_of(&bad);
    assert!(err.lines().count() == 1 && err.starts_with("error: config:"), "{err}");
}

#[test]
fn train_then_eval_separable_data_reaches_high_train_auc() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    gen_tiny(&data, "3");
    let settings = root.path().join("caprmil.conf");
    write_settings(&settings, "");
    let ckpt = root.path().join("model.cprm");

    let train_args = [
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--config",
        settings.to_str().unwrap(),
        "--seed",
        "5",
    ];
    let first = run(&train_args);
    assert_success(&first, "train");
    assert!(ckpt.exists());
    let log_path = ckpt.with_extension("tsv");
    let log_a = std::fs::read_to_string(&log_path).unwrap();

    let second = run(&train_args);
    assert_success(&second, "retrain");
    let log_b = std::fs::read_to_string(&log_path).unwrap();

    // identical losses per epoch; only the seconds column may differ
    let strip_seconds = |log: &str| -> Vec<Vec<String>> {
        log.lines()
            .filter(|l| !l.starts_with('#'))
            .map(|l| l.split('\t').take(5).map(str::to_string).collect())
            .collect()
    };
    let a = strip_seconds(&log_a);
    assert_eq!(a, strip_seconds(&log_b));
    assert!(!a.is_empty());
    assert!(a.iter().all(|row| row.len() == 5), "{log_a}");

    for split in ["train", "val", "test"] {
        let eval = run(&[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--split",
            split,
        ]);
        assert_success(&eval, "eval");
        let text = stdout_of(&eval);
        let machine = text
            .lines()
            .find(|l| l.starts_with("auc="))
            .unwrap_or_else(|| panic!("no machine line in {text}"));
        for key in ["auc=", "ace=", "kappa=", "qw_kappa=", "balanced_accuracy="] {
            assert!(machine.contains(key), "{machine}");
        }
        if split == "train" {
            let auc: f64 = machine
                .split_whitespace()
                .find_map(|kv| kv.strip_prefix("auc="))
                .unwrap()
                .parse()
                .unwrap();
            assert!(auc > 0.99, "train-split AUC {auc}");
        }
    }

    let bogus = run(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--split",
        "holdout",
    ]);
    assert_eq!(bogus.status.code(), Some(2), "{}", stderr_of(&bogus));
}

#[test]
fn train_ablate_emits_one_record_per_cell() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    gen_tiny(&data, "11");
    let settings = root.path().join("caprmil.conf");
    std::fs::write(
        &settings,
        "d_model = 8\nn_heads = 2\nn_clusters = 2\nmlp_ratio = 1\nattn_hidden = 4\n\
         max_epochs = 1\nwarmup_epochs = 0\n",
    )
    .unwrap();

    let out = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        root.path().join("unused.cprm").to_str().unwrap(),
        "--config",
        settings.to_str().unwrap(),
        "--ablate",
        "clusters=1,2",
        "--ablate",
        "heads=1,2",
    ]);
    assert_success(&out, "ablate");
    let text = stdout_of(&out);
    let records: Vec<&str> = text.lines().filter(|l| l.starts_with("m=")).collect();
    assert_eq!(records.len(), 4, "{text}");
    for record in records {
        for key in ["m=", "h=", "ratio=", "params=", "auc="] {
            assert!(record.contains(key), "{record}");
        }
    }
}

#[test]
fn eval_names_both_dims_on_shape_mismatch_and_exit_codes_distinguish_categories() {
    let root = tempfile::tempdir().unwrap();
    let narrow = root.path().join("narrow");
    gen_tiny(&narrow, "2");

    // checkpoint built directly at a different width
    let cfg = CaprmilConfig {
        d_in: 12,
        d_model: 8,
        n_heads: 2,
        n_clusters: 2,
        mlp_ratio: 1,
        attn_hidden: 4,
        ..CaprmilConfig::default()
    };
    let ckpt = root.path().join("wide.cprm");
    save_checkpoint(&ckpt, &init_model::<f32>(&cfg, 0).unwrap()).unwrap();

    let eval = run(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        narrow.to_str().unwrap(),
        "--split",
        "train",
    ]);
    assert_eq!(eval.status.code(), Some(3), "{}", stderr_of(&eval));
    let err = stderr_of(&eval);
    assert!(err.contains("d_in=12") && err.contains("d_in=8"), "{err}");

    // a split whose labels are all one class trips a runtime (metric) error
    let single = root.path().join("single");
    std::fs::create_dir_all(&single).unwrap();
    let mut rng = Rng::new(4);
    let bags: Vec<BagRecord> = (0..4)
        .map(|i| BagRecord {
            id: format!("b{i}"),
            features: Tensor::constant(
                (0..5 * 12).map(|_| rng.normal() as f32).collect::<Vec<_>>(),
                &[5, 12],
            )
            .unwrap(),
            label: usize::from(i == 0),
            coords: None,
        })
        .collect();
    let splits = vec![Split::Test, Split::Train, Split::Train, Split::Train];
    caprmil::write_dataset(&single, &bags, &splits).unwrap();
    let degenerate = run(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        single.to_str().unwrap(),
        "--split",
        "test",
    ]);
    assert_eq!(degenerate.status.code(), Some(4), "{}", stderr_of(&degenerate));
    assert!(stderr_of(&degenerate).starts_with("error: runtime:"));
}

#[test]
fn cost_prints_published_scale_numbers_and_sweep_dump() {
    let cost = run(&["cost"]);
    assert_success(&cost, "cost");
    let text = stdout_of(&cost);
    assert!(text.contains("0.314M"), "{text}");
    assert!(text.contains("627068162"), "{text}");
    assert!(text.contains("627008"), "{text}");

    let gattn = run(&["cost", "--aggregator", "gattn"]);
    assert_success(&gattn, "cost gattn");
    assert!(stdout_of(&gattn).contains("347519"), "{}", stdout_of(&gattn));

    let root = tempfile::tempdir().unwrap();
    let settings = root.path().join("tiny.conf");
    std::fs::write(
        &settings,
        "d_in = 8\nd_model = 8\nn_heads = 2\nn_clusters = 2\nmlp_ratio = 1\nattn_hidden = 4\n",
    )
    .unwrap();
    let csv_path = root.path().join("sweep.csv");
    let sweep = run(&[
        "cost",
        "--config",
        settings.to_str().unwrap(),
        "--sweep",
        "16..64",
        "--repeats",
        "3",
        "--csv",
        csv_path.to_str().unwrap(),
    ]);
    assert_success(&sweep, "cost sweep");
    let text = stdout_of(&sweep);
    assert!(text.contains("n,median_seconds,analytic_flops"), "{text}");
    assert!(text.contains("linear fit"), "{text}");
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    assert_eq!(csv.lines().count(), 4); // header + {16, 32, 64}
}

#[test]
fn settings_file_rejects_unknown_keys_through_the_cli() {
    let root = tempfile::tempdir().unwrap();
    let settings = root.path().join("bad.conf");
    std::fs::write(&settings, "d_modle = 8\n").unwrap();
    let out = run(&["cost", "--config", settings.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr_of(&out));
    assert!(stderr_of(&out).contains("d_modle"), "{}", stderr_of(&out));
}

/// Independent minimal P5 parser so the exporter is cross-checked, not
/// self-checked.
fn parse_pgm(bytes: &[u8]) -> (usize, usize, Vec<u8>) {
    let header_end = bytes
        .windows(1)
        .enumerate()
        .scan(0, |fields, (i, w)| {
            if w[0].is_ascii_whitespace() {
                *fields += 1;
            }
            Some((*fields, i))
        })
        .find(|(fields, _)| *fields == 4)
        .map(|(_, i)| i)
        .unwrap();
    let header = std::str::from_utf8(&bytes[..header_end]).unwrap();
    let mut tokens = header.split_ascii_whitespace();
    assert_eq!(tokens.next(), Some("P5"));
    let width: usize = tokens.next().unwrap().parse().unwrap();
    let height: usize = tokens.next().unwrap().parse().unwrap();
    assert_eq!(tokens.next(), Some("255"));
    (width, height, bytes[header_end + 1..].to_vec())
}

#[test]
fn heatmap_exports_renormalizable_grids_and_sorted_topk() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    gen_tiny(&data, "9");

    let cfg = CaprmilConfig {
        d_in: 8,
        d_model: 8,
        n_heads: 2,
        n_clusters: 4,
        mlp_ratio: 1,
        attn_hidden: 4,
        ..CaprmilConfig::default()
    };
    let ckpt = root.path().join("model.cprm");
    save_checkpoint(&ckpt, &init_model::<f32>(&cfg, 1).unwrap()).unwrap();

    let bag_path = data.join("syn_c1_0002.capb");
    let out_dir = root.path().join("maps");
    let out = run(&[
        "heatmap",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--bag",
        bag_path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--head",
        "1",
    ]);
    assert_success(&out, "heatmap");

    let bag = caprmil::read_bag(&bag_path).unwrap();
    let n = bag.n_patches();
    let coords = bag.coords.clone().unwrap();

    let mut grids = Vec::new();
    for token in 0..4 {
        let path = out_dir.join(format!("token{token}.pgm"));
        let (w, h, pixels) = parse_pgm(&std::fs::read(&path).unwrap());
        grids.push((w, h, pixels));
    }
    assert!(!out_dir.join("token4.pgm").exists(), "exactly M images");
    // per-patch pixel sums across tokens recover the row-stochastic rows up
    // to quantization
    for coord in &coords {
        let total: u32 = grids
            .iter()
            .map(|(w, _, px)| u32::from(px[coord[1] as usize * w + coord[0] as usize]))
            .sum();
        assert!(
            (total as i64 - 255).unsigned_abs() <= 4,
            "pixel sum {total} at {coord:?}"
        );
    }

    let listing = std::fs::read_to_string(out_dir.join("topk.csv")).unwrap();
    let mut lines = listing.lines();
    assert_eq!(lines.next(), Some("token,rank,patch,x,y,weight"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4 * 8.min(n));
    for token in 0..4 {
        let weights: Vec<f64> = rows
            .iter()
            .filter(|r| r[0] == token.to_string())
            .map(|r| r[5].parse().unwrap())
            .collect();
        assert_eq!(weights.len(), 8.min(n));
        assert!(weights.windows(2).all(|w| w[0] >= w[1]), "{weights:?}");
    }

    // a bag without coordinates is a data error that points at gen
    let bare = root.path().join("bare.capb");
    let mut rng = Rng::new(0);
    write_bag(
        &bare,
        &BagRecord {
            id: "bare".into(),
            features: Tensor::constant(
                (0..6 * 8).map(|_| rng.normal() as f32).collect::<Vec<_>>(),
                &[6, 8],
            )
            .unwrap(),
            label: 0,
            coords: None,
        },
    )
    .unwrap();
    let no_coords = run(&[
        "heatmap",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--bag",
        bare.to_str().unwrap(),
        "--out",
        root.path().join("maps2").to_str().unwrap(),
    ]);
    assert_eq!(no_coords.status.code(), Some(3), "{}", stderr_of(&no_coords));
    assert!(stderr_of(&no_coords).contains("gen"), "{}", stderr_of(&no_coords));

    // aggregator flag mismatch guard: Attn/GAttn checkpoints also export
    let attn_cfg = CaprmilConfig {
        aggregator: Aggregator::Attn,
        ..cfg
    };
    let attn_ckpt = root.path().join("attn.cprm");
    save_checkpoint(&attn_ckpt, &init_model::<f32>(&attn_cfg, 2).unwrap()).unwrap();
    let attn_out = run(&[
        "heatmap",
        "--checkpoint",
        attn_ckpt.to_str().unwrap(),
        "--bag",
        bag_path.to_str().unwrap(),
        "--out",
        root.path().join("maps3").to_str().unwrap(),
        "--block",
        "0",
    ]);
    assert_success(&attn_out, "heatmap attn");

    // out-of-range block is a config error
    let bad_block = run(&[
        "heatmap",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--bag",
        bag_path.to_str().unwrap(),
        "--out",
        root.path().join("maps4").to_str().unwrap(),
        "--block",
        "3",
    ]);
    assert_eq!(bad_block.status.code(), Some(2), "{}", stderr_of(&bad_block));
}

#[test]
fn heatmap_grids_round_trip_assignment_weights_within_quantization() {
    // drive the round-trip invariant end to end on a second head/seed
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    gen_tiny(&data, "13");
    let cfg = CaprmilConfig {
        d_in: 8,
        d_model: 8,
        n_heads: 2,
        n_clusters: 2,
        mlp_ratio: 1,
        attn_hidden: 4,
        ..CaprmilConfig::default()
    };
    let ckpt = root.path().join("model.cprm");
    let model = init_model::<f32>(&cfg, 3).unwrap();
    save_checkpoint(&ckpt, &model).unwrap();
    let bag_path = data.join("syn_c0_0001.capb");
    let out_dir = root.path().join("maps");
    let out = run(&[
        "heatmap",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--bag",
        bag_path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_success(&out, "heatmap");

    let bag = caprmil::read_bag(&bag_path).unwrap();
    let mut rng = Rng::new(0);
    let (_, maps) = caprmil::forward(&model, &bag.features, &mut rng, false, true).unwrap();
    let map = &maps[0];
    let coords = bag.coords.unwrap();
    for token in 0..2 {
        let (w, _, pixels) =
            parse_pgm(&std::fs::read(out_dir.join(format!("token{token}.pgm"))).unwrap());
        for (patch, coord) in coords.iter().enumerate() {
            let stored = f64::from(pixels[coord[1] as usize * w + coord[0] as usize]) / 255.0;
            let truth = map.weight(0, patch, token);
            assert!(
                (stored - truth).abs() <= 0.5 / 255.0 + 1e-12,
                "patch {patch} token {token}: {stored} vs {truth}"
            );
        }
    }
}
