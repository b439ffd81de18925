//! The five operator commands. Each returns the library's `Result` so exit
//! codes can be derived from the error category in one place.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use caprmil::{
    bench_scaling, evaluate, init_model, load_checkpoint, load_manifest, read_bag, run_ablation,
    save_checkpoint, train, AblationAxes, Aggregator, BagSource, CaprmilConfig, CostReport,
    DiskBagSource, Error, ManifestEntry, Result, Rng, Split, SyntheticSpec, TrainConfig,
};

use crate::pgm::write_pgm;
use crate::settings::Settings;

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::io(path.display().to_string(), source)
}

/// `--data` accepts either the manifest file itself or the directory the
/// gen command produced.
fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("manifest.csv")
    } else {
        data.to_path_buf()
    }
}

fn split_entries(entries: &[ManifestEntry], split: Split) -> Vec<&ManifestEntry> {
    entries.iter().filter(|e| e.split == split).collect()
}

/// First bag of a split tells us the feature width the dataset provides.
fn dataset_d_in(entries: &[ManifestEntry]) -> Result<usize> {
    let first = entries
        .first()
        .ok_or_else(|| Error::data("manifest lists no bags"))?;
    Ok(read_bag(&first.path)?.d_in())
}

// ---------------------------------------------------------------------------
// gen

pub struct GenOptions {
    pub out: PathBuf,
    pub preset: String,
    pub bags_per_class: usize,
    pub n_min: Option<usize>,
    pub n_max: Option<usize>,
    pub d_in: Option<usize>,
    pub witness_rate: Option<f64>,
    pub morphologies: Option<usize>,
    pub separation: Option<f64>,
    pub noise_sigma: Option<f64>,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

pub fn cmd_gen(opts: &GenOptions) -> Result<()> {
    let mut spec = match opts.preset.as_str() {
        "hard" => SyntheticSpec::hard(opts.bags_per_class, opts.seed),
        "easy" => SyntheticSpec::easy(opts.bags_per_class, opts.seed),
        other => {
            return Err(Error::config(format!(
                "unknown preset {other:?} (expected hard or easy)"
            )))
        }
    };
    if let Some(v) = opts.n_min {
        spec.n_min = v;
    }
    if let Some(v) = opts.n_max {
        spec.n_max = v;
    }
    if let Some(v) = opts.d_in {
        spec.d_in = v;
    }
    if let Some(v) = opts.witness_rate {
        spec.witness_rate = v;
    }
    if let Some(v) = opts.morphologies {
        spec.n_morphologies = v;
    }
    if let Some(v) = opts.separation {
        spec.separation = v;
    }
    if let Some(v) = opts.noise_sigma {
        spec.noise_sigma = v;
    }

    if !(0.0..1.0).contains(&opts.val_frac) || !(0.0..1.0).contains(&opts.test_frac) {
        return Err(Error::config("val/test fractions must lie in [0, 1)"));
    }
    let n = spec.n_bags_per_class;
    let n_val = (n as f64 * opts.val_frac).round() as usize;
    let n_test = (n as f64 * opts.test_frac).round() as usize;
    if n_val + n_test >= n {
        return Err(Error::config(format!(
            "per-class split {n_val} val + {n_test} test leaves no training bags out of {n}"
        )));
    }

    // Bags stream to disk one at a time: the hard preset at benchmark scale
    // is several gigabytes, far more than this process should ever hold.
    let summary = caprmil::write_synthetic_dataset(&opts.out, &spec, |_class, j| {
        if j < n - n_val - n_test {
            Split::Train
        } else if j < n - n_test {
            Split::Val
        } else {
            Split::Test
        }
    })?;
    let manifest = summary.manifest.clone();

    let sizes = &summary.sizes;
    let total_patches: usize = sizes.iter().sum();
    let positive_patches: usize = summary
        .labels
        .iter()
        .zip(sizes)
        .filter(|(&label, _)| label == 1)
        .map(|(_, &n)| n)
        .sum();
    let signal_total: usize = summary.signal_counts.iter().sum();
    let measured_rate = signal_total as f64 / positive_patches as f64;
    let class_counts = summary.labels.iter().filter(|&&l| l == 1).count();
    println!(
        "bags          {} ({} per class)",
        summary.labels.len(),
        class_counts
    );
    println!(
        "splits        train={} val={} test={} (per class)",
        n - n_val - n_test,
        n_val,
        n_test
    );
    println!(
        "bag sizes     min={} mean={:.1} max={}",
        sizes.iter().min().unwrap(),
        total_patches as f64 / sizes.len() as f64,
        sizes.iter().max().unwrap()
    );
    println!(
        "witness rate  target={:.4} measured={:.4}",
        spec.witness_rate, measured_rate
    );
    println!("manifest      {}", manifest.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train

pub struct TrainOptions {
    pub data: PathBuf,
    pub out: PathBuf,
    pub log: Option<PathBuf>,
    pub aggregator: Option<Aggregator>,
    pub ablate: Vec<String>,
    pub subsample: usize,
    pub seed: Option<u64>,
}

/// Resolve model/train configuration against the dataset: the aggregator
/// flag wins over the settings file, the seed flag wins over the settings
/// seed, and `d_in`/`n_classes` are adopted from the data unless the file
/// pinned them (in which case a mismatch is an error).
fn resolve_configs(
    settings: &Settings,
    entries: &[ManifestEntry],
    aggregator: Option<Aggregator>,
    seed: Option<u64>,
) -> Result<(CaprmilConfig, TrainConfig)> {
    let mut model = settings.model.clone();
    let mut train_cfg = settings.train.clone();
    if let Some(agg) = aggregator {
        model.aggregator = agg;
    }
    if let Some(s) = seed {
        train_cfg.seed = s;
    }
    let data_d_in = dataset_d_in(entries)?;
    if settings.explicit.contains("d_in") {
        if model.d_in != data_d_in {
            return Err(Error::config(format!(
                "settings pin d_in={} but the dataset provides d_in={data_d_in}",
                model.d_in
            )));
        }
    } else {
        model.d_in = data_d_in;
    }
    let max_label = entries.iter().map(|e| e.label).max().unwrap_or(0);
    let data_classes = (max_label + 1).max(2);
    if settings.explicit.contains("n_classes") {
        if model.n_classes <= max_label {
            return Err(Error::config(format!(
                "settings pin n_classes={} but the dataset contains label {max_label}",
                model.n_classes
            )));
        }
    } else {
        model.n_classes = data_classes;
    }
    Ok((model, train_cfg))
}

fn parse_axis_list(value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|tok| {
            tok.trim()
                .parse::<usize>()
                .map_err(|_| Error::config(format!("bad ablation value {tok:?}")))
        })
        .collect()
}

fn parse_ablate_flags(flags: &[String], base: &CaprmilConfig) -> Result<AblationAxes> {
    let mut axes = AblationAxes {
        clusters: vec![base.n_clusters],
        heads: vec![base.n_heads],
        ratios: vec![base.mlp_ratio],
    };
    for flag in flags {
        let Some((axis, values)) = flag.split_once('=') else {
            return Err(Error::config(format!(
                "expected axis=v1,v2,... in --ablate, got {flag:?}"
            )));
        };
        match axis.trim() {
            "clusters" => axes.clusters = parse_axis_list(values)?,
            "heads" => axes.heads = parse_axis_list(values)?,
            "ratios" => axes.ratios = parse_axis_list(values)?,
            other => {
                return Err(Error::config(format!(
                    "unknown ablation axis {other:?} (expected clusters, heads, or ratios)"
                )))
            }
        }
    }
    Ok(axes)
}

pub fn cmd_train(opts: &TrainOptions, settings: &Settings) -> Result<()> {
    let entries = load_manifest(&manifest_path(&opts.data))?;
    let (model_cfg, train_cfg) =
        resolve_configs(settings, &entries, opts.aggregator, opts.seed)?;
    let train_src = DiskBagSource::<f32>::from_manifest(&entries, Split::Train);
    let val_src = DiskBagSource::<f32>::from_manifest(&entries, Split::Val);

    if !opts.ablate.is_empty() {
        let axes = parse_ablate_flags(&opts.ablate, &model_cfg)?;
        let test_src = DiskBagSource::<f32>::from_manifest(&entries, Split::Test);
        let eval_src = if test_src.is_empty() { &val_src } else { &test_src };
        let cells = run_ablation(
            &model_cfg,
            &axes,
            &train_cfg,
            &train_src,
            &val_src,
            eval_src,
            opts.subsample,
        )?;
        for cell in &cells {
            println!("{}", cell.record());
        }
        return Ok(());
    }

    let log_path = opts
        .log
        .clone()
        .unwrap_or_else(|| opts.out.with_extension("tsv"));
    let mut log = File::create(&log_path).map_err(|e| io_err(&log_path, e))?;
    writeln!(log, "# epoch\tlr\ttrain_loss\tval_loss\tval_accuracy\tseconds")
        .map_err(|e| io_err(&log_path, e))?;

    let model = init_model::<f32>(&model_cfg, train_cfg.seed)?;
    let (trained, report) = train(model, &train_src, &val_src, &train_cfg, Some(&mut log))?;
    save_checkpoint(&opts.out, &trained)?;
    println!(
        "trained {} epochs (best val loss {:.6} at epoch {}{})",
        report.history.len(),
        report.best_val_loss,
        report.best_epoch,
        if report.stopped_early {
            ", stopped early"
        } else {
            ""
        }
    );
    println!("checkpoint    {}", opts.out.display());
    println!("epoch log     {}", log_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

pub struct EvalOptions {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub split: String,
}

pub fn cmd_eval(opts: &EvalOptions) -> Result<()> {
    let split: Split = opts.split.parse()?;
    let model = load_checkpoint(&opts.checkpoint)?;
    let entries = load_manifest(&manifest_path(&opts.data))?;
    let chosen = split_entries(&entries, split);
    if chosen.is_empty() {
        return Err(Error::data(format!("split {split} has no bags")));
    }
    let data_d_in = read_bag(&chosen[0].path)?.d_in();
    if data_d_in != model.config.d_in {
        return Err(Error::data(format!(
            "checkpoint expects d_in={} but dataset bags provide d_in={data_d_in}",
            model.config.d_in
        )));
    }
    let source = DiskBagSource::<f32>::from_manifest(&entries, split);
    let result = evaluate(&model, &source)?;
    println!("{}", result.table());
    println!("{}", result.machine_line());
    Ok(())
}

// ---------------------------------------------------------------------------
// cost

pub struct CostOptions {
    pub n: usize,
    pub sweep: Option<String>,
    pub repeats: usize,
    pub csv: Option<PathBuf>,
    pub aggregator: Option<Aggregator>,
    pub threads: usize,
}

/// `a..b` doubles from a up to b inclusive; otherwise a comma list.
fn parse_sweep(spec: &str) -> Result<Vec<usize>> {
    if let Some((lo, hi)) = spec.split_once("..") {
        let lo: usize = lo
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("bad sweep start {lo:?}")))?;
        let hi: usize = hi
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("bad sweep end {hi:?}")))?;
        if lo == 0 || hi < lo {
            return Err(Error::config(format!("bad sweep range {spec:?}")));
        }
        let mut out = Vec::new();
        let mut n = lo;
        while n <= hi {
            out.push(n);
            n *= 2;
        }
        Ok(out)
    } else {
        spec.split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::config(format!("bad sweep size {tok:?}")))
            })
            .collect()
    }
}

pub fn cmd_cost(opts: &CostOptions, settings: &Settings) -> Result<()> {
    let mut config = settings.model.clone();
    if let Some(agg) = opts.aggregator {
        config.aggregator = agg;
    }
    config.validate()?;
    if opts.threads != 1 {
        eprintln!(
            "note: kernels are single-threaded; --threads {} is recorded in the report only",
            opts.threads
        );
    }
    let mut report = match &opts.sweep {
        Some(spec) => bench_scaling(&config, &parse_sweep(spec)?, opts.repeats)?,
        None => CostReport::analytic(&config),
    };
    report.threads = opts.threads;
    print!("{}", report.table());
    if opts.n != 1000 {
        println!(
            "  at N={:<7} {}  ({:.3}G)",
            opts.n,
            report.flops.eval(opts.n),
            report.flops.eval(opts.n) as f64 / 1e9
        );
    }
    if !report.timings.is_empty() {
        print!("{}", report.csv());
    }
    if let Some(path) = &opts.csv {
        std::fs::write(path, report.csv()).map_err(|e| io_err(path, e))?;
        println!("csv dump      {}", path.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// heatmap

pub struct HeatmapOptions {
    pub checkpoint: PathBuf,
    pub bag: PathBuf,
    pub out: PathBuf,
    pub head: usize,
    pub block: usize,
    pub k: usize,
}

pub fn cmd_heatmap(opts: &HeatmapOptions) -> Result<()> {
    let model = load_checkpoint(&opts.checkpoint)?;
    let bag = read_bag(&opts.bag)?;
    let Some(coords) = bag.coords.clone() else {
        return Err(Error::data(format!(
            "bag {} carries no patch coordinates; bags written by the gen command include them by default",
            opts.bag.display()
        )));
    };
    if bag.d_in() != model.config.d_in {
        return Err(Error::data(format!(
            "checkpoint expects d_in={} but bag provides d_in={}",
            model.config.d_in,
            bag.d_in()
        )));
    }
    if opts.k == 0 {
        return Err(Error::config("top-k must be at least 1"));
    }

    let mut rng = Rng::stream(0, 0); // eval mode: unused
    let (_, maps) = caprmil::forward(&model, &bag.features, &mut rng, false, true)?;
    let Some(map) = maps.get(opts.block) else {
        return Err(Error::config(format!(
            "block {} out of range: model has {} attention block(s)",
            opts.block,
            maps.len()
        )));
    };
    if opts.head >= map.n_heads {
        return Err(Error::config(format!(
            "head {} out of range: model has {} heads",
            opts.head, map.n_heads
        )));
    }

    let n = map.n_patches;
    let k = opts.k.min(n);
    let width = coords.iter().map(|c| c[0]).max().unwrap_or(0) as usize + 1;
    let height = coords.iter().map(|c| c[1]).max().unwrap_or(0) as usize + 1;

    std::fs::create_dir_all(&opts.out).map_err(|e| io_err(&opts.out, e))?;
    let listing_path = opts.out.join("topk.csv");
    let mut listing = File::create(&listing_path).map_err(|e| io_err(&listing_path, e))?;
    writeln!(listing, "token,rank,patch,x,y,weight").map_err(|e| io_err(&listing_path, e))?;

    for token in 0..map.n_clusters {
        let mut pixels = vec![0u8; width * height];
        for (patch, coord) in coords.iter().enumerate() {
            let w = map.weight(opts.head, patch, token);
            let cell = coord[1] as usize * width + coord[0] as usize;
            pixels[cell] = (w * 255.0).round() as u8;
        }
        let image_path = opts.out.join(format!("token{token}.pgm"));
        write_pgm(&image_path, width, height, &pixels)?;

        let mut ranked: Vec<usize> = (0..n).collect();
        ranked.sort_by(|&a, &b| {
            let wa = map.weight(opts.head, a, token);
            let wb = map.weight(opts.head, b, token);
            wb.partial_cmp(&wa).expect("finite weights").then(a.cmp(&b))
        });
        for (rank, &patch) in ranked[..k].iter().enumerate() {
            writeln!(
                listing,
                "{token},{},{patch},{},{},{:.6}",
                rank + 1,
                coords[patch][0],
                coords[patch][1],
                map.weight(opts.head, patch, token)
            )
            .map_err(|e| io_err(&listing_path, e))?;
        }
    }
    println!(
        "wrote {} token images ({}x{}) and {}",
        map.n_clusters,
        width,
        height,
        listing_path.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_specs_parse_both_forms() {
        assert_eq!(parse_sweep("1000..16000").unwrap(), vec![1000, 2000, 4000, 8000, 16000]);
        assert_eq!(parse_sweep("5,10,20").unwrap(), vec![5, 10, 20]);
        assert!(parse_sweep("0..4").is_err());
        assert!(parse_sweep("8..4").is_err());
        assert!(parse_sweep("a,b").is_err());
    }

    #[test]
    fn ablate_flags_default_missing_axes_to_the_base_config() {
        let base = CaprmilConfig::default();
        let axes = parse_ablate_flags(&["clusters=2,4".to_string()], &base).unwrap();
        assert_eq!(axes.clusters, vec![2, 4]);
        assert_eq!(axes.heads, vec![base.n_heads]);
        assert_eq!(axes.ratios, vec![base.mlp_ratio]);
        assert!(parse_ablate_flags(&["widths=2".to_string()], &base).is_err());
        assert!(parse_ablate_flags(&["clusters=two".to_string()], &base).is_err());
    }
}
