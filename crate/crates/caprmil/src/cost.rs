//! Analytic parameter and FLOP accounting plus an empirical scaling
//! benchmark.
//!
//! FLOP convention, stated once and used everywhere: one multiply-accumulate
//! is 2 FLOPs; linear-layer bias adds, reduction adds (assignment column
//! sums, mean pooling), attention score scaling, and aggregation divides are
//! counted; layer-norm, GELU/tanh, softmax internals, residual adds, and the
//! inference-foldable cluster temperature are excluded (each is far below 1%
//! of the total). The counts are functions of the config alone — parameter
//! *values* can never influence them.

use std::fmt::Write as _;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::model::{forward, init_model, param_shapes, Aggregator, CaprmilConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Parameter totals, itemized by submodule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCounts {
    /// `(submodule, count)` in a fixed order; zero entries are kept so the
    /// table shape is config-independent.
    pub by_submodule: Vec<(String, usize)>,
    pub total: usize,
}

/// Forward cost as an affine law `flops(N) = slope·N + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopsLaw {
    pub slope: u64,
    pub intercept: u64,
}

impl FlopsLaw {
    pub fn eval(&self, n: usize) -> u64 {
        self.slope * n as u64 + self.intercept
    }
}

/// One measured point of the timing sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingPoint {
    pub n: usize,
    pub median_seconds: f64,
    pub analytic_flops: u64,
}

/// Least-squares line through the timing sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingFit {
    pub seconds_per_patch: f64,
    pub seconds_intercept: f64,
    pub r_squared: f64,
}

/// Everything the efficiency surface reports: parameters, the analytic FLOP
/// law, and (when a sweep ran) measured wall-clock scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub params: ParamCounts,
    pub flops: FlopsLaw,
    pub timings: Vec<ScalingPoint>,
    pub fit: Option<ScalingFit>,
    /// Recorded so printed numbers are self-describing; every kernel in this
    /// crate is single-threaded, so this is 1 unless an operator overrides
    /// the flag purely for bookkeeping.
    pub threads: usize,
}

impl CostReport {
    /// Analytic-only report (no timings).
    pub fn analytic(config: &CaprmilConfig) -> Self {
        CostReport {
            params: count_params(config),
            flops: flops_law(config),
            timings: Vec::new(),
            fit: None,
            threads: 1,
        }
    }

    /// Plain-text table for terminals.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "parameters");
        for (name, count) in &self.params.by_submodule {
            let _ = writeln!(out, "  {name:<12} {count:>12}");
        }
        let _ = writeln!(
            out,
            "  {:<12} {:>12}  ({:.3}M)",
            "total",
            self.params.total,
            self.params.total as f64 / 1e6
        );
        let _ = writeln!(
            out,
            "forward FLOPs   {}*N + {}",
            self.flops.slope, self.flops.intercept
        );
        let _ = writeln!(
            out,
            "  at N=1000     {}  ({:.3}G)",
            self.flops.eval(1000),
            self.flops.eval(1000) as f64 / 1e9
        );
        if !self.timings.is_empty() {
            let _ = writeln!(out, "timing sweep ({} thread)", self.threads);
            for p in &self.timings {
                let _ = writeln!(
                    out,
                    "  N={:<6} median {:.6}s  analytic {:.3}G",
                    p.n,
                    p.median_seconds,
                    p.analytic_flops as f64 / 1e9
                );
            }
        }
        if let Some(fit) = &self.fit {
            let _ = writeln!(
                out,
                "linear fit      {:.3e}s/patch + {:.3e}s, R^2 = {:.6}",
                fit.seconds_per_patch, fit.seconds_intercept, fit.r_squared
            );
        }
        out
    }

    /// Comma-separated dump of the sweep (`N,median_seconds,analytic_flops`)
    /// for plotting.
    pub fn csv(&self) -> String {
        let mut out = String::from("n,median_seconds,analytic_flops\n");
        for p in &self.timings {
            let _ = writeln!(out, "{},{:.9},{}", p.n, p.median_seconds, p.analytic_flops);
        }
        out
    }
}

fn submodule_of(name: &str) -> &'static str {
    if name.starts_with("proj.") {
        "projection"
    } else if name.starts_with("agg.") {
        "aggregator"
    } else if name.starts_with("classifier.") {
        "classifier"
    } else if name.contains(".attn.") {
        "attention"
    } else if name.contains(".mlp") {
        "mlp"
    } else {
        // blockN.ln1 / blockN.ln2
        "block norms"
    }
}

/// Exact parameter enumeration: walks the canonical parameter-name set (the
/// same one instantiated models iterate) and sums shape products per
/// submodule.
pub fn count_params(config: &CaprmilConfig) -> ParamCounts {
    const ORDER: [&str; 6] = [
        "projection",
        "attention",
        "block norms",
        "mlp",
        "aggregator",
        "classifier",
    ];
    let mut sums = [0usize; 6];
    for (name, shape) in param_shapes(config) {
        let count: usize = shape.iter().product();
        let slot = ORDER
            .iter()
            .position(|s| *s == submodule_of(&name))
            .expect("every parameter maps to a submodule");
        sums[slot] += count;
    }
    let by_submodule: Vec<(String, usize)> = ORDER
        .iter()
        .zip(sums)
        .map(|(name, count)| ((*name).to_string(), count))
        .collect();
    let total = sums.iter().sum();
    ParamCounts { by_submodule, total }
}

/// Closed-form affine FLOP law for one eval-mode forward pass over a bag of
/// `N` patches.
///
/// Slope (per patch): input projection `2·D_in·D + D`; per block the feature
/// and value maps `2·(2·D·inner + inner)`, cluster logits `2·H·M·Dh + H·M`,
/// aggregation numerator + column sums `2·H·M·Dh + H·M`, context broadcast
/// `2·H·M·Dh`, output projection `2·inner·D + D`, and the MLP
/// `2·D·rD + rD + 2·rD·D + D`; plus the aggregator's per-patch work.
/// Intercept: per block the token Q/K/V projections `3·H·M·(2·Dh² + Dh)`,
/// score matrix + value mix `2·(2·H·M²·Dh)`, score scaling `H·M²`, and
/// aggregation divides `H·M·Dh`; plus the aggregator's N-independent work
/// and the classifier `2·D·C + C`.
pub fn flops_law(config: &CaprmilConfig) -> FlopsLaw {
    let d_in = config.d_in as u64;
    let d = config.d_model as u64;
    let h = config.n_heads as u64;
    let m = config.n_clusters as u64;
    let dh = config.d_head() as u64;
    let inner = config.inner() as u64;
    let hidden = config.mlp_ratio as u64 * d;
    let c = config.n_classes as u64;
    let l = config.attn_hidden as u64;
    let t = config.n_blocks as u64;

    let mut slope = 2 * d_in * d + d;
    slope += t
        * (2 * (2 * d * inner + inner)      // W_x, W_f
            + 2 * h * m * dh + h * m        // cluster logits + bias
            + 2 * h * m * dh + h * m        // aggregation numerator + column sums
            + 2 * h * m * dh                // broadcast
            + 2 * inner * d + d             // W_out
            + 2 * d * hidden + hidden + 2 * hidden * d + d); // MLP
    let mut intercept = t
        * (3 * h * m * (2 * dh * dh + dh)   // Q/K/V on M tokens
            + 2 * (2 * h * m * m * dh)      // scores and value mix
            + h * m * m                     // score scaling
            + h * m * dh); // aggregation divides
    match config.aggregator {
        Aggregator::Mean => {
            slope += d; // running sum
            intercept += d; // final divide
        }
        Aggregator::Attn => {
            // V·x + bias, score w·h + bias, weighted feature sum
            slope += 2 * d * l + l + 2 * l + 1 + 2 * d;
        }
        Aggregator::GAttn => {
            // two gated projections, elementwise gate, score, weighted sum
            slope += 2 * (2 * d * l + l) + l + 2 * l + 1 + 2 * d;
        }
    }
    intercept += 2 * d * c + c; // classifier
    FlopsLaw { slope, intercept }
}

/// Total analytic FLOPs for a single forward over `n` patches (`n ≥ 1`).
pub fn count_flops(config: &CaprmilConfig, n: usize) -> u64 {
    flops_law(config).eval(n)
}

/// Median-of-repeats eval-mode forward timing per bag size, with a
/// least-squares linear fit. Runs on one thread; `repeats` must be at least
/// 3 and `n_list` strictly ascending.
pub fn bench_scaling(
    config: &CaprmilConfig,
    n_list: &[usize],
    repeats: usize,
) -> Result<CostReport> {
    config.validate()?;
    if repeats < 3 {
        return Err(Error::config(format!(
            "bench_scaling needs at least 3 repeats, got {repeats}"
        )));
    }
    if n_list.is_empty() {
        return Err(Error::config("bench_scaling needs at least one bag size"));
    }
    if n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config(format!(
            "bag sizes must be strictly ascending, got {n_list:?}"
        )));
    }

    let model = init_model::<f32>(config, 0)?;
    let law = flops_law(config);
    let mut rng = Rng::stream(0, 7);
    let mut timings = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let data: Vec<f32> = (0..n * config.d_in)
            .map(|_| rng.normal() as f32)
            .collect();
        let bag = Tensor::constant(data, &[n, config.d_in])?;
        // one untimed pass to warm caches and the allocator
        forward(&model, &bag, &mut rng, false, false)?;
        let mut samples = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let start = Instant::now();
            let (logits, _) = forward(&model, &bag, &mut rng, false, false)?;
            let elapsed = start.elapsed().as_secs_f64();
            // keep the result observable so the pass cannot be elided
            assert!(logits.data().iter().all(|v| v.is_finite()));
            samples.push(elapsed);
        }
        samples.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
        let median = samples[samples.len() / 2];
        timings.push(ScalingPoint {
            n,
            median_seconds: median,
            analytic_flops: law.eval(n),
        });
    }

    let fit = least_squares(&timings);
    Ok(CostReport {
        params: count_params(config),
        flops: law,
        timings,
        fit,
        threads: 1,
    })
}

fn least_squares(points: &[ScalingPoint]) -> Option<ScalingFit> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.n as f64).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.median_seconds).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for p in points {
        let dx = p.n as f64 - mean_x;
        sxx += dx * dx;
        sxy += dx * (p.median_seconds - mean_y);
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for p in points {
        let pred = slope * p.n as f64 + intercept;
        ss_res += (p.median_seconds - pred).powi(2);
        ss_tot += (p.median_seconds - mean_y).powi(2);
    }
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Some(ScalingFit {
        seconds_per_patch: slope,
        seconds_intercept: intercept,
        r_squared,
    })
}

/// One `(D, T)` candidate from the width-derivation scan, with the four
/// quantities the published cost table pins down.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WidthCandidate {
    pub d_model: usize,
    pub n_blocks: usize,
    pub params: usize,
    pub flops_1000: u64,
    pub baseline_params: usize,
    pub baseline_flops_1000: u64,
}

/// The anti-hallucination derivation script for the two hidden defaults: the
/// published table fixes total parameters (0.314M) and forward FLOPs at
/// N=1000 (0.628G) for the full model, plus the same pair for the
/// mean-pooling baseline (0.130M / 0.260G), but never prints the model width
/// `D` or block count `T`. This function recomputes all four quantities with
/// self-contained arithmetic (deliberately *not* the production counters)
/// over a `(D, T)` grid and returns the candidates matching the full-model
/// pair within the acceptance tolerances (±1% params, ±2% FLOPs).
///
/// The baseline quantities are reported for inspection rather than filtered
/// on: no integer width satisfies the 0.130M baseline cap (the floor, a bare
/// 1024→D linear plus D→2 classifier, is 1029·D + 2 = 131,330 − 1029·Δ,
/// already 131,330 > 131,300 at D=128's nearest feasible widths), so the
/// published .130 is a rounding anomaly the scan documents instead of
/// matching.
pub fn derive_width_candidates() -> Vec<WidthCandidate> {
    const D_IN: usize = 1024;
    const H: usize = 8;
    const M: usize = 4;
    const RATIO: usize = 4;
    const C: usize = 2;
    let mut out = Vec::new();
    for d in (8..=512).step_by(8) {
        let dh = d / H;
        let inner = H * dh;
        let hidden = RATIO * d;
        let proj_p = D_IN * d + d + 2 * d;
        let block_p = 2 * d                       // ln1
            + 2 * (d * inner + inner)             // W_x, W_f
            + dh * M + M + H                      // cluster + temperature
            + 3 * (dh * dh + dh)                  // Q/K/V
            + inner * d + d                       // W_out
            + 2 * d                               // ln2
            + d * hidden + hidden + hidden * d + d; // MLP
        let head_p = d * C + C;
        let base_p = proj_p + head_p;

        let proj_f = (2 * D_IN * d + d) as u64;
        let block_slope = (2 * (2 * d * inner + inner)
            + 2 * (2 * H * M * dh + H * M)
            + 2 * H * M * dh
            + 2 * inner * d
            + d
            + 2 * d * hidden
            + hidden
            + 2 * hidden * d
            + d) as u64;
        let block_intercept = (3 * H * M * (2 * dh * dh + dh)
            + 4 * H * M * M * dh
            + H * M * M
            + H * M * dh) as u64;
        let head_f = (2 * d * C + C) as u64;
        let mean_f = (d) as u64; // slope part; intercept adds d again
        for t in 1..=8usize {
            let params = proj_p + t * block_p + head_p;
            let flops_1000 =
                (proj_f + t as u64 * block_slope + mean_f) * 1000
                    + t as u64 * block_intercept
                    + d as u64
                    + head_f;
            let baseline_flops_1000 = (proj_f + mean_f) * 1000 + d as u64 + head_f;
            let params_ok = (params as f64 - 314_000.0).abs() <= 3_140.0;
            let flops_ok = (flops_1000 as f64 - 0.628e9).abs() <= 0.02 * 0.628e9;
            if params_ok && flops_ok {
                out.push(WidthCandidate {
                    d_model: d,
                    n_blocks: t,
                    params,
                    flops_1000,
                    baseline_params: base_p,
                    baseline_flops_1000,
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelState;

    fn default_config() -> CaprmilConfig {
        CaprmilConfig::default()
    }

    #[test]
    fn default_param_count_is_exact_and_within_published_tolerance() {
        let counts = count_params(&default_config());
        assert_eq!(counts.total, 314_366);
        assert!((counts.total as f64 - 314_000.0).abs() <= 3_140.0);
        let sum: usize = counts.by_submodule.iter().map(|(_, c)| c).sum();
        assert_eq!(sum, counts.total);
    }

    #[test]
    fn aggregator_variants_match_published_deltas() {
        let attn = CaprmilConfig {
            aggregator: Aggregator::Attn,
            ..default_config()
        };
        let gattn = CaprmilConfig {
            aggregator: Aggregator::GAttn,
            ..default_config()
        };
        assert_eq!(count_params(&attn).total, 331_007);
        assert_eq!(count_params(&gattn).total, 347_519);
        assert!((count_params(&attn).total as f64 - 331_000.0).abs() <= 3_310.0);
        assert!((count_params(&gattn).total as f64 - 347_000.0).abs() <= 3_470.0);
    }

    #[test]
    fn mean_baseline_count_is_exact_and_documents_published_gap() {
        let baseline = CaprmilConfig {
            n_blocks: 0,
            ..default_config()
        };
        let total = count_params(&baseline).total;
        assert_eq!(total, 131_714);
        // The published .130M with ±1% caps at 131,300; even a bare
        // projection + classifier (no norm, no biases) is 131,328. The gap
        // is structural, not an accounting choice.
        assert!(1024 * 128 + 128 * 2 > 131_300);
    }

    #[test]
    fn ablation_grid_counts_match_published_table_within_one_percent() {
        // (heads, exact, published millions)
        for (h, exact, published) in [
            (2usize, 326_216usize, 0.326f64),
            (4, 316_778, 0.316),
            (8, 314_366, 0.314),
            (12, 310_772, 0.310),
        ] {
            let cfg = CaprmilConfig {
                n_heads: h,
                ..default_config()
            };
            let total = count_params(&cfg).total;
            assert_eq!(total, exact, "H={h}");
            let rel = (total as f64 - published * 1e6).abs() / (published * 1e6);
            assert!(rel <= 0.01, "H={h}: {total} vs {published}M");
        }
        for (ratio, exact, published) in
            [(1usize, 215_678usize, 0.215f64), (2, 248_574, 0.248), (4, 314_366, 0.314)]
        {
            let cfg = CaprmilConfig {
                mlp_ratio: ratio,
                ..default_config()
            };
            let total = count_params(&cfg).total;
            assert_eq!(total, exact, "ratio={ratio}");
            let rel = (total as f64 - published * 1e6).abs() / (published * 1e6);
            assert!(rel <= 0.01, "ratio={ratio}: {total} vs {published}M");
        }
        // cluster sweep: published table prints 0.314 for every M
        for m in [2usize, 4, 8, 16] {
            let cfg = CaprmilConfig {
                n_clusters: m,
                ..default_config()
            };
            let total = count_params(&cfg).total;
            let rel = (total as f64 - 314_000.0).abs() / 314_000.0;
            assert!(rel <= 0.01, "M={m}: {total}");
        }
    }

    #[test]
    fn count_params_agrees_with_instantiated_models() {
        let mut rng = Rng::new(77);
        let aggs = [Aggregator::Mean, Aggregator::Attn, Aggregator::GAttn];
        for trial in 0..50 {
            let cfg = CaprmilConfig {
                d_in: 2 + (rng.next_u64() % 18) as usize,
                d_model: 4 + (rng.next_u64() % 28) as usize,
                n_blocks: (rng.next_u64() % 3) as usize,
                n_heads: 1 + (rng.next_u64() % 4) as usize,
                n_clusters: 1 + (rng.next_u64() % 5) as usize,
                mlp_ratio: 1 + (rng.next_u64() % 3) as usize,
                dropout_p: 0.0,
                aggregator: aggs[(rng.next_u64() % 3) as usize],
                n_classes: 2 + (rng.next_u64() % 3) as usize,
                attn_hidden: 2 + (rng.next_u64() % 14) as usize,
            };
            if cfg.d_head() == 0 {
                continue;
            }
            let model: ModelState<f32> = init_model(&cfg, trial).unwrap();
            assert_eq!(
                count_params(&cfg).total,
                model.n_params(),
                "trial {trial}: {cfg:?}"
            );
        }
    }

    #[test]
    fn default_flop_law_is_exact_and_within_published_tolerance() {
        let law = flops_law(&default_config());
        assert_eq!(law.slope, 627_008);
        assert_eq!(law.intercept, 60_162);
        assert_eq!(law.eval(1000), 627_068_162);
        let rel = (law.eval(1000) as f64 - 0.628e9).abs() / 0.628e9;
        assert!(rel <= 0.02, "{rel}");
    }

    #[test]
    fn baseline_flop_law_is_exact_and_within_published_tolerance() {
        let baseline = CaprmilConfig {
            n_blocks: 0,
            ..default_config()
        };
        let law = flops_law(&baseline);
        assert_eq!(law.slope, 262_400);
        assert_eq!(law.intercept, 642);
        assert_eq!(law.eval(1000), 262_400_642);
        let rel = (law.eval(1000) as f64 - 0.260e9).abs() / 0.260e9;
        assert!(rel <= 0.02, "{rel}");
    }

    #[test]
    fn flops_are_affine_in_bag_size() {
        for cfg in [
            default_config(),
            CaprmilConfig {
                n_blocks: 0,
                ..default_config()
            },
            CaprmilConfig {
                aggregator: Aggregator::GAttn,
                n_blocks: 2,
                ..default_config()
            },
        ] {
            let f = |n| count_flops(&cfg, n);
            assert_eq!(f(2000) - f(1000), f(3000) - f(2000));
            assert_eq!(f(2000) - f(1000), 1000 * flops_law(&cfg).slope);
        }
    }

    #[test]
    fn doubling_clusters_shifts_slope_by_the_m_linear_terms() {
        // slope terms linear in M per block: cluster logits + bias
        // (2·H·Dh + H), aggregation numerator + column sums (2·H·Dh + H),
        // broadcast (2·H·Dh)
        for (m, h, t) in [(2usize, 4usize, 1usize), (4, 8, 1), (3, 2, 2), (8, 8, 3)] {
            let cfg = CaprmilConfig {
                n_clusters: m,
                n_heads: h,
                n_blocks: t,
                ..default_config()
            };
            let doubled = CaprmilConfig {
                n_clusters: 2 * m,
                ..cfg
            };
            let dh = cfg.d_head() as u64;
            let expected = (t * m) as u64 * (6 * h as u64 * dh + 2 * h as u64);
            assert_eq!(
                flops_law(&doubled).slope - flops_law(&cfg).slope,
                expected
            );
        }
    }

    #[test]
    fn width_scan_pins_hidden_defaults_uniquely() {
        let candidates = derive_width_candidates();
        assert_eq!(candidates.len(), 1, "{candidates:?}");
        let c = candidates[0];
        assert_eq!((c.d_model, c.n_blocks), (128, 1));
        // the scan's self-contained arithmetic agrees with the production
        // counters on the surviving candidate
        assert_eq!(c.params, count_params(&default_config()).total);
        assert_eq!(c.flops_1000, count_flops(&default_config(), 1000));
        let baseline = CaprmilConfig {
            n_blocks: 0,
            ..default_config()
        };
        assert_eq!(c.baseline_params, count_params(&baseline).total);
        assert_eq!(c.baseline_flops_1000, count_flops(&baseline, 1000));
        // baseline FLOPs match the published 0.260G; baseline params document
        // the 0.130M gap
        let rel = (c.baseline_flops_1000 as f64 - 0.260e9).abs() / 0.260e9;
        assert!(rel <= 0.02);
        assert!(c.baseline_params > 131_300);
    }

    #[test]
    fn bench_rejects_bad_arguments() {
        let cfg = tiny_config();
        assert!(matches!(
            bench_scaling(&cfg, &[8, 16], 2),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            bench_scaling(&cfg, &[16, 8], 3),
            Err(Error::Config(_))
        ));
        assert!(matches!(bench_scaling(&cfg, &[], 3), Err(Error::Config(_))));
    }

    fn tiny_config() -> CaprmilConfig {
        CaprmilConfig {
            d_in: 6,
            d_model: 8,
            n_blocks: 1,
            n_heads: 2,
            n_clusters: 2,
            mlp_ratio: 1,
            dropout_p: 0.0,
            aggregator: Aggregator::Mean,
            n_classes: 2,
            attn_hidden: 4,
        }
    }

    #[test]
    fn bench_smoke_produces_points_fit_and_csv() {
        let cfg = tiny_config();
        let report = bench_scaling(&cfg, &[16, 32, 64], 3).unwrap();
        assert_eq!(report.timings.len(), 3);
        assert!(report.timings.iter().all(|p| p.median_seconds > 0.0));
        let fit = report.fit.expect("three points fit a line");
        assert!(fit.r_squared <= 1.0);
        assert_eq!(report.threads, 1);
        let csv = report.csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("n,median_seconds,analytic_flops\n"));
        let table = report.table();
        assert!(table.contains("parameters"));
        assert!(table.contains("linear fit"));
    }
}
