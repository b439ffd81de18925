//! Architecture ablation harness: sweep token count × head count × MLP
//! expansion over a fixed dataset and emit one self-describing record per
//! grid cell.

use crate::cost::count_params;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalResult};
use crate::model::{init_model, CaprmilConfig};
use crate::scalar::Scalar;
use crate::train::{train, BagSource, TrainConfig};

/// The three swept axes. `Default` is the published grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AblationAxes {
    pub clusters: Vec<usize>,
    pub heads: Vec<usize>,
    pub ratios: Vec<usize>,
}

impl Default for AblationAxes {
    fn default() -> Self {
        AblationAxes {
            clusters: vec![2, 4, 8, 16],
            heads: vec![2, 4, 8, 12],
            ratios: vec![1, 2, 4],
        }
    }
}

impl AblationAxes {
    pub fn validate(&self) -> Result<()> {
        for (axis, values) in [
            ("clusters", &self.clusters),
            ("heads", &self.heads),
            ("ratios", &self.ratios),
        ] {
            if values.is_empty() {
                return Err(Error::config(format!("ablation axis {axis} is empty")));
            }
            if values.contains(&0) {
                return Err(Error::config(format!(
                    "ablation axis {axis} contains 0"
                )));
            }
        }
        Ok(())
    }

    /// Cartesian product in a fixed order: clusters outermost, ratios
    /// innermost.
    pub fn cells(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::with_capacity(self.clusters.len() * self.heads.len() * self.ratios.len());
        for &m in &self.clusters {
            for &h in &self.heads {
                for &r in &self.ratios {
                    out.push((m, h, r));
                }
            }
        }
        out
    }
}

/// Result record for one grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub n_clusters: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    /// Walked from the trained model's tensors (tests cross-check it against
    /// the analytic counter).
    pub params: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    pub eval: EvalResult,
}

impl AblationCell {
    /// One machine-parseable line per cell.
    pub fn record(&self) -> String {
        format!(
            "m={} h={} ratio={} params={} best_epoch={} best_val_loss={:.6} epochs={} {}",
            self.n_clusters,
            self.n_heads,
            self.mlp_ratio,
            self.params,
            self.best_epoch,
            self.best_val_loss,
            self.epochs_run,
            self.eval.machine_line()
        )
    }
}

/// Train + evaluate one model per grid cell. `stride` subsamples the cell
/// list deterministically (1 keeps the full grid, k keeps every k-th cell in
/// the fixed cartesian order).
pub fn run_ablation<T, Str, Sv, Ste>(
    base: &CaprmilConfig,
    axes: &AblationAxes,
    train_cfg: &TrainConfig,
    train_split: &Str,
    val_split: &Sv,
    test_split: &Ste,
    stride: usize,
) -> Result<Vec<AblationCell>>
where
    T: Scalar,
    Str: BagSource<T> + ?Sized,
    Sv: BagSource<T> + ?Sized,
    Ste: BagSource<T> + ?Sized,
{
    axes.validate()?;
    if stride == 0 {
        return Err(Error::config("subsample stride must be at least 1"));
    }
    let mut out = Vec::new();
    for (m, h, r) in axes.cells().into_iter().step_by(stride) {
        let config = CaprmilConfig {
            n_clusters: m,
            n_heads: h,
            mlp_ratio: r,
            ..base.clone()
        };
        config.validate()?;
        let model = init_model::<T>(&config, train_cfg.seed)?;
        let (trained, report) = train(model, train_split, val_split, train_cfg, None)?;
        let eval = evaluate(&trained, test_split)?;
        debug_assert_eq!(trained.n_params(), count_params(&config).total);
        out.push(AblationCell {
            n_clusters: m,
            n_heads: h,
            mlp_ratio: r,
            params: trained.n_params(),
            best_epoch: report.best_epoch,
            best_val_loss: report.best_val_loss,
            epochs_run: report.history.len(),
            eval,
        });
    }
    Ok(out)
}
