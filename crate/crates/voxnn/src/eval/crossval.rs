use rayon::prelude::*;

use crate::cae::{build_stack, train_stack, CaeLayerSpec, CaeStack, PretrainConfig};
use crate::error::{Error, Result};
use crate::eval::kfold::{stratified_kfold, FoldPlan};
use crate::eval::metrics::{confusion, metrics, MetricsReport};
use crate::eval::roc::roc_auc;
use crate::network::{finetune, predict, transfer_weights, NetworkConfig};
use crate::optim::{mix_seed, OptimizerSpec};
use crate::volume::{Label, Shape4, Task, Volume};

/// Everything needed to train one fold's classifier from scratch.
#[derive(Clone, Debug)]
pub struct TrainingRecipe {
    pub stack_specs: Vec<CaeLayerSpec>,
    pub pretrain: PretrainConfig,
    /// Retrain the autoencoder stack inside every fold instead of once on
    /// the unlabeled data. Off by default: pretraining is unsupervised, so
    /// the shared-stack staging mirrors source-domain pretraining.
    pub pretrain_per_fold: bool,
    /// Explicit source-domain volumes for pretraining; when absent the
    /// stack pretrains on the (unlabeled) task volumes.
    pub source_volumes: Option<Vec<Volume<f32>>>,
    pub network: NetworkConfig,
    pub finetune_optimizer: OptimizerSpec,
    pub finetune_epochs: usize,
    pub freeze_conv: bool,
}

impl TrainingRecipe {
    /// Stock recipe for a given input shape: three (8, 16, 32)-map stages,
    /// Adadelta everywhere, frozen conv fine-tuning.
    pub fn default_for(input_shape: Shape4, classes: usize) -> Self {
        let mut network = NetworkConfig::default_for(classes);
        network.input_shape = input_shape;
        Self {
            stack_specs: vec![
                CaeLayerSpec { maps: 8, ..Default::default() },
                CaeLayerSpec { maps: 16, ..Default::default() },
                CaeLayerSpec { maps: 32, ..Default::default() },
            ],
            pretrain: PretrainConfig::default(),
            pretrain_per_fold: false,
            source_volumes: None,
            network,
            finetune_optimizer: OptimizerSpec::default(),
            finetune_epochs: 40,
            freeze_conv: true,
        }
    }
}

/// Per-sample test-time record: every sample appears exactly once, scored by
/// the fold that held it out.
#[derive(Clone, Debug)]
pub struct ScoredSample {
    pub index: usize,
    pub truth: usize,
    pub predicted: usize,
    pub probs: Vec<f64>,
}

/// Cross-validation outcome: per-fold reports plus their mean and population
/// standard deviation, and the pooled per-sample scores.
#[derive(Clone, Debug)]
pub struct CrossvalOutcome {
    pub folds: Vec<MetricsReport>,
    pub mean: MetricsReport,
    pub std: MetricsReport,
    pub samples: Vec<ScoredSample>,
    pub class_count: usize,
}

/// Anything that can train on one fold's training split and score its test
/// split. The pipeline implements this; tests inject stubs.
pub trait FoldClassifier: Sync {
    fn classify_fold(
        &self,
        fold: usize,
        train: &[usize],
        test: &[usize],
        volumes: &[Volume<f32>],
        classes: &[usize],
        class_count: usize,
        seed: u64,
    ) -> Result<Vec<(usize, Vec<f64>)>>;
}

/// The pretrain → transfer → finetune pipeline behind [`run_crossval`].
pub struct PipelineClassifier<'a> {
    pub recipe: &'a TrainingRecipe,
    pub shared_stack: Option<CaeStack<f32>>,
    pub input_shape: Shape4,
}

impl PipelineClassifier<'_> {
    fn pretrain_on(&self, volumes: &[Volume<f32>], seed: u64) -> Result<CaeStack<f32>> {
        let recipe = self.recipe;
        let mut stack = build_stack(
            self.input_shape.channels,
            &recipe.stack_specs,
            mix_seed(seed, 0xCAE5),
        )?;
        let per_layer = vec![recipe.pretrain; recipe.stack_specs.len()];
        train_stack(&mut stack, volumes, &per_layer, mix_seed(seed, 0x7EA1))?;
        Ok(stack)
    }
}

impl FoldClassifier for PipelineClassifier<'_> {
    fn classify_fold(
        &self,
        fold: usize,
        train: &[usize],
        test: &[usize],
        volumes: &[Volume<f32>],
        classes: &[usize],
        class_count: usize,
        seed: u64,
    ) -> Result<Vec<(usize, Vec<f64>)>> {
        let recipe = self.recipe;
        let fold_seed = mix_seed(seed, 0xF01D + fold as u64);

        let stack = match &self.shared_stack {
            Some(stack) => stack.clone(),
            None => {
                let train_volumes: Vec<Volume<f32>> =
                    train.iter().map(|&i| volumes[i].clone()).collect();
                self.pretrain_on(&train_volumes, fold_seed)?
            }
        };

        let mut cfg = recipe.network.clone();
        cfg.classes = class_count;
        cfg.input_shape = self.input_shape;
        let mut net = transfer_weights(&stack, &cfg, mix_seed(fold_seed, 0x11E7))?;

        let train_volumes: Vec<Volume<f32>> =
            train.iter().map(|&i| volumes[i].clone()).collect();
        let train_classes: Vec<usize> = train.iter().map(|&i| classes[i]).collect();
        finetune(
            &mut net,
            &train_volumes,
            &train_classes,
            &cfg,
            recipe.finetune_optimizer,
            recipe.finetune_epochs,
            mix_seed(fold_seed, 0xF17E),
            recipe.freeze_conv,
        )?;

        test.iter()
            .map(|&i| predict(&net, &volumes[i]))
            .collect()
    }
}

/// Scores one fold's predictions. Binary tasks score one-vs-rest with class
/// 0 (the first-named group) positive; multiclass reports are unweighted
/// macro averages of the per-class one-vs-rest scores, each metric averaged
/// over the classes where it is defined.
pub fn score_fold(
    predictions: &[usize],
    truths: &[usize],
    probs: &[Vec<f64>],
    class_count: usize,
) -> Result<MetricsReport> {
    if class_count == 2 {
        let mut report = metrics(&confusion(predictions, truths, 0)?);
        let scores: Vec<f64> = probs.iter().map(|p| p[0]).collect();
        let pos: Vec<bool> = truths.iter().map(|&t| t == 0).collect();
        report.auc = roc_auc(&scores, &pos).map(|(_, auc)| auc).ok();
        Ok(report)
    } else {
        let mut reports = Vec::with_capacity(class_count);
        for class in 0..class_count {
            let mut report = metrics(&confusion(predictions, truths, class)?);
            let scores: Vec<f64> = probs.iter().map(|p| p[class]).collect();
            let pos: Vec<bool> = truths.iter().map(|&t| t == class).collect();
            report.auc = roc_auc(&scores, &pos).map(|(_, auc)| auc).ok();
            reports.push(report);
        }
        Ok(macro_average(&reports))
    }
}

fn macro_average(reports: &[MetricsReport]) -> MetricsReport {
    let mut averaged = [None; 8];
    for (slot, value) in averaged.iter_mut().enumerate() {
        let defined: Vec<f64> = reports
            .iter()
            .filter_map(|r| r.values()[slot])
            .collect();
        if !defined.is_empty() {
            *value = Some(defined.iter().sum::<f64>() / defined.len() as f64);
        }
    }
    MetricsReport::from_values(averaged)
}

/// Mean and population standard deviation per metric, over the folds where
/// the metric is defined.
pub fn aggregate(folds: &[MetricsReport]) -> (MetricsReport, MetricsReport) {
    let mut mean = [None; 8];
    let mut std = [None; 8];
    for slot in 0..8 {
        let defined: Vec<f64> = folds.iter().filter_map(|r| r.values()[slot]).collect();
        if defined.is_empty() {
            continue;
        }
        let m = defined.iter().sum::<f64>() / defined.len() as f64;
        let var = defined.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / defined.len() as f64;
        mean[slot] = Some(m);
        std[slot] = Some(var.sqrt());
    }
    (
        MetricsReport::from_values(mean),
        MetricsReport::from_values(std),
    )
}

/// Cross-validation loop over an arbitrary classifier. Folds run in
/// parallel; per-fold seeds depend only on `(seed, fold)` and results join
/// in fold order, so the outcome does not depend on thread count.
pub fn run_crossval_with<C: FoldClassifier>(
    classifier: &C,
    volumes: &[Volume<f32>],
    classes: &[usize],
    class_count: usize,
    k: usize,
    seed: u64,
) -> Result<CrossvalOutcome> {
    if volumes.len() != classes.len() {
        return Err(Error::LengthMismatch {
            left: volumes.len(),
            right: classes.len(),
        });
    }
    let plan: FoldPlan = stratified_kfold(classes, k, mix_seed(seed, 0x5701))?;

    let fold_results: Vec<(usize, Vec<(usize, Vec<f64>)>)> = (0..plan.k)
        .into_par_iter()
        .map(|fold| -> Result<(usize, Vec<(usize, Vec<f64>)>)> {
            let train = plan.train_indices(fold);
            let test = plan.test_indices(fold);
            let scored = classifier.classify_fold(
                fold,
                &train,
                test,
                volumes,
                classes,
                class_count,
                seed,
            )?;
            if scored.len() != test.len() {
                return Err(Error::LengthMismatch {
                    left: test.len(),
                    right: scored.len(),
                });
            }
            Ok((fold, scored))
        })
        .collect::<Result<_>>()?;

    let mut folds = Vec::with_capacity(plan.k);
    let mut samples = Vec::with_capacity(volumes.len());
    for (fold, scored) in fold_results {
        let test = plan.test_indices(fold);
        let predictions: Vec<usize> = scored.iter().map(|(p, _)| *p).collect();
        let truths: Vec<usize> = test.iter().map(|&i| classes[i]).collect();
        let probs: Vec<Vec<f64>> = scored.iter().map(|(_, p)| p.clone()).collect();
        folds.push(score_fold(&predictions, &truths, &probs, class_count)?);
        for (slot, &index) in test.iter().enumerate() {
            samples.push(ScoredSample {
                index,
                truth: classes[index],
                predicted: predictions[slot],
                probs: probs[slot].clone(),
            });
        }
    }
    samples.sort_by_key(|s| s.index);

    let (mean, std) = aggregate(&folds);
    Ok(CrossvalOutcome {
        folds,
        mean,
        std,
        samples,
        class_count,
    })
}

/// Full protocol for one task: map labels through the task, pretrain the
/// stack (once, unless the recipe says per fold), then transfer and
/// fine-tune per fold and score the held-out folds.
pub fn run_crossval(
    volumes: &[Volume<f32>],
    labels: &[Label],
    task: Task,
    recipe: &TrainingRecipe,
    k: usize,
    seed: u64,
) -> Result<CrossvalOutcome> {
    if volumes.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: volumes.len(),
            right: labels.len(),
        });
    }
    if volumes.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let mut kept_volumes = Vec::new();
    let mut kept_classes = Vec::new();
    for (volume, &label) in volumes.iter().zip(labels) {
        if let Some(class) = task.class_of(label) {
            kept_volumes.push(volume.clone());
            kept_classes.push(class);
        }
    }
    if kept_volumes.is_empty() {
        return Err(Error::EmptyTask {
            task: task.name().to_string(),
        });
    }

    let input_shape = kept_volumes[0].shape();
    let mut pipeline = PipelineClassifier {
        recipe,
        shared_stack: None,
        input_shape,
    };
    if !recipe.pretrain_per_fold {
        let source = recipe
            .source_volumes
            .as_deref()
            .unwrap_or(&kept_volumes);
        pipeline.shared_stack = Some(pipeline.pretrain_on(source, seed)?);
    }

    run_crossval_with(
        &pipeline,
        &kept_volumes,
        &kept_classes,
        task.class_count(),
        k,
        seed,
    )
}

/// CSV with one row per fold plus mean and standard-deviation rows.
/// Undefined values print as `NA`.
pub fn metrics_csv(outcome: &CrossvalOutcome) -> String {
    fn cell(v: Option<f64>) -> String {
        v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
    }
    let mut out = String::from("fold,acc,sen,spe,bac,ppv,npv,f1,auc\n");
    for (i, fold) in outcome.folds.iter().enumerate() {
        let cells: Vec<String> = fold.values().into_iter().map(cell).collect();
        out.push_str(&format!("{i},{}\n", cells.join(",")));
    }
    for (name, report) in [("mean", &outcome.mean), ("std", &outcome.std)] {
        let cells: Vec<String> = report.values().into_iter().map(cell).collect();
        out.push_str(&format!("{name},{}\n", cells.join(",")));
    }
    out
}

/// CSV of ROC points: `fpr,tpr,threshold`.
pub fn roc_csv(points: &[crate::eval::roc::RocPoint]) -> String {
    let mut out = String::from("fpr,tpr,threshold\n");
    for p in points {
        out.push_str(&format!("{:.6},{:.6},{:.6}\n", p.fpr, p.tpr, p.threshold));
    }
    out
}

/// CSV of a 2D embedding: `x,y,label`.
pub fn embedding_csv(points: &[[f64; 2]], labels: &[&str]) -> String {
    let mut out = String::from("x,y,label\n");
    for (p, label) in points.iter().zip(labels) {
        out.push_str(&format!("{:.6},{:.6},{label}\n", p[0], p[1]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    struct ConstantClassifier;

    impl FoldClassifier for ConstantClassifier {
        fn classify_fold(
            &self,
            _fold: usize,
            _train: &[usize],
            test: &[usize],
            _volumes: &[Volume<f32>],
            _classes: &[usize],
            class_count: usize,
            _seed: u64,
        ) -> Result<Vec<(usize, Vec<f64>)>> {
            let mut probs = vec![0.0; class_count];
            probs[0] = 1.0;
            Ok(test.iter().map(|_| (0usize, probs.clone())).collect())
        }
    }

    fn dummy_volumes(n: usize) -> Vec<Volume<f32>> {
        let shape = Shape4::new(1, 2, 2, 2).unwrap();
        (0..n)
            .map(|i| Volume::from_vec(shape, vec![i as f32; 8]).unwrap())
            .collect()
    }

    #[test]
    fn constant_classifier_on_balanced_binary_task_scores_half() {
        let volumes = dummy_volumes(40);
        let classes: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let outcome =
            run_crossval_with(&ConstantClassifier, &volumes, &classes, 2, 5, 7).unwrap();
        assert!((outcome.mean.acc.unwrap() - 0.5).abs() < 1e-12);
        // Always predicting the positive class: SEN 1, SPE 0, PPV 0.5,
        // NPV undefined.
        assert_eq!(outcome.mean.sen, Some(1.0));
        assert_eq!(outcome.mean.spe, Some(0.0));
        assert!(outcome.mean.npv.is_none());
        assert_eq!(outcome.samples.len(), 40);
    }

    #[test]
    fn aggregation_matches_spreadsheet_recomputation() {
        let folds: Vec<MetricsReport> = (0..6)
            .map(|i| {
                let x = 0.5 + 0.05 * i as f64;
                MetricsReport {
                    acc: Some(x),
                    sen: Some(1.0 - x),
                    spe: if i % 2 == 0 { Some(x / 2.0) } else { None },
                    ..Default::default()
                }
            })
            .collect();
        let (mean, std) = aggregate(&folds);

        let accs: Vec<f64> = folds.iter().map(|f| f.acc.unwrap()).collect();
        let m = accs.iter().sum::<f64>() / accs.len() as f64;
        let var = accs.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / accs.len() as f64;
        assert!((mean.acc.unwrap() - m).abs() <= 1e-12);
        assert!((std.acc.unwrap() - var.sqrt()).abs() <= 1e-12);

        // spe defined on folds 0, 2, 4 only.
        let spes = [0.25, 0.3, 0.35];
        let ms = spes.iter().sum::<f64>() / 3.0;
        assert!((mean.spe.unwrap() - ms).abs() <= 1e-12);
        assert_eq!(mean.bac, None);
    }

    #[test]
    fn score_fold_macro_averages_the_ternary_case() {
        // 6 samples, 2 per class, one mistake per class pair.
        let truths = vec![0, 0, 1, 1, 2, 2];
        let preds = vec![0, 1, 1, 2, 2, 0];
        let probs: Vec<Vec<f64>> = preds
            .iter()
            .map(|&p| {
                let mut v = vec![0.1; 3];
                v[p] = 0.8;
                v
            })
            .collect();
        let report = score_fold(&preds, &truths, &probs, 3).unwrap();
        // Per class OVR: TP=1, FN=1, FP=1, TN=3 -> SEN=0.5, SPE=0.75,
        // ACC=4/6; macro averages keep these values.
        assert!((report.sen.unwrap() - 0.5).abs() < 1e-12);
        assert!((report.spe.unwrap() - 0.75).abs() < 1e-12);
        assert!((report.acc.unwrap() - 4.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn csv_serialization_marks_undefined_as_na() {
        let outcome = CrossvalOutcome {
            folds: vec![MetricsReport {
                acc: Some(0.75),
                ..Default::default()
            }],
            mean: MetricsReport {
                acc: Some(0.75),
                ..Default::default()
            },
            std: MetricsReport {
                acc: Some(0.0),
                ..Default::default()
            },
            samples: Vec::new(),
            class_count: 2,
        };
        let csv = metrics_csv(&outcome);
        assert!(csv.starts_with("fold,acc,sen,spe,bac,ppv,npv,f1,auc\n"));
        assert!(csv.contains("0,0.750000,NA,"));
        assert!(csv.contains("mean,0.750000,"));
        assert!(csv.contains("std,0.000000,"));
    }

    #[test]
    fn crossval_is_deterministic_for_a_fixed_seed() {
        let volumes = dummy_volumes(24);
        let classes: Vec<usize> = (0..24).map(|i| i % 3).collect();
        let a = run_crossval_with(&ConstantClassifier, &volumes, &classes, 3, 4, 11).unwrap();
        let b = run_crossval_with(&ConstantClassifier, &volumes, &classes, 3, 4, 11).unwrap();
        assert_eq!(metrics_csv(&a), metrics_csv(&b));
    }
}
