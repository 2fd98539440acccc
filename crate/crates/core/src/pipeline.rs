//! Test-time defense: score each input with the detector, purify the flagged
//! ones at a depth chosen from their score, then classify. Every sample gets
//! a trace recording what happened to it.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::classifier::argmax_rows;
use crate::config::DetectorConfig;
use crate::data::{batch_images, unbatch_images, Image, Sample};
use crate::diffusion::{adaptive_depth, purify, NoisePredictor, NoiseSchedule, PurifyConfig};
use crate::error::{Error, Result};
use crate::mae::{detection_scores, Calibration, MaeModel};
use crate::moe::{ClientModel, DefenseHook};
use crate::seed::{mix, rng_from};

const DETECT_STREAM: u64 = 0x6465_7465_6374;
const PURIFY_STREAM: u64 = 0x7075_7269_6679;

/// Seed of the detector's mask draws for a defense seeded with `seed`.
pub fn detector_seed(seed: u64) -> u64 {
    mix(seed, DETECT_STREAM)
}

/// Detector, threshold and purifier, frozen.
pub struct Defense {
    pub detector: MaeModel,
    pub calibration: Calibration,
    pub purifier: Box<dyn NoisePredictor>,
    pub schedule: NoiseSchedule,
    pub policy: PurifyConfig,
    pub scoring: DetectorConfig,
    pub mask_ratio: f64,
    pub seed: u64,
}

impl std::fmt::Debug for Defense {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Defense")
            .field("tau", &self.calibration.tau)
            .field("policy", &self.policy)
            .field("scoring", &self.scoring)
            .finish_non_exhaustive()
    }
}

/// What the defense did to one input, before classification.
#[derive(Debug, Clone, PartialEq)]
pub struct Sanitized {
    pub score: f64,
    pub flagged: bool,
    pub t_star: usize,
    /// Seed of the sample's purification noise.
    pub noise_seed: u64,
    pub post_score: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLatency {
    pub detect_ms: f64,
    pub purify_ms: f64,
    pub classify_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseTrace {
    pub sample_id: u64,
    pub label: usize,
    pub score: f64,
    pub flagged: bool,
    /// 0 when the input was not purified.
    pub t_star: usize,
    pub noise_seed: u64,
    pub post_score: Option<f64>,
    pub predicted: usize,
    pub alpha: Vec<f64>,
    /// Batch stage time divided evenly over the batch.
    pub latency: StageLatency,
}

impl DefenseTrace {
    pub fn correct(&self) -> bool {
        self.predicted == self.label
    }
}

impl Defense {
    pub fn tau(&self) -> f64 {
        self.calibration.tau
    }

    pub fn scores(&self, images: &[&Image], ids: &[u64]) -> Result<Vec<f64>> {
        detection_scores(
            &self.detector,
            images,
            ids,
            self.mask_ratio,
            self.scoring.score_draws,
            self.scoring.score_mode,
            detector_seed(self.seed),
        )
    }

    /// Detects and conditionally purifies a batch. Flagged samples are
    /// grouped by depth and purified together; each uses its own noise stream
    /// seeded from its id, so results do not depend on batch composition.
    pub fn sanitize(&self, images: Vec<Image>, ids: &[u64]) -> Result<(Vec<Image>, Vec<Sanitized>, StageLatency)> {
        let mut latency = StageLatency::default();
        let t0 = Instant::now();
        let refs: Vec<&Image> = images.iter().collect();
        let scores = self.scores(&refs, ids).map_err(|e| e.in_stage("detect"))?;
        latency.detect_ms = t0.elapsed().as_secs_f64() * 1e3;

        let t1 = Instant::now();
        let purify_seed = mix(self.seed, PURIFY_STREAM);
        let mut info = Vec::with_capacity(images.len());
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, (&score, &id)) in scores.iter().zip(ids).enumerate() {
            let flagged = self.calibration.is_flagged(score);
            let t_star = if flagged {
                adaptive_depth(score, &self.calibration, &self.policy)
                    .map_err(|e| e.in_stage("purify"))?
                    .max(1)
            } else {
                0
            };
            if flagged {
                groups.entry(t_star).or_default().push(i);
            }
            info.push(Sanitized {
                score,
                flagged,
                t_star,
                noise_seed: mix(purify_seed, id),
                post_score: None,
            });
        }
        let mut images = images;
        for (&t_star, members) in &groups {
            let run = || -> Result<Vec<Image>> {
                let x = batch_images(members.iter().map(|&i| &images[i]), self.detector.dtype(), self.detector.device())?;
                let mut rngs: Vec<_> = members.iter().map(|&i| rng_from(info[i].noise_seed)).collect();
                let out = purify(&*self.purifier, &x, t_star, &self.schedule, self.policy.sigma_mode, &mut rngs)?;
                unbatch_images(&out)
            };
            let purified = run().map_err(|e| e.in_stage("purify"))?;
            for (&i, img) in members.iter().zip(purified) {
                images[i] = img;
            }
        }
        if self.scoring.recheck && !groups.is_empty() {
            let flagged: Vec<usize> = groups.values().flatten().copied().collect();
            let refs: Vec<&Image> = flagged.iter().map(|&i| &images[i]).collect();
            let fids: Vec<u64> = flagged.iter().map(|&i| ids[i]).collect();
            let post = self.scores(&refs, &fids).map_err(|e| e.in_stage("recheck"))?;
            for (&i, s) in flagged.iter().zip(post) {
                info[i].post_score = Some(s);
            }
        }
        latency.purify_ms = t1.elapsed().as_secs_f64() * 1e3;
        Ok((images, info, latency))
    }
}

impl DefenseHook for Defense {
    fn apply(&self, images: Vec<Image>, sample_ids: &[u64]) -> Result<Vec<Image>> {
        Ok(self.sanitize(images, sample_ids)?.0)
    }
}

/// Predictions and attention weights for a batch.
fn classify(model: &ClientModel, images: &[Image]) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let x = batch_images(images.iter(), model.dtype(), model.device())?;
    let out = model.forward(&x)?;
    let pred = argmax_rows(&out.probs)?;
    let alpha = out.alpha.to_dtype(candle_core::DType::F64)?.to_vec2::<f64>()?;
    Ok((pred, alpha))
}

fn defend_batch(samples: &[Sample], defense: Option<&Defense>, model: &ClientModel) -> Result<Vec<DefenseTrace>> {
    let ids: Vec<u64> = samples.iter().map(|s| s.id).collect();
    let images: Vec<Image> = samples.iter().map(|s| s.image.clone()).collect();
    let (images, info, mut latency) = match defense {
        Some(d) => d.sanitize(images, &ids)?,
        None => {
            let info = vec![
                Sanitized {
                    score: f64::NAN,
                    flagged: false,
                    t_star: 0,
                    noise_seed: 0,
                    post_score: None,
                };
                samples.len()
            ];
            (images, info, StageLatency::default())
        }
    };
    let t = Instant::now();
    let (pred, alpha) = classify(model, &images).map_err(|e| e.in_stage("classify"))?;
    latency.classify_ms = t.elapsed().as_secs_f64() * 1e3;
    let n = samples.len() as f64;
    let per = StageLatency {
        detect_ms: latency.detect_ms / n,
        purify_ms: latency.purify_ms / n,
        classify_ms: latency.classify_ms / n,
    };
    Ok(samples
        .iter()
        .zip(info)
        .zip(pred.into_iter().zip(alpha))
        .map(|((s, i), (predicted, alpha))| DefenseTrace {
            sample_id: s.id,
            label: s.label,
            score: i.score,
            flagged: i.flagged,
            t_star: i.t_star,
            noise_seed: i.noise_seed,
            post_score: i.post_score,
            predicted,
            alpha,
            latency: per,
        })
        .collect())
}

/// Single-input defense: detect, purify if `score > tau`, classify.
pub fn defend_and_classify(sample: &Sample, defense: &Defense, model: &ClientModel) -> Result<(usize, DefenseTrace)> {
    let trace = defend_batch(std::slice::from_ref(sample), Some(defense), model)?.remove(0);
    Ok((trace.predicted, trace))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseSummary {
    pub samples: usize,
    pub accuracy: f64,
    pub flag_rate: f64,
    /// Mean depth over purified samples (0 if none).
    pub mean_t_star: f64,
    pub mean_latency: StageLatency,
}

impl DefenseSummary {
    pub fn from_traces(traces: &[DefenseTrace]) -> Result<Self> {
        if traces.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = traces.len() as f64;
        let flagged: Vec<&DefenseTrace> = traces.iter().filter(|t| t.flagged).collect();
        let mean = |f: fn(&StageLatency) -> f64| traces.iter().map(|t| f(&t.latency)).sum::<f64>() / n;
        Ok(Self {
            samples: traces.len(),
            accuracy: traces.iter().filter(|t| t.correct()).count() as f64 / n,
            flag_rate: flagged.len() as f64 / n,
            mean_t_star: if flagged.is_empty() {
                0.0
            } else {
                flagged.iter().map(|t| t.t_star as f64).sum::<f64>() / flagged.len() as f64
            },
            mean_latency: StageLatency {
                detect_ms: mean(|l| l.detect_ms),
                purify_ms: mean(|l| l.purify_ms),
                classify_ms: mean(|l| l.classify_ms),
            },
        })
    }
}

/// Runs the defended (or, with `defense = None`, bare) classifier over a
/// collection in batches. Traces come back in input order, one per sample.
pub fn batch_defend(
    samples: &[Sample],
    defense: Option<&Defense>,
    model: &ClientModel,
    batch_size: usize,
) -> Result<(Vec<DefenseTrace>, DefenseSummary)> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut traces = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        traces.extend(defend_batch(chunk, defense, model)?);
    }
    let summary = DefenseSummary::from_traces(&traces)?;
    Ok((traces, summary))
}

/// One CSV row per trace.
pub fn write_traces(path: &Path, split: &str, traces: &[DefenseTrace], append: bool) -> Result<()> {
    let file = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let fresh = file.metadata().map_err(|e| Error::io(path, e))?.len() == 0;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    if fresh {
        w.write_record([
            "split", "sample_id", "label", "score", "flagged", "t_star", "noise_seed", "post_score",
            "predicted", "alpha", "detect_ms", "purify_ms", "classify_ms",
        ])?;
    }
    for t in traces {
        let alpha: Vec<String> = t.alpha.iter().map(|a| format!("{a:.6}")).collect();
        w.write_record([
            split.to_string(),
            t.sample_id.to_string(),
            t.label.to_string(),
            format!("{:.6e}", t.score),
            t.flagged.to_string(),
            t.t_star.to_string(),
            t.noise_seed.to_string(),
            t.post_score.map(|s| format!("{s:.6e}")).unwrap_or_default(),
            t.predicted.to_string(),
            alpha.join(";"),
            format!("{:.3}", t.latency.detect_ms),
            format!("{:.3}", t.latency.purify_ms),
            format!("{:.3}", t.latency.classify_ms),
        ])?;
    }
    w.into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?
        .flush()
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{SigmaMode, ZeroNoise};
    use crate::mae::{MaeConfig, ScoreMode};
    use crate::moe::{ArchConfig, BackboneKind, FeatureSource};
    use candle_core::DType;

    fn arch() -> ArchConfig {
        ArchConfig {
            num_experts: 2,
            num_classes: 2,
            in_channels: 3,
            backbone: BackboneKind::Small,
            width: 4,
            stem_stride: 1,
            feature_dim: 8,
            head_hidden: 8,
            attention_hidden: 4,
            feature_source: FeatureSource::FirstExpert,
        }
    }

    fn samples(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let data: Vec<f32> = (0..192).map(|j| ((i * 31 + j * 7) % 97) as f32 / 97.0).collect();
                Sample {
                    id: i as u64 * 3 + 1,
                    image: Image::new(3, 8, 8, data).unwrap(),
                    label: i % 2,
                }
            })
            .collect()
    }

    fn defense(tau: f64) -> Defense {
        let mae_cfg = MaeConfig {
            patch_size: 4,
            dim: 8,
            depth: 1,
            decoder_depth: 1,
            heads: 2,
            mlp_ratio: 2,
            ..Default::default()
        };
        let detector = MaeModel::new(&mae_cfg, 3, 8, 0, DType::F32).unwrap();
        let calib: Vec<f64> = (0..40).map(|i| i as f64 / 40.0).collect();
        Defense {
            detector,
            calibration: Calibration::with_threshold(tau, &calib),
            purifier: Box::new(ZeroNoise),
            schedule: NoiseSchedule::new(20, 1e-4, 0.02).unwrap(),
            policy: PurifyConfig {
                t_min: 2,
                t_max: 6,
                sigma_mode: SigmaMode::Beta,
            },
            scoring: DetectorConfig {
                kappa: 0.05,
                score_mode: ScoreMode::Unmasked,
                score_draws: 1,
                recheck: false,
            },
            mask_ratio: 0.5,
            seed: 3,
        }
    }

    #[test]
    fn infinite_threshold_is_the_bare_classifier() {
        let model = ClientModel::new(&arch(), 0, 1, DType::F32).unwrap();
        let data = samples(6);
        let (bare, _) = batch_defend(&data, None, &model, 4).unwrap();
        let (defended, summary) = batch_defend(&data, Some(&defense(f64::INFINITY)), &model, 4).unwrap();
        for (a, b) in bare.iter().zip(&defended) {
            assert_eq!(a.predicted, b.predicted);
            assert_eq!(a.alpha, b.alpha);
            assert!(!b.flagged && b.t_star == 0);
        }
        assert_eq!(summary.flag_rate, 0.0);
    }

    #[test]
    fn negative_infinite_threshold_purifies_everything() {
        let model = ClientModel::new(&arch(), 0, 1, DType::F32).unwrap();
        let d = defense(f64::NEG_INFINITY);
        let (traces, summary) = batch_defend(&samples(5), Some(&d), &model, 2).unwrap();
        assert_eq!(summary.flag_rate, 1.0);
        for t in &traces {
            assert!(t.flagged);
            assert!((2..=6).contains(&t.t_star), "{}", t.t_star);
        }
    }

    #[test]
    fn flag_rule_is_strict() {
        let model = ClientModel::new(&arch(), 0, 1, DType::F32).unwrap();
        let data = samples(3);
        let probe = defense(f64::INFINITY);
        let refs: Vec<&Image> = data.iter().map(|s| &s.image).collect();
        let ids: Vec<u64> = data.iter().map(|s| s.id).collect();
        let scores = probe.scores(&refs, &ids).unwrap();
        // threshold exactly at sample 0's score: not flagged
        let d = defense(scores[0]);
        let (_, t) = defend_and_classify(&data[0], &d, &model).unwrap();
        assert_eq!(t.score, scores[0]);
        assert!(!t.flagged);
        assert_eq!(t.t_star, 0);
        let d = defense(scores[0] - 1e-9);
        let (_, t) = defend_and_classify(&data[0], &d, &model).unwrap();
        assert!(t.flagged && t.t_star > 0);
    }

    #[test]
    fn traces_are_reproducible_and_batch_independent() {
        let model = ClientModel::new(&arch(), 0, 1, DType::F32).unwrap();
        let d = defense(0.0);
        let data = samples(7);
        let strip = |v: Vec<DefenseTrace>| -> Vec<DefenseTrace> {
            v.into_iter()
                .map(|t| DefenseTrace {
                    latency: StageLatency::default(),
                    ..t
                })
                .collect()
        };
        let a = strip(batch_defend(&data, Some(&d), &model, 7).unwrap().0);
        let b = strip(batch_defend(&data, Some(&d), &model, 3).unwrap().0);
        assert_eq!(a.len(), data.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.sample_id, y.sample_id);
            assert_eq!(x.t_star, y.t_star);
            assert_eq!(x.noise_seed, y.noise_seed);
            assert!((x.score - y.score).abs() < 1e-5);
        }
        assert_eq!(a, strip(batch_defend(&data, Some(&d), &model, 7).unwrap().0));
    }

    #[test]
    fn accuracy_matches_counting() {
        let model = ClientModel::new(&arch(), 0, 1, DType::F32).unwrap();
        let data = samples(9);
        let (traces, s) = batch_defend(&data, None, &model, 4).unwrap();
        let hits = traces.iter().zip(&data).filter(|(t, x)| t.predicted == x.label).count();
        assert_eq!(s.accuracy, hits as f64 / 9.0);
        assert!((0.0..=1.0).contains(&s.accuracy));
        assert!(batch_defend(&[], None, &model, 4).is_err());
    }

    #[test]
    fn recheck_records_post_scores() {
        let model = ClientModel::new(&arch(), 0, 1, DType::F32).unwrap();
        let mut d = defense(f64::NEG_INFINITY);
        d.scoring.recheck = true;
        let (traces, _) = batch_defend(&samples(3), Some(&d), &model, 3).unwrap();
        assert!(traces.iter().all(|t| t.post_score.is_some()));
    }

    #[test]
    fn traces_csv_has_one_row_per_sample() {
        let model = ClientModel::new(&arch(), 0, 1, DType::F32).unwrap();
        let (traces, _) = batch_defend(&samples(4), Some(&defense(0.0)), &model, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traces.csv");
        write_traces(&path, "clean", &traces, false).unwrap();
        write_traces(&path, "adversarial", &traces, true).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1 + 8);
    }
}
