//! Synthetic stand-in for a crowd-annotated generated-video corpus.
//!
//! Each item has a latent quality in [1,5]. Its frame features are built so
//! that `3 + w·frame` equals the latent quality plus bounded uniform noise for
//! every frame, where `w` is a fixed unit direction with alternating signs.
//! A panel of 15 simulated annotators rates the latent quality; outlier
//! ratings are filtered and the rest averaged into a MOS.
//!
//! The outlier filter is a stand-in: ratings further than two levels from
//! the panel median are dropped.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const PANEL_SIZE: usize = 15;
pub const MIN_KEPT: usize = 3;
pub const MAX_DEVIATION_FROM_MEDIAN: i32 = 2;

/// Scene descriptions used as user prompts.
pub const PROMPT_BANK: [&str; 10] = [
    "a cat sitting on a red sofa",
    "a sailboat drifting across a calm lake at sunset",
    "a child flying a kite on a windy beach",
    "an astronaut walking through a field of sunflowers",
    "a steaming cup of coffee on a wooden table",
    "a red fox running through fresh snow",
    "city traffic at night seen from a rooftop",
    "a chef slicing vegetables in a busy kitchen",
    "waves crashing against a rocky lighthouse",
    "a panda eating bamboo in the rain",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentItem {
    pub item_id: String,
    pub latent_quality: f64,
    pub frame_features: Vec<Vec<f64>>,
    pub user_prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationPanel {
    pub ratings: Vec<u8>,
    pub kept_mask: Vec<bool>,
    pub mos: f64,
}

impl AnnotationPanel {
    pub fn kept_count(&self) -> usize {
        self.kept_mask.iter().filter(|&&k| k).count()
    }
}

/// One line of the raw dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub item_id: String,
    pub frame_features: Vec<Vec<f64>>,
    pub user_prompt: String,
    pub mos: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n: usize,
    pub feature_dim: usize,
    pub frames_per_video: usize,
    pub seed: u64,
    /// Half-width of the uniform noise added to the quality signal carried by
    /// the features.
    pub feature_noise: f64,
    /// Standard deviation of each annotator's rating noise.
    pub annotator_noise_sd: f64,
    /// Scale of the temporal drift orthogonal to the quality direction.
    pub temporal_drift: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n: 5000,
            feature_dim: 32,
            frames_per_video: 8,
            seed: 1,
            feature_noise: 0.6,
            annotator_noise_sd: 0.8,
            temporal_drift: 0.5,
        }
    }
}

pub fn item_id(index: usize) -> String {
    format!("item-{index:06}")
}

/// The fixed quality direction: alternating signs, unit norm.
pub fn quality_direction(dim: usize) -> Vec<f64> {
    let s = 1.0 / (dim as f64).sqrt();
    (0..dim).map(|j| if j % 2 == 0 { s } else { -s }).collect()
}

/// Truncated normal, mean 3, sd 1, on [1,5], by rejection.
fn sample_latent_quality<R: Rng>(rng: &mut R) -> f64 {
    let normal = Normal::new(3.0, 1.0).expect("valid normal");
    loop {
        let q: f64 = normal.sample(rng);
        if (1.0..=5.0).contains(&q) {
            return q;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn remove_component(v: &mut [f64], dir: &[f64]) {
    let c = dot(v, dir);
    v.iter_mut().zip(dir).for_each(|(x, d)| *x -= c * d);
}

fn generate_one(cfg: &GeneratorConfig, index: usize, dir: &[f64]) -> LatentItem {
    let id = item_id(index);
    let mut rng = rng::stream(cfg.seed, &format!("item/{id}"));
    let d = cfg.feature_dim;

    let q = sample_latent_quality(&mut rng);
    let noise = if cfg.feature_noise > 0.0 {
        Uniform::new_inclusive(-cfg.feature_noise, cfg.feature_noise)
            .expect("valid uniform")
            .sample(&mut rng)
    } else {
        0.0
    };
    let signal = q - 3.0 + noise;

    let mut base: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    remove_component(&mut base, dir);
    let mut drift: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    remove_component(&mut drift, dir);
    let norm = dot(&drift, &drift).sqrt().max(f64::MIN_POSITIVE);
    drift
        .iter_mut()
        .for_each(|x| *x *= cfg.temporal_drift / norm);

    let n = cfg.frames_per_video;
    let frames = (0..n)
        .map(|t| {
            let phase = if n > 1 {
                t as f64 / (n - 1) as f64 - 0.5
            } else {
                0.0
            };
            (0..d)
                .map(|j| base[j] + signal * dir[j] + phase * drift[j])
                .collect()
        })
        .collect();

    let prompt = PROMPT_BANK[rng.random_range(0..PROMPT_BANK.len())].to_string();
    LatentItem {
        item_id: id,
        latent_quality: q,
        frame_features: frames,
        user_prompt: prompt,
    }
}

/// Generates `cfg.n` items. Each item draws from its own stream keyed by
/// `(seed, item_id)`, so the output does not depend on thread scheduling.
pub fn generate_items(cfg: &GeneratorConfig) -> Result<Vec<LatentItem>> {
    if cfg.n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    if cfg.feature_dim == 0 {
        return Err(Error::invalid("feature_dim must be at least 1"));
    }
    if cfg.frames_per_video == 0 {
        return Err(Error::invalid("frames_per_video must be at least 1"));
    }
    if !(cfg.feature_noise >= 0.0 && cfg.temporal_drift >= 0.0) {
        return Err(Error::invalid("noise scales must be non-negative"));
    }
    let dir = quality_direction(cfg.feature_dim);
    Ok((0..cfg.n)
        .into_par_iter()
        .map(|i| generate_one(cfg, i, &dir))
        .collect())
}

/// Rates `latent_quality` with a 15-member panel and filters outliers.
pub fn simulate_annotators(
    latent_quality: f64,
    noise_sd: f64,
    seed: u64,
) -> Result<AnnotationPanel> {
    let mut rng = rng::stream(seed, "panel");
    simulate_with(latent_quality, noise_sd, &mut rng)
}

fn simulate_with<R: Rng>(
    latent_quality: f64,
    noise_sd: f64,
    rng: &mut R,
) -> Result<AnnotationPanel> {
    if !(1.0..=5.0).contains(&latent_quality) {
        return Err(Error::invalid(format!(
            "latent quality {latent_quality} outside [1,5]"
        )));
    }
    if !(noise_sd.is_finite() && noise_sd >= 0.0) {
        return Err(Error::invalid(format!("noise_sd {noise_sd} must be >= 0")));
    }
    let ratings: Vec<u8> = (0..PANEL_SIZE)
        .map(|_| {
            let e: f64 = if noise_sd > 0.0 {
                noise_sd * Distribution::<f64>::sample(&StandardNormal, rng)
            } else {
                0.0
            };
            (latent_quality + e).round().clamp(1.0, 5.0) as u8
        })
        .collect();
    Ok(filter_panel(ratings))
}

/// Drops ratings more than two levels from the panel median and averages
/// the rest. The median itself is always kept, and with 15 ratings at least
/// eight lie on each side of it, so the kept count never falls below three.
pub fn filter_panel(ratings: Vec<u8>) -> AnnotationPanel {
    let mut sorted = ratings.clone();
    sorted.sort_unstable();
    let median = sorted[sorted.len() / 2] as i32;
    let kept_mask: Vec<bool> = ratings
        .iter()
        .map(|&r| (r as i32 - median).abs() <= MAX_DEVIATION_FROM_MEDIAN)
        .collect();
    let (sum, count) = ratings
        .iter()
        .zip(&kept_mask)
        .filter(|(_, &k)| k)
        .fold((0u32, 0u32), |(s, c), (&r, _)| (s + r as u32, c + 1));
    debug_assert!(count as usize >= MIN_KEPT);
    AnnotationPanel {
        ratings,
        kept_mask,
        mos: sum as f64 / count as f64,
    }
}

/// Panel for an item, seeded by `(seed, item_id)`.
pub fn annotate_item(item: &LatentItem, noise_sd: f64, seed: u64) -> Result<AnnotationPanel> {
    let mut rng = rng::stream(seed, &format!("panel/{}", item.item_id));
    simulate_with(item.latent_quality, noise_sd, &mut rng)
}

pub fn annotate_all(
    items: &[LatentItem],
    noise_sd: f64,
    seed: u64,
) -> Result<Vec<AnnotationPanel>> {
    items
        .par_iter()
        .map(|it| annotate_item(it, noise_sd, seed))
        .collect()
}

pub fn to_raw_records(items: &[LatentItem], panels: &[AnnotationPanel]) -> Result<Vec<RawRecord>> {
    if items.len() != panels.len() {
        return Err(Error::invalid(format!(
            "{} items but {} panels",
            items.len(),
            panels.len()
        )));
    }
    Ok(items
        .iter()
        .zip(panels)
        .map(|(it, p)| RawRecord {
            item_id: it.item_id.clone(),
            frame_features: it.frame_features.clone(),
            user_prompt: it.user_prompt.clone(),
            mos: p.mos,
        })
        .collect())
}

/// Writes the raw dataset as JSON Lines.
pub fn emit_raw_dataset(
    items: &[LatentItem],
    panels: &[AnnotationPanel],
    path: &Path,
) -> Result<()> {
    let records = to_raw_records(items, panels)?;
    write_jsonl(path, &records)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1)))?,
        );
    }
    Ok(out)
}

/// Train/validation/test sizes. The default mirrors the 4000/500/500 split
/// of the challenge corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 4000,
            val: 500,
            test: 500,
        }
    }
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Debug, Clone)]
pub struct RawSplits {
    pub train: Vec<RawRecord>,
    pub val: Vec<RawRecord>,
    pub test: Vec<RawRecord>,
}

/// Generates, annotates and splits a full dataset by item index.
pub fn generate_dataset(cfg: &GeneratorConfig, sizes: SplitSizes) -> Result<RawSplits> {
    let cfg = GeneratorConfig {
        n: sizes.total(),
        ..cfg.clone()
    };
    let items = generate_items(&cfg)?;
    let panels = annotate_all(&items, cfg.annotator_noise_sd, cfg.seed)?;
    let mut records = to_raw_records(&items, &panels)?;
    let test = records.split_off(sizes.train + sizes.val);
    let val = records.split_off(sizes.train);
    Ok(RawSplits {
        train: records,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            n,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn rejects_empty_requests() {
        assert!(matches!(
            generate_items(&small(0, 1)),
            Err(Error::InvalidArgument(_))
        ));
        let cfg = GeneratorConfig {
            feature_dim: 0,
            ..small(3, 1)
        };
        assert!(matches!(
            generate_items(&cfg),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = serde_json::to_string(&generate_items(&small(100, 7)).unwrap()).unwrap();
        let b = serde_json::to_string(&generate_items(&small(100, 7)).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ids_unique_and_quality_in_range() {
        let items = generate_items(&small(500, 3)).unwrap();
        let mut ids: Vec<_> = items.iter().map(|i| i.item_id.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 500);
        assert!(items
            .iter()
            .all(|i| (1.0..=5.0).contains(&i.latent_quality)));
        assert!(items.iter().all(|i| i.frame_features.len() == 8));
    }

    #[test]
    fn every_frame_carries_the_signal() {
        let cfg = GeneratorConfig {
            feature_noise: 0.0,
            ..small(20, 5)
        };
        let dir = quality_direction(cfg.feature_dim);
        for item in generate_items(&cfg).unwrap() {
            for f in &item.frame_features {
                assert!((3.0 + dot(f, &dir) - item.latent_quality).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn latent_mean_pinned() {
        // Recorded from the first run; the loose band is the sanity check,
        // the exact value guards against accidental stream changes.
        let cfg = GeneratorConfig {
            n: 4000,
            feature_dim: 32,
            ..small(4000, 1)
        };
        let items = generate_items(&cfg).unwrap();
        let mean = items.iter().map(|i| i.latent_quality).sum::<f64>() / 4000.0;
        assert!((2.7..=3.3).contains(&mean), "mean {mean}");
        assert!(
            (mean - 2.999_774_809_995_614_5).abs() < 1e-12,
            "mean {mean}"
        );
    }

    #[test]
    fn zero_noise_panel() {
        let p = simulate_annotators(3.0, 0.0, 123).unwrap();
        assert_eq!(p.ratings, vec![3; 15]);
        assert_eq!(p.kept_count(), 15);
        assert_eq!(p.mos, 3.0);
        let p = simulate_annotators(5.0, 0.0, 9).unwrap();
        assert_eq!(p.mos, 5.0);
    }

    #[test]
    fn noisy_panel_pinned() {
        let p = simulate_annotators(3.0, 0.8, 11).unwrap();
        assert!((2.0..=4.0).contains(&p.mos), "mos {}", p.mos);
        // 46 / 15, recorded from the first run.
        assert!((p.mos - 46.0 / 15.0).abs() < 1e-12, "mos {}", p.mos);
        assert!(p.kept_count() >= MIN_KEPT);
    }

    #[test]
    fn panel_rejects_out_of_range_quality() {
        assert!(simulate_annotators(0.5, 0.1, 1).is_err());
        assert!(simulate_annotators(5.5, 0.1, 1).is_err());
        assert!(simulate_annotators(3.0, -1.0, 1).is_err());
    }

    #[test]
    fn filter_drops_far_outliers() {
        let mut r = vec![4u8; 13];
        r.extend([1, 5]);
        let p = filter_panel(r);
        assert_eq!(p.kept_count(), 14);
        assert!(!p.kept_mask[13]);
        assert!((p.mos - (4.0 * 13.0 + 5.0) / 14.0).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let items = generate_items(&small(2, 1)).unwrap();
        let panel = simulate_annotators(3.0, 0.0, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let err = emit_raw_dataset(&items, &[panel], &dir.path().join("x.jsonl"));
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let err = emit_raw_dataset(&[], &[], Path::new("/nonexistent-dir/x/raw.jsonl"));
        assert!(matches!(err, Err(Error::Io { .. })));
    }

    #[test]
    fn empty_dataset_writes_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("raw.jsonl");
        emit_raw_dataset(&[], &[], &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap().len(), 0);
    }

    #[test]
    fn single_record_round_trips() {
        let items = generate_items(&small(1, 4)).unwrap();
        let panel = AnnotationPanel {
            ratings: vec![3; 15],
            kept_mask: vec![true; 15],
            mos: 3.6666666666666665,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("raw.jsonl");
        emit_raw_dataset(&items, std::slice::from_ref(&panel), &path).unwrap();
        let back: Vec<RawRecord> = read_jsonl(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].mos, panel.mos);
        assert_eq!(back[0].frame_features, items[0].frame_features);
    }

    #[test]
    fn default_split_sizes() {
        let s = SplitSizes::default();
        assert_eq!((s.train, s.val, s.test), (4000, 500, 500));
        let cfg = GeneratorConfig {
            feature_dim: 4,
            frames_per_video: 2,
            ..Default::default()
        };
        let splits = generate_dataset(&cfg, s).unwrap();
        assert_eq!(splits.train.len(), 4000);
        assert_eq!(splits.val.len(), 500);
        assert_eq!(splits.test.len(), 500);
        assert!(splits
            .train
            .iter()
            .chain(&splits.test)
            .all(|r| (1.0..=5.0).contains(&r.mos)));
    }

    /// Least squares through the normal equations, solved by Gaussian
    /// elimination with partial pivoting. Returns `[intercept, w...]`.
    fn ols(x: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
        let p = x[0].len() + 1;
        let mut a = vec![vec![0.0; p + 1]; p];
        for (row, &t) in x.iter().zip(y) {
            let z: Vec<f64> = std::iter::once(1.0).chain(row.iter().copied()).collect();
            for i in 0..p {
                for j in 0..p {
                    a[i][j] += z[i] * z[j];
                }
                a[i][p] += z[i] * t;
            }
        }
        for c in 0..p {
            let piv = (c..p)
                .max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))
                .unwrap();
            a.swap(c, piv);
            let pivot_row = a[c].clone();
            for (r, row) in a.iter_mut().enumerate() {
                if r != c {
                    let f = row[c] / pivot_row[c];
                    for (x, y) in row[c..].iter_mut().zip(&pivot_row[c..]) {
                        *x -= f * y;
                    }
                }
            }
        }
        (0..p).map(|i| a[i][p] / a[i][i]).collect()
    }

    #[test]
    fn mean_features_are_linearly_predictive() {
        let cfg = small(1000, 3);
        let items = generate_items(&cfg).unwrap();
        let panels = annotate_all(&items, cfg.annotator_noise_sd, cfg.seed).unwrap();
        let recs = to_raw_records(&items, &panels).unwrap();
        let means: Vec<Vec<f64>> = recs
            .iter()
            .map(|r| {
                let n = r.frame_features.len() as f64;
                (0..cfg.feature_dim)
                    .map(|d| r.frame_features.iter().map(|f| f[d]).sum::<f64>() / n)
                    .collect()
            })
            .collect();
        let mos: Vec<f64> = recs.iter().map(|r| r.mos).collect();
        let w = ols(&means, &mos);
        let fit: Vec<f64> = means
            .iter()
            .map(|m| w[0] + m.iter().zip(&w[1..]).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let r = crate::eval::pearson(&fit, &mos).unwrap();
        assert!(r >= 0.8, "pearson {r}");
    }
}
