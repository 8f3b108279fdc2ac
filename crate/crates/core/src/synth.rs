//! Synthetic developmental cohorts with planted age effects.
//!
//! Shared anatomy: a brain ellipsoid, `K` smooth compactly supported
//! component maps and one "planted patch" per designated component. Each
//! subject draws an age, `K` latent time courses (one designated pair has a
//! correlation that drifts linearly with age) and voxel signals that mix the
//! time courses through the component maps. Inside a planted patch the
//! mixing weight on its component grows linearly with age, which is the
//! fine-grained signal; the drifting pair is the coarse one.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::tensor::{idx3, Tensor};
use crate::volume::{Mask, Volume4D};
use crate::volume_io::{self, CohortManifest, IoError, SubjectRecord};

/// Width (std, voxels) of the Gaussian kernel that smooths component maps.
pub const SMOOTHING_SIGMA: f64 = 1.5;
/// Smoothed maps are cut to zero below this fraction of their maximum.
pub const SUPPORT_THRESHOLD: f64 = 0.2;
/// Mean level of latent time courses; keeps raw signals mostly positive.
pub const TIMECOURSE_MEAN: f64 = 2.0;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{path}: {source}")]
    Fs {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub grid: [usize; 3],
    pub n_timepoints: usize,
    pub n_components: usize,
    pub age_range: (f64, f64),
    pub signal_strength: f64,
    pub noise_sigma: f64,
    /// Mixing-weight increase across the full age range inside a planted
    /// patch, per unit of `signal_strength`.
    pub patch_gain: f64,
    /// Radius (voxels) of a planted patch.
    pub patch_radius: f64,
    /// Half-range of the drifting pair correlation per unit of
    /// `signal_strength`.
    pub pair_drift: f64,
    /// Per-subject displacement of each planted patch, up to this many
    /// voxels along every axis (inter-subject anatomical variability).
    pub patch_jitter: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 200,
            grid: [16, 16, 16],
            n_timepoints: 120,
            n_components: 8,
            age_range: (8.0, 22.0),
            signal_strength: 1.0,
            noise_sigma: 0.5,
            patch_gain: 0.6,
            patch_radius: 2.5,
            pair_drift: 0.04,
            patch_jitter: 3,
            seed: 7,
        }
    }
}

impl SynthConfig {
    /// Returns the offending field and reason on failure.
    pub fn check(&self) -> Result<(), (&'static str, String)> {
        if self.n_subjects == 0 {
            return Err(("n_subjects", "must be >= 1".into()));
        }
        if self.n_components < 2 {
            return Err(("n_components", "must be >= 2".into()));
        }
        if self.n_timepoints < 4 * self.n_components {
            return Err((
                "n_timepoints",
                format!("must be >= 4 * n_components = {}", 4 * self.n_components),
            ));
        }
        if self.grid.iter().any(|&g| g < 4) {
            return Err(("grid", "every extent must be >= 4".into()));
        }
        let (lo, hi) = self.age_range;
        if !(lo > 0.0 && lo < hi && hi < 130.0) {
            return Err(("age_range", "need 0 < min < max < 130".into()));
        }
        if !(self.signal_strength >= 0.0 && self.signal_strength.is_finite()) {
            return Err(("signal_strength", "must be finite and >= 0".into()));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(("noise_sigma", "must be finite and > 0".into()));
        }
        if !(self.patch_gain >= 0.0 && self.patch_gain.is_finite()) {
            return Err(("patch_gain", "must be finite and >= 0".into()));
        }
        if !(self.patch_radius >= 0.0 && self.patch_radius.is_finite()) {
            return Err(("patch_radius", "must be finite and >= 0".into()));
        }
        if !(0.0..0.9).contains(&self.pair_drift) {
            return Err(("pair_drift", "must lie in [0, 0.9)".into()));
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), SynthError> {
        self.check()
            .map_err(|(field, reason)| SynthError::Config(format!("{field}: {reason}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub component: usize,
    pub center: [usize; 3],
    pub voxels: Vec<usize>,
}

/// Subject-invariant structure of a cohort.
#[derive(Debug, Clone)]
pub struct Anatomy {
    pub grid: [usize; 3],
    pub brain: Mask,
    /// `K` maps over the full grid, each with unit maximum.
    pub maps: Vec<Vec<f64>>,
    pub centers: Vec<[usize; 3]>,
    pub patches: Vec<Patch>,
    pub drifting_pairs: Vec<(usize, usize)>,
}

/// Number of components that carry a planted patch.
pub fn n_planted(k: usize) -> usize {
    (k / 2).max(1)
}

fn dist2(a: [usize; 3], b: [usize; 3]) -> f64 {
    a.iter()
        .zip(&b)
        .map(|(&p, &q)| (p as f64 - q as f64).powi(2))
        .sum()
}

fn coords(grid: [usize; 3], v: usize) -> [usize; 3] {
    [
        v / (grid[1] * grid[2]),
        (v / grid[2]) % grid[1],
        v % grid[2],
    ]
}

fn brain_mask(grid: [usize; 3]) -> Mask {
    let c: Vec<f64> = grid.iter().map(|&g| (g as f64 - 1.0) / 2.0).collect();
    let r: Vec<f64> = grid.iter().map(|&g| g as f64 / 2.0).collect();
    let n = grid.iter().product();
    let inside = (0..n)
        .map(|v| {
            let p = coords(grid, v);
            (0..3)
                .map(|a| ((p[a] as f64 - c[a]) / r[a]).powi(2))
                .sum::<f64>()
                <= 1.0
        })
        .collect();
    Mask::from_bools(grid, inside).expect("sized")
}

/// Separable Gaussian smoothing with zero boundary.
pub fn gaussian_smooth(grid: [usize; 3], field: &[f64], sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let mut cur = field.to_vec();
    for axis in 0..3 {
        let mut next = vec![0.0; cur.len()];
        for v in 0..cur.len() {
            let p = coords(grid, v);
            let mut acc = 0.0;
            for (ki, &w) in kernel.iter().enumerate() {
                let q = p[axis] as isize + ki as isize - radius;
                if q < 0 || q >= grid[axis] as isize {
                    continue;
                }
                let mut pp = p;
                pp[axis] = q as usize;
                acc += w * cur[idx3(grid, pp[0], pp[1], pp[2])];
            }
            next[v] = acc;
        }
        cur = next;
    }
    cur
}

impl Anatomy {
    pub fn build(cfg: &SynthConfig) -> Self {
        let grid = cfg.grid;
        let k = cfg.n_components;
        let brain = brain_mask(grid);
        let mut r = rng::stream(cfg.seed, rng::tag("anatomy"));
        let brain_idx = brain.indices().to_vec();
        let n = grid.iter().product::<usize>();

        // Spread component centers with a shrinking minimum separation.
        let min_extent = *grid.iter().min().unwrap() as f64;
        let mut sep2 = (min_extent / 3.0).powi(2);
        let mut centers: Vec<[usize; 3]> = Vec::with_capacity(k);
        let mut attempts = 0;
        while centers.len() < k {
            let v = brain_idx[r.random_range(0..brain_idx.len())];
            let p = coords(grid, v);
            let interior = (0..3).all(|a| p[a] >= 2 && p[a] + 2 < grid[a]);
            if interior && centers.iter().all(|&c| dist2(c, p) >= sep2) {
                centers.push(p);
            }
            attempts += 1;
            if attempts % 200 == 0 {
                sep2 *= 0.8;
            }
        }

        let maps: Vec<Vec<f64>> = centers
            .iter()
            .map(|&c| {
                let mut seed_field = vec![0.0; n];
                for (v, s) in seed_field.iter_mut().enumerate() {
                    if dist2(coords(grid, v), c) <= 1.0 {
                        *s = 1.0;
                    }
                }
                let mut m = gaussian_smooth(grid, &seed_field, SMOOTHING_SIGMA);
                let max = m.iter().cloned().fold(0.0, f64::max);
                for (v, x) in m.iter_mut().enumerate() {
                    *x /= max;
                    if *x < SUPPORT_THRESHOLD || !brain.contains(v) {
                        *x = 0.0;
                    }
                }
                m
            })
            .collect();

        // Each planted patch sits next to its component, where coverage by
        // the component maps is lowest among a handful of candidates.
        let coverage: Vec<f64> = (0..n).map(|v| maps.iter().map(|m| m[v]).sum()).collect();
        let mut patches = Vec::new();
        for comp in 0..n_planted(k) {
            let c = centers[comp];
            let candidates: Vec<usize> = brain_idx
                .iter()
                .copied()
                .filter(|&v| {
                    let d2 = dist2(coords(grid, v), c);
                    (9.0..=25.0).contains(&d2)
                        && patches
                            .iter()
                            .all(|p: &Patch| dist2(p.center, coords(grid, v)) > 9.0)
                })
                .collect();
            let pool = if candidates.is_empty() {
                brain_idx.clone()
            } else {
                candidates
            };
            let mut best = pool[r.random_range(0..pool.len())];
            for _ in 0..24 {
                let v = pool[r.random_range(0..pool.len())];
                if coverage[v] < coverage[best] {
                    best = v;
                }
            }
            let center = coords(grid, best);
            let voxels = brain_idx
                .iter()
                .copied()
                .filter(|&v| dist2(coords(grid, v), center) <= cfg.patch_radius.powi(2))
                .collect();
            patches.push(Patch {
                component: comp,
                center,
                voxels,
            });
        }

        let drifting_pairs = vec![(k - 2, k - 1)];
        Self {
            grid,
            brain,
            maps,
            centers,
            patches,
            drifting_pairs,
        }
    }
}

/// Everything the generator knows about one subject.
#[derive(Debug, Clone)]
pub struct SubjectSample {
    pub subject_id: String,
    pub age_years: f64,
    pub volume: Volume4D,
    /// `K x T` latent time courses before noise.
    pub latent: Vec<Vec<f64>>,
    /// Extra mixing weight inside the planted patches.
    pub planted_weight: f64,
    pub pair_correlation: f64,
}

pub fn subject_id(index: usize) -> String {
    format!("sub-{index:04}")
}

pub fn generate_subject(cfg: &SynthConfig, anatomy: &Anatomy, index: usize) -> SubjectSample {
    let mut r = rng::stream(cfg.seed, index as u64);
    let (lo, hi) = cfg.age_range;
    let age = lo + (hi - lo) * r.random::<f64>();
    let a = (age - lo) / (hi - lo);
    let k = cfg.n_components;
    let nt = cfg.n_timepoints;

    let mut u: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..nt).map(|_| r.sample(StandardNormal)).collect())
        .collect();
    let rho = (cfg.signal_strength * cfg.pair_drift * (2.0 * a - 1.0)).clamp(-0.9, 0.9);
    for &(i, j) in &anatomy.drifting_pairs {
        let s = (1.0 - rho * rho).sqrt();
        for t in 0..nt {
            u[j][t] = rho * u[i][t] + s * u[j][t];
        }
    }
    let latent: Vec<Vec<f64>> = u
        .iter()
        .map(|row| row.iter().map(|x| TIMECOURSE_MEAN + x).collect())
        .collect();

    let planted_weight = cfg.signal_strength * cfg.patch_gain * a;
    let grid = anatomy.grid;
    let nv: usize = grid.iter().product();
    // Sparse per-voxel mixing rows: (component, weight).
    let mut mixing: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nv];
    for &v in anatomy.brain.indices() {
        for (c, m) in anatomy.maps.iter().enumerate() {
            if m[v] > 0.0 {
                mixing[v].push((c, m[v]));
            }
        }
    }
    let j = cfg.patch_jitter as i64;
    let mut jr = rng::stream(
        rng::stream_seed(cfg.seed, rng::tag("patch_jitter")),
        index as u64,
    );
    for p in &anatomy.patches {
        let off: [i64; 3] = std::array::from_fn(|_| jr.random_range(-j..=j));
        let shifted = p.voxels.iter().filter_map(|&v| {
            let c = coords(grid, v);
            let q: [i64; 3] = std::array::from_fn(|a| c[a] as i64 + off[a]);
            if (0..3).any(|a| q[a] < 0 || q[a] >= grid[a] as i64) {
                return None;
            }
            let w = ((q[0] as usize * grid[1]) + q[1] as usize) * grid[2] + q[2] as usize;
            anatomy.brain.contains(w).then_some(w)
        });
        for v in shifted {
            match mixing[v].iter_mut().find(|(c, _)| *c == p.component) {
                Some(entry) => entry.1 += planted_weight,
                None => mixing[v].push((p.component, planted_weight)),
            }
        }
    }

    let mut data = vec![0f32; nt * nv];
    for t in 0..nt {
        for &v in anatomy.brain.indices() {
            let clean: f64 = mixing[v].iter().map(|&(c, w)| w * latent[c][t]).sum();
            let noise: f64 = r.sample(StandardNormal);
            data[t * nv + v] = (clean + cfg.noise_sigma * noise) as f32;
        }
    }
    let tensor = Tensor::from_vec(&[nt, grid[0], grid[1], grid[2]], data).expect("sized");
    SubjectSample {
        subject_id: subject_id(index),
        age_years: age,
        volume: Volume4D::new(tensor).expect("rank 4"),
        latent,
        planted_weight,
        pair_correlation: rho,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSubject {
    pub subject_id: String,
    pub age_years: f64,
    pub planted_weight: f64,
    pub pair_correlation: f64,
}

/// Planted parameters written next to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthMetadata {
    pub config: SynthConfig,
    pub smoothing_sigma: f64,
    pub support_threshold: f64,
    pub timecourse_mean: f64,
    pub component_centers: Vec<[usize; 3]>,
    pub patches: Vec<Patch>,
    pub drifting_pairs: Vec<(usize, usize)>,
    pub subjects: Vec<PlantedSubject>,
}

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const METADATA_FILE: &str = "synth_meta.json";
pub const VOLUME_DIR: &str = "volumes";

/// Writes `volumes/<id>.bvol`, `manifest.csv` and `synth_meta.json` under `out_dir`.
pub fn generate_cohort(cfg: &SynthConfig, out_dir: &Path) -> Result<CohortManifest, SynthError> {
    cfg.validate()?;
    let fs_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| SynthError::Fs { path, source }
    };
    let vol_dir = out_dir.join(VOLUME_DIR);
    fs::create_dir_all(&vol_dir).map_err(fs_err(&vol_dir))?;
    let anatomy = Anatomy::build(cfg);

    let subjects: Vec<PlantedSubject> = (0..cfg.n_subjects)
        .into_par_iter()
        .map(|i| {
            let s = generate_subject(cfg, &anatomy, i);
            let path = vol_dir.join(format!("{}.bvol", s.subject_id));
            volume_io::write_bvol(&path, s.volume.tensor())?;
            Ok(PlantedSubject {
                subject_id: s.subject_id,
                age_years: s.age_years,
                planted_weight: s.planted_weight,
                pair_correlation: s.pair_correlation,
            })
        })
        .collect::<Result<_, SynthError>>()?;

    let manifest = CohortManifest {
        records: subjects
            .iter()
            .map(|s| SubjectRecord {
                subject_id: s.subject_id.clone(),
                age_years: s.age_years,
                volume_path: format!("{VOLUME_DIR}/{}.bvol", s.subject_id),
            })
            .collect(),
        seed: cfg.seed,
    };
    volume_io::write_manifest(out_dir.join(MANIFEST_FILE), &manifest)?;

    let meta = SynthMetadata {
        config: cfg.clone(),
        smoothing_sigma: SMOOTHING_SIGMA,
        support_threshold: SUPPORT_THRESHOLD,
        timecourse_mean: TIMECOURSE_MEAN,
        component_centers: anatomy.centers.clone(),
        patches: anatomy.patches.clone(),
        drifting_pairs: anatomy.drifting_pairs.clone(),
        subjects,
    };
    let meta_path = out_dir.join(METADATA_FILE);
    let text = serde_json::to_string_pretty(&meta).expect("plain data");
    fs::write(&meta_path, text).map_err(fs_err(&meta_path))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_subjects: 6,
            grid: [8, 8, 8],
            n_timepoints: 24,
            n_components: 4,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn config_rules() {
        assert!(SynthConfig::default().check().is_ok());
        let mut c = small();
        c.n_timepoints = 15;
        assert_eq!(c.check().unwrap_err().0, "n_timepoints");
        let mut c = small();
        c.age_range = (10.0, 10.0);
        assert_eq!(c.check().unwrap_err().0, "age_range");
        let mut c = small();
        c.grid = [3, 8, 8];
        assert_eq!(c.check().unwrap_err().0, "grid");
        let mut c = small();
        c.n_components = 1;
        assert_eq!(c.check().unwrap_err().0, "n_components");
    }

    #[test]
    fn component_maps_are_nonnegative_and_normalized() {
        let a = Anatomy::build(&SynthConfig::default());
        assert_eq!(a.maps.len(), 8);
        for m in &a.maps {
            assert!(m.iter().all(|&x| x >= 0.0));
            let max = m.iter().cloned().fold(0.0, f64::max);
            assert!((max - 1.0).abs() < 1e-12);
            // compact support
            assert!(m.iter().filter(|&&x| x == 0.0).count() > m.len() / 2);
        }
        assert_eq!(a.patches.len(), 4);
        assert!(a.patches.iter().all(|p| !p.voxels.is_empty()));
    }

    #[test]
    fn smoothing_preserves_mass_in_the_interior() {
        let grid = [16, 16, 16];
        let mut f = vec![0.0; 4096];
        f[idx3(grid, 8, 8, 8)] = 1.0;
        let s = gaussian_smooth(grid, &f, SMOOTHING_SIGMA);
        let total: f64 = s.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn cohort_is_byte_identical_across_runs() {
        let cfg = small();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_cohort(&cfg, d1.path()).unwrap();
        generate_cohort(&cfg, d2.path()).unwrap();
        for name in [MANIFEST_FILE, METADATA_FILE, "volumes/sub-0003.bvol"] {
            let a = fs::read(d1.path().join(name)).unwrap();
            let b = fs::read(d2.path().join(name)).unwrap();
            assert!(a == b, "{name} differs");
        }
    }

    #[test]
    fn ages_fall_in_range_and_outside_brain_is_zero() {
        let cfg = small();
        let a = Anatomy::build(&cfg);
        for i in 0..cfg.n_subjects {
            let s = generate_subject(&cfg, &a, i);
            assert!(s.age_years >= 8.0 && s.age_years < 22.0);
            let outside = (0..512).find(|&v| !a.brain.contains(v)).unwrap();
            assert!(s.volume.series(outside).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn planted_weight_is_exactly_linear_in_age() {
        let cfg = SynthConfig {
            n_subjects: 30,
            ..small()
        };
        let a = Anatomy::build(&cfg);
        let pts: Vec<(f64, f64)> = (0..cfg.n_subjects)
            .map(|i| {
                let s = generate_subject(&cfg, &a, i);
                (s.age_years, s.planted_weight)
            })
            .collect();
        let slope = cfg.patch_gain / (cfg.age_range.1 - cfg.age_range.0);
        for (age, w) in pts {
            assert!((w - slope * (age - cfg.age_range.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut cfg = small();
        cfg.noise_sigma = 0.0;
        let d = tempfile::tempdir().unwrap();
        assert!(matches!(
            generate_cohort(&cfg, d.path()),
            Err(SynthError::Config(_))
        ));
    }
}
