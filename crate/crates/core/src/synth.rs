//! Synthetic Gaussian-cluster datasets with controllable base/novel confusion.
//!
//! Every class is an isotropic Gaussian with spread `sigma_c` around a center.
//! Base centers are random directions at radius `center_radius`. A fraction
//! `kappa` of the novel classes in each novel split get a center within
//! `2 sigma_c` of a randomly chosen base center; the rest get fresh random
//! directions.

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::rng::{keyed_rng, Purpose};
use crate::types::{ClassId, DatasetBundle, LabeledExample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_base_classes: usize,
    /// Classes in each of the three novel splits.
    pub n_novel_classes: usize,
    pub input_dim: usize,
    /// Per-class sample counts of the base train/val/test splits.
    pub base_per_class: [usize; 3],
    /// Per-class sample counts of the novel train/val/test splits.
    pub novel_per_class: [usize; 3],
    pub sigma_c: f64,
    pub kappa: f64,
    pub center_radius: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_base_classes: 20,
            n_novel_classes: 8,
            input_dim: 16,
            base_per_class: [60, 10, 40],
            novel_per_class: [100, 100, 100],
            sigma_c: 0.2,
            kappa: 0.5,
            center_radius: 1.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_base_classes == 0 || self.n_novel_classes == 0 || self.input_dim == 0 {
            return Err(config("class counts and input dimension must be positive"));
        }
        if self.base_per_class.contains(&0) || self.novel_per_class.contains(&0) {
            return Err(config("per-class sample counts must be positive"));
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return Err(config("kappa must lie in [0, 1]"));
        }
        if !(self.sigma_c > 0.0 && self.center_radius > 0.0) {
            return Err(config("cluster spread and center radius must be positive"));
        }
        Ok(())
    }

    pub fn n_novel_near(&self) -> usize {
        (self.kappa * self.n_novel_classes as f64).round() as usize
    }
}

/// Class centers of a synthesized bundle, keyed by class id order:
/// base classes first, then the novel splits in train/val/test order.
#[derive(Clone, Debug, PartialEq)]
pub struct Centers {
    pub base: Vec<Array1<f64>>,
    pub novel: Vec<Array1<f64>>,
    /// For each novel class, the base class it was placed next to.
    pub near_base: Vec<Option<usize>>,
}

fn random_direction<R: Rng + ?Sized>(dim: usize, radius: f64, rng: &mut R) -> Array1<f64> {
    let v: Array1<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.dot(&v).sqrt().max(1e-12);
    v * (radius / n)
}

pub fn synthesize_centers(spec: &SyntheticSpec, seed: u64) -> Result<Centers> {
    spec.validate()?;
    let mut rng = keyed_rng(seed, 0, Purpose::Synth);
    let base: Vec<_> =
        (0..spec.n_base_classes).map(|_| random_direction(spec.input_dim, spec.center_radius, &mut rng)).collect();
    let mut novel = Vec::new();
    let mut near_base = Vec::new();
    for _split in 0..3 {
        let mut near = vec![false; spec.n_novel_classes];
        near[..spec.n_novel_near()].fill(true);
        near.shuffle(&mut rng);
        for is_near in near {
            if is_near {
                let b = rng.random_range(0..spec.n_base_classes);
                let len = spec.sigma_c * rng.random_range(1.0..1.9);
                let offset = random_direction(spec.input_dim, len, &mut rng);
                novel.push(&base[b] + &offset);
                near_base.push(Some(b));
            } else {
                novel.push(random_direction(spec.input_dim, spec.center_radius, &mut rng));
                near_base.push(None);
            }
        }
    }
    Ok(Centers { base, novel, near_base })
}

fn draw_cluster<R: Rng + ?Sized>(
    center: &Array1<f64>,
    sigma: f64,
    count: usize,
    label: ClassId,
    rng: &mut R,
    out: &mut Vec<LabeledExample>,
) {
    let noise = Normal::new(0.0, sigma).expect("positive spread");
    for _ in 0..count {
        let x = center.iter().map(|c| c + noise.sample(rng)).collect();
        out.push(LabeledExample::new(x, label));
    }
}

/// Draws a bundle. Base ids are `1..=N_b`; novel ids continue after them, one
/// block of `n_novel_classes` per novel split.
pub fn synthesize_dataset(spec: &SyntheticSpec, seed: u64) -> Result<DatasetBundle> {
    let centers = synthesize_centers(spec, seed)?;
    let mut rng = keyed_rng(seed, 1, Purpose::Synth);
    let mut bundle = DatasetBundle {
        input_dim: spec.input_dim,
        base_train: Vec::new(),
        base_val: Vec::new(),
        base_test: Vec::new(),
        novel_train: Vec::new(),
        novel_val: Vec::new(),
        novel_test: Vec::new(),
        base_classes: (1..=spec.n_base_classes as ClassId).collect(),
        novel_classes: Default::default(),
    };
    for (i, c) in centers.base.iter().enumerate() {
        let label = i as ClassId + 1;
        draw_cluster(c, spec.sigma_c, spec.base_per_class[0], label, &mut rng, &mut bundle.base_train);
        draw_cluster(c, spec.sigma_c, spec.base_per_class[1], label, &mut rng, &mut bundle.base_val);
        draw_cluster(c, spec.sigma_c, spec.base_per_class[2], label, &mut rng, &mut bundle.base_test);
    }
    for (j, c) in centers.novel.iter().enumerate() {
        let label = (spec.n_base_classes + 1 + j) as ClassId;
        bundle.novel_classes.insert(label);
        let split = j / spec.n_novel_classes;
        let target = match split {
            0 => &mut bundle.novel_train,
            1 => &mut bundle.novel_val,
            _ => &mut bundle.novel_test,
        };
        draw_cluster(c, spec.sigma_c, spec.novel_per_class[split], label, &mut rng, target);
    }
    Ok(bundle)
}
