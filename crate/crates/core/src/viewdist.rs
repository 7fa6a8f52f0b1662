//! Where a trained regressor points its cameras: per-shape view angles and
//! per-class kernel density estimates over azimuth and elevation.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::train::{predict_views, Checkpoint, Result, TrainError};

/// Density grid spacing in degrees.
pub const GRID_STEP_DEG: f64 = 0.5;
/// Bandwidths never drop below this, so identical angles give a finite spike.
pub const MIN_BANDWIDTH_DEG: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewSample {
    pub class: String,
    pub label: usize,
    pub shape_id: String,
    pub view_index: usize,
    pub azimuth: f64,
    pub elevation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassKde {
    pub class: String,
    pub samples: usize,
    pub azimuth_bandwidth: f64,
    pub elevation_bandwidth: f64,
    /// On [`azimuth_grid`].
    pub azimuth_density: Vec<f64>,
    /// On [`elevation_grid`].
    pub elevation_density: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewDistribution {
    pub samples: Vec<ViewSample>,
    pub classes: Vec<ClassKde>,
}

fn grid(lo: f64, hi: f64) -> Vec<f64> {
    let n = ((hi - lo) / GRID_STEP_DEG).round() as usize;
    (0..=n).map(|i| lo + i as f64 * GRID_STEP_DEG).collect()
}

pub fn azimuth_grid() -> Vec<f64> {
    grid(-180.0, 180.0)
}

pub fn elevation_grid() -> Vec<f64> {
    grid(-90.0, 90.0)
}

/// Maps an angle into `[−180, 180)`.
pub fn wrap_degrees(a: f64) -> f64 {
    (a + 180.0).rem_euclid(360.0) - 180.0
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Silverman's rule `0.9·min(σ, IQR/1.34)·n^(−1/5)`, falling back to σ when
/// the IQR vanishes, floored at [`MIN_BANDWIDTH_DEG`].
pub fn silverman_bandwidth(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 2 {
        return MIN_BANDWIDTH_DEG;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let iqr = (quantile(&s, 0.75) - quantile(&s, 0.25)) / 1.34;
    let spread = if iqr > 0.0 { sd.min(iqr) } else { sd };
    (0.9 * spread * (n as f64).powf(-0.2)).max(MIN_BANDWIDTH_DEG)
}

fn gauss(x: f64, h: f64) -> f64 {
    (-0.5 * (x / h).powi(2)).exp() / (h * (2.0 * PI).sqrt())
}

/// Wrapped-Gaussian density on the circle, evaluated in degrees.
pub fn azimuth_kde(samples: &[f64], h: f64, at: &[f64]) -> Vec<f64> {
    let wraps = (3.0 * h / 360.0).ceil() as i32 + 1;
    let n = samples.len() as f64;
    at.iter()
        .map(|&x| {
            samples
                .iter()
                .map(|&s| (-wraps..=wraps).map(|k| gauss(x - wrap_degrees(s) - 360.0 * k as f64, h)).sum::<f64>())
                .sum::<f64>()
                / n
        })
        .collect()
}

/// Gaussian density on `[−90, 90]` with mass reflected at both ends, so it
/// integrates to one over the interval.
pub fn elevation_kde(samples: &[f64], h: f64, at: &[f64]) -> Vec<f64> {
    let n = samples.len() as f64;
    at.iter()
        .map(|&x| samples.iter().map(|&s| gauss(x - s, h) + gauss(x - (180.0 - s), h) + gauss(x - (-180.0 - s), h)).sum::<f64>() / n)
        .collect()
}

/// Trapezoid rule on a uniform grid.
pub fn trapezoid(values: &[f64], step: f64) -> f64 {
    match values {
        [] | [_] => 0.0,
        [first, .., last] => step * (values.iter().sum::<f64>() - 0.5 * (first + last)),
    }
}

/// Predicted views for every shape in `dataset`, with per-class densities.
pub fn export_view_distribution(ck: &Checkpoint, dataset: &Dataset) -> Result<ViewDistribution> {
    if !ck.has_mvtn() {
        return Err(TrainError::MissingMvtn);
    }
    if ck.params.spec.classes != dataset.num_classes() {
        return Err(TrainError::ClassCountMismatch { checkpoint: ck.params.spec.classes, dataset: dataset.num_classes() });
    }
    let per_shape = dataset
        .shapes
        .par_iter()
        .enumerate()
        .map(|(i, s)| predict_views(ck, &s.mesh, i))
        .collect::<Result<Vec<_>>>()?;
    let mut samples = Vec::new();
    for (s, u) in dataset.shapes.iter().zip(&per_shape) {
        for (k, (a, e)) in u.angles().enumerate() {
            samples.push(ViewSample {
                class: dataset.class_names[s.label].clone(),
                label: s.label,
                shape_id: s.id.clone(),
                view_index: k,
                azimuth: a,
                elevation: e,
            });
        }
    }
    let (ag, eg) = (azimuth_grid(), elevation_grid());
    let classes = dataset
        .class_names
        .iter()
        .enumerate()
        .filter_map(|(label, name)| {
            let mine: Vec<&ViewSample> = samples.iter().filter(|v| v.label == label).collect();
            if mine.is_empty() {
                return None;
            }
            let az: Vec<f64> = mine.iter().map(|v| wrap_degrees(v.azimuth)).collect();
            let el: Vec<f64> = mine.iter().map(|v| v.elevation).collect();
            let (ha, he) = (silverman_bandwidth(&az), silverman_bandwidth(&el));
            Some(ClassKde {
                class: name.clone(),
                samples: mine.len(),
                azimuth_bandwidth: ha,
                elevation_bandwidth: he,
                azimuth_density: azimuth_kde(&az, ha, &ag),
                elevation_density: elevation_kde(&el, he, &eg),
            })
        })
        .collect();
    Ok(ViewDistribution { samples, classes })
}

impl ViewDistribution {
    /// `class,shape_id,view_index,azimuth,elevation`.
    pub fn samples_csv(&self) -> String {
        let mut out = String::from("class,shape_id,view_index,azimuth,elevation\n");
        for s in &self.samples {
            out.push_str(&format!("{},{},{},{},{}\n", s.class, s.shape_id, s.view_index, s.azimuth, s.elevation));
        }
        out
    }

    /// `class,axis,angle,density`.
    pub fn kde_csv(&self) -> String {
        let mut out = String::from("class,axis,angle,density\n");
        for c in &self.classes {
            for (a, d) in azimuth_grid().iter().zip(&c.azimuth_density) {
                out.push_str(&format!("{},azimuth,{a},{d}\n", c.class));
            }
            for (a, d) in elevation_grid().iter().zip(&c.elevation_density) {
                out.push_str(&format!("{},elevation,{a},{d}\n", c.class));
            }
        }
        out
    }
}
