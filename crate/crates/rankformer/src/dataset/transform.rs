//! Train-split feature transforms: per-feature standardization and the
//! rank-based quantile transform with a normal output distribution.

use crate::dataset::Split;
use crate::rng::fnv1a;
use crate::{Error, Result, Scalar};

/// Standard deviations are floored here so constant features map to zero
/// instead of blowing up.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformMode {
    Standardize,
    QuantileNormal,
}

impl TransformMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TransformMode::Standardize => "standardize",
            TransformMode::QuantileNormal => "quantile_normal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standardize" => Ok(TransformMode::Standardize),
            "quantile_normal" => Ok(TransformMode::QuantileNormal),
            other => Err(Error::Config(format!("unknown transform mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
enum Stats<F> {
    Standardize { means: Vec<F>, stds: Vec<F> },
    Quantile { sorted: Vec<Vec<F>> },
}

/// Per-feature statistics fitted once on the training split.
#[derive(Debug, Clone)]
pub struct FeatureTransform<F> {
    stats: Stats<F>,
    d_x: usize,
    fitted_on: String,
    id: u64,
}

pub fn fit_transform<F: Scalar>(
    split: &Split<F>,
    mode: TransformMode,
    fitted_on: &str,
) -> Result<FeatureTransform<F>> {
    let n: usize = split.lists.iter().map(|l| l.items.len()).sum();
    if n == 0 {
        return Err(Error::EmptyInput("cannot fit transform on empty split".into()));
    }
    let d_x = split.lists[0].items[0].features.len();
    let items = split.lists.iter().flat_map(|l| l.items.iter());

    let stats = match mode {
        TransformMode::Standardize => {
            let mut sums = vec![0.0f64; d_x];
            let mut sq_sums = vec![0.0f64; d_x];
            for item in items {
                for (j, &v) in item.features.iter().enumerate() {
                    let v = v.to_f64().unwrap();
                    sums[j] += v;
                    sq_sums[j] += v * v;
                }
            }
            let nf = n as f64;
            let means: Vec<F> = sums.iter().map(|&s| F::from(s / nf).unwrap()).collect();
            let stds: Vec<F> = sums
                .iter()
                .zip(&sq_sums)
                .map(|(&s, &sq)| {
                    let var = (sq / nf - (s / nf) * (s / nf)).max(0.0);
                    F::from(var.sqrt().max(STD_FLOOR)).unwrap()
                })
                .collect();
            Stats::Standardize { means, stds }
        }
        TransformMode::QuantileNormal => {
            let mut columns: Vec<Vec<F>> = vec![Vec::with_capacity(n); d_x];
            for item in items {
                for (j, &v) in item.features.iter().enumerate() {
                    columns[j].push(v);
                }
            }
            for col in &mut columns {
                col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            }
            Stats::Quantile { sorted: columns }
        }
    };

    let id = transform_id(&stats, d_x);
    Ok(FeatureTransform {
        stats,
        d_x,
        fitted_on: fitted_on.to_string(),
        id,
    })
}

fn transform_id<F: Scalar>(stats: &Stats<F>, d_x: usize) -> u64 {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&(d_x as u64).to_le_bytes());
    match stats {
        Stats::Standardize { means, stds } => {
            bytes.push(0);
            for v in means.iter().chain(stds) {
                bytes.extend_from_slice(&v.to_f64().unwrap().to_bits().to_le_bytes());
            }
        }
        Stats::Quantile { sorted } => {
            bytes.push(1);
            for col in sorted {
                bytes.extend_from_slice(&(col.len() as u64).to_le_bytes());
                if let (Some(first), Some(last)) = (col.first(), col.last()) {
                    bytes.extend_from_slice(&first.to_f64().unwrap().to_bits().to_le_bytes());
                    bytes.extend_from_slice(&last.to_f64().unwrap().to_bits().to_le_bytes());
                }
            }
        }
    }
    fnv1a(&bytes)
}

impl<F: Scalar> FeatureTransform<F> {
    pub fn mode(&self) -> TransformMode {
        match self.stats {
            Stats::Standardize { .. } => TransformMode::Standardize,
            Stats::Quantile { .. } => TransformMode::QuantileNormal,
        }
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn fitted_on(&self) -> &str {
        &self.fitted_on
    }

    /// Transforms a split with the frozen statistics. A split already
    /// carrying this transform's marker is returned unchanged, so applying
    /// twice equals applying once.
    pub fn apply(&self, split: &Split<F>) -> Result<Split<F>> {
        if split.transform_marker == Some(self.id) {
            return Ok(split.clone());
        }
        if let Some(item) = split.lists.first().and_then(|l| l.items.first()) {
            if item.features.len() != self.d_x {
                return Err(Error::DimMismatch(format!(
                    "transform fitted for d_x={} but split has d_x={}",
                    self.d_x,
                    item.features.len()
                )));
            }
        }
        let mut out = split.clone();
        for list in &mut out.lists {
            for item in &mut list.items {
                for (j, v) in item.features.iter_mut().enumerate() {
                    *v = self.transform_value(j, *v);
                }
            }
        }
        out.transform_marker = Some(self.id);
        Ok(out)
    }

    fn transform_value(&self, feature: usize, v: F) -> F {
        match &self.stats {
            Stats::Standardize { means, stds } => (v - means[feature]) / stds[feature],
            Stats::Quantile { sorted } => {
                let col = &sorted[feature];
                let n = col.len();
                let rank = interpolated_rank(col, v);
                let clipped = rank.max(1.0 / (n as f64 + 1.0)).min(n as f64 / (n as f64 + 1.0));
                F::from(inverse_normal_cdf(clipped)).unwrap()
            }
        }
    }

    /// Inverse of a standardize transform; quantile transforms are not
    /// invertible here.
    pub fn inverse_value(&self, feature: usize, z: F) -> Option<F> {
        match &self.stats {
            Stats::Standardize { means, stds } => Some(means[feature] + stds[feature] * z),
            Stats::Quantile { .. } => None,
        }
    }
}

/// Empirical CDF position of `v` in the sorted column, as a fraction of
/// n + 1. Exact ties take the average rank; gaps interpolate linearly.
fn interpolated_rank<F: Scalar>(col: &[F], v: F) -> f64 {
    let n = col.len();
    let lo = col.partition_point(|&u| u < v); // first index with col[i] >= v
    let hi = col.partition_point(|&u| u <= v); // first index with col[i] > v
    let denom = n as f64 + 1.0;
    if lo < hi {
        // v present at positions lo..hi (0-based); mean 1-based rank.
        let mean_rank = (lo as f64 + 1.0 + hi as f64) / 2.0;
        return mean_rank / denom;
    }
    if lo == 0 {
        return 1.0 / denom;
    }
    if lo == n {
        return n as f64 / denom;
    }
    let left = col[lo - 1].to_f64().unwrap();
    let right = col[lo].to_f64().unwrap();
    let frac = (v.to_f64().unwrap() - left) / (right - left);
    (lo as f64 + frac) / denom
}

/// Inverse standard-normal CDF (Wichura's PPND16, accurate to ~1e-15).
pub fn inverse_normal_cdf(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = ((((((2.5090809287301226727e3 * r + 3.3430575583588128105e4) * r
            + 6.7265770927008700853e4)
            * r
            + 4.5921953931549871457e4)
            * r
            + 1.3731693765509461125e4)
            * r
            + 1.9715909503065514427e3)
            * r
            + 1.3314166789178437745e2)
            * r
            + 3.3871328727963666080e0;
        let den = ((((((5.2264952788528545610e3 * r + 2.8729085735721942674e4) * r
            + 3.9307895800092710610e4)
            * r
            + 2.1213794301586595867e4)
            * r
            + 5.3941960214247511077e3)
            * r
            + 6.8718700749205790830e2)
            * r
            + 4.2313330701600911252e1)
            * r
            + 1.0;
        return q * num / den;
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let value = if r <= 5.0 {
        let r = r - 1.6;
        let num = ((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r
            + 2.41780725177450611770e-1)
            * r
            + 1.27045825245236838258e0)
            * r
            + 3.64784832476320460504e0)
            * r
            + 5.76949722146069140550e0)
            * r
            + 4.63033784615654529590e0)
            * r
            + 1.42343711074968357734e0;
        let den = ((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r
            + 1.51986665636164571966e-2)
            * r
            + 1.48103976427480074590e-1)
            * r
            + 6.89767334985100004550e-1)
            * r
            + 1.67638483018380384940e0)
            * r
            + 2.05319162663775882187e0)
            * r
            + 1.0;
        num / den
    } else {
        let r = r - 5.0;
        let num = ((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r
            + 1.24266094738807843860e-3)
            * r
            + 2.65321895265761230930e-2)
            * r
            + 2.96560571828504891230e-1)
            * r
            + 1.78482653991729133580e0)
            * r
            + 5.46378491116411436990e0)
            * r
            + 6.65790464350110377720e0;
        let den = ((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r
            + 1.84631831751005468180e-5)
            * r
            + 7.86869131145613259100e-4)
            * r
            + 1.48753612908506148525e-2)
            * r
            + 1.36929880922735805310e-1)
            * r
            + 5.99832206555887937690e-1)
            * r
            + 1.0;
        num / den
    };
    if q < 0.0 {
        -value
    } else {
        value
    }
}
