//! Gradient-weighted class activation maps and the grid utilities around them.
//!
//! A map is `ReLU(Σ_k α_k A_k)` over the last convolutional feature maps `A_k`,
//! where `α_k` is the spatial mean of `∂s/∂A_k` for a scalar score `s`, followed
//! by per-sample min-max normalisation. The graph-level [`gradcam_batch`] keeps
//! the whole pipeline differentiable so that penalties on the map can be
//! trained through, including through `α_k`.

use std::fmt;
use std::fs;
use std::path::Path;

use super_autograd::{Graph, Tensor, Var};

use crate::error::{Error, Result};
use crate::model::FeatureStack;

/// Ranges at or below this are treated as constant maps.
pub const DEGENERATE_RANGE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MapSource {
    GuidanceRelevant,
    GuidanceIrrelevant,
    Head1,
    Head2,
}

impl fmt::Display for MapSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MapSource::GuidanceRelevant => "guidance_relevant",
            MapSource::GuidanceIrrelevant => "guidance_irrelevant",
            MapSource::Head1 => "head1",
            MapSource::Head2 => "head2",
        })
    }
}

/// Normalised `h×w` grid with entries in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    pub source: MapSource,
}

impl AttributionMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>, source: MapSource) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::Shape(format!("{} values for a {height}x{width} map", values.len())));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("map value {v} outside [0, 1]")));
        }
        Ok(AttributionMap { height, width, values, source })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width + j]
    }

    fn same_shape(&self, other: &AttributionMap) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Shape(format!(
                "maps are {}x{} and {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    pub fn to_sidecar(&self) -> String {
        let mut out = format!("{} {}\n", self.height, self.width);
        for row in self.values.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    /// Parse the `h w` header plus row-major decimal values.
    pub fn from_sidecar(text: &str, source: MapSource) -> Result<Self> {
        let mut tokens = text.split_whitespace();
        let mut dim = |what: &str| -> Result<usize> {
            tokens
                .next()
                .ok_or_else(|| Error::Schema(format!("map sidecar missing {what}")))?
                .parse()
                .map_err(|_| Error::Schema(format!("map sidecar has a bad {what}")))
        };
        let (h, w) = (dim("height")?, dim("width")?);
        let values = tokens
            .map(|t| t.parse::<f64>().map_err(|_| Error::Schema(format!("bad map value `{t}`"))))
            .collect::<Result<Vec<_>>>()?;
        AttributionMap::new(h, w, values, source)
    }

    pub fn write_sidecar(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_sidecar()).map_err(Error::io(path))
    }

    pub fn read_sidecar(path: &Path, source: MapSource) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        AttributionMap::from_sidecar(&text, source)
    }

    /// Grayscale PNG, `round(value·255)`.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let raw = self.values.iter().map(|v| (v * 255.0).round() as u8).collect();
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, raw).expect("map dimensions");
        img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }
}

/// `(g − min)/(max − min)`; constant grids map to all zeros.
pub fn minmax_normalize(grid: &[f64]) -> Result<Vec<f64>> {
    if grid.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("grid to normalise".into()));
    }
    let (lo, hi) = grid.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::NonFinite("grid to normalise".into()));
    }
    let range = hi - lo;
    if range <= DEGENERATE_RANGE {
        return Ok(vec![0.0; grid.len()]);
    }
    Ok(grid.iter().map(|v| ((v - lo) / range).clamp(0.0, 1.0)).collect())
}

/// Pointwise `1 − value` (the all-ones matrix minus the map).
pub fn complement(map: &AttributionMap) -> AttributionMap {
    let source = match map.source {
        MapSource::GuidanceRelevant => MapSource::GuidanceIrrelevant,
        MapSource::GuidanceIrrelevant => MapSource::GuidanceRelevant,
        other => other,
    };
    AttributionMap {
        height: map.height,
        width: map.width,
        values: map.values.iter().map(|v| 1.0 - v).collect(),
        source,
    }
}

/// Pointwise mean of already-normalised maps, not re-normalised.
pub fn average_maps(maps: &[AttributionMap]) -> Result<AttributionMap> {
    let first = maps.first().ok_or_else(|| Error::Invalid("cannot average an empty list of maps".into()))?;
    let mut acc = vec![0.0; first.values.len()];
    for m in maps {
        first.same_shape(m)?;
        for (a, v) in acc.iter_mut().zip(&m.values) {
            *a += v;
        }
    }
    let n = maps.len() as f64;
    let values = acc.into_iter().map(|a| (a / n).clamp(0.0, 1.0)).collect();
    AttributionMap::new(first.height, first.width, values, first.source)
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resample_grid(values: &[f64], h: usize, w: usize, th: usize, tw: usize) -> Vec<f64> {
    if (h, w) == (th, tw) {
        return values.to_vec();
    }
    let coord = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let src = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, src - lo as f64)
    };
    let mut out = Vec::with_capacity(th * tw);
    for i in 0..th {
        let (i0, i1, fi) = coord(i, h, th);
        for j in 0..tw {
            let (j0, j1, fj) = coord(j, w, tw);
            let top = values[i0 * w + j0] * (1.0 - fj) + values[i0 * w + j1] * fj;
            let bottom = values[i1 * w + j0] * (1.0 - fj) + values[i1 * w + j1] * fj;
            out.push(top * (1.0 - fi) + bottom * fi);
        }
    }
    out
}

pub fn resample(map: &AttributionMap, target_h: usize, target_w: usize) -> Result<AttributionMap> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::Shape(format!("cannot resample to {target_h}x{target_w}")));
    }
    let values = resample_grid(&map.values, map.height, map.width, target_h, target_w)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    AttributionMap::new(target_h, target_w, values, map.source)
}

/// Differentiable row-wise min-max normalisation of an `[N, P]` variable.
///
/// Rows whose range is at most [`DEGENERATE_RANGE`] become zeros with zero gradient.
pub fn normalize_rows<'g>(raw: Var<'g>) -> Var<'g> {
    let g = raw.graph();
    let lo = raw.min_axis_keep(1);
    let hi = raw.max_axis_keep(1);
    let range = hi - lo;
    let keep: Vec<f64> = range.value().data().iter().map(|&r| if r > DEGENERATE_RANGE { 1.0 } else { 0.0 }).collect();
    let n = keep.len();
    let keep = Tensor::new(vec![n, 1], keep);
    let pad = g.constant(keep.map(|k| 1.0 - k));
    ((raw - lo) / (range + pad)).mul_const(keep)
}

/// Importance weights and normalised maps for a batch.
pub struct GradCam<'g> {
    /// `[N, K]` spatially averaged gradients.
    pub alpha: Var<'g>,
    /// `[N, h·w]` normalised maps.
    pub map: Var<'g>,
}

/// GradCAM over `[N, K, h, w]` feature maps for `score`, the sum of per-sample scores.
///
/// With `differentiable`, the gradient `∂score/∂A` is recorded so the map can
/// be differentiated again; `detach_alpha` then cuts only the path through `α`.
pub fn gradcam_batch<'g>(maps: Var<'g>, score: Var<'g>, differentiable: bool, detach_alpha: bool) -> Result<GradCam<'g>> {
    let g = maps.graph();
    let shape = maps.shape();
    let (n, k, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let grad = g.grad(score, &[maps], differentiable)[0];
    if !grad.value().is_finite() {
        return Err(Error::NonFinite("attribution gradients".into()));
    }
    let mut alpha = grad.reshape(&[n, k, hw]).sum_axis_keep(2) * (1.0 / hw as f64); // [N,K,1]
    if detach_alpha {
        alpha = alpha.detach();
    }
    let raw = (maps.reshape(&[n, k, hw]) * alpha).sum_axis_keep(1).reshape(&[n, hw]).relu();
    Ok(GradCam { alpha: alpha.reshape(&[n, k]), map: normalize_rows(raw) })
}

/// Single-sample GradCAM for a score defined on the feature maps.
///
/// `score` receives the `[1, K, h, w]` maps as a variable and returns a scalar.
/// Returns the normalised map together with `α`.
pub fn gradcam(
    stack: &FeatureStack,
    source: MapSource,
    score: impl for<'g> Fn(Var<'g>) -> Var<'g>,
) -> Result<(AttributionMap, Vec<f64>)> {
    let g = Graph::new();
    let (k, h, w) = (stack.channels(), stack.height(), stack.width());
    let maps = g.param(stack.maps.reshape(&[1, k, h, w]));
    let s = score(maps);
    if !s.value().is_finite() {
        return Err(Error::NonFinite("attribution score".into()));
    }
    let cam = gradcam_batch(maps, s, false, false)?;
    let alpha = cam.alpha.value().data().to_vec();
    let values = cam.map.value().data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Ok((AttributionMap::new(h, w, values, source)?, alpha))
}
