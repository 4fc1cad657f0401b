//! Retrieval evaluation: embeddings, Euclidean distance matrix, CMC-k,
//! ranked lists, CSV exports, and the alignment visualisation export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{stack, write_ppm, LabeledImage};
use crate::error::{invalid, Error, Result};
use crate::model::SANet;
use crate::stn::{warp_images_filled, AffineTheta};

/// Embeddings with aligned identity labels and image names.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    /// `[rows, dim]`.
    pub values: Tensor<f32>,
    pub labels: Vec<usize>,
    pub names: Vec<String>,
}

impl EmbeddingMatrix {
    pub fn new(values: Tensor<f32>, labels: Vec<usize>, names: Vec<String>) -> Result<Self> {
        let [rows, _] = values.dims2("embedding_matrix")?;
        if labels.len() != rows || names.len() != rows {
            return Err(invalid!("embedding matrix: {rows} rows but {} labels, {} names", labels.len(), names.len()));
        }
        if !values.all_finite() {
            return Err(Error::NonFinite("embedding matrix".into()));
        }
        Ok(EmbeddingMatrix { values, labels, names })
    }

    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }

    fn row(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.values.data()[i * d..(i + 1) * d]
    }
}

/// Embeds `images` with no augmentation, `batch_size` images at a time.
pub fn embed_set(model: &SANet, images: &[LabeledImage], batch_size: usize) -> Result<EmbeddingMatrix> {
    let refs: Vec<&LabeledImage> = images.iter().collect();
    let values = model.embed(&stack(&refs)?, batch_size)?;
    let dim = values.shape()[1];
    if dim != model.config.embedding_dim() {
        return Err(invalid!(
            "embedding width {dim} disagrees with config dimension {}",
            model.config.embedding_dim()
        ));
    }
    EmbeddingMatrix::new(
        values,
        images.iter().map(|im| im.identity).collect(),
        images.iter().map(|im| im.name.clone()).collect(),
    )
}

/// Row-major `[queries, gallery]` distances.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid!("distance matrix: {} values for {rows}x{cols}", data.len()));
        }
        Ok(DistanceMatrix { rows, cols, data })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// `D[i,j] = ‖q_i − g_j‖₂`, accumulated in f64.
pub fn distance_matrix(q: &EmbeddingMatrix, g: &EmbeddingMatrix) -> Result<DistanceMatrix> {
    if q.dim() != g.dim() {
        return Err(Error::ShapeMismatch {
            op: "distance_matrix",
            lhs: q.values.shape().to_vec(),
            rhs: g.values.shape().to_vec(),
        });
    }
    let mut data = Vec::with_capacity(q.rows() * g.rows());
    for i in 0..q.rows() {
        let a = q.row(i);
        for j in 0..g.rows() {
            let sq: f64 = a
                .iter()
                .zip(g.row(j))
                .map(|(&x, &y)| {
                    let d = x as f64 - y as f64;
                    d * d
                })
                .sum();
            data.push(sq.sqrt());
        }
    }
    DistanceMatrix::new(q.rows(), g.rows(), data)
}

/// Gallery indices sorted by ascending distance; ties go to the lower index.
pub fn ranking(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    idx
}

/// `Acc_k` for `k = 1..=k_max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CMCCurve {
    pub acc: Vec<f64>,
}

impl CMCCurve {
    /// `Acc_k`, 1-based.
    pub fn at(&self, k: usize) -> f64 {
        self.acc[k - 1]
    }

    pub fn k_max(&self) -> usize {
        self.acc.len()
    }
}

fn check_labels(d: &DistanceMatrix, q_labels: &[usize], g_labels: &[usize]) -> Result<()> {
    if q_labels.len() != d.rows || g_labels.len() != d.cols {
        return Err(invalid!(
            "cmc: {}x{} distances with {} query and {} gallery labels",
            d.rows,
            d.cols,
            q_labels.len(),
            g_labels.len()
        ));
    }
    Ok(())
}

/// 0-based rank of each query's first true match.
pub fn first_match_ranks(d: &DistanceMatrix, q_labels: &[usize], g_labels: &[usize]) -> Result<Vec<usize>> {
    check_labels(d, q_labels, g_labels)?;
    (0..d.rows)
        .map(|i| {
            ranking(d.row(i))
                .iter()
                .position(|&j| g_labels[j] == q_labels[i])
                .ok_or_else(|| invalid!("cmc: query {i} (identity {}) has no match in the gallery", q_labels[i]))
        })
        .collect()
}

/// Fraction of queries whose true match is within the top `k`, for every
/// `k` up to `k_max`.
pub fn cmc(d: &DistanceMatrix, q_labels: &[usize], g_labels: &[usize], k_max: usize) -> Result<CMCCurve> {
    if k_max == 0 {
        return Err(invalid!("cmc: k_max must be positive"));
    }
    if d.rows == 0 {
        return Err(invalid!("cmc: no queries"));
    }
    let ranks = first_match_ranks(d, q_labels, g_labels)?;
    let mut hits = vec![0usize; k_max];
    for r in ranks {
        for h in hits.iter_mut().skip(r) {
            *h += 1;
        }
    }
    let n = d.rows as f64;
    Ok(CMCCurve {
        acc: hits.into_iter().map(|h| h as f64 / n).collect(),
    })
}

/// Top retrievals for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct RankList {
    pub query: String,
    pub gallery: Vec<String>,
    pub correct: Vec<bool>,
}

pub fn rank_lists(d: &DistanceMatrix, q: &EmbeddingMatrix, g: &EmbeddingMatrix, top: usize) -> Result<Vec<RankList>> {
    check_labels(d, &q.labels, &g.labels)?;
    Ok((0..d.rows)
        .map(|i| {
            let order: Vec<usize> = ranking(d.row(i)).into_iter().take(top).collect();
            RankList {
                query: q.names[i].clone(),
                gallery: order.iter().map(|&j| g.names[j].clone()).collect(),
                correct: order.iter().map(|&j| g.labels[j] == q.labels[i]).collect(),
            }
        })
        .collect())
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `cmc.csv` (`k,acc`) and `ranks.csv` (query, gallery ids, correctness flags).
pub fn export_results(curve: &CMCCurve, lists: &[RankList], out_dir: &Path) -> Result<()> {
    ensure_dir(out_dir)?;
    let mut cmc_csv = String::from("k,acc\n");
    for (k, acc) in curve.acc.iter().enumerate() {
        writeln!(cmc_csv, "{},{}", k + 1, acc).expect("string write");
    }
    write(&out_dir.join("cmc.csv"), &cmc_csv)?;

    let top = lists.iter().map(|l| l.gallery.len()).max().unwrap_or(0);
    let mut ranks = String::from("query");
    for r in 1..=top {
        write!(ranks, ",gallery_{r}").expect("string write");
    }
    for r in 1..=top {
        write!(ranks, ",correct_{r}").expect("string write");
    }
    ranks.push('\n');
    for l in lists {
        ranks.push_str(&l.query);
        for r in 0..top {
            write!(ranks, ",{}", l.gallery.get(r).map_or("", String::as_str)).expect("string write");
        }
        for r in 0..top {
            write!(ranks, ",{}", l.correct.get(r).map_or("", |&c| if c { "1" } else { "0" })).expect("string write");
        }
        ranks.push('\n');
    }
    write(&out_dir.join("ranks.csv"), &ranks)
}

/// Parses a `cmc.csv` written by [`export_results`].
pub fn read_cmc_csv(path: &Path) -> Result<CMCCurve> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("k,acc") {
        return Err(Error::format(path, "missing `k,acc` header"));
    }
    let mut acc = Vec::new();
    for (i, line) in lines.enumerate() {
        let (k, v) = line
            .split_once(',')
            .ok_or_else(|| Error::format(path, format!("line {}: expected two columns", i + 2)))?;
        if k.parse::<usize>().ok() != Some(i + 1) {
            return Err(Error::format(path, format!("line {}: expected k = {}", i + 2, i + 1)));
        }
        acc.push(
            v.parse::<f64>()
                .map_err(|e| Error::format(path, format!("line {}: {e}", i + 2)))?,
        );
    }
    Ok(CMCCurve { acc })
}

/// Foreground threshold of the orientation oracle.
pub const FOREGROUND_THRESHOLD: f32 = 0.1;

/// Per-channel median of the one-pixel image border.
pub fn border_median(img: &Tensor<f32>) -> Vec<f32> {
    let &[c, h, w] = img.shape() else {
        panic!("border_median expects [C,H,W]");
    };
    (0..c)
        .map(|ch| {
            let plane = &img.data()[ch * h * w..(ch + 1) * h * w];
            let mut v: Vec<f32> = (0..h)
                .flat_map(|y| (0..w).map(move |x| (y, x)))
                .filter(|&(y, x)| y == 0 || x == 0 || y == h - 1 || x == w - 1)
                .map(|(y, x)| plane[y * w + x])
                .collect();
            v.sort_by(f32::total_cmp);
            v[v.len() / 2]
        })
        .collect()
}

/// Principal-axis angle of the foreground (pixels deviating more than
/// [`FOREGROUND_THRESHOLD`] from the border median in any channel), in
/// image axes (x right, y down). The axis is undirected, so the result lies
/// in (-π/2, π/2]. `None` when fewer than three pixels are foreground.
pub fn principal_axis_angle(img: &Tensor<f32>) -> Option<f64> {
    let &[c, h, w] = img.shape() else {
        return None;
    };
    let med = border_median(img);
    let d = img.data();
    let mut pts = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let fg = (0..c).any(|ch| (d[ch * h * w + y * w + x] - med[ch]).abs() > FOREGROUND_THRESHOLD);
            if fg {
                pts.push((x as f64, y as f64));
            }
        }
    }
    if pts.len() < 3 {
        return None;
    }
    let n = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |(a, b), &(x, y)| (a + x / n, b + y / n));
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for &(x, y) in &pts {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    Some(0.5 * (2.0 * sxy).atan2(sxx - syy))
}

/// Circular standard deviation of undirected axes: angles are doubled,
/// `sqrt(-2 ln R)` is taken of the doubled mean resultant length, and the
/// result is halved back to axis units.
pub fn axial_circular_std(angles: &[f64]) -> f64 {
    if angles.is_empty() {
        return f64::NAN;
    }
    let n = angles.len() as f64;
    let (s, c) = angles
        .iter()
        .fold((0.0, 0.0), |(s, c), &a| (s + (2.0 * a).sin(), c + (2.0 * a).cos()));
    let r = ((s / n).powi(2) + (c / n).powi(2)).sqrt();
    if r <= 0.0 {
        return f64::INFINITY;
    }
    (-2.0 * r.min(1.0).ln()).sqrt() / 2.0
}

/// Smallest angle between two undirected axes, in [0, π/2].
pub fn axial_difference(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(std::f64::consts::PI);
    d.min(std::f64::consts::PI - d)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub images: usize,
    /// Images whose foreground was found both before and after alignment.
    pub measured: usize,
    pub std_before: f64,
    pub std_after: f64,
    /// `std_after / std_before`.
    pub ratio: f64,
    /// Mean axial error of the oracle against stored orientations, before
    /// alignment, in radians.
    pub oracle_error_before: f64,
}

/// Images after applying each image's regressed parameters, padded with
/// the image's border median.
pub fn align_images(model: &SANet, images: &[LabeledImage]) -> Result<(Tensor<f32>, Tensor<f32>, AffineTheta)> {
    let refs: Vec<&LabeledImage> = images.iter().collect();
    let before = stack(&refs)?;
    let theta = model.regress_theta(&before)?;
    let fill: Vec<Vec<f32>> = images.iter().map(|im| border_median(&im.pixels)).collect();
    let after = warp_images_filled(&before, &theta, &fill)?;
    Ok((before, after, theta))
}

fn image_at(batch: &Tensor<f32>, i: usize) -> Tensor<f32> {
    let per: usize = batch.shape()[1..].iter().product();
    Tensor::new(batch.shape()[1..].to_vec(), batch.data()[i * per..(i + 1) * per].to_vec()).expect("slice of batch")
}

/// Orientation dispersion before and after alignment over `images`.
pub fn alignment_report(model: &SANet, images: &[LabeledImage]) -> Result<AlignmentReport> {
    let (before, after, _) = align_images(model, images)?;
    let mut angles_before = Vec::new();
    let mut angles_after = Vec::new();
    let mut err = 0.0;
    for (i, im) in images.iter().enumerate() {
        let (Some(b), Some(a)) = (
            principal_axis_angle(&image_at(&before, i)),
            principal_axis_angle(&image_at(&after, i)),
        ) else {
            continue;
        };
        err += axial_difference(b, im.orientation);
        angles_before.push(b);
        angles_after.push(a);
    }
    let measured = angles_before.len();
    if measured == 0 {
        return Err(invalid!("alignment report: no foreground found in any image"));
    }
    let std_before = axial_circular_std(&angles_before);
    let std_after = axial_circular_std(&angles_after);
    Ok(AlignmentReport {
        images: images.len(),
        measured,
        std_before,
        std_after,
        ratio: std_after / std_before,
        oracle_error_before: err / measured as f64,
    })
}

/// Writes `<stem>_before.ppm`, `<stem>_after.ppm` and `theta.csv` for each image.
pub fn export_alignment_pairs(model: &SANet, images: &[LabeledImage], out_dir: &Path) -> Result<AffineTheta> {
    ensure_dir(out_dir)?;
    let (before, after, theta) = align_images(model, images)?;
    let mut csv = String::from("image,theta11,theta12,theta13,theta21,theta22,theta23\n");
    for (i, im) in images.iter().enumerate() {
        write_ppm(&out_dir.join(format!("{}_before.ppm", im.name)), &image_at(&before, i))?;
        write_ppm(&out_dir.join(format!("{}_after.ppm", im.name)), &image_at(&after, i))?;
        let t = theta.0[i];
        writeln!(csv, "{},{},{},{},{},{},{}", im.name, t[0], t[1], t[2], t[3], t[4], t[5]).expect("string write");
    }
    write(&out_dir.join("theta.csv"), &csv)?;
    Ok(theta)
}
