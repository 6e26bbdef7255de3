//! Cross-attention maps and the mask algebra used for grouping and blending.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapOrigin {
    Source,
    Target,
}

impl MapOrigin {
    pub fn as_str(self) -> &'static str {
        match self {
            MapOrigin::Source => "source",
            MapOrigin::Target => "target",
        }
    }
}

impl std::str::FromStr for MapOrigin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" | "src" => Ok(Self::Source),
            "target" | "tgt" | "edit" => Ok(Self::Target),
            other => Err(Error::InvalidArgument(format!("unknown map origin `{other}`"))),
        }
    }
}

/// Nonnegative per-token spatial weights, row-major `height × width`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    pub token_index: usize,
    pub origin: MapOrigin,
}

impl AttentionMap {
    pub fn new(
        height: usize,
        width: usize,
        values: Vec<f64>,
        token_index: usize,
        origin: MapOrigin,
    ) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::shape(&[height, width], &[values.len()]));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(
                "attention values must be finite and nonnegative".into(),
            ));
        }
        Ok(Self {
            height,
            width,
            values,
            token_index,
            origin,
        })
    }

    pub fn zeros(height: usize, width: usize, token_index: usize, origin: MapOrigin) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
            token_index,
            origin,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Elementwise sum; metadata of `self` is kept.
    pub fn add(&self, other: &AttentionMap) -> Result<AttentionMap> {
        if self.grid() != other.grid() {
            return Err(Error::shape(
                &[self.height, self.width],
                &[other.height, other.width],
            ));
        }
        let mut out = self.clone();
        for (a, b) in out.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    cells: Vec<bool>,
    pub threshold_used: f64,
}

impl BinaryMask {
    pub fn from_cells(height: usize, width: usize, cells: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || cells.len() != height * width {
            return Err(Error::shape(&[height, width], &[cells.len()]));
        }
        Ok(Self {
            height,
            width,
            cells,
            threshold_used: 0.5,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self::filled(height, width, false)
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self::filled(height, width, true)
    }

    fn filled(height: usize, width: usize, on: bool) -> Self {
        Self {
            height,
            width,
            cells: vec![on; height * width],
            threshold_used: 0.5,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn complement(&self) -> BinaryMask {
        Self {
            cells: self.cells.iter().map(|c| !c).collect(),
            ..self.clone()
        }
    }

    /// The mask as a 0/1 attention map, so it can be re-binarized.
    pub fn to_map(&self, token_index: usize, origin: MapOrigin) -> AttentionMap {
        AttentionMap {
            height: self.height,
            width: self.width,
            values: self.cells.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect(),
            token_index,
            origin,
        }
    }

    fn check_grid(&self, other: &BinaryMask) -> Result<()> {
        if self.grid() != other.grid() {
            return Err(Error::shape(
                &[self.height, self.width],
                &[other.height, other.width],
            ));
        }
        Ok(())
    }
}

/// Row-wise `softmax(Q·Kᵀ/√d)` over tokens, split into one map per token.
///
/// `q` is `pixels × d` with `pixels = height·width` in row-major order,
/// `k` is `tokens × d`.
pub fn attention_from_qk(
    q: &DMatrix<f64>,
    k: &DMatrix<f64>,
    d: usize,
    grid: (usize, usize),
    origin: MapOrigin,
) -> Result<Vec<AttentionMap>> {
    if d == 0 || q.ncols() != d || k.ncols() != d {
        return Err(Error::shape(&[d, d], &[q.ncols(), k.ncols()]));
    }
    let (height, width) = grid;
    if q.nrows() != height * width {
        return Err(Error::shape(&[height * width], &[q.nrows()]));
    }
    let tokens = k.nrows();
    if tokens == 0 {
        return Err(Error::InvalidArgument("no key tokens".into()));
    }
    let logits = q * k.transpose() / (d as f64).sqrt();
    let mut per_token = vec![vec![0.0; height * width]; tokens];
    for p in 0..q.nrows() {
        let row = logits.row(p);
        let m = row.max();
        let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (j, e) in exps.iter().enumerate() {
            per_token[j][p] = e / z;
        }
    }
    per_token
        .into_iter()
        .enumerate()
        .map(|(j, values)| AttentionMap::new(height, width, values, j, origin))
        .collect()
}

/// Normalizes by the map maximum and keeps cells at or above `threshold`.
/// A map without a positive entry binarizes to all zeros.
pub fn binarize(map: &AttentionMap, threshold: f64) -> BinaryMask {
    let max = map.max();
    let cells = if max > 0.0 {
        map.values.iter().map(|v| v / max >= threshold).collect()
    } else {
        vec![false; map.values.len()]
    };
    BinaryMask {
        height: map.height,
        width: map.width,
        cells,
        threshold_used: threshold,
    }
}

/// Area fraction of the mask.
pub fn alpha_matte(mask: &BinaryMask) -> f64 {
    mask.count() as f64 / mask.cells.len() as f64
}

/// Intersection over union; two empty masks count as fully overlapping.
pub fn miou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.check_grid(b)?;
    let (mut inter, mut uni) = (0usize, 0usize);
    for (&x, &y) in a.cells.iter().zip(&b.cells) {
        inter += (x && y) as usize;
        uni += (x || y) as usize;
    }
    Ok(if uni == 0 { 1.0 } else { inter as f64 / uni as f64 })
}

pub fn union(a: &BinaryMask, b: &BinaryMask) -> Result<BinaryMask> {
    a.check_grid(b)?;
    Ok(BinaryMask {
        cells: a.cells.iter().zip(&b.cells).map(|(&x, &y)| x || y).collect(),
        ..a.clone()
    })
}

pub fn union_all<'a>(masks: impl IntoIterator<Item = &'a BinaryMask>) -> Result<Option<BinaryMask>> {
    let mut acc: Option<BinaryMask> = None;
    for m in masks {
        acc = Some(match acc {
            None => m.clone(),
            Some(a) => union(&a, m)?,
        });
    }
    Ok(acc)
}

/// Sum of maps; `None` when `maps` is empty.
pub fn sum_maps<'a>(maps: impl IntoIterator<Item = &'a AttentionMap>) -> Result<Option<AttentionMap>> {
    let mut acc: Option<AttentionMap> = None;
    for m in maps {
        acc = Some(match acc {
            None => m.clone(),
            Some(a) => a.add(m)?,
        });
    }
    Ok(acc)
}

/// One blob per token for [`synth_token_maps`]: center in (row, col) cell
/// coordinates and the radius at which the falloff reaches zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub token_index: usize,
    pub center: (f64, f64),
    pub radius: f64,
}

/// Cone-shaped maps `max(0, 1 - dist/radius)`, one per blob.
pub fn synth_token_maps(
    blobs: &[Blob],
    grid: (usize, usize),
    origin: MapOrigin,
) -> Result<Vec<AttentionMap>> {
    let (height, width) = grid;
    blobs
        .iter()
        .map(|b| {
            let (r0, c0) = b.center;
            if !(r0 >= 0.0 && r0 <= (height - 1) as f64 && c0 >= 0.0 && c0 <= (width - 1) as f64) {
                return Err(Error::InvalidArgument(format!(
                    "blob center ({r0}, {c0}) outside {height}x{width} grid"
                )));
            }
            if !(b.radius > 0.0) {
                return Err(Error::InvalidArgument("blob radius must be positive".into()));
            }
            let values = (0..height * width)
                .map(|i| {
                    let (r, c) = ((i / width) as f64, (i % width) as f64);
                    let dist = ((r - r0).powi(2) + (c - c0).powi(2)).sqrt();
                    (1.0 - dist / b.radius).max(0.0)
                })
                .collect();
            AttentionMap::new(height, width, values, b.token_index, origin)
        })
        .collect()
}

/// Renders the map file format: a `H W token_index origin` header line, then
/// one line per grid row.
pub fn format_map_file(map: &AttentionMap) -> String {
    let mut out = format!(
        "{} {} {} {}\n",
        map.height,
        map.width,
        map.token_index,
        map.origin.as_str()
    );
    for row in map.values.chunks(map.width) {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}

pub fn parse_map_file(text: &str) -> Result<AttentionMap> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Schema("map header".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let [h, w, tok, origin] = fields[..] else {
        return Err(Error::Schema("map header `H W token_index origin`".into()));
    };
    let parse_usize = |s: &str, name: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Schema(format!("map header {name}")))
    };
    let (height, width) = (parse_usize(h, "H")?, parse_usize(w, "W")?);
    let token_index = parse_usize(tok, "token_index")?;
    let origin: MapOrigin = origin.parse()?;
    let values = lines
        .flat_map(|l| l.split_whitespace())
        .map(|v| {
            v.parse::<f64>()
                .map_err(|_| Error::Validation(format!("bad map value `{v}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    AttentionMap::new(height, width, values, token_index, origin)
}

/// Reads every `*.map` file in `dir`, sorted by file name.
pub fn read_map_dir(dir: &Path) -> Result<Vec<AttentionMap>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "map"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| parse_map_file(&std::fs::read_to_string(p)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(h: usize, w: usize, on: &[usize]) -> BinaryMask {
        let mut cells = vec![false; h * w];
        for &i in on {
            cells[i] = true;
        }
        BinaryMask::from_cells(h, w, cells).unwrap()
    }

    #[test]
    fn single_token_attention_is_all_ones() {
        let q = DMatrix::from_fn(4, 3, |i, j| (i * 3 + j) as f64 * 0.1);
        let k = DMatrix::from_row_slice(1, 3, &[0.3, -0.2, 1.0]);
        let maps = attention_from_qk(&q, &k, 3, (2, 2), MapOrigin::Source).unwrap();
        assert_eq!(maps.len(), 1);
        assert!(maps[0].values().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn zero_queries_give_uniform_attention() {
        let q = DMatrix::zeros(4, 2);
        let k = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -1.0, 0.5, 3.0, 3.0]);
        let maps = attention_from_qk(&q, &k, 2, (2, 2), MapOrigin::Target).unwrap();
        for m in &maps {
            assert!(m.values().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        }
    }

    #[test]
    fn attention_matches_scalar_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 5;
        let q = DMatrix::from_fn(4, d, |_, _| rng.gen_range(-1.0..1.0));
        let k = DMatrix::from_fn(3, d, |_, _| rng.gen_range(-1.0..1.0));
        let maps = attention_from_qk(&q, &k, d, (2, 2), MapOrigin::Source).unwrap();
        for p in 0..4 {
            let logits: Vec<f64> = (0..3)
                .map(|j| (0..d).map(|c| q[(p, c)] * k[(j, c)]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for j in 0..3 {
                assert!((maps[j].values()[p] - logits[j].exp() / z).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn attention_dimension_mismatch() {
        let q = DMatrix::zeros(4, 2);
        let k = DMatrix::zeros(3, 3);
        assert!(matches!(
            attention_from_qk(&q, &k, 2, (2, 2), MapOrigin::Source),
            Err(Error::Shape { .. })
        ));
        let k = DMatrix::zeros(3, 2);
        assert!(attention_from_qk(&q, &k, 2, (3, 3), MapOrigin::Source).is_err());
    }

    #[test]
    fn binarize_examples() {
        let constant = AttentionMap::new(2, 2, vec![0.3; 4], 0, MapOrigin::Source).unwrap();
        assert_eq!(binarize(&constant, 1.0).count(), 4);
        assert_eq!(binarize(&constant, 0.2).count(), 4);

        let zero = AttentionMap::zeros(2, 3, 0, MapOrigin::Source);
        assert!(binarize(&zero, 0.5).is_empty());

        let m = AttentionMap::new(1, 3, vec![0.1, 0.5, 1.0], 0, MapOrigin::Source).unwrap();
        assert_eq!(binarize(&m, 0.5).cells(), &[false, true, true]);
    }

    #[test]
    fn matte_examples() {
        assert_eq!(alpha_matte(&BinaryMask::full(2, 3)), 1.0);
        assert_eq!(alpha_matte(&BinaryMask::empty(2, 3)), 0.0);
        assert_eq!(alpha_matte(&mask(2, 3, &[0, 2, 5])), 0.5);
    }

    #[test]
    fn miou_examples() {
        let a = mask(3, 3, &[0, 1]);
        assert_eq!(miou(&a, &a).unwrap(), 1.0);
        assert_eq!(miou(&a, &mask(3, 3, &[4, 5])).unwrap(), 0.0);
        assert_eq!(miou(&a, &mask(3, 3, &[1, 4, 5])).unwrap(), 0.25);
        assert_eq!(miou(&BinaryMask::empty(2, 2), &BinaryMask::empty(2, 2)).unwrap(), 1.0);
        assert!(matches!(miou(&a, &BinaryMask::empty(2, 2)), Err(Error::Shape { .. })));
    }

    #[test]
    fn synthetic_blobs() {
        let maps = synth_token_maps(
            &[Blob { token_index: 0, center: (4.0, 4.0), radius: 3.0 }],
            (9, 9),
            MapOrigin::Source,
        )
        .unwrap();
        let peak = maps[0]
            .values()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(peak, 4 * 9 + 4);

        let maps = synth_token_maps(
            &[
                Blob { token_index: 0, center: (1.0, 1.0), radius: 2.0 },
                Blob { token_index: 1, center: (8.0, 8.0), radius: 2.0 },
            ],
            (10, 10),
            MapOrigin::Target,
        )
        .unwrap();
        assert_eq!(miou(&binarize(&maps[0], 0.5), &binarize(&maps[1], 0.5)).unwrap(), 0.0);

        assert!(synth_token_maps(
            &[Blob { token_index: 0, center: (10.0, 0.0), radius: 1.0 }],
            (10, 10),
            MapOrigin::Source
        )
        .is_err());
    }

    #[test]
    fn overlapping_blobs_match_cell_counting() {
        let grid = (12, 12);
        let blobs = [
            Blob { token_index: 0, center: (5.0, 4.0), radius: 6.0 },
            Blob { token_index: 1, center: (5.0, 7.0), radius: 6.0 },
        ];
        let maps = synth_token_maps(&blobs, grid, MapOrigin::Source).unwrap();
        // threshold 0.5 keeps cells within radius/2 of each center
        let inside = |i: usize, b: &Blob| {
            let (r, c) = ((i / 12) as f64, (i % 12) as f64);
            ((r - b.center.0).powi(2) + (c - b.center.1).powi(2)).sqrt() <= b.radius / 2.0
        };
        let (mut inter, mut uni) = (0, 0);
        for i in 0..144 {
            let (a, b) = (inside(i, &blobs[0]), inside(i, &blobs[1]));
            inter += (a && b) as usize;
            uni += (a || b) as usize;
        }
        let got = miou(&binarize(&maps[0], 0.5), &binarize(&maps[1], 0.5)).unwrap();
        assert!(inter > 0 && inter < uni);
        assert_eq!(got, inter as f64 / uni as f64);
    }

    #[test]
    fn map_file_round_trip() {
        let m = AttentionMap::new(2, 3, vec![0.0, 0.25, 1.5, 3.0, 0.125, 7.0], 4, MapOrigin::Target)
            .unwrap();
        let text = format_map_file(&m);
        assert!(text.starts_with("2 3 4 target\n"));
        assert_eq!(parse_map_file(&text).unwrap(), m);
        assert!(matches!(parse_map_file("2 3 x"), Err(Error::Schema(_))));
        assert!(parse_map_file("1 2 0 source\n0.1").is_err());
    }

    #[test]
    fn reads_map_directory() {
        let dir = tempfile::tempdir().unwrap();
        for (i, name) in ["b.map", "a.map"].iter().enumerate() {
            let m = AttentionMap::new(1, 2, vec![i as f64, 1.0], i, MapOrigin::Source).unwrap();
            std::fs::write(dir.path().join(name), format_map_file(&m)).unwrap();
        }
        std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let maps = read_map_dir(dir.path()).unwrap();
        assert_eq!(maps.len(), 2);
        assert_eq!(maps[0].token_index, 1);
    }

    fn arb_mask() -> impl Strategy<Value = BinaryMask> {
        prop::collection::vec(any::<bool>(), 16)
            .prop_map(|cells| BinaryMask::from_cells(4, 4, cells).unwrap())
    }

    proptest! {
        #[test]
        fn miou_is_symmetric(a in arb_mask(), b in arb_mask()) {
            prop_assert_eq!(miou(&a, &b).unwrap(), miou(&b, &a).unwrap());
        }

        #[test]
        fn binarize_is_idempotent(values in prop::collection::vec(0.0f64..10.0, 16), th in 0.01f64..1.0) {
            let m = AttentionMap::new(4, 4, values, 0, MapOrigin::Source).unwrap();
            let once = binarize(&m, th);
            let twice = binarize(&once.to_map(0, MapOrigin::Source), th);
            prop_assert_eq!(once.cells(), twice.cells());
        }

        #[test]
        fn union_matte_is_subadditive(a in arb_mask(), b in arb_mask()) {
            let u = union(&a, &b).unwrap();
            prop_assert!(alpha_matte(&u) <= alpha_matte(&a) + alpha_matte(&b) + 1e-15);
        }

        #[test]
        fn attention_rows_sum_to_one(seed in any::<u64>(), tokens in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = DMatrix::from_fn(6, 4, |_, _| rng.gen_range(-3.0..3.0));
            let k = DMatrix::from_fn(tokens, 4, |_, _| rng.gen_range(-3.0..3.0));
            let maps = attention_from_qk(&q, &k, 4, (2, 3), MapOrigin::Source).unwrap();
            for p in 0..6 {
                let s: f64 = maps.iter().map(|m| m.values()[p]).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }
}
